"""Low-rank adapters: wrap selected linear projections of a frozen language
model so that only the small factor matrices train."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn


@dataclass
class AdapterConfig:
    rank: int = 32
    alpha: float = 32.0
    # attention projections of every LM block that receive adapters
    target_projections: tuple[str, ...] = ("q_proj", "k_proj", "v_proj", "o_proj")

    def __post_init__(self):
        if self.rank <= 0:
            raise ValueError(f"adapter rank must be positive, got {self.rank}")


class LoRALinear(nn.Module):
    """base(x) + (alpha/rank) * B A x with B zero-initialized, so the wrapped
    layer is function-identical to the base layer until the factors train."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float):
        super().__init__()
        self.base = base
        self.rank = rank
        self.scaling = alpha / rank
        self.lora_A = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_B = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.normal_(self.lora_A, std=0.02)
        base.weight.requires_grad_(False)
        if base.bias is not None:
            base.bias.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scaling * ((x @ self.lora_A.t()) @ self.lora_B.t())

    def adapter_param_count(self) -> int:
        return self.rank * (self.base.in_features + self.base.out_features)


def adapter_inject(lm: nn.Module, cfg: AdapterConfig) -> nn.Module:
    """Wrap the configured projections of every block of ``lm`` in-place.

    The LM must expose ``blocks``, each block an object whose attention module
    (``attn``) carries the named projection layers. Unknown projection names
    raise a configuration error."""
    for i, block in enumerate(lm.blocks):
        for name in cfg.target_projections:
            holder = block.attn if hasattr(block.attn, name) else block
            layer = getattr(holder, name, None)
            if layer is None:
                raise ValueError(
                    f"unknown adapter target {name!r} on block {i}; "
                    f"available: {sorted(n for n, m in block.attn.named_children() if isinstance(m, nn.Linear))}"
                )
            if isinstance(layer, LoRALinear):
                continue  # idempotent
            if not isinstance(layer, nn.Linear):
                raise ValueError(f"adapter target {name!r} is not a linear layer")
            setattr(holder, name, LoRALinear(layer, cfg.rank, cfg.alpha))
    return lm


def adapter_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for n, p in model.named_parameters() if "lora_" in n]


def adapter_param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in adapter_parameters(model))
