"""Shared neural building blocks: sinusoidal positions, convolutional
subsampling and a thin Transformer encoder stack."""

from __future__ import annotations

import math

import torch
import torch.nn as nn


class LengthError(ValueError):
    """Input sequence violates a length bound of the module."""


def sinusoidal_table(max_len: int, d_model: int) -> torch.Tensor:
    """Standard fixed sin/cos position table, shape (max_len, d_model)."""
    position = torch.arange(max_len, dtype=torch.float32).unsqueeze(1)
    div = torch.exp(torch.arange(0, d_model, 2, dtype=torch.float32) * (-math.log(10000.0) / d_model))
    table = torch.zeros(max_len, d_model)
    table[:, 0::2] = torch.sin(position * div)
    table[:, 1::2] = torch.cos(position * div[: d_model // 2])
    return table


class SinusoidalPositionalEncoding(nn.Module):
    def __init__(self, d_model: int, max_len: int):
        super().__init__()
        self.max_len = max_len
        self.register_buffer("table", sinusoidal_table(max_len, d_model), persistent=False)

    def forward(self, x: torch.Tensor, offset: int = 0) -> torch.Tensor:
        length = x.shape[-2]
        if offset + length > self.max_len:
            raise LengthError(
                f"sequence of length {offset + length} exceeds positional table ({self.max_len})"
            )
        return x + self.table[offset : offset + length]


class ConvSubsampler(nn.Module):
    """Two non-overlapping 1-d convolutions (kernel = stride) with strides 3
    and 2, downsampling time by exactly 6: output length = floor(floor(T/3)/2).
    """

    MIN_FRAMES = 6

    def __init__(self, in_dim: int, hidden: int, strides: tuple[int, int] = (3, 2)):
        super().__init__()
        if len(strides) != 2 or strides[0] * strides[1] != 6:
            raise ValueError(f"conv strides must multiply to 6, got {strides}")
        self.strides = tuple(strides)
        self.conv1 = nn.Conv1d(in_dim, hidden, kernel_size=strides[0], stride=strides[0])
        self.conv2 = nn.Conv1d(hidden, hidden, kernel_size=strides[1], stride=strides[1])
        self.act = nn.GELU()

    def output_length(self, n_frames: int) -> int:
        return n_frames // self.strides[0] // self.strides[1]

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """frames: (B, T, in_dim) -> (B, T', hidden)."""
        n_frames = frames.shape[-2]
        if n_frames < self.MIN_FRAMES:
            raise LengthError(
                f"need at least {self.MIN_FRAMES} input frames for one output frame, got {n_frames}"
            )
        x = frames.transpose(-1, -2)  # (B, in_dim, T)
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        return x.transpose(-1, -2)


class TransformerStack(nn.Module):
    """Positional encoding plus a batch-first nn.TransformerEncoder."""

    def __init__(self, d_model: int, n_layers: int, n_heads: int, ffn_dim: int,
                 max_pos: int, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError(f"hidden size {d_model} not divisible by {n_heads} heads")
        self.posenc = SinusoidalPositionalEncoding(d_model, max_pos)
        layer = nn.TransformerEncoderLayer(
            d_model=d_model, nhead=n_heads, dim_feedforward=ffn_dim,
            dropout=dropout, batch_first=True, norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=n_layers, enable_nested_tensor=False)

    def forward(self, x: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """x: (B, L, d). ``lengths`` marks the valid prefix of each row; padded
        positions are excluded from attention and zeroed in the output."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        pad_mask = None
        if lengths is not None:
            idx = torch.arange(x.shape[1], device=x.device)
            pad_mask = idx.unsqueeze(0) >= lengths.unsqueeze(1)  # True = padded
        out = self.encoder(self.posenc(x), src_key_padding_mask=pad_mask)
        if pad_mask is not None:
            out = out.masked_fill(pad_mask.unsqueeze(-1), 0.0)
        return out.squeeze(0) if squeeze else out
