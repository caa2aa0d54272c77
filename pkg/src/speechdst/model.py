"""The composed architecture: speech encoder -> connector -> language model,
with an optional text encoder that feeds the shared connector Transformer so
written dialogues can train the same pipeline.

Input layout fed to the LM for every example::

    [prefix embeddings] [LM embeddings of dialogue history] [<gen>] [target ...]

where the prefix comes either from speech (encoder + conv subsampling +
connector Transformer) or from text (text encoder + the same connector
Transformer, skipping the convolutions). The text encoder is a training-time
device only; deleting it leaves speech-path outputs untouched.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import ConvSubsampler, LengthError, SinusoidalPositionalEncoding, TransformerStack
from .lora import AdapterConfig, adapter_inject
from .tokenizer import CharTokenizer

IGNORE_INDEX = -100


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-component seed so optional components never shift the
    initialization of the others."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode()).digest()
    return int.from_bytes(digest[:8], "little") % (2**63)


# ---------------------------------------------------------------------------
# speech encoders


@dataclass
class SpeechEncoderConfig:
    kind: str = "conv"  # "conv" | "identity"
    in_dim: int = 24
    n_layers: int = 2
    frame_rate: float = 50.0  # nominal input frames/second

    def __post_init__(self):
        if self.kind not in ("conv", "identity"):
            raise ValueError(f"unknown speech encoder kind {self.kind!r}")


class ToyConvSpeechEncoder(nn.Module):
    """Small stride-1 convolutional encoder over feature frames; stands behind
    the pretrained-encoder interface at desk scale. Length preserving."""

    def __init__(self, cfg: SpeechEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.out_dim = cfg.in_dim
        self.frame_rate = cfg.frame_rate
        self.convs = nn.ModuleList(
            nn.Conv1d(cfg.in_dim, cfg.in_dim, kernel_size=3, padding=1) for _ in range(cfg.n_layers)
        )
        self.act = nn.GELU()

    def forward(self, frames: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """frames: (B, T, d) zero-padded; re-zeroing after each layer keeps the
        batched result identical to per-row processing."""
        mask = None
        if lengths is not None:
            idx = torch.arange(frames.shape[1], device=frames.device)
            mask = (idx.unsqueeze(0) < lengths.unsqueeze(1)).unsqueeze(-1).to(frames.dtype)
            frames = frames * mask
        x = frames.transpose(1, 2)
        for conv in self.convs:
            x = self.act(conv(x))
            if mask is not None:
                x = x * mask.transpose(1, 2)
        return x.transpose(1, 2)


class IdentitySpeechEncoder(nn.Module):
    """Feature passthrough, for unit tests and pre-extracted features."""

    def __init__(self, cfg: SpeechEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.out_dim = cfg.in_dim
        self.frame_rate = cfg.frame_rate

    def forward(self, frames: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if lengths is not None:
            idx = torch.arange(frames.shape[1], device=frames.device)
            frames = frames * (idx.unsqueeze(0) < lengths.unsqueeze(1)).unsqueeze(-1).to(frames.dtype)
        return frames


def build_speech_encoder(cfg: SpeechEncoderConfig) -> nn.Module:
    return ToyConvSpeechEncoder(cfg) if cfg.kind == "conv" else IdentitySpeechEncoder(cfg)


# ---------------------------------------------------------------------------
# connector


@dataclass
class ConnectorConfig:
    in_dim: int
    out_dim: int
    n_layers: int = 4
    hidden: int = 1024
    n_heads: int = 4
    ffn_dim: int = 4096
    max_pos: int = 512
    conv_strides: tuple[int, int] = (3, 2)
    dropout: float = 0.0

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden {self.hidden} not divisible by {self.n_heads} heads")
        if math.prod(self.conv_strides) != 6:
            raise ValueError(f"conv strides must multiply to 6, got {self.conv_strides}")


class Connector(nn.Module):
    """Convolutional subsampling (speech only) followed by a Transformer
    encoder and a projection into the LM embedding width. The Transformer and
    projection are shared by the speech and text paths."""

    def __init__(self, cfg: ConnectorConfig):
        super().__init__()
        self.cfg = cfg
        self.subsampler = ConvSubsampler(cfg.in_dim, cfg.hidden, cfg.conv_strides)
        self.stack = TransformerStack(
            cfg.hidden, cfg.n_layers, cfg.n_heads, cfg.ffn_dim, cfg.max_pos, cfg.dropout
        )
        self.proj = nn.Linear(cfg.hidden, cfg.out_dim)

    def output_length(self, n_frames: int) -> int:
        return self.subsampler.output_length(n_frames)

    def forward_frames(
        self, frames: torch.Tensor, lengths: torch.Tensor | None = None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """frames: (B, T, in_dim) or (T, in_dim) -> (prefix, prefix_lengths)."""
        squeeze = frames.dim() == 2
        if squeeze:
            frames = frames.unsqueeze(0)
        if lengths is None:
            lengths = torch.full((frames.shape[0],), frames.shape[1], dtype=torch.long)
        if int(lengths.min()) < ConvSubsampler.MIN_FRAMES:
            raise LengthError(
                f"need at least {ConvSubsampler.MIN_FRAMES} frames, got {int(lengths.min())}"
            )
        hidden = self.subsampler(frames)
        out_lengths = lengths // self.cfg.conv_strides[0] // self.cfg.conv_strides[1]
        out = self.proj(self.stack(hidden, out_lengths))
        if squeeze:
            return out.squeeze(0), out_lengths
        return out, out_lengths

    def forward_hidden(
        self, x: torch.Tensor, lengths: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Text-path entry: skip the convolutions, run the shared Transformer
        and projection. Length preserving."""
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        out = self.proj(self.stack(x, lengths))
        return out.squeeze(0) if squeeze else out


# ---------------------------------------------------------------------------
# text encoder


@dataclass
class TextEncoderConfig:
    vocab_size: int
    hidden: int = 1024
    n_layers: int = 4
    n_heads: int = 4
    ffn_dim: int = 4096
    max_pos: int = 512
    dropout: float = 0.0


class TextEncoder(nn.Module):
    """Input embedding (LM tokenizer vocabulary) plus a Transformer encoder
    with the same dimensions as the connector Transformer."""

    def __init__(self, cfg: TextEncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.vocab_size, cfg.hidden)
        self.stack = TransformerStack(
            cfg.hidden, cfg.n_layers, cfg.n_heads, cfg.ffn_dim, cfg.max_pos, cfg.dropout
        )

    def forward(self, token_ids: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        if token_ids.numel() == 0:
            raise LengthError("text encoder needs at least one input token")
        if token_ids.dim() == 1:
            return self.stack(self.embedding(token_ids.unsqueeze(0))).squeeze(0)
        return self.stack(self.embedding(token_ids), lengths)


# ---------------------------------------------------------------------------
# decoder-only language model


@dataclass
class LMConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 3
    n_heads: int = 4
    ffn_dim: int = 128
    max_pos: int = 1024
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")


class CausalSelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q_proj = nn.Linear(d_model, d_model)
        self.k_proj = nn.Linear(d_model, d_model)
        self.v_proj = nn.Linear(d_model, d_model)
        self.o_proj = nn.Linear(d_model, d_model)

    def forward(self, x: torch.Tensor, past: tuple[torch.Tensor, torch.Tensor] | None = None):
        bsz, length, d_model = x.shape
        shape = (bsz, length, self.n_heads, self.head_dim)
        q = self.q_proj(x).view(shape).transpose(1, 2)
        k = self.k_proj(x).view(shape).transpose(1, 2)
        v = self.v_proj(x).view(shape).transpose(1, 2)
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        n_past = k.shape[2] - length
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if length > 1 or n_past == 0:
            # query at absolute position n_past+i may attend keys <= n_past+i
            causal = torch.ones(length, k.shape[2], dtype=torch.bool, device=x.device)
            causal = torch.triu(causal, diagonal=n_past + 1)
            scores = scores.masked_fill(causal, float("-inf"))
        attn = scores.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(bsz, length, d_model)
        return self.o_proj(out), (k, v)


class LMBlock(nn.Module):
    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.ln1 = nn.LayerNorm(cfg.d_model)
        self.attn = CausalSelfAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = nn.LayerNorm(cfg.d_model)
        self.fc1 = nn.Linear(cfg.d_model, cfg.ffn_dim)
        self.fc2 = nn.Linear(cfg.ffn_dim, cfg.d_model)

    def forward(self, x, past=None):
        attn_out, present = self.attn(self.ln1(x), past)
        x = x + attn_out
        x = x + self.fc2(F.gelu(self.fc1(self.ln2(x))))
        return x, present


class TinyLM(nn.Module):
    """Small pre-norm decoder-only Transformer over a character vocabulary.
    Accepts embedding inputs directly so prefixes can be spliced in, and
    supports a key/value cache for greedy generation."""

    def __init__(self, cfg: LMConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_embedding = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.posenc = SinusoidalPositionalEncoding(cfg.d_model, cfg.max_pos)
        self.drop = nn.Dropout(cfg.dropout)
        self.blocks = nn.ModuleList(LMBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    def embed(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.tok_embedding(token_ids)

    def forward(self, inputs_embeds: torch.Tensor, past=None, use_cache: bool = False):
        offset = past[0][0].shape[2] if past else 0
        x = self.drop(self.posenc(inputs_embeds, offset))
        presents = []
        for i, block in enumerate(self.blocks):
            x, present = block(x, past[i] if past else None)
            presents.append(present)
        logits = self.lm_head(self.ln_f(x))
        if use_cache:
            return logits, presents
        return logits


# ---------------------------------------------------------------------------
# composed model


@dataclass
class ComposedConfig:
    speech_encoder: SpeechEncoderConfig
    connector: ConnectorConfig
    lm: LMConfig
    text_encoder: TextEncoderConfig | None = None
    adapter: AdapterConfig | None = None
    charset: str | None = None  # None = tokenizer default

    def __post_init__(self):
        if self.connector.in_dim != self.speech_encoder.in_dim:
            raise ValueError("connector in_dim must match speech encoder output width")
        if self.connector.out_dim != self.lm.d_model:
            raise ValueError("connector out_dim must match LM embedding width")


PHASES = ("asr", "dst")


class ComposedModel(nn.Module):
    """Speech encoder + connector + optional text encoder + LM (+ adapters),
    with per-component trainability control."""

    def __init__(self, cfg: ComposedConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.seed = seed
        self.tokenizer = CharTokenizer(cfg.charset) if cfg.charset else CharTokenizer()
        torch.manual_seed(derive_seed(seed, "speech_encoder"))
        self.speech_encoder = build_speech_encoder(cfg.speech_encoder)
        torch.manual_seed(derive_seed(seed, "connector"))
        self.connector = Connector(cfg.connector)
        torch.manual_seed(derive_seed(seed, "lm"))
        self.lm = TinyLM(cfg.lm)
        self.text_encoder: TextEncoder | None = None
        if cfg.text_encoder is not None:
            torch.manual_seed(derive_seed(seed, "text_encoder"))
            self.text_encoder = TextEncoder(cfg.text_encoder)
        self.adapters_injected = False
        if cfg.adapter is not None:
            self.inject_adapters(cfg.adapter)

    # -- structure ----------------------------------------------------------

    def inject_adapters(self, adapter_cfg: AdapterConfig | None = None) -> None:
        adapter_cfg = adapter_cfg or self.cfg.adapter or AdapterConfig()
        torch.manual_seed(derive_seed(self.seed, "adapters"))
        adapter_inject(self.lm, adapter_cfg)
        self.cfg.adapter = adapter_cfg
        self.adapters_injected = True

    def attach_text_encoder(self, text_cfg: TextEncoderConfig, seed: int = 0) -> None:
        torch.manual_seed(derive_seed(seed, "text_encoder"))
        self.text_encoder = TextEncoder(text_cfg)
        self.cfg.text_encoder = text_cfg

    def delete_text_encoder(self) -> None:
        """Drop the text encoder (inference needs only the speech path)."""
        self.text_encoder = None
        self.cfg.text_encoder = None

    # -- trainability -------------------------------------------------------

    def apply_phase(self, phase: str) -> dict[str, bool]:
        """Set requires_grad flags for a training phase and return the mask.

        asr: train speech encoder + connector, LM fully frozen.
        dst: train connector, text encoder and adapters; speech encoder and
             base LM frozen."""
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}, expected one of {PHASES}")
        mask = {
            "speech_encoder": phase == "asr",
            "connector": True,
            "text_encoder": phase == "dst" and self.text_encoder is not None,
            "lm_base": False,
            "adapters": phase == "dst" and self.adapters_injected,
        }
        self.speech_encoder.requires_grad_(mask["speech_encoder"])
        self.connector.requires_grad_(mask["connector"])
        if self.text_encoder is not None:
            self.text_encoder.requires_grad_(mask["text_encoder"])
        for name, param in self.lm.named_parameters():
            param.requires_grad_("lora_" in name and mask["adapters"])
        return mask

    def trainable_parameters(self) -> list[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    # -- prefix encoders ----------------------------------------------------

    def speech_prefix_batch(
        self, frames: torch.Tensor, lengths: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(B, T, d_enc) zero-padded frames -> (B, P, d_lm) padded prefixes."""
        encoded = self.speech_encoder(frames, lengths)
        return self.connector.forward_frames(encoded, lengths)

    def text_prefix_batch(
        self, token_ids: torch.Tensor, lengths: torch.Tensor
    ) -> torch.Tensor:
        """(B, L) padded current-utterance token ids -> (B, L, d_lm)."""
        if self.text_encoder is None:
            raise RuntimeError("model has no text encoder attached")
        if int(lengths.min()) < 1:
            raise LengthError("text path needs at least one input token")
        hidden = self.text_encoder(token_ids, lengths)
        return self.connector.forward_hidden(hidden, lengths)

    # -- composition --------------------------------------------------------

    def compose_input(self, prefix: torch.Tensor | None, history_text: str) -> torch.Tensor:
        """[prefix] ++ [embeddings of history] ++ [<gen> delimiter], (L, d_lm)."""
        device = self.lm.lm_head.weight.device
        ids = self.tokenizer.encode(history_text) + [self.tokenizer.gen_id]
        embeds = self.lm.embed(torch.tensor(ids, dtype=torch.long, device=device))
        if prefix is None or prefix.shape[0] == 0:
            return embeds
        return torch.cat([prefix, embeds], dim=0)

    def _compose_training_rows(
        self,
        prefixes: list[torch.Tensor] | None,
        histories: list[str],
        targets: list[str],
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Build padded (embeds, labels) for teacher forcing. Labels cover the
        target tokens plus the closing eos; everything else is ignored."""
        tok = self.tokenizer
        device = self.lm.lm_head.weight.device
        rows, label_rows = [], []
        for i, (history, target) in enumerate(zip(histories, targets)):
            prefix = prefixes[i] if prefixes is not None else None
            target_ids = tok.encode(target) + [tok.eos_id]
            context = self.compose_input(prefix, history)
            target_embeds = self.lm.embed(
                torch.tensor(target_ids[:-1], dtype=torch.long, device=device)
            )
            rows.append(torch.cat([context, target_embeds], dim=0))
            # logits at the <gen> position predict the first target token
            labels = torch.full((rows[-1].shape[0],), IGNORE_INDEX, dtype=torch.long, device=device)
            labels[context.shape[0] - 1 :] = torch.tensor(target_ids, dtype=torch.long, device=device)
            label_rows.append(labels)
        embeds = nn.utils.rnn.pad_sequence(rows, batch_first=True)
        labels = nn.utils.rnn.pad_sequence(label_rows, batch_first=True, padding_value=IGNORE_INDEX)
        return embeds, labels

    def forward_scores(
        self,
        source: str,
        histories: list[str],
        targets: list[str],
        frames: torch.Tensor | None = None,
        frame_lengths: torch.Tensor | None = None,
        utterances: list[str] | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Teacher-forced logits and labels for a batch from one prefix source.

        source "speech": prefix from frames; "text": prefix from the current
        utterance through the text encoder; "lm_text": no prefix, the current
        utterance is appended to the history after a newline (text-encoder
        ablation)."""
        if source == "speech":
            if frames is None:
                raise ValueError("speech source requires frames")
            padded, lengths = self.speech_prefix_batch(frames, frame_lengths)
            prefixes = [padded[i, : int(lengths[i])] for i in range(padded.shape[0])]
        elif source == "text":
            if utterances is None:
                raise ValueError("text source requires the current utterances")
            ids = [self.tokenizer.encode(u) for u in utterances]
            if any(len(x) == 0 for x in ids):
                raise LengthError("text path needs a non-empty utterance")
            lengths = torch.tensor([len(x) for x in ids], dtype=torch.long)
            padded_ids = nn.utils.rnn.pad_sequence(
                [torch.tensor(x, dtype=torch.long) for x in ids],
                batch_first=True, padding_value=self.tokenizer.pad_id,
            )
            out = self.text_prefix_batch(padded_ids, lengths)
            prefixes = [out[i, : int(lengths[i])] for i in range(out.shape[0])]
        elif source == "lm_text":
            if utterances is None:
                raise ValueError("lm_text source requires the current utterances")
            histories = [f"{h}\n{u}" if h else u for h, u in zip(histories, utterances)]
            prefixes = None
        else:
            raise ValueError(f"unknown prefix source {source!r}")
        embeds, labels = self._compose_training_rows(prefixes, histories, targets)
        return self.lm(embeds), labels

    def forward_loss(self, source: str, histories: list[str], targets: list[str], **kw) -> torch.Tensor:
        """Mean token-level cross-entropy of the targets under teacher forcing."""
        logits, labels = self.forward_scores(source, histories, targets, **kw)
        return F.cross_entropy(
            logits.view(-1, logits.shape[-1]), labels.view(-1), ignore_index=IGNORE_INDEX
        )
