"""Checkpoint directory format: a JSON manifest (configs, trainability mask,
step, validation JGA) plus one weight blob per component."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import torch
import torch.nn as nn

from .lora import AdapterConfig
from .model import (
    ComposedConfig,
    ComposedModel,
    ConnectorConfig,
    LMConfig,
    SpeechEncoderConfig,
    TextEncoderConfig,
)

SCHEMA = "speechdst-checkpoint-v1"


def parameter_hash(module: nn.Module) -> str:
    """Order-stable sha256 over all parameters and buffers of a module."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def config_to_dict(cfg: ComposedConfig) -> dict:
    return {
        "speech_encoder": asdict(cfg.speech_encoder),
        "connector": asdict(cfg.connector),
        "lm": asdict(cfg.lm),
        "text_encoder": asdict(cfg.text_encoder) if cfg.text_encoder else None,
        "adapter": asdict(cfg.adapter) if cfg.adapter else None,
        "charset": cfg.charset,
    }


def config_from_dict(payload: dict) -> ComposedConfig:
    connector = dict(payload["connector"])
    connector["conv_strides"] = tuple(connector["conv_strides"])
    adapter = None
    if payload.get("adapter"):
        adapter = dict(payload["adapter"])
        adapter["target_projections"] = tuple(adapter["target_projections"])
        adapter = AdapterConfig(**adapter)
    return ComposedConfig(
        speech_encoder=SpeechEncoderConfig(**payload["speech_encoder"]),
        connector=ConnectorConfig(**connector),
        lm=LMConfig(**payload["lm"]),
        text_encoder=TextEncoderConfig(**payload["text_encoder"]) if payload.get("text_encoder") else None,
        adapter=adapter,
        charset=payload.get("charset"),
    )


def save_checkpoint(
    ckpt_dir: str | Path,
    model: ComposedModel,
    step: int = 0,
    val_jga: float | None = None,
    trainability: dict[str, bool] | None = None,
    extra: dict | None = None,
) -> Path:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    components = {"speech_encoder": "speech_encoder.pt", "connector": "connector.pt", "lm": "lm.pt"}
    if model.text_encoder is not None:
        components["text_encoder"] = "text_encoder.pt"
    for name, filename in components.items():
        torch.save(getattr(model, name).state_dict(), ckpt_dir / filename)
    manifest = {
        "schema": SCHEMA,
        "seed": model.seed,
        "configs": config_to_dict(model.cfg),
        "adapters_injected": model.adapters_injected,
        "step": step,
        "val_jga": val_jga,
        "trainability": trainability or {},
        "components": components,
        "extra": extra or {},
    }
    (ckpt_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return ckpt_dir


def load_checkpoint(ckpt_dir: str | Path) -> tuple[ComposedModel, dict]:
    ckpt_dir = Path(ckpt_dir)
    manifest = json.loads((ckpt_dir / "manifest.json").read_text())
    if manifest.get("schema") != SCHEMA:
        raise ValueError(f"unsupported checkpoint schema {manifest.get('schema')!r}")
    cfg = config_from_dict(manifest["configs"])
    if not manifest.get("adapters_injected"):
        cfg.adapter = None
    model = ComposedModel(cfg, seed=manifest.get("seed", 0))
    for name, filename in manifest["components"].items():
        state = torch.load(ckpt_dir / filename, weights_only=True)
        getattr(model, name).load_state_dict(state)
    model.eval()
    return model, manifest
