"""Two-phase training.

Phase 1 (asr): encoder + connector learn to transcribe, LM frozen.
Phase 2 (dst): connector, text encoder and adapters finetune jointly on a
speech batch and a text batch per step, minimizing

    total = L_speech + lambda * (L_unpaired_text + L_transcript_text)

with teacher-forced validation JGA driving checkpoint selection and early
stopping. The no-text-encoder ablation routes text through the LM input
(utterance appended to the history) instead of the text encoder.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import parameter_hash, save_checkpoint
from .codec import decode_output, encode_target, ParseFailure
from .corpora import (
    ASRCorpus,
    Example,
    MixSpec,
    SpokenDSTCorpus,
    corpus_examples,
    paired_batcher,
)
from .metrics import joint_goal_accuracy, postprocess_state
from .model import IGNORE_INDEX, ComposedModel
from .schedule import LRSchedule, lr_at
from .states import Ontology


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries step, lr and batch ids for diagnosis."""


@dataclass
class TrainConfig:
    phase: str  # "asr" | "dst"
    lr: LRSchedule
    lambda_text: float = 0.5
    batch_sizes: tuple[int, int] = (4, 4)
    eval_every: int = 250
    patience: int = 8
    use_text_encoder: bool = True
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    log_every: int = 25

    def __post_init__(self):
        if self.phase not in ("asr", "dst"):
            raise ValueError(f"phase must be 'asr' or 'dst', got {self.phase!r}")
        if not math.isfinite(self.lambda_text) or self.lambda_text < 0:
            raise ValueError(f"lambda_text must be finite and >= 0, got {self.lambda_text}")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class TrainState:
    step: int = 0
    best_val_jga: float = -1.0
    best_checkpoint_ref: str | None = None
    evals_since_best: int = 0


@dataclass
class TrainResult:
    checkpoint_dir: Path
    best_val_jga: float
    steps_run: int
    metrics_path: Path
    val_history: list[tuple[int, float]] = field(default_factory=list)


def set_global_seed(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def collate_frames(examples: list[Example]) -> tuple[torch.Tensor, torch.Tensor]:
    """Zero-pad per-example frame matrices into (B, T_max, d_enc)."""
    lengths = torch.tensor([ex.frames.shape[0] for ex in examples], dtype=torch.long)
    t_max = int(lengths.max())
    d_enc = examples[0].frames.shape[1]
    frames = torch.zeros(len(examples), t_max, d_enc)
    for i, ex in enumerate(examples):
        frames[i, : ex.frames.shape[0]] = torch.from_numpy(ex.frames)
    return frames, lengths


def _dst_targets(examples: list[Example]) -> list[str]:
    return [encode_target(ex.transcript, ex.state) for ex in examples]


def joint_step(
    model: ComposedModel,
    speech_batch: list[Example],
    text_batch: list[Example],
    lambda_text: float,
    text_route: str = "encoder",  # "encoder" | "lm" (no-text-encoder ablation)
) -> tuple[torch.Tensor, dict[str, float | None]]:
    """The three-loss objective. With lambda_text = 0 the text paths are not
    evaluated and the total is exactly the speech loss."""
    frames, lengths = collate_frames(speech_batch)
    histories = [ex.history_text for ex in speech_batch]
    targets = _dst_targets(speech_batch)
    loss_speech = model.forward_loss(
        "speech", histories, targets, frames=frames, frame_lengths=lengths
    )
    parts: dict[str, float | None] = {
        "speech": float(loss_speech.detach()),
        "unpaired": None,
        "transcript": None,
    }
    if lambda_text == 0:
        return loss_speech, parts
    if not text_batch:
        raise ValueError("lambda_text > 0 requires a non-empty text batch")
    source = "text" if text_route == "encoder" else "lm_text"
    loss_transcript = model.forward_loss(
        source, histories, targets, utterances=[ex.transcript for ex in speech_batch]
    )
    loss_unpaired = model.forward_loss(
        source,
        [ex.history_text for ex in text_batch],
        _dst_targets(text_batch),
        utterances=[ex.transcript for ex in text_batch],
    )
    parts["unpaired"] = float(loss_unpaired.detach())
    parts["transcript"] = float(loss_transcript.detach())
    total = loss_speech + lambda_text * (loss_unpaired + loss_transcript)
    return total, parts


def teacher_forced_jga(
    model: ComposedModel,
    val_sets: list[SpokenDSTCorpus],
    ontology: Ontology,
    batch_size: int = 8,
) -> float:
    """Teacher-forced validation JGA: feed the gold target, take per-position
    argmax tokens, decode the resulting string and compare whole states."""
    examples = [ex for corpus in val_sets for ex in corpus_examples(corpus)]
    tok = model.tokenizer
    was_training = model.training
    model.eval()
    preds, golds = [], []
    with torch.no_grad():
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo : lo + batch_size]
            frames, lengths = collate_frames(chunk)
            logits, labels = model.forward_scores(
                "speech",
                [ex.history_text for ex in chunk],
                _dst_targets(chunk),
                frames=frames,
                frame_lengths=lengths,
            )
            argmax = logits.argmax(dim=-1)
            for row in range(len(chunk)):
                ids = argmax[row][labels[row] != IGNORE_INDEX].tolist()
                if tok.eos_id in ids:
                    ids = ids[: ids.index(tok.eos_id)]
                decoded = decode_output(tok.decode(ids))
                if isinstance(decoded, ParseFailure):
                    preds.append(decoded)
                else:
                    preds.append(postprocess_state(decoded[1], ontology))
                golds.append(chunk[row].state)
    if was_training:
        model.train()
    return joint_goal_accuracy(preds, golds)


class _MetricsLog:
    """JSON-lines metrics writer (step, lr, loss parts, val JGA)."""

    def __init__(self, path: Path):
        self.path = path
        path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(path, "w", encoding="utf-8")

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(record, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


def _check_finite(total: torch.Tensor, parts: dict, step: int, lr: float, batch_ids: list[str]) -> None:
    if not torch.isfinite(total):
        raise TrainingDiverged(
            f"non-finite loss at step {step} (lr {lr:.3e}, parts {parts}, batch {batch_ids})"
        )


def asr_pretrain(
    model: ComposedModel,
    asr_corpus: ASRCorpus,
    cfg: TrainConfig,
    out_dir: str | Path,
) -> TrainResult:
    """Phase 1: transcription pretraining of encoder + connector with the LM
    frozen. Targets are plain transcripts, not JSON."""
    if cfg.phase != "asr":
        raise ValueError("asr_pretrain needs cfg.phase == 'asr'")
    out_dir = Path(out_dir)
    set_global_seed(cfg.seed)
    mask = model.apply_phase("asr")
    lm_hash_before = parameter_hash(model.lm)
    examples = [
        Example(example_id=f"asr{i:06d}", history_text="", transcript=t, frames=f)
        for i, (t, f) in enumerate(asr_corpus.utterances)
    ]
    rng = random.Random(cfg.seed)
    optimizer = torch.optim.AdamW(
        model.trainable_parameters(), lr=0.0, weight_decay=cfg.weight_decay
    )
    log = _MetricsLog(out_dir / "metrics.jsonl")
    model.train()
    order: list[int] = []
    try:
        for step in range(1, cfg.lr.total_steps + 1):
            batch = []
            for _ in range(cfg.batch_sizes[0]):
                if not order:
                    order = list(range(len(examples)))
                    rng.shuffle(order)
                batch.append(examples[order.pop()])
            lr = lr_at(cfg.lr, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            frames, lengths = collate_frames(batch)
            loss = model.forward_loss(
                "speech",
                [ex.history_text for ex in batch],
                [ex.transcript for ex in batch],
                frames=frames,
                frame_lengths=lengths,
            )
            _check_finite(loss, {"speech": float(loss.detach())}, step, lr, [ex.example_id for ex in batch])
            optimizer.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), cfg.grad_clip)
            optimizer.step()
            if step % cfg.log_every == 0 or step == 1 or step == cfg.lr.total_steps:
                log.write({"step": step, "lr": lr, "loss_speech": float(loss.detach())})
    finally:
        log.close()
    assert parameter_hash(model.lm) == lm_hash_before, "frozen LM changed during ASR pretraining"
    ckpt = save_checkpoint(
        out_dir / "final", model, step=cfg.lr.total_steps, trainability=mask,
        extra={"phase": "asr"},
    )
    return TrainResult(
        checkpoint_dir=ckpt,
        best_val_jga=float("nan"),
        steps_run=cfg.lr.total_steps,
        metrics_path=out_dir / "metrics.jsonl",
    )


def train_dst(
    model: ComposedModel,
    mix: MixSpec,
    val_sets: list[SpokenDSTCorpus],
    ontology: Ontology,
    cfg: TrainConfig,
    out_dir: str | Path,
) -> TrainResult:
    """Phase 2: joint DST finetuning with early stopping on teacher-forced
    validation JGA. Returns the best checkpoint by validation JGA."""
    if cfg.phase != "dst":
        raise ValueError("train_dst needs cfg.phase == 'dst'")
    if cfg.use_text_encoder and cfg.lambda_text > 0 and model.text_encoder is None:
        raise ValueError("cfg.use_text_encoder is set but the model has no text encoder")
    out_dir = Path(out_dir)
    set_global_seed(cfg.seed)
    if not model.adapters_injected:
        model.inject_adapters()
    mask = model.apply_phase("dst")
    if not cfg.use_text_encoder and model.text_encoder is not None:
        # ablation trains no text-encoder parameters even if one is attached
        model.text_encoder.requires_grad_(False)
        mask["text_encoder"] = False
    frozen_hashes = {
        "speech_encoder": parameter_hash(model.speech_encoder),
        "lm_base": _lm_base_hash(model),
    }
    text_route = "encoder" if cfg.use_text_encoder else "lm"
    batcher = paired_batcher(mix, cfg.batch_sizes, seed=cfg.seed)
    optimizer = torch.optim.AdamW(
        model.trainable_parameters(), lr=0.0, weight_decay=cfg.weight_decay
    )
    state = TrainState()
    log = _MetricsLog(out_dir / "metrics.jsonl")
    best_dir = out_dir / "best"
    model.train()
    try:
        for step in range(1, cfg.lr.total_steps + 1):
            speech_batch, text_batch = next(batcher)
            lr = lr_at(cfg.lr, step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            total, parts = joint_step(model, speech_batch, text_batch, cfg.lambda_text, text_route)
            _check_finite(total, parts, step, lr, [ex.example_id for ex in speech_batch])
            optimizer.zero_grad()
            total.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.trainable_parameters(), cfg.grad_clip)
            optimizer.step()
            state.step = step
            if step % cfg.log_every == 0 or step == 1:
                log.write(
                    {
                        "step": step,
                        "lr": lr,
                        "loss_total": float(total.detach()),
                        "loss_speech": parts["speech"],
                        "loss_unpaired": parts["unpaired"],
                        "loss_transcript": parts["transcript"],
                    }
                )
            if step % cfg.eval_every == 0:
                val_jga = teacher_forced_jga(model, val_sets, ontology)
                improved = val_jga > state.best_val_jga
                if improved:
                    state.best_val_jga = val_jga
                    state.evals_since_best = 0
                    save_checkpoint(
                        best_dir, model, step=step, val_jga=val_jga, trainability=mask,
                        extra={"phase": "dst", "lambda_text": cfg.lambda_text,
                               "use_text_encoder": cfg.use_text_encoder},
                    )
                    state.best_checkpoint_ref = str(best_dir)
                else:
                    state.evals_since_best += 1
                log.write({"step": step, "val_jga": val_jga, "best": improved})
                if state.evals_since_best >= cfg.patience:
                    break
    finally:
        log.close()
    assert parameter_hash(model.speech_encoder) == frozen_hashes["speech_encoder"], (
        "frozen speech encoder changed during DST finetuning"
    )
    assert _lm_base_hash(model) == frozen_hashes["lm_base"], (
        "frozen base LM changed during DST finetuning"
    )
    if state.best_checkpoint_ref is None:
        # no eval fired (total_steps < eval_every): snapshot the final model
        state.best_val_jga = teacher_forced_jga(model, val_sets, ontology)
        save_checkpoint(best_dir, model, step=state.step, val_jga=state.best_val_jga,
                        trainability=mask, extra={"phase": "dst"})
        state.best_checkpoint_ref = str(best_dir)
    history = _read_val_history(out_dir / "metrics.jsonl")
    return TrainResult(
        checkpoint_dir=best_dir,
        best_val_jga=state.best_val_jga,
        steps_run=state.step,
        metrics_path=out_dir / "metrics.jsonl",
        val_history=history,
    )


def train_dst_no_text_encoder(
    model: ComposedModel,
    mix: MixSpec,
    val_sets: list[SpokenDSTCorpus],
    ontology: Ontology,
    cfg: TrainConfig,
    out_dir: str | Path,
) -> TrainResult:
    """Ablation: unpaired text goes straight into the LM input (appended to the
    history after a newline), no text encoder, no prefix embeddings."""
    if cfg.use_text_encoder:
        cfg = TrainConfig(**{**cfg.__dict__, "use_text_encoder": False})
    return train_dst(model, mix, val_sets, ontology, cfg, out_dir)


def _lm_base_hash(model: ComposedModel) -> str:
    h = hashlib.sha256()
    state = model.lm.state_dict()
    for name in sorted(state):
        if "lora_" in name:
            continue
        h.update(name.encode())
        h.update(state[name].detach().cpu().numpy().tobytes())
    return h.hexdigest()


def _read_val_history(metrics_path: Path) -> list[tuple[int, float]]:
    history = []
    if metrics_path.exists():
        for line in metrics_path.read_text().splitlines():
            rec = json.loads(line)
            if "val_jga" in rec:
                history.append((rec["step"], rec["val_jga"]))
    return history
