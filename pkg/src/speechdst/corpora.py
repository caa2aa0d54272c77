"""Corpus containers, the on-disk dialogue-JSON format (with a binary frames
sidecar), per-turn training examples and the seeded speech/text batch pairer.

File format (version "1")::

    <name>.json        {"version": "1", "dialogues": [
                          {"id": ..., "domains": [...],
                           "turns": [{"speaker": "user"|"agent",
                                      "transcript": str,
                                      "frames_ref": str?,   # spoken user turns
                                      "state": {...}?       # user turns
                                     }, ...]}, ...]}
    <name>.frames.bin  sidecar, one record per frames_ref: 16-byte header
                       (magic "FDST", u32 dtype code, u32 T, u32 d, little
                       endian) followed by the row-major float32 payload.
                       frames_ref "f<NNNNNNNN>" names the record by position.
"""

from __future__ import annotations

import json
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .states import DialogueState, Dialogue, Turn, normalize_state

FORMAT_VERSION = "1"
FRAMES_MAGIC = b"FDST"
DTYPE_F32 = 1

_HEADER = struct.Struct("<4sIII")


class CorpusFormatError(ValueError):
    """File does not conform to the dialogue-JSON schema."""


@dataclass
class SpokenDSTCorpus:
    """Dialogues whose user turns all carry frames and gold states."""

    dialogues: list[Dialogue] = field(default_factory=list)

    def validate(self) -> None:
        for d in self.dialogues:
            d.validate()
            for t in d.user_turns():
                if t.frames is None:
                    raise ValueError(f"dialogue {d.dialogue_id}: user turn missing frames")
                if t.gold_state is None:
                    raise ValueError(f"dialogue {d.dialogue_id}: user turn missing gold state")


@dataclass
class TextDSTCorpus:
    """Dialogues with transcripts and gold states but no audio anywhere."""

    dialogues: list[Dialogue] = field(default_factory=list)

    def validate(self) -> None:
        for d in self.dialogues:
            d.validate()
            for t in d.turns:
                if t.frames is not None:
                    raise ValueError(f"dialogue {d.dialogue_id}: text corpus turn carries frames")
            for t in d.user_turns():
                if t.gold_state is None:
                    raise ValueError(f"dialogue {d.dialogue_id}: user turn missing gold state")


@dataclass
class ASRCorpus:
    """Plain utterances with frames; targets are the transcripts themselves."""

    utterances: list[tuple[str, np.ndarray]] = field(default_factory=list)  # (transcript, frames)


# ---------------------------------------------------------------------------
# serialization


def _write_frames(fh, frames: np.ndarray) -> None:
    data = np.ascontiguousarray(frames, dtype=np.float32)
    fh.write(_HEADER.pack(FRAMES_MAGIC, DTYPE_F32, data.shape[0], data.shape[1]))
    fh.write(data.tobytes())


def _scan_frames_file(path: Path) -> dict[str, np.ndarray]:
    blobs: dict[str, np.ndarray] = {}
    raw = path.read_bytes()
    offset, index = 0, 0
    while offset < len(raw):
        if offset + _HEADER.size > len(raw):
            raise CorpusFormatError(f"{path}: trailing bytes do not form a frame header")
        magic, dtype_code, n_rows, n_cols = _HEADER.unpack_from(raw, offset)
        if magic != FRAMES_MAGIC:
            raise CorpusFormatError(f"{path}: bad magic at offset {offset}")
        if dtype_code != DTYPE_F32:
            raise CorpusFormatError(f"{path}: unsupported dtype code {dtype_code}")
        offset += _HEADER.size
        nbytes = n_rows * n_cols * 4
        if offset + nbytes > len(raw):
            raise CorpusFormatError(f"{path}: truncated frame payload at offset {offset}")
        blobs[f"f{index:08d}"] = (
            np.frombuffer(raw, dtype="<f4", count=n_rows * n_cols, offset=offset)
            .reshape(n_rows, n_cols)
            .copy()
        )
        offset += nbytes
        index += 1
    return blobs


def frames_sidecar_path(json_path: str | Path) -> Path:
    p = Path(json_path)
    return p.with_suffix(".frames.bin") if p.suffix == ".json" else Path(str(p) + ".frames.bin")


def save_corpus(corpus: SpokenDSTCorpus | TextDSTCorpus, json_path: str | Path) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    dialogues_payload = []
    frames_fh = None
    n_frames = 0
    try:
        for d in corpus.dialogues:
            turns_payload = []
            for t in d.turns:
                turn: dict = {"speaker": t.speaker, "transcript": t.transcript}
                if t.frames is not None:
                    if frames_fh is None:
                        frames_fh = open(frames_sidecar_path(json_path), "wb")
                    turn["frames_ref"] = f"f{n_frames:08d}"
                    _write_frames(frames_fh, t.frames)
                    n_frames += 1
                if t.gold_state is not None:
                    turn["state"] = t.gold_state
                turns_payload.append(turn)
            dialogues_payload.append(
                {"id": d.dialogue_id, "domains": sorted(d.domain_tags), "turns": turns_payload}
            )
    finally:
        if frames_fh is not None:
            frames_fh.close()
    payload = {"version": FORMAT_VERSION, "dialogues": dialogues_payload}
    json_path.write_text(json.dumps(payload, indent=1, sort_keys=True), encoding="utf-8")


@dataclass
class LoadReport:
    loaded: int = 0
    skipped: int = 0
    skip_reasons: list[str] = field(default_factory=list)


def load_real_corpus(
    path: str | Path,
    format_version: str = FORMAT_VERSION,
    kind: str | None = None,
) -> tuple[SpokenDSTCorpus | TextDSTCorpus, LoadReport]:
    """Load and validate a dialogue-JSON corpus.

    Schema/version problems and truncated files are hard errors; dialogues
    that violate corpus invariants are skipped and counted in the report.
    ``kind`` forces "spoken" or "text"; by default it is inferred from
    whether any turn references frames."""
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise CorpusFormatError(f"{path}: not valid JSON ({err})") from err
    if not isinstance(payload, dict) or "version" not in payload or "dialogues" not in payload:
        raise CorpusFormatError(f"{path}: missing version/dialogues keys")
    if str(payload["version"]) != format_version:
        raise CorpusFormatError(
            f"{path}: format version {payload['version']!r} does not match expected {format_version!r}"
        )

    has_frames = any(
        "frames_ref" in t for d in payload["dialogues"] for t in d.get("turns", [])
    )
    if kind is None:
        kind = "spoken" if has_frames else "text"
    if kind not in ("spoken", "text"):
        raise ValueError(f"kind must be 'spoken' or 'text', got {kind!r}")

    blobs: dict[str, np.ndarray] = {}
    if has_frames:
        sidecar = frames_sidecar_path(path)
        if not sidecar.exists():
            raise CorpusFormatError(f"{path}: frames referenced but sidecar {sidecar} missing")
        blobs = _scan_frames_file(sidecar)

    report = LoadReport()
    dialogues: list[Dialogue] = []
    for entry in payload["dialogues"]:
        try:
            turns = []
            for t in entry["turns"]:
                frames = None
                if "frames_ref" in t:
                    ref = t["frames_ref"]
                    if ref not in blobs:
                        raise ValueError(f"unresolved frames_ref {ref!r}")
                    frames = blobs[ref]
                state = normalize_state(t["state"]) if "state" in t else None
                turns.append(
                    Turn(speaker=t["speaker"], transcript=t["transcript"], frames=frames, gold_state=state)
                )
            dialogue = Dialogue(
                dialogue_id=str(entry["id"]), domain_tags=set(entry.get("domains", [])), turns=turns
            )
            probe = SpokenDSTCorpus([dialogue]) if kind == "spoken" else TextDSTCorpus([dialogue])
            probe.validate()
            dialogues.append(dialogue)
            report.loaded += 1
        except (KeyError, TypeError, ValueError) as err:
            report.skipped += 1
            report.skip_reasons.append(f"{entry.get('id', '?')}: {err}")
    corpus = SpokenDSTCorpus(dialogues) if kind == "spoken" else TextDSTCorpus(dialogues)
    return corpus, report


# ---------------------------------------------------------------------------
# per-turn training examples


@dataclass
class Example:
    """One user turn flattened for training: the dialogue history rendered as
    newline-joined transcripts, the current utterance, its cumulative gold
    state and (for spoken corpora) the acoustic frames."""

    example_id: str
    history_text: str
    transcript: str
    state: DialogueState | None = None
    frames: np.ndarray | None = None


def dialogue_examples(dialogue: Dialogue) -> list[Example]:
    examples = []
    transcripts: list[str] = []
    user_idx = 0
    for turn in dialogue.turns:
        if turn.speaker == "user":
            examples.append(
                Example(
                    example_id=f"{dialogue.dialogue_id}#u{user_idx}",
                    history_text="\n".join(transcripts),
                    transcript=turn.transcript,
                    state=turn.gold_state,
                    frames=turn.frames,
                )
            )
            user_idx += 1
        transcripts.append(turn.transcript)
    return examples


def corpus_examples(corpus: SpokenDSTCorpus | TextDSTCorpus) -> list[Example]:
    out: list[Example] = []
    for d in corpus.dialogues:
        out.extend(dialogue_examples(d))
    return out


# ---------------------------------------------------------------------------
# batch pairing


@dataclass
class MixSpec:
    """Which corpora feed the speech stream and, with sampling weights, the
    text stream of joint training."""

    speech_sources: list[SpokenDSTCorpus]
    text_sources: list[tuple[TextDSTCorpus, float]] = field(default_factory=list)

    def __post_init__(self):
        if not self.speech_sources:
            raise ValueError("need at least one speech source")
        if any(w <= 0 for _, w in self.text_sources):
            raise ValueError("text source weights must be positive")
        total = sum(w for _, w in self.text_sources)
        if total > 0:
            self.text_sources = [(c, w / total) for c, w in self.text_sources]


class _EpochSampler:
    """Endless stream over a fixed example list, reshuffled every epoch."""

    def __init__(self, examples: list[Example], rng: random.Random):
        if not examples:
            raise ValueError("empty example list")
        self.examples = examples
        self.rng = rng
        self.order: list[int] = []
        self.pos = 0

    def next(self) -> Example:
        if self.pos >= len(self.order):
            self.order = list(range(len(self.examples)))
            self.rng.shuffle(self.order)
            self.pos = 0
        ex = self.examples[self.order[self.pos]]
        self.pos += 1
        return ex


def paired_batcher(mix: MixSpec, batch_sizes: tuple[int, int], seed: int):
    """Infinite seeded stream of (speech_batch, text_batch) example lists.

    Text examples are drawn from the weighted text sources; with no text
    sources the text batch is empty (text-loss weight 0 regime)."""
    speech_bs, text_bs = batch_sizes
    rng = random.Random(seed)
    speech_examples = [ex for c in mix.speech_sources for ex in corpus_examples(c)]
    speech_sampler = _EpochSampler(speech_examples, random.Random(rng.getrandbits(48)))
    text_samplers = [
        (_EpochSampler(corpus_examples(c), random.Random(rng.getrandbits(48))), w)
        for c, w in mix.text_sources
    ]
    pick_rng = random.Random(rng.getrandbits(48))
    weights = [w for _, w in text_samplers]
    while True:
        speech_batch = [speech_sampler.next() for _ in range(speech_bs)]
        text_batch: list[Example] = []
        if text_samplers:
            for _ in range(text_bs):
                chosen = pick_rng.choices(range(len(text_samplers)), weights=weights)[0]
                text_batch.append(text_samplers[chosen][0].next())
        yield speech_batch, text_batch
