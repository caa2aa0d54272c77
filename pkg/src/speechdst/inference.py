"""Free-running dialogue state tracking: greedy generation turn by turn with
an accumulated history of transcripts."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .codec import ParseFailure, decode_output
from .corpora import SpokenDSTCorpus
from .metrics import EvalReport, postprocess_state, recall_report
from .model import ComposedModel
from .states import Dialogue, DialogueState, Ontology, copy_state


@dataclass
class GenConfig:
    max_new_tokens: int = 256
    decode_mode: str = "greedy"
    on_parse_failure: str = "carry"  # "carry" previous state | "empty"

    def __post_init__(self):
        if self.decode_mode != "greedy":
            raise ValueError("only greedy decoding is supported")
        if self.on_parse_failure not in ("carry", "empty"):
            raise ValueError(f"bad on_parse_failure {self.on_parse_failure!r}")
        if self.max_new_tokens < 4:
            raise ValueError("max_new_tokens too small for any well-formed output")


@dataclass
class Session:
    """History of (speaker, transcript) pairs; rendering joins the transcripts
    with a newline."""

    history: list[tuple[str, str]] = field(default_factory=list)
    last_state: DialogueState = field(default_factory=dict)

    def rendered_history(self) -> str:
        return "\n".join(t for _, t in self.history)

    def append(self, speaker: str, transcript: str) -> None:
        self.history.append((speaker, transcript))


@dataclass
class TurnPrediction:
    transcript: str
    state: DialogueState
    raw: str
    parse_failure: str | None = None  # failure reason, None on success


def greedy_generate(model: ComposedModel, prefix: torch.Tensor, history_text: str,
                    gen: GenConfig) -> str:
    """Greedy decoding from [prefix][history][<gen>] until eos or the budget
    runs out (truncated JSON then flows through the ParseFailure pathway)."""
    tok = model.tokenizer
    seq = model.compose_input(prefix, history_text)
    budget = min(gen.max_new_tokens, model.lm.cfg.max_pos - seq.shape[0] - 1)
    with torch.no_grad():
        logits, past = model.lm(seq.unsqueeze(0), use_cache=True)
        next_id = int(logits[0, -1].argmax())
        ids: list[int] = []
        while next_id != tok.eos_id and len(ids) < budget:
            ids.append(next_id)
            step_embed = model.lm.embed(torch.tensor([[next_id]], dtype=torch.long))
            logits, past = model.lm(step_embed, past=past, use_cache=True)
            next_id = int(logits[0, -1].argmax())
    return tok.decode(ids)


def track_turn(
    model: ComposedModel,
    session: Session,
    frames: np.ndarray | torch.Tensor,
    gen: GenConfig,
    ontology: Ontology,
) -> TurnPrediction:
    """Predict the state after one user turn and extend the session history
    with the hypothesized transcript."""
    was_training = model.training
    model.eval()
    if isinstance(frames, np.ndarray):
        frames = torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32))
    lengths = torch.tensor([frames.shape[0]], dtype=torch.long)
    with torch.no_grad():
        prefix_padded, prefix_lengths = model.speech_prefix_batch(frames.unsqueeze(0), lengths)
        prefix = prefix_padded[0, : int(prefix_lengths[0])]
    raw = greedy_generate(model, prefix, session.rendered_history(), gen)
    decoded = decode_output(raw)
    if isinstance(decoded, ParseFailure):
        transcript = decoded.partial_transcript
        state = copy_state(session.last_state) if gen.on_parse_failure == "carry" else {}
        prediction = TurnPrediction(transcript, state, raw, parse_failure=decoded.reason)
    else:
        transcript, state = decoded
        state = postprocess_state(state, ontology)
        prediction = TurnPrediction(transcript, state, raw)
    session.append("user", prediction.transcript)
    session.last_state = prediction.state
    if was_training:
        model.train()
    return prediction


def track_dialogue(
    model: ComposedModel,
    dialogue: Dialogue,
    gen: GenConfig,
    ontology: Ontology,
    history_mode: str = "hypothesized",
) -> list[TurnPrediction]:
    """Track every user turn of a dialogue. Agent history entries always use
    the reference transcripts (the system knows what it said); user entries
    use the model's hypothesized transcript, or the reference in "gold" mode."""
    if history_mode not in ("hypothesized", "gold"):
        raise ValueError(f"bad history_mode {history_mode!r}")
    session = Session()
    predictions = []
    for turn in dialogue.turns:
        if turn.speaker == "agent":
            session.append("agent", turn.transcript)
            continue
        if turn.frames is None:
            raise ValueError(f"dialogue {dialogue.dialogue_id}: user turn without frames")
        predictions.append(track_turn(model, session, turn.frames, gen, ontology))
        if history_mode == "gold":
            session.history[-1] = ("user", turn.transcript)
    return predictions


def evaluate_corpus(
    model: ComposedModel,
    corpus: SpokenDSTCorpus,
    gen: GenConfig,
    ontology: Ontology,
    history_mode: str = "hypothesized",
) -> tuple[EvalReport, list[list[TurnPrediction]]]:
    """Free-running evaluation of a spoken corpus: track every dialogue and
    score against the gold cumulative states."""
    if not corpus.dialogues:
        raise ValueError("cannot evaluate an empty corpus")
    all_preds: list[list[TurnPrediction]] = []
    scored_preds, golds = [], []
    for dialogue in corpus.dialogues:
        preds = track_dialogue(model, dialogue, gen, ontology, history_mode)
        all_preds.append(preds)
        for pred, turn in zip(preds, dialogue.user_turns()):
            if pred.parse_failure is not None:
                scored_preds.append(ParseFailure(reason=pred.parse_failure, raw=pred.raw))
            else:
                scored_preds.append(pred.state)
            golds.append(turn.gold_state)
    return recall_report(scored_preds, golds), all_preds
