"""Core data model: dialogue states, turns, dialogues and slot ontologies.

A dialogue state is a plain nested dict mapping domain -> slot -> value,
e.g. ``{"train": {"day": "sunday", "destination": "london liverpool street"}}``.
States are treated as immutable values; every function here is pure.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field

import numpy as np

# domain -> slot -> value
DialogueState = dict[str, dict[str, str]]

_WS = re.compile(r"\s+")


def normalize_text(s: str) -> str:
    """NFC-normalize, lowercase, collapse whitespace runs, strip ends."""
    s = unicodedata.normalize("NFC", s).lower()
    return _WS.sub(" ", s).strip()


def normalize_state(state: DialogueState) -> DialogueState:
    """Return the canonical form of a state: all domain names, slot names and
    values normalized via :func:`normalize_text`. Domains left with no slots
    are dropped. Idempotent and total."""
    out: DialogueState = {}
    for domain in sorted(state):
        slots = state[domain]
        norm_slots = {normalize_text(k): normalize_text(v) for k, v in sorted(slots.items())}
        if norm_slots:
            out[normalize_text(domain)] = norm_slots
    return out


def states_equal(a: DialogueState, b: DialogueState) -> bool:
    """Whole-state equality: same domains, same slots per domain, same values.

    Both arguments are expected to be normalized; plain dict equality is deep
    structural equality over the nested mapping."""
    return a == b


def state_to_triples(state: DialogueState) -> set[tuple[str, str, str]]:
    """Flatten a state to a set of (domain, slot, value) triples."""
    return {(d, s, v) for d, slots in state.items() for s, v in slots.items()}


def copy_state(state: DialogueState) -> DialogueState:
    return {d: dict(slots) for d, slots in state.items()}


@dataclass
class Turn:
    """One user or agent turn.

    ``frames`` (acoustic feature matrix, T x d_enc) is only ever present on
    user turns; ``gold_state`` is the cumulative state after this user turn.
    """

    speaker: str  # "user" | "agent"
    transcript: str
    frames: np.ndarray | None = None
    gold_state: DialogueState | None = None

    def __post_init__(self):
        if self.speaker not in ("user", "agent"):
            raise ValueError(f"speaker must be 'user' or 'agent', got {self.speaker!r}")
        if self.frames is not None and self.speaker != "user":
            raise ValueError("frames may only be attached to user turns")


@dataclass
class Dialogue:
    dialogue_id: str
    domain_tags: set[str] = field(default_factory=set)
    turns: list[Turn] = field(default_factory=list)

    def user_turns(self) -> list[Turn]:
        return [t for t in self.turns if t.speaker == "user"]

    def validate(self) -> None:
        if not any(t.speaker == "user" for t in self.turns):
            raise ValueError(f"dialogue {self.dialogue_id}: no user turn")
        for prev, cur in zip(self.turns, self.turns[1:]):
            if prev.speaker == cur.speaker:
                raise ValueError(f"dialogue {self.dialogue_id}: consecutive {cur.speaker} turns")


@dataclass
class Ontology:
    """Legal value inventory per (domain, slot); values stored normalized."""

    slots: dict[tuple[str, str], set[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.slots = {
            (normalize_text(d), normalize_text(s)): {normalize_text(v) for v in vals}
            for (d, s), vals in self.slots.items()
        }
        for key, vals in self.slots.items():
            if not vals:
                raise ValueError(f"ontology slot {key} has an empty value set")

    def values_for(self, domain: str, slot: str) -> set[str] | None:
        return self.slots.get((domain, slot))

    def domains(self) -> set[str]:
        return {d for d, _ in self.slots}

    def merged_with(self, other: "Ontology") -> "Ontology":
        merged = {k: set(v) for k, v in self.slots.items()}
        for k, v in other.slots.items():
            merged.setdefault(k, set()).update(v)
        return Ontology(slots=merged)

    def to_dict(self) -> dict:
        return {
            "slots": [
                {"domain": d, "slot": s, "values": sorted(vals)}
                for (d, s), vals in sorted(self.slots.items())
            ]
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Ontology":
        return cls(
            slots={
                (e["domain"], e["slot"]): set(e["values"]) for e in payload["slots"]
            }
        )
