"""Deterministic synthetic multi-domain corpora: templated dialogues with
cumulative gold states, pseudo-acoustic frames for spoken domains, and plain
utterance corpora for ASR pretraining.

"Speech" here is template-embedding pseudo-audio: every word maps to a fixed
seed-derived feature vector repeated ``frames_per_token`` times plus seeded
Gaussian noise. The downstream pipeline only sees feature frames, so this
stands in for a real encoder's output at desk scale.
"""

from __future__ import annotations

import hashlib
import random
import string
from dataclasses import dataclass, field

import numpy as np

from .corpora import ASRCorpus, SpokenDSTCorpus, TextDSTCorpus
from .states import Dialogue, DialogueState, Ontology, Turn, copy_state, normalize_state

DEFAULT_USER_TEMPLATES = [
    "i want the {slot} to be {value}",
    "please set the {slot} to {value}",
    "make the {slot} {value}",
    "the {slot} should be {value}",
]
DEFAULT_AGENT_TEMPLATES = [
    "ok the {slot} is {value}",
    "noted , {slot} {value}",
    "done , i set the {slot} to {value}",
]

_ALLOWED_PLACEHOLDERS = {"slot", "value", "domain"}


class SynthConfigError(ValueError):
    pass


def _check_templates(templates: list[str], where: str) -> None:
    formatter = string.Formatter()
    for tpl in templates:
        for _, name, _, _ in formatter.parse(tpl):
            if name is not None and name not in _ALLOWED_PLACEHOLDERS:
                raise SynthConfigError(
                    f"{where}: template {tpl!r} references unknown placeholder {name!r} "
                    f"(allowed: {sorted(_ALLOWED_PLACEHOLDERS)})"
                )


@dataclass
class DomainSpec:
    name: str
    slots: dict[str, list[str]]
    user_templates: list[str] = field(default_factory=lambda: list(DEFAULT_USER_TEMPLATES))
    agent_templates: list[str] = field(default_factory=lambda: list(DEFAULT_AGENT_TEMPLATES))

    def __post_init__(self):
        if not self.slots or any(not vals for vals in self.slots.values()):
            raise SynthConfigError(f"domain {self.name!r}: every slot needs a non-empty value list")
        _check_templates(self.user_templates, f"domain {self.name!r} user templates")
        _check_templates(self.agent_templates, f"domain {self.name!r} agent templates")


@dataclass
class SynthConfig:
    domains: list[DomainSpec]
    speech_domains: list[str] = field(default_factory=list)
    text_domains: list[str] = field(default_factory=list)
    n_dialogues: int = 80
    turns_per_dialogue: int = 3  # user turns per dialogue
    frames_per_token: int = 3
    noise_std: float = 0.1
    d_enc: int = 24
    seed: int = 0

    def __post_init__(self):
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise SynthConfigError(f"duplicate domain names in {names}")
        for dn in list(self.speech_domains) + list(self.text_domains):
            if dn not in names:
                raise SynthConfigError(f"unknown domain {dn!r} (have {names})")
        if self.n_dialogues < 1 or self.turns_per_dialogue < 1:
            raise SynthConfigError("n_dialogues and turns_per_dialogue must be >= 1")
        if self.frames_per_token < 1:
            raise SynthConfigError("frames_per_token must be >= 1")

    def domain(self, name: str) -> DomainSpec:
        return next(d for d in self.domains if d.name == name)


def _stable_rng(*parts) -> np.random.Generator:
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def token_template(seed: int, token: str, d_enc: int) -> np.ndarray:
    """The fixed per-token feature vector every occurrence of ``token`` maps to."""
    return _stable_rng(seed, "tok", token).standard_normal(d_enc).astype(np.float32)


def synthesize_frames(transcript: str, cfg: SynthConfig) -> np.ndarray:
    """Deterministic pseudo-speech for a transcript: per-token templates
    repeated frames_per_token times plus seeded Gaussian noise. Shape
    (frames_per_token * n_tokens, d_enc)."""
    tokens = transcript.split()
    if not tokens:
        raise ValueError("cannot synthesize frames for an empty transcript")
    base = np.concatenate(
        [np.tile(token_template(cfg.seed, tok, cfg.d_enc), (cfg.frames_per_token, 1)) for tok in tokens]
    )
    if cfg.noise_std > 0:
        noise = _stable_rng(cfg.seed, "noise", transcript).standard_normal(base.shape)
        base = base + cfg.noise_std * noise.astype(np.float32)
    return base.astype(np.float32)


def _generate_dialogue(
    cfg: SynthConfig, domain: DomainSpec, dialogue_id: str, rng: random.Random, spoken: bool
) -> Dialogue:
    slot_order = sorted(domain.slots)
    rng.shuffle(slot_order)
    state: DialogueState = {}
    turns: list[Turn] = []
    for k in range(cfg.turns_per_dialogue):
        slot = slot_order[k] if k < len(slot_order) else rng.choice(slot_order)
        value = rng.choice(domain.slots[slot])
        state.setdefault(domain.name, {})[slot] = value
        utterance = rng.choice(domain.user_templates).format(
            slot=slot, value=value, domain=domain.name
        )
        turns.append(
            Turn(
                speaker="user",
                transcript=utterance,
                frames=synthesize_frames(utterance, cfg) if spoken else None,
                gold_state=normalize_state(copy_state(state)),
            )
        )
        if k < cfg.turns_per_dialogue - 1:
            reply = rng.choice(domain.agent_templates).format(
                slot=slot, value=value, domain=domain.name
            )
            turns.append(Turn(speaker="agent", transcript=reply))
    return Dialogue(dialogue_id=dialogue_id, domain_tags={domain.name}, turns=turns)


def _used_ontology(dialogues: list[Dialogue]) -> dict[tuple[str, str], set[str]]:
    slots: dict[tuple[str, str], set[str]] = {}
    for d in dialogues:
        for t in d.user_turns():
            for dom, ss in (t.gold_state or {}).items():
                for slot, value in ss.items():
                    slots.setdefault((dom, slot), set()).add(value)
    return slots


def generate_corpus(cfg: SynthConfig) -> tuple[SpokenDSTCorpus, dict[str, TextDSTCorpus], Ontology]:
    """Build the spoken corpus (all speech domains pooled), one text corpus per
    text domain, and the ontology of exactly the values used. Seed-deterministic."""
    spoken_dialogues: list[Dialogue] = []
    for name in cfg.speech_domains:
        rng = random.Random(_stable_rng(cfg.seed, "dlg", "speech", name).integers(2**63))
        for i in range(cfg.n_dialogues):
            spoken_dialogues.append(
                _generate_dialogue(cfg, cfg.domain(name), f"{name}-s{i:04d}", rng, spoken=True)
            )
    text_corpora: dict[str, TextDSTCorpus] = {}
    for name in cfg.text_domains:
        rng = random.Random(_stable_rng(cfg.seed, "dlg", "text", name).integers(2**63))
        dialogues = [
            _generate_dialogue(cfg, cfg.domain(name), f"{name}-t{i:04d}", rng, spoken=False)
            for i in range(cfg.n_dialogues)
        ]
        corpus = TextDSTCorpus(dialogues)
        corpus.validate()
        text_corpora[name] = corpus
    spoken = SpokenDSTCorpus(spoken_dialogues)
    if spoken_dialogues:
        spoken.validate()
    all_dialogues = spoken_dialogues + [d for c in text_corpora.values() for d in c.dialogues]
    return spoken, text_corpora, Ontology(slots=_used_ontology(all_dialogues))


def config_lexicon(cfg: SynthConfig) -> list[str]:
    """Every word the config can emit: template words, slot names, values."""
    words: set[str] = set()
    for dom in cfg.domains:
        for tpl in dom.user_templates + dom.agent_templates:
            rendered = tpl.format(slot="", value="", domain="")
            words.update(w for w in rendered.split() if w)
        for slot, values in dom.slots.items():
            words.update(slot.split())
            for v in values:
                words.update(v.split())
        words.update(dom.name.split())
    return sorted(words)


def generate_asr_corpus(
    lexicon: list[str],
    n_utterances: int,
    cfg: SynthConfig,
    min_words: int = 3,
    max_words: int = 8,
    seed: int | None = None,
) -> ASRCorpus:
    """Random word sequences over a lexicon, with synthesized frames; the
    diverse transcription data used for connector pretraining."""
    if not lexicon:
        raise ValueError("empty lexicon")
    rng = random.Random(seed if seed is not None else cfg.seed)
    utterances = []
    for _ in range(n_utterances):
        n = rng.randint(min_words, max_words)
        text = " ".join(rng.choice(lexicon) for _ in range(n))
        utterances.append((text, synthesize_frames(text, cfg)))
    return ASRCorpus(utterances)
