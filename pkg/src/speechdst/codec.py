"""Conversion between (transcript, state) pairs and the JSON target string.

The model is trained to emit one JSON object with exactly two keys::

    {"transcript": "<asr transcription>", "state": {"<domain>": {"<slot>": "<value>", ...}, ...}}

Serialization is canonical (keys in fixed order, domains and slots sorted,
no insignificant whitespace) so that each (transcript, state) pair has a
unique target string. Decoding is tolerant: it accepts the first complete
JSON object in the text and ignores anything generated after it, and it
never raises on malformed input -- it returns a :class:`ParseFailure`
carrying whatever partial state could be scavenged.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .states import DialogueState, normalize_state

TRANSCRIPT_KEY = "transcript"
STATE_KEY = "state"

# failure reasons
TRUNCATED = "truncated"
INVALID_JSON = "invalid-json"
WRONG_SCHEMA = "wrong-schema"


@dataclass
class ParseFailure:
    """Value (not exception) describing an undecodable model output."""

    reason: str  # truncated | invalid-json | wrong-schema
    raw: str = ""
    partial_transcript: str = ""
    partial_state: DialogueState = field(default_factory=dict)


def encode_target(transcript: str, state: DialogueState) -> str:
    """Serialize a (transcript, state) pair into the canonical target string."""
    state = normalize_state(state)
    payload = {
        TRANSCRIPT_KEY: transcript,
        STATE_KEY: {d: {s: state[d][s] for s in sorted(state[d])} for d in sorted(state)},
    }
    return json.dumps(payload, separators=(",", ":"), ensure_ascii=False)


_TRANSCRIPT_RE = re.compile(r'"transcript"\s*:\s*"((?:[^"\\]|\\.)*)"')
_DOMAIN_BLOCK_RE = re.compile(r'"((?:[^"\\]|\\.)+)"\s*:\s*\{((?:[^{}]|\\.)*)')
_PAIR_RE = re.compile(r'"((?:[^"\\]|\\.)+)"\s*:\s*"((?:[^"\\]|\\.)*)"')


def _unescape(s: str) -> str:
    try:
        return json.loads(f'"{s}"')
    except Exception:
        return s


def _scavenge_state(raw: str) -> DialogueState:
    """Best-effort recovery of domain/slot/value triples from broken output."""
    region = raw
    m = re.search(r'"state"\s*:', raw)
    if m:
        region = raw[m.end():]
    state: DialogueState = {}
    for dm in _DOMAIN_BLOCK_RE.finditer(region):
        domain, body = _unescape(dm.group(1)), dm.group(2)
        for pm in _PAIR_RE.finditer(body):
            state.setdefault(domain, {})[_unescape(pm.group(1))] = _unescape(pm.group(2))
    return normalize_state(state)


def _scavenge_transcript(raw: str) -> str:
    m = _TRANSCRIPT_RE.search(raw)
    return _unescape(m.group(1)) if m else ""


def _failure(reason: str, raw: str) -> ParseFailure:
    return ParseFailure(
        reason=reason,
        raw=raw,
        partial_transcript=_scavenge_transcript(raw),
        partial_state=_scavenge_state(raw),
    )


def decode_output(raw: str) -> tuple[str, DialogueState] | ParseFailure:
    """Parse a model output string back into (transcript, state).

    Accepts the first complete JSON object found in ``raw`` (trailing
    generated garbage is ignored). Never raises: malformed input yields a
    ParseFailure whose reason is one of ``truncated`` (output stopped before
    the object closed), ``invalid-json`` or ``wrong-schema``."""
    if not isinstance(raw, str):
        return ParseFailure(reason=INVALID_JSON, raw=repr(raw))
    start = raw.find("{")
    if start < 0:
        return _failure(INVALID_JSON, raw)
    fragment = raw[start:]
    try:
        obj, _ = json.JSONDecoder().raw_decode(fragment)
    except json.JSONDecodeError as err:
        # error at (or past) the end of the text means the object never closed;
        # an unterminated string reports its position at the string start
        truncated = err.pos >= len(fragment.rstrip()) or err.msg.startswith("Unterminated string")
        return _failure(TRUNCATED if truncated else INVALID_JSON, raw)
    except (RecursionError, ValueError):
        return _failure(INVALID_JSON, raw)

    if not isinstance(obj, dict) or set(obj.keys()) != {TRANSCRIPT_KEY, STATE_KEY}:
        return _failure(WRONG_SCHEMA, raw)
    transcript, state = obj[TRANSCRIPT_KEY], obj[STATE_KEY]
    if not isinstance(transcript, str) or not isinstance(state, dict):
        return _failure(WRONG_SCHEMA, raw)

    decoded: DialogueState = {}
    for domain, slots in state.items():
        if not isinstance(domain, str) or not isinstance(slots, dict):
            return _failure(WRONG_SCHEMA, raw)
        for slot, value in slots.items():
            if not isinstance(slot, str):
                return _failure(WRONG_SCHEMA, raw)
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                value = str(value)  # tolerate numeric slot values
            if not isinstance(value, str):
                return _failure(WRONG_SCHEMA, raw)
            decoded.setdefault(domain, {})[slot] = value
    return transcript, normalize_state(decoded)
