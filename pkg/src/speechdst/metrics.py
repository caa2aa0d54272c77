"""Post-processing and scoring: fuzzy ontology matching, joint goal accuracy,
per-slot-key recall and value-recall-given-key."""

from __future__ import annotations

from dataclasses import dataclass, field

from .codec import ParseFailure
from .states import DialogueState, Ontology, states_equal

DEFAULT_FUZZY_THRESHOLD = 0.9


def levenshtein(a: str, b: str) -> int:
    """Plain edit distance (insert/delete/substitute, all cost 1)."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def similarity(a: str, b: str) -> float:
    """Normalized similarity 1 - lev(a, b) / max(|a|, |b|), in [0, 1]."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(a, b) / longest


def fuzzy_match(value: str, candidates: set[str], threshold: float = DEFAULT_FUZZY_THRESHOLD) -> str:
    """Snap ``value`` to the most similar candidate if similarity reaches the
    threshold, else return it unchanged. Ties break to the lexicographically
    smallest candidate. An empty candidate set leaves the value unchanged."""
    if not candidates:
        return value
    best_value, best_sim = value, -1.0
    for cand in sorted(candidates):
        sim = similarity(value, cand)
        if sim > best_sim:
            best_value, best_sim = cand, sim
    return best_value if best_sim >= threshold else value


def postprocess_state(
    state: DialogueState, ontology: Ontology, threshold: float = DEFAULT_FUZZY_THRESHOLD
) -> DialogueState:
    """Fuzzy-match every value against the ontology inventory of its
    (domain, slot); slots the ontology does not constrain pass through."""
    out: DialogueState = {}
    for domain, slots in state.items():
        for slot, value in slots.items():
            candidates = ontology.values_for(domain, slot)
            if candidates:
                value = fuzzy_match(value, candidates, threshold)
            out.setdefault(domain, {})[slot] = value
    return out


Prediction = DialogueState | ParseFailure


def _check_lengths(preds: list, golds: list) -> None:
    if len(preds) != len(golds):
        raise ValueError(f"pred/gold length mismatch: {len(preds)} vs {len(golds)} (corpus misalignment)")


def joint_goal_accuracy(preds: list[Prediction], golds: list[DialogueState]) -> float:
    """Fraction of turns whose whole predicted state exactly matches the gold
    state. A ParseFailure counts as incorrect, never as excluded."""
    _check_lengths(preds, golds)
    if not golds:
        return 0.0
    hits = sum(
        1 for p, g in zip(preds, golds) if not isinstance(p, ParseFailure) and states_equal(p, g)
    )
    return hits / len(golds)


@dataclass
class EvalReport:
    jga: float
    n_turns: int
    per_key_recall: dict[tuple[str, str], float] = field(default_factory=dict)
    value_recall_given_key: dict[tuple[str, str], float] = field(default_factory=dict)
    parse_failure_rate: float = 0.0

    def to_dict(self) -> dict:
        flatten = lambda m: {f"{d}: {s}": round(v, 6) for (d, s), v in sorted(m.items())}
        return {
            "jga": round(self.jga, 6),
            "n_turns": self.n_turns,
            "per_key_recall": flatten(self.per_key_recall),
            "value_recall_given_key": flatten(self.value_recall_given_key),
            "parse_failure_rate": round(self.parse_failure_rate, 6),
        }

    def format_table(self) -> str:
        lines = [
            f"turns scored        {self.n_turns}",
            f"joint goal accuracy {self.jga:.4f}",
            f"parse failure rate  {self.parse_failure_rate:.4f}",
            "",
            f"{'slot key':<32}{'key recall':>12}{'value|key':>12}",
        ]
        for key in sorted(self.per_key_recall):
            domain, slot = key
            lines.append(
                f"{domain + ': ' + slot:<32}"
                f"{self.per_key_recall[key]:>12.4f}"
                f"{self.value_recall_given_key[key]:>12.4f}"
            )
        return "\n".join(lines)


def recall_report(preds: list[Prediction], golds: list[DialogueState]) -> EvalReport:
    """Score a corpus: JGA plus, per (domain, slot) key appearing in any gold
    state, the recall of the key and the value accuracy among recalled keys.

    value_recall_given_key is 0.0 for keys the predictions never recalled."""
    _check_lengths(preds, golds)
    gold_count: dict[tuple[str, str], int] = {}
    key_hits: dict[tuple[str, str], int] = {}
    value_hits: dict[tuple[str, str], int] = {}
    failures = 0
    for pred, gold in zip(preds, golds):
        failed = isinstance(pred, ParseFailure)
        failures += failed
        pred_state: DialogueState = {} if failed else pred
        for domain, slots in gold.items():
            for slot, value in slots.items():
                key = (domain, slot)
                gold_count[key] = gold_count.get(key, 0) + 1
                if domain in pred_state and slot in pred_state[domain]:
                    key_hits[key] = key_hits.get(key, 0) + 1
                    if pred_state[domain][slot] == value:
                        value_hits[key] = value_hits.get(key, 0) + 1
    per_key = {k: key_hits.get(k, 0) / n for k, n in gold_count.items()}
    value_given_key = {
        k: (value_hits.get(k, 0) / key_hits[k]) if key_hits.get(k) else 0.0 for k in gold_count
    }
    return EvalReport(
        jga=joint_goal_accuracy(preds, golds),
        n_turns=len(golds),
        per_key_recall=per_key,
        value_recall_given_key=value_given_key,
        parse_failure_rate=failures / len(golds) if golds else 0.0,
    )
