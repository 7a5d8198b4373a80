"""Hits@1, F1, TransE-consistency score and quantile-group tables."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

QUANTILE_KEYS = ("relation-count", "fact-count", "relation/entity", "fact/entity")
GROUP_LABELS = ("0-0.25", "0.25-0.5", "0.5-0.75", "0.75-1")


def hits_at_1(p, answers: Iterable[int]) -> int:
    """1 if the argmax entity is a gold answer. Ties go to the lowest entity id."""
    answers = set(answers)
    if not answers:
        raise ValueError("hits_at_1 needs a nonempty answer set")
    return int(int(np.argmax(np.asarray(p))) in answers)


def f1(predicted: Iterable, answers: Iterable) -> float:
    predicted, answers = set(predicted), set(answers)
    if not predicted or not answers:
        return 0.0
    tp = len(predicted & answers)
    if tp == 0:
        return 0.0
    precision = tp / len(predicted)
    recall = tp / len(answers)
    return 2 * precision * recall / (precision + recall)


def select_answers(p, tau: float = 0.5) -> set[int]:
    """Entities whose probability is at least ``tau`` times the maximum."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    p = np.asarray(p)
    return set(np.flatnonzero(p >= tau * p.max()).tolist())


def transe_score(relations: np.ndarray, entities: np.ndarray, heads, rels, tails) -> float:
    """Mean over facts of |<r, e_tail - e_head>| divided by the dimension.

    ``rels`` indexes rows of ``relations``; ``heads``/``tails`` rows of ``entities``.
    """
    relations = np.asarray(relations)
    entities = np.asarray(entities)
    diff = entities[np.asarray(tails)] - entities[np.asarray(heads)]
    dots = np.abs(np.einsum("ij,ij->i", relations[np.asarray(rels)], diff))
    return float(dots.mean() / relations.shape[1]) if len(dots) else 0.0


def state_transe_score(state, graph) -> float:
    """Score of one question from its final entity and relation embeddings."""
    return transe_score(
        state.relations[-1].data, state.entities[-1].data, graph.heads, graph.fact_node, graph.tails
    )


@dataclass
class QuestionRecord:
    qid: str
    hits: int
    f1: float
    num_entities: int
    num_relations: int
    num_facts: int
    transe: float = 0.0

    def key(self, name: str) -> float:
        if name == "relation-count":
            return self.num_relations
        if name == "fact-count":
            return self.num_facts
        if name == "relation/entity":
            return self.num_relations / self.num_entities
        if name == "fact/entity":
            return self.num_facts / self.num_entities
        raise ValueError(f"unknown quantile key {name!r}; expected one of {QUANTILE_KEYS}")


def quantile_groups(records: Sequence[QuestionRecord], key: str) -> list[list[QuestionRecord]]:
    """Four equal-count groups ordered by ``key``; ties keep question order."""
    if len(records) < 4:
        raise ValueError("quantile grouping needs at least 4 questions")
    values = [r.key(key) for r in records]
    order = sorted(range(len(records)), key=lambda i: (values[i], i))
    return [[records[i] for i in chunk] for chunk in np.array_split(order, 4)]


def quantile_report(records: Sequence[QuestionRecord], key: str, field: str = "f1") -> dict:
    groups = quantile_groups(records, key)
    return {
        "key": key,
        "metric": field,
        "groups": [
            {
                "quantile": label,
                "size": len(g),
                "mean": float(np.mean([getattr(r, field) for r in g])),
            }
            for label, g in zip(GROUP_LABELS, groups)
        ],
    }


@dataclass
class EvalSummary:
    hits_at_1: float
    f1: float
    transe_score: float
    questions: int

    def to_dict(self) -> dict:
        return asdict(self)


def summarize(records: Sequence[QuestionRecord]) -> EvalSummary:
    if not records:
        raise ValueError("no records to summarize")
    return EvalSummary(
        hits_at_1=float(np.mean([r.hits for r in records])),
        f1=float(np.mean([r.f1 for r in records])),
        transe_score=float(np.mean([r.transe for r in records])),
        questions=len(records),
    )


def format_table(header: Sequence[str], rows: Sequence[Sequence], floatfmt: str = ".4f") -> str:
    """Aligned plain-text table; floats are formatted with ``floatfmt``."""
    cells = [[str(h) for h in header]]
    for row in rows:
        cells.append([format(v, floatfmt) if isinstance(v, float) else str(v) for v in row])
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = []
    for n, row in enumerate(cells):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))))
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def quantile_table(records: Sequence[QuestionRecord], field: str = "f1") -> str:
    rows = []
    for key in QUANTILE_KEYS:
        rep = quantile_report(records, key, field)
        rows.append([key] + [g["mean"] for g in rep["groups"]])
    return format_table(["group by"] + list(GROUP_LABELS), rows)


def records_to_json(records: Sequence[QuestionRecord]) -> str:
    return json.dumps([asdict(r) for r in records])
