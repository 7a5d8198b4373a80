"""Dataset I/O and the synthetic multi-hop question generator.

One JSON object per line::

    {"id": "...", "question_tokens": [...], "triples": [[h, r, t], ...],
     "topic_entities": [...], "answers": [...]}

``id`` is optional on load. A dataset directory holds ``train.jsonl``,
``dev.jsonl``, ``test.jsonl`` and ``manifest.json``; vocabularies are built over
the splits in that order, first occurrence first.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graph import SubGraph, add_inverse_facts, build_dual_graph
from .model import PreparedGraph, prepare_graph

SPLITS = ("train", "dev", "test")
ENTITY_TOKEN = "<ent>"
REQUIRED_FIELDS = ("question_tokens", "triples", "topic_entities", "answers")


class DataError(ValueError):
    pass


@dataclass
class QAExample:
    question_tokens: list[str]
    triples: list[list[str]]
    topic_entities: list[str]
    answers: list[str]
    id: str = ""

    def to_json(self) -> str:
        obj = {"id": self.id} if self.id else {}
        obj.update(
            question_tokens=self.question_tokens,
            triples=self.triples,
            topic_entities=self.topic_entities,
            answers=self.answers,
        )
        return json.dumps(obj, separators=(",", ":"))


def _parse_line(line: str, lineno: int, path) -> QAExample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DataError(f"{path}:{lineno}: expected a JSON object")
    missing = [k for k in REQUIRED_FIELDS if k not in obj]
    if missing:
        raise DataError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
    for k in ("question_tokens", "topic_entities", "answers"):
        if not isinstance(obj[k], list) or not all(isinstance(x, str) for x in obj[k]):
            raise DataError(f"{path}:{lineno}: {k} must be a list of strings")
    triples = obj["triples"]
    if not isinstance(triples, list) or not all(
        isinstance(t, list) and len(t) == 3 and all(isinstance(x, str) for x in t) for t in triples
    ):
        raise DataError(f"{path}:{lineno}: triples must be [head, relation, tail] string lists")
    if not obj["question_tokens"]:
        raise DataError(f"{path}:{lineno}: empty question")
    if not obj["topic_entities"]:
        raise DataError(f"{path}:{lineno}: no topic entity")
    return QAExample(
        question_tokens=obj["question_tokens"],
        triples=[list(t) for t in triples],
        topic_entities=obj["topic_entities"],
        answers=obj["answers"],
        id=str(obj.get("id", "")),
    )


def load(path: str | Path) -> list[QAExample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    examples = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                examples.append(_parse_line(line, lineno, path))
    if not examples:
        raise DataError(f"{path}: no examples")
    return examples


def save(examples: Iterable[QAExample], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(ex.to_json() + "\n")


@dataclass
class Vocab:
    tokens: list[str] = field(default_factory=list)
    entities: list[str] = field(default_factory=list)
    relations: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.token_index = {t: i for i, t in enumerate(self.tokens)}
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}

    @classmethod
    def build(cls, examples: Iterable[QAExample]) -> "Vocab":
        tok: dict[str, None] = {}
        ent: dict[str, None] = {}
        rel: dict[str, None] = {}
        for ex in examples:
            tok.update(dict.fromkeys(ex.question_tokens))
            ent.update(dict.fromkeys(ex.topic_entities))
            for h, r, t in ex.triples:
                ent.setdefault(h)
                rel.setdefault(r)
                ent.setdefault(t)
            ent.update(dict.fromkeys(ex.answers))
        return cls([ENTITY_TOKEN] + [t for t in tok if t != ENTITY_TOKEN], list(ent), list(rel))

    def encode_tokens(self, tokens: Sequence[str]) -> np.ndarray:
        """Token ids with every entity mention replaced by the shared entity token."""
        ent = self.token_index[ENTITY_TOKEN]
        return np.array(
            [ent if t in self.entity_index else self.token_index[t] for t in tokens], dtype=np.intp
        )

    def relation_name(self, rid: int) -> str:
        n = len(self.relations)
        return self.relations[rid] if rid < n else self.relations[rid - n] + "^-1"


@dataclass
class Dataset:
    splits: dict[str, list[QAExample]]
    vocab: Vocab
    manifest: dict = field(default_factory=dict)

    def __getitem__(self, split: str) -> list[QAExample]:
        return self.splits[split]


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory}: not a dataset directory")
    splits = {s: load(directory / f"{s}.jsonl") for s in SPLITS if (directory / f"{s}.jsonl").exists()}
    if "train" not in splits:
        raise DataError(f"{directory}: train.jsonl is missing")
    manifest = {}
    if (directory / "manifest.json").exists():
        manifest = json.loads((directory / "manifest.json").read_text())
    vocab = Vocab.build(ex for s in SPLITS for ex in splits.get(s, ()))
    return Dataset(splits, vocab, manifest)


def save_dataset(dataset: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, examples in dataset.splits.items():
        save(examples, directory / f"{split}.jsonl")
    (directory / "manifest.json").write_text(json.dumps(dataset.manifest, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------- model instances


@dataclass
class Instance:
    example: QAExample
    token_ids: np.ndarray
    graph: PreparedGraph
    answers: np.ndarray  # local ids of gold answers present in the subgraph
    gold: frozenset  # global ids of all gold answers

    @property
    def subgraph(self) -> SubGraph:
        return self.graph.subgraph


def make_instance(
    ex: QAExample, vocab: Vocab, inverse_facts: bool = True, role_matched: bool = False
) -> Instance:
    if not ex.triples:
        raise DataError(f"question {ex.id or ex.question_tokens}: empty subgraph")
    local: dict[int, int] = {}
    for name in ex.topic_entities:
        local.setdefault(vocab.entity_index[name], len(local))
    facts = []
    for h, r, t in ex.triples:
        hi = local.setdefault(vocab.entity_index[h], len(local))
        ti = local.setdefault(vocab.entity_index[t], len(local))
        facts.append((hi, vocab.relation_index[r], ti))
    topics = [local[vocab.entity_index[n]] for n in dict.fromkeys(ex.topic_entities)]
    sg = SubGraph.from_facts(list(local), facts, topics, len(vocab.relations))
    if inverse_facts:
        sg = add_inverse_facts(sg)
    dg = build_dual_graph(sg, role_matched=role_matched)
    gold = frozenset(vocab.entity_index[a] for a in ex.answers)
    answers = np.array(sorted(local[g] for g in gold if g in local), dtype=np.intp)
    return Instance(
        example=ex,
        token_ids=vocab.encode_tokens(ex.question_tokens),
        graph=prepare_graph(sg, dg),
        answers=answers,
        gold=gold,
    )


def make_instances(examples: Sequence[QAExample], vocab: Vocab, **kw) -> list[Instance]:
    return [make_instance(ex, vocab, **kw) for ex in examples]


def statistics(examples: Sequence[QAExample]) -> dict:
    """Average subgraph sizes, counted the same way the tables of results are."""
    ents, facts, rels, answers = [], [], [], []
    for ex in examples:
        e = set(ex.topic_entities)
        for h, _, t in ex.triples:
            e.update((h, t))
        ents.append(len(e))
        facts.append(len(ex.triples))
        rels.append(len({r for _, r, _ in ex.triples}))
        answers.append(len(ex.answers))
    return {
        "questions": len(examples),
        "avg_entities": float(np.mean(ents)),
        "avg_facts": float(np.mean(facts)),
        "avg_relations": float(np.mean(rels)),
        "avg_answers": float(np.mean(answers)),
    }


# ---------------------------------------------------------------- synthetic generator


@dataclass
class SynthConfig:
    entities_per_question: int = 40
    entity_pool: int = 400
    num_relations: int = 8
    facts_per_question: int = 80
    hops: int = 2
    constraint_prob: float = 0.3
    max_answers: int = 5
    templates: tuple[str, ...] = ("which", "what is the")
    train: int = 500
    dev: int = 100
    test: int = 100
    seed: int = 0
    stress: bool = False
    max_retries: int = 1000

    def __post_init__(self):
        for name in ("entities_per_question", "entity_pool", "num_relations", "facts_per_question", "train"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.dev < 0 or self.test < 0:
            raise ValueError("split sizes must be nonnegative")
        if not 1 <= self.hops <= 3:
            raise ValueError(f"hops must be in 1..3, got {self.hops}")
        if self.entity_pool < self.entities_per_question:
            raise ValueError("entity_pool must be at least entities_per_question")
        if self.entities_per_question < 3:
            raise ValueError("need at least 3 entities per question")
        if self.stress and self.num_relations % 2:
            raise ValueError("stress mode pairs relations; num_relations must be even")
        if not 0.0 <= self.constraint_prob <= 1.0:
            raise ValueError("constraint_prob must lie in [0, 1]")


class GenerationError(RuntimeError):
    pass


def follow_path(facts: Iterable[tuple[int, int, int]], start: Iterable[int], path: Sequence[int]) -> set[int]:
    """Entities reached from ``start`` by following ``path`` relations head to tail."""
    out: dict[tuple[int, int], set[int]] = {}
    for h, r, t in facts:
        out.setdefault((h, r), set()).add(t)
    frontier = set(start)
    for r in path:
        frontier = set().union(*(out.get((e, r), set()) for e in frontier))
    return frontier


class _Generator:
    def __init__(self, cfg: SynthConfig):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed)

    def _add_fact(self, facts: set, h: int, r: int, t: int) -> None:
        facts.add((h, r, t))
        if self.cfg.stress:
            facts.add((t, r ^ 1, h))

    def _graph(self) -> tuple[np.ndarray, int, set]:
        cfg, rng = self.cfg, self.rng
        n = cfg.entities_per_question
        names = rng.choice(cfg.entity_pool, size=n, replace=False)
        topic = 0
        level = {topic: 0}
        facts: set[tuple[int, int, int]] = set()
        for e in range(1, n):
            parents = [p for p, lv in level.items() if lv < cfg.hops]
            p = parents[rng.integers(len(parents))]
            level[e] = level[p] + 1
            r = int(rng.integers(cfg.num_relations))
            if rng.random() < 0.5:
                self._add_fact(facts, p, r, e)
            else:
                self._add_fact(facts, e, r, p)
        attempts = 0
        while len(facts) < cfg.facts_per_question and attempts < 20 * cfg.facts_per_question:
            attempts += 1
            h, t = (int(x) for x in rng.choice(n, size=2, replace=False))
            self._add_fact(facts, h, int(rng.integers(cfg.num_relations)), t)
        return names, topic, facts

    def _walk(self, facts: set, topic: int) -> list[int] | None:
        out: dict[int, list[tuple[int, int]]] = {}
        for h, r, t in sorted(facts):
            out.setdefault(h, []).append((r, t))
        path, cur = [], topic
        for _ in range(self.cfg.hops):
            options = out.get(cur)
            if not options:
                return None
            r, cur = options[self.rng.integers(len(options))]
            path.append(r)
        return path

    def question(self, qid: str) -> QAExample:
        cfg, rng = self.cfg, self.rng
        for _ in range(cfg.max_retries):
            names, topic, facts = self._graph()
            path = self._walk(facts, topic)
            if path is None:
                continue
            answers = follow_path(facts, [topic], path)
            constraint = None
            if rng.random() < cfg.constraint_prob:
                anchor = sorted(answers)[rng.integers(len(answers))]
                others = [e for e in range(len(names)) if e != topic and e not in answers]
                if not others:
                    continue
                c = others[rng.integers(len(others))]
                rc = int(rng.integers(cfg.num_relations))
                self._add_fact(facts, anchor, rc, c)
                answers = follow_path(facts, [topic], path)
                answers &= {h for h, r, t in facts if r == rc and t == c}
                constraint = (rc, c)
            if not answers or topic in answers or len(answers) > cfg.max_answers:
                continue
            return self._render(qid, names, topic, facts, path, answers, constraint)
        raise GenerationError(f"could not sample a valid question after {cfg.max_retries} tries")

    def _render(self, qid, names, topic, facts, path, answers, constraint) -> QAExample:
        ent = lambda i: f"e{names[i]}"  # noqa: E731
        rel = lambda r: f"r{r}"  # noqa: E731
        template = self.cfg.templates[self.rng.integers(len(self.cfg.templates))]
        tokens = template.split()
        for k, r in enumerate(reversed(path)):
            if k:
                tokens.append("of")
            tokens.append(rel(r))
        tokens += ["of", ent(topic)]
        topics = [ent(topic)]
        if constraint is not None:
            rc, c = constraint
            tokens += ["with", rel(rc), ent(c)]
            topics.append(ent(c))
        order = self.rng.permutation(len(facts))
        fact_list = sorted(facts)
        triples = [[ent(fact_list[i][0]), rel(fact_list[i][1]), ent(fact_list[i][2])] for i in order]
        return QAExample(
            question_tokens=tokens,
            triples=triples,
            topic_entities=topics,
            answers=[ent(a) for a in sorted(answers)],
            id=qid,
        )


def generate(cfg: SynthConfig) -> Dataset:
    """Sample train/dev/test splits; every answer set is exact by exhaustive path search."""
    gen = _Generator(cfg)
    seen: set[str] = set()
    splits: dict[str, list[QAExample]] = {}
    for split, size in (("train", cfg.train), ("dev", cfg.dev), ("test", cfg.test)):
        items = []
        while len(items) < size:
            ex = gen.question(f"{split}-{len(items)}")
            key = json.dumps([ex.question_tokens, sorted(map(tuple, ex.triples))])
            if key in seen:
                continue
            seen.add(key)
            items.append(ex)
        splits[split] = items
    manifest = {"generator": "synthetic-multihop", "config": asdict(cfg)}
    vocab = Vocab.build(ex for s in SPLITS for ex in splits[s])
    return Dataset(splits, vocab, manifest)


def tiny_dataset() -> Dataset:
    """One 5-entity, 3-relation question; the default gradient-check instance."""
    ex = QAExample(
        question_tokens=["which", "r2", "of", "r0", "of", "a"],
        triples=[["a", "r0", "b"], ["b", "r2", "c"], ["a", "r1", "d"], ["d", "r2", "e"], ["c", "r1", "e"]],
        topic_entities=["a"],
        answers=["c"],
        id="tiny-0",
    )
    return Dataset({"train": [ex]}, Vocab.build([ex]), {"generator": "tiny"})
