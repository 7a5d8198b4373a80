"""Knowledge graphs, question subgraphs, and the relation-level dual graph."""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np


class GraphError(ValueError):
    pass


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    entities: list[str]
    relations: list[str]
    triples: list[Triple]
    by_head: dict[int, list[int]] = field(init=False)
    by_tail: dict[int, list[int]] = field(init=False)

    def __post_init__(self):
        n_ent, n_rel = len(self.entities), len(self.relations)
        self.by_head = defaultdict(list)
        self.by_tail = defaultdict(list)
        for i, (h, r, t) in enumerate(self.triples):
            if not (0 <= h < n_ent and 0 <= t < n_ent):
                raise GraphError(f"triple {i} has an entity id outside [0, {n_ent})")
            if not 0 <= r < n_rel:
                raise GraphError(f"triple {i} has a relation id outside [0, {n_rel})")
            self.by_head[h].append(i)
            self.by_tail[t].append(i)

    @classmethod
    def from_named(cls, triples: Iterable[tuple[str, str, str]]) -> "KnowledgeGraph":
        ent: dict[str, int] = {}
        rel: dict[str, int] = {}
        ids = []
        for h, r, t in triples:
            hi = ent.setdefault(h, len(ent))
            ri = rel.setdefault(r, len(rel))
            ti = ent.setdefault(t, len(ent))
            ids.append(Triple(hi, ri, ti))
        return cls(list(ent), list(rel), ids)

    def neighbors(self, e: int) -> set[int]:
        out = {self.triples[i].tail for i in self.by_head.get(e, ())}
        out.update(self.triples[i].head for i in self.by_tail.get(e, ()))
        return out


@dataclass(frozen=True)
class SubGraph:
    """Question-specific entity graph in local ids.

    ``entities[i]`` is the global id of local entity ``i``. Fact heads/tails are
    local ids, relations stay global. ``num_relations`` is the size of the base
    relation vocabulary; inverse facts use ids ``r + num_relations``.
    """

    entities: tuple[int, ...]
    heads: tuple[int, ...]
    relations: tuple[int, ...]
    tails: tuple[int, ...]
    topics: tuple[int, ...]
    num_relations: int
    inverse_augmented: bool = False

    def __post_init__(self):
        n = len(self.entities)
        if not (len(self.heads) == len(self.relations) == len(self.tails)):
            raise GraphError("fact arrays differ in length")
        for h, t in zip(self.heads, self.tails):
            if not (0 <= h < n and 0 <= t < n):
                raise GraphError(f"fact endpoint ({h}, {t}) outside the {n} local entities")
        if any(not 0 <= t < n for t in self.topics):
            raise GraphError("topic entity outside the local entity list")

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_facts(self) -> int:
        return len(self.heads)

    def facts(self) -> list[Triple]:
        return [Triple(*f) for f in zip(self.heads, self.relations, self.tails)]

    def relation_ids(self) -> list[int]:
        return sorted(set(self.relations))

    @classmethod
    def from_facts(
        cls,
        entities: Sequence[int],
        facts: Iterable[tuple[int, int, int]],
        topics: Sequence[int],
        num_relations: int,
    ) -> "SubGraph":
        facts = list(facts)
        return cls(
            entities=tuple(entities),
            heads=tuple(f[0] for f in facts),
            relations=tuple(f[1] for f in facts),
            tails=tuple(f[2] for f in facts),
            topics=tuple(topics),
            num_relations=num_relations,
        )


def extract_subgraph(kg: KnowledgeGraph, topics: Sequence[int], n: int) -> SubGraph:
    """Entities within ``n`` undirected hops of any topic, plus every fact among them.

    Local order is BFS discovery order (topics first, neighbors by ascending id).
    """
    if not topics:
        raise GraphError("at least one topic entity is required")
    if n < 0:
        raise GraphError(f"hop count must be >= 0, got {n}")
    for t in topics:
        if not 0 <= t < len(kg.entities):
            raise GraphError(f"unknown topic entity id {t}")
    dist = {}
    order = []
    queue = deque()
    for t in topics:
        if t not in dist:
            dist[t] = 0
            order.append(t)
            queue.append(t)
    while queue:
        e = queue.popleft()
        if dist[e] == n:
            continue
        for nb in sorted(kg.neighbors(e)):
            if nb not in dist:
                dist[nb] = dist[e] + 1
                order.append(nb)
                queue.append(nb)
    local = {g: i for i, g in enumerate(order)}
    facts = [(local[h], r, local[t]) for h, r, t in kg.triples if h in local and t in local]
    return SubGraph.from_facts(order, facts, [local[t] for t in dict.fromkeys(topics)], len(kg.relations))


def add_inverse_facts(sg: SubGraph) -> SubGraph:
    """Append ``(t, r + |R|, h)`` for every fact ``(h, r, t)``."""
    if sg.inverse_augmented:
        raise GraphError("subgraph already carries inverse facts")
    shift = sg.num_relations
    return SubGraph(
        entities=sg.entities,
        heads=sg.heads + sg.tails,
        relations=sg.relations + tuple(r + shift for r in sg.relations),
        tails=sg.tails + sg.heads,
        topics=sg.topics,
        num_relations=sg.num_relations,
        inverse_augmented=True,
    )


@dataclass(frozen=True)
class DualGraph:
    """Relation types as nodes; ``adjacency[i, j]`` when they share an entity.

    ``relations`` is ascending; ``fact_node[f]`` maps subgraph fact ``f`` to its
    node index. The diagonal is always set.
    """

    relations: tuple[int, ...]
    adjacency: np.ndarray
    head_sets: tuple[frozenset, ...]
    tail_sets: tuple[frozenset, ...]
    fact_node: np.ndarray
    role_matched: bool = False

    @property
    def num_nodes(self) -> int:
        return len(self.relations)

    def entity_set(self, i: int) -> frozenset:
        return self.head_sets[i] | self.tail_sets[i]

    def edges(self) -> list[tuple[int, int]]:
        """Undirected edges (i < j) between distinct nodes, by node index."""
        ii, jj = np.nonzero(np.triu(self.adjacency, k=1))
        return list(zip(ii.tolist(), jj.tolist()))


def build_dual_graph(sg: SubGraph, role_matched: bool = False) -> DualGraph:
    """Connect relation types that share an entity.

    By default any shared entity counts, whatever its role. With
    ``role_matched`` two relations are linked only when they share a head
    entity or share a tail entity.
    """
    if sg.num_facts == 0:
        raise GraphError("cannot build a dual graph from a subgraph with no facts")
    rels = sg.relation_ids()
    index = {r: i for i, r in enumerate(rels)}
    k, n = len(rels), sg.num_entities
    heads = np.zeros((k, n), dtype=bool)
    tails = np.zeros((k, n), dtype=bool)
    fact_node = np.array([index[r] for r in sg.relations], dtype=np.intp)
    heads[fact_node, np.asarray(sg.heads)] = True
    tails[fact_node, np.asarray(sg.tails)] = True
    if role_matched:
        hi = heads.astype(np.int64)
        ti = tails.astype(np.int64)
        adj = (hi @ hi.T + ti @ ti.T) > 0
    else:
        pooled = (heads | tails).astype(np.int64)
        adj = (pooled @ pooled.T) > 0
    np.fill_diagonal(adj, True)
    adj.setflags(write=False)
    return DualGraph(
        relations=tuple(rels),
        adjacency=adj,
        head_sets=tuple(frozenset(np.flatnonzero(row).tolist()) for row in heads),
        tail_sets=tuple(frozenset(np.flatnonzero(row).tolist()) for row in tails),
        fact_node=fact_node,
        role_matched=role_matched,
    )


def cooccurrence_weights(dg: DualGraph) -> dict[tuple[int, int], float]:
    """Jaccard overlap of pooled head/tail entity sets for every dual edge.

    Keys are relation ids, both orientations plus self-loops. Raw (unnormalized)
    values; see :func:`cooccurrence_matrix` for the row-normalized form.
    """
    sets = [dg.entity_set(i) for i in range(dg.num_nodes)]
    out = {}
    for i, j in zip(*np.nonzero(dg.adjacency)):
        a, b = sets[i], sets[j]
        out[(dg.relations[i], dg.relations[j])] = len(a & b) / len(a | b)
    return out


def cooccurrence_matrix(dg: DualGraph) -> np.ndarray:
    """Dense node-indexed Jaccard weights with each row normalized to sum to 1."""
    k = dg.num_nodes
    w = np.zeros((k, k))
    sets = [dg.entity_set(i) for i in range(k)]
    for i, j in zip(*np.nonzero(dg.adjacency)):
        a, b = sets[i], sets[j]
        w[i, j] = len(a & b) / len(a | b)
    return w / w.sum(axis=1, keepdims=True)
