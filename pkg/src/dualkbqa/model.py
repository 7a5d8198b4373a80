"""Iterative entity-graph / relation-graph reasoner.

Each reasoning step runs, in order: instruction generation, entity-graph
message passing under the instruction, relation-graph attention propagation,
entity-aware relation update (tail minus head, averaged per relation type),
relation-aware entity update (separate head/tail projections), decoding to an
entity distribution, and gated instruction adaption from the topic entities.

Weights use the row-vector convention ``x @ W``; a concatenation ``[a; b]``
fed to a weight is ``concat([a, b]) @ W`` with ``W`` of shape ``(2d, d)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import DualGraph, SubGraph, build_dual_graph, cooccurrence_matrix
from .optim import ParameterStore

ENTITY_INIT_MODES = ("relation-derived", "lookup")
DUAL_MODES = ("attention", "cooc")
FOCAL_EPS = 1e-12
# weights feeding a logistic unit start 4x wider (Glorot-style gain for sigmoid)
SIGMOID_GAIN = 4.0


@dataclass
class ModelConfig:
    num_tokens: int
    num_relations: int
    num_entities: int = 0
    hidden: int = 128
    steps: int = 3
    gamma: float = 2.0
    entity_init: str = "relation-derived"
    dual_mode: str = "attention"
    disable_dual_propagation: bool = False
    disable_interaction: bool = False
    inverse_facts: bool = True
    role_matched_dual: bool = False

    def __post_init__(self):
        if self.hidden < 1:
            raise ValueError(f"hidden size must be >= 1, got {self.hidden}")
        if self.steps < 1:
            raise ValueError(f"reasoning steps must be >= 1, got {self.steps}")
        if self.gamma < 0:
            raise ValueError(f"focal gamma must be >= 0, got {self.gamma}")
        if self.entity_init not in ENTITY_INIT_MODES:
            raise ValueError(f"entity_init must be one of {ENTITY_INIT_MODES}")
        if self.dual_mode not in DUAL_MODES:
            raise ValueError(f"dual_mode must be one of {DUAL_MODES}")
        if self.entity_init == "lookup" and self.num_entities < 1:
            raise ValueError("lookup entity init needs num_entities")

    @property
    def relation_table_size(self) -> int:
        return self.num_relations * (2 if self.inverse_facts else 1)

    def to_dict(self) -> dict:
        return asdict(self)


def init_parameters(config: ModelConfig, seed: int = 0) -> ParameterStore:
    d = config.hidden
    s = ParameterStore(seed=seed)
    s.weight("token_emb", (config.num_tokens, d), fan_in=1)
    s.weight("relation_emb", (config.relation_table_size, d), fan_in=1)
    if config.entity_init == "lookup":
        s.weight("entity_emb", (config.num_entities, d), fan_in=1)
    else:
        s.weight("entity.W_init", (d, d))
    for gate in ("z", "r", "n"):
        s.weight(f"enc.W_{gate}", (d, d), gain=SIGMOID_GAIN if gate != "n" else 1.0)
        s.weight(f"enc.U_{gate}", (d, d), gain=SIGMOID_GAIN if gate != "n" else 1.0)
        s.bias(f"enc.b_{gate}", d)
    for k in range(1, config.steps + 1):
        s.weight(f"instr.W{k}", (2 * d, d))
        s.bias(f"instr.b{k}", d)
    s.weight("instr.W_alpha", (d,))
    s.weight("primal.W_R", (d, d), gain=SIGMOID_GAIN)
    _mlp_params(s, "primal.mlp", 2 * d, d)
    s.weight("dual.W_att", (d, d))
    s.weight("dual.W_r", (2 * d, d), gain=SIGMOID_GAIN)
    s.bias("dual.b_r", d)
    s.weight("inter.W_e", (2 * d, d), gain=SIGMOID_GAIN)
    s.bias("inter.b_e", d)
    s.weight("inter.W_head", (d, d))
    s.weight("inter.W_tail", (d, d))
    _mlp_params(s, "inter.mlp", 2 * d, d, out_gain=SIGMOID_GAIN)
    s.weight("decode.W1", (d, d))
    s.bias("decode.b1", d)
    s.weight("decode.w2", (d,))
    s.weight("adapt.W_i", (4 * d, d))
    s.weight("adapt.W_g", (d, d), gain=SIGMOID_GAIN)
    s.weight("adapt.U_g", (d, d), gain=SIGMOID_GAIN)
    s.bias("adapt.b_g", d)
    return s


def _mlp_params(s: ParameterStore, prefix: str, d_in: int, d: int, out_gain: float = 1.0) -> None:
    s.weight(f"{prefix}.W1", (d_in, d))
    s.bias(f"{prefix}.b1", d)
    s.weight(f"{prefix}.W2", (d, d), gain=out_gain)
    s.bias(f"{prefix}.b2", d)


def mlp(x: Tensor, params: ParameterStore, prefix: str) -> Tensor:
    hidden = ad.relu(x @ params[f"{prefix}.W1"] + params[f"{prefix}.b1"])
    return hidden @ params[f"{prefix}.W2"] + params[f"{prefix}.b2"]


# ---------------------------------------------------------------- graph constants


@dataclass
class PreparedGraph:
    """Per-question index arrays and constant matrices consumed by the model."""

    subgraph: SubGraph
    dual: DualGraph
    heads: np.ndarray
    tails: np.ndarray
    fact_node: np.ndarray
    relation_ids: np.ndarray
    entity_ids: np.ndarray
    topics: np.ndarray
    inv_fact_count: Tensor
    head_incidence: Tensor
    tail_incidence: Tensor
    init_incidence: Tensor
    dual_mask: np.ndarray
    cooc: Tensor
    p0: Tensor

    @property
    def num_entities(self) -> int:
        return len(self.entity_ids)

    @property
    def num_relations(self) -> int:
        return len(self.relation_ids)


def _row_normalized(m: np.ndarray) -> np.ndarray:
    counts = m.sum(axis=1, keepdims=True)
    return np.divide(m, counts, out=np.zeros_like(m), where=counts > 0)


def prepare_graph(sg: SubGraph, dg: DualGraph | None = None, role_matched: bool = False) -> PreparedGraph:
    if not sg.topics:
        raise ValueError("subgraph has no topic entity")
    if dg is None:
        dg = build_dual_graph(sg, role_matched=role_matched)
    n, k = sg.num_entities, dg.num_nodes
    heads = np.asarray(sg.heads, dtype=np.intp)
    tails = np.asarray(sg.tails, dtype=np.intp)
    fact_node = dg.fact_node
    head_inc = np.zeros((n, k))
    tail_inc = np.zeros((n, k))
    head_inc[heads, fact_node] = 1.0
    tail_inc[tails, fact_node] = 1.0
    init_inc = np.maximum(head_inc, tail_inc)
    counts = np.bincount(fact_node, minlength=k).astype(float)
    topics = np.asarray(sg.topics, dtype=np.intp)
    p0 = np.zeros(n)
    p0[topics] = 1.0 / len(topics)
    return PreparedGraph(
        subgraph=sg,
        dual=dg,
        heads=heads,
        tails=tails,
        fact_node=fact_node,
        relation_ids=np.asarray(dg.relations, dtype=np.intp),
        entity_ids=np.asarray(sg.entities, dtype=np.intp),
        topics=topics,
        inv_fact_count=Tensor((1.0 / counts)[:, None]),
        head_incidence=Tensor(_row_normalized(head_inc)),
        tail_incidence=Tensor(_row_normalized(tail_inc)),
        init_incidence=Tensor(_row_normalized(init_inc)),
        dual_mask=dg.adjacency,
        cooc=Tensor(cooccurrence_matrix(dg)),
        p0=Tensor(p0),
    )


# ---------------------------------------------------------------- state


@dataclass
class QuestionEncoding:
    H: Tensor  # (l + 1, d); row 0 is the summary state
    q: Tensor


@dataclass
class ModelState:
    entities: list[Tensor] = field(default_factory=list)
    relations: list[Tensor] = field(default_factory=list)
    instructions: list[Tensor] = field(default_factory=list)
    adapted_instructions: list[Tensor] = field(default_factory=list)
    queries: list[Tensor] = field(default_factory=list)
    distributions: list[Tensor] = field(default_factory=list)
    word_attention: list[Tensor] = field(default_factory=list)
    dual_attention: list[Tensor | None] = field(default_factory=list)

    @property
    def final(self) -> Tensor:
        return self.distributions[-1]


# ---------------------------------------------------------------- components


def encode_question(tokens, params: ParameterStore) -> QuestionEncoding:
    """Token embeddings through a single-layer GRU.

    Per token: z = sig(x W_z + h U_z + b_z), r = sig(x W_r + h U_r + b_r),
    n = tanh(x W_n + (r*h) U_n + b_n), h' = (1-z)*n + z*h, starting from h = 0.
    The summary ``q`` is the state after the last token, stored as row 0 of ``H``.
    """
    tokens = np.asarray(tokens, dtype=np.intp)
    if tokens.size == 0:
        raise ValueError("cannot encode an empty question")
    d = params["enc.U_z"].shape[0]
    x = ad.row_select(params["token_emb"], tokens)
    xz = x @ params["enc.W_z"] + params["enc.b_z"]
    xr = x @ params["enc.W_r"] + params["enc.b_r"]
    xn = x @ params["enc.W_n"] + params["enc.b_n"]
    h = Tensor(np.zeros(d))
    states = []
    for j in range(len(tokens)):
        z = ad.sigmoid(ad.row_select(xz, j) + h @ params["enc.U_z"])
        r = ad.sigmoid(ad.row_select(xr, j) + h @ params["enc.U_r"])
        n = ad.tanh(ad.row_select(xn, j) + (r * h) @ params["enc.U_n"])
        h = n + z * (h - n)
        states.append(h)
    return QuestionEncoding(H=ad.stack([h] + states), q=h)


def generate_instruction(
    k: int, q: Tensor, i_prev: Tensor, H: Tensor, params: ParameterStore
) -> tuple[Tensor, Tensor, Tensor]:
    """Returns ``(i_k, word_attention, q_k)``; attention covers token rows 1..l of H."""
    q_k = ad.concat([q, i_prev]) @ params[f"instr.W{k}"] + params[f"instr.b{k}"]
    tokens = ad.row_select(H, np.arange(1, H.shape[0]))
    alpha = ad.softmax((tokens * q_k) @ params["instr.W_alpha"])
    return alpha @ tokens, alpha, q_k


def primal_reason_step(
    g: PreparedGraph, E: Tensor, R: Tensor, p: Tensor, i_k: Tensor, params: ParameterStore
) -> Tensor:
    """Instruction-matched messages from active neighbors, then an MLP update.

    A fact (e, r, e') sends ``p[e'] * sig(i_k * (r W_R))`` to its head e.
    """
    match = ad.sigmoid((R @ params["primal.W_R"]) * i_k)
    weight = ad.reshape(ad.row_select(p, g.tails), (len(g.tails), 1))
    msg = ad.row_select(match, g.fact_node) * weight
    neighborhood = ad.scatter_add(msg, g.heads, g.num_entities)
    return mlp(ad.concat([E, neighborhood], axis=1), params, "primal.mlp")


def dual_propagate(
    g: PreparedGraph, R: Tensor, params: ParameterStore, config: ModelConfig
) -> tuple[Tensor, Tensor | None]:
    if config.disable_dual_propagation:
        return R, None
    if config.dual_mode == "attention":
        scores = (R @ params["dual.W_att"]) @ R.T
        att = ad.softmax(scores, axis=1, mask=g.dual_mask)
    else:
        att = g.cooc
    pooled = att @ R
    out = ad.sigmoid(ad.concat([pooled, R], axis=1) @ params["dual.W_r"] + params["dual.b_r"])
    return out, att


def entity_aware_relation_update(
    g: PreparedGraph, E_prev: Tensor, R_tilde: Tensor, params: ParameterStore, config: ModelConfig
) -> Tensor:
    if config.disable_interaction:
        return R_tilde
    fact_vec = ad.row_select(E_prev, g.tails) - ad.row_select(E_prev, g.heads)
    pooled = ad.scatter_add(fact_vec, g.fact_node, g.num_relations) * g.inv_fact_count
    return ad.sigmoid(ad.concat([pooled, R_tilde], axis=1) @ params["inter.W_e"] + params["inter.b_e"])


def relation_aware_entity_update(
    g: PreparedGraph, R: Tensor, E_tilde: Tensor, params: ParameterStore
) -> Tensor:
    """Mean head-role projection plus mean tail-role projection over distinct relations."""
    from_heads = g.head_incidence @ (R @ params["inter.W_head"])
    from_tails = g.tail_incidence @ (R @ params["inter.W_tail"])
    return ad.sigmoid(mlp(ad.concat([from_heads + from_tails, E_tilde], axis=1), params, "inter.mlp"))


def decode(E: Tensor, params: ParameterStore) -> Tensor:
    logits = ad.relu(E @ params["decode.W1"] + params["decode.b1"]) @ params["decode.w2"]
    return ad.softmax(logits)


def adapt_instruction(i_k: Tensor, E: Tensor, topics, params: ParameterStore) -> Tensor:
    h_e = ad.sum(ad.row_select(E, topics), axis=0)
    h = ad.concat([i_k, h_e, i_k - h_e, i_k * h_e]) @ params["adapt.W_i"]
    gate = ad.sigmoid(h @ params["adapt.W_g"] + i_k @ params["adapt.U_g"] + params["adapt.b_g"])
    return i_k + gate * (h - i_k)


def initial_entities(g: PreparedGraph, R0: Tensor, params: ParameterStore, config: ModelConfig) -> Tensor:
    if config.entity_init == "lookup":
        return ad.row_select(params["entity_emb"], g.entity_ids)
    return g.init_incidence @ (R0 @ params["entity.W_init"])


def forward(g: PreparedGraph, tokens, config: ModelConfig, params: ParameterStore) -> ModelState:
    enc = encode_question(tokens, params)
    R = ad.row_select(params["relation_emb"], g.relation_ids)
    E = initial_entities(g, R, params, config)
    p = g.p0
    state = ModelState(entities=[E], relations=[R], distributions=[p])
    instruction = enc.q
    for k in range(1, config.steps + 1):
        i_k, alpha, q_k = generate_instruction(k, enc.q, instruction, enc.H, params)
        E_tilde = primal_reason_step(g, E, R, p, i_k, params)
        R_tilde, att = dual_propagate(g, R, params, config)
        R_new = entity_aware_relation_update(g, E, R_tilde, params, config)
        E = relation_aware_entity_update(g, R_new, E_tilde, params)
        R = R_new
        p = decode(E, params)
        instruction = adapt_instruction(i_k, E, g.topics, params)
        state.entities.append(E)
        state.relations.append(R)
        state.distributions.append(p)
        state.instructions.append(i_k)
        state.adapted_instructions.append(instruction)
        state.queries.append(q_k)
        state.word_attention.append(alpha)
        state.dual_attention.append(att)
    return state


def focal_loss(p: Tensor, answers, gamma: float) -> Tensor:
    """-(1/|A|) * sum_a (1 - p_a)^gamma * log(p_a + 1e-12)."""
    answers = np.asarray(answers, dtype=np.intp)
    if answers.size == 0:
        raise ValueError("focal loss needs at least one answer")
    pa = ad.row_select(p, answers)
    logp = ad.log(ad.add_scalar(pa, FOCAL_EPS))
    if gamma == 0:
        weighted = logp
    else:
        weighted = ad.power(1.0 - pa, gamma) * logp
    return ad.scale(ad.sum(weighted), -1.0 / answers.size)
