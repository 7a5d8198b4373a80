"""Mini-batch training, evaluation and the finite-difference gradient harness."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape
from .data import Dataset, Instance, make_instances
from .metrics import QuestionRecord, f1, hits_at_1, select_answers, state_transe_score, summarize
from .model import ModelConfig, focal_loss, forward, init_parameters
from .optim import ParameterStore, adam_step, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 7e-4
    epochs: int = 200
    seed: int = 0
    eval_every: int = 1
    patience: int = 10
    tau: float = 0.5
    checkpoint: str | None = None
    report: str | None = None
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be >= 0, got {self.lr}")
        if self.epochs < 1 or self.eval_every < 1:
            raise ValueError("epochs and eval_every must be >= 1")


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_dev: dict = field(default_factory=dict)
    seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e, sort_keys=True) + "\n" for e in self.epochs)


def model_config_for(dataset: Dataset, **overrides) -> ModelConfig:
    return ModelConfig(
        num_tokens=len(dataset.vocab.tokens),
        num_relations=len(dataset.vocab.relations),
        num_entities=len(dataset.vocab.entities),
        **overrides,
    )


def instances_for(dataset: Dataset, split: str, config: ModelConfig) -> list[Instance]:
    return make_instances(
        dataset[split], dataset.vocab, inverse_facts=config.inverse_facts, role_matched=config.role_matched_dual
    )


def example_loss(inst: Instance, config: ModelConfig, params: ParameterStore):
    state = forward(inst.graph, inst.token_ids, config, params)
    return focal_loss(state.final, inst.answers, config.gamma), state


def loss_and_grads(inst: Instance, config: ModelConfig, params: ParameterStore):
    with Tape() as tape:
        loss, _ = example_loss(inst, config, params)
    return loss.item(), tape.backward(loss, params)


def evaluate(
    instances: Sequence[Instance], config: ModelConfig, params: ParameterStore, tau: float = 0.5
) -> list[QuestionRecord]:
    """Per-question records; a gold answer missing from the subgraph counts as a miss."""
    records = []
    for inst in instances:
        state = forward(inst.graph, inst.token_ids, config, params)
        p = state.final.data
        ids = inst.graph.entity_ids
        local_gold = set(inst.answers.tolist())
        predicted = {int(ids[i]) for i in select_answers(p, tau)}
        ex = inst.example
        records.append(
            QuestionRecord(
                qid=ex.id,
                hits=hits_at_1(p, local_gold) if local_gold else 0,
                f1=f1(predicted, inst.gold),
                num_entities=inst.subgraph.num_entities,
                num_relations=len({r for _, r, _ in ex.triples}),
                num_facts=len(ex.triples),
                transe=state_transe_score(state, inst.graph),
            )
        )
    return records


def train(
    train_set: Sequence[Instance],
    dev_set: Sequence[Instance],
    config: TrainConfig,
    model_config: ModelConfig,
    params: ParameterStore | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[ParameterStore, TrainReport]:
    """Adam over shuffled mini-batches with early stopping on dev Hits@1.

    Batch gradients are averaged over batch members computed one at a time.
    On return the store holds the best-dev parameters.
    """
    usable = [inst for inst in train_set if inst.answers.size]
    if not usable:
        raise ValueError("training set is empty (or has no answer inside any subgraph)")
    if params is None:
        params = init_parameters(model_config, seed=config.seed)
    rng = np.random.default_rng(config.seed)
    report = TrainReport()
    best_score, best_values, stale = -1.0, params.snapshot(), 0
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(usable))
        total = 0.0
        for b in range(0, len(order), config.batch_size):
            batch = order[b : b + config.batch_size]
            acc: dict[str, np.ndarray] = {}
            for idx in batch:
                loss, grads = loss_and_grads(usable[idx], model_config, params)
                total += loss
                for k, g in grads.items():
                    if k in acc:
                        acc[k] += g
                    else:
                        acc[k] = g.copy()
            for g in acc.values():
                g /= len(batch)
            adam_step(params, acc, lr=config.lr, betas=config.betas, eps=config.eps)
        row = {"epoch": epoch, "loss": total / len(usable)}
        if dev_set and epoch % config.eval_every == 0:
            summary = summarize(evaluate(dev_set, model_config, params, config.tau))
            row.update(dev_hits1=summary.hits_at_1, dev_f1=summary.f1)
            if summary.hits_at_1 > best_score:
                best_score, best_values, stale = summary.hits_at_1, params.snapshot(), 0
                report.best_epoch, report.best_dev = epoch, {"hits1": summary.hits_at_1, "f1": summary.f1}
                if config.checkpoint:
                    save_checkpoint(config.checkpoint, params, checkpoint_meta(model_config, config, epoch))
            else:
                stale += 1
        report.epochs.append(row)
        log.info("epoch %d %s", epoch, row)
        if on_epoch:
            on_epoch(row)
        if config.report:
            Path(config.report).write_text(report.to_jsonl())
        if dev_set and stale >= config.patience:
            break
    if dev_set:
        params.restore(best_values)
    else:
        report.best_epoch = len(report.epochs)
        if config.checkpoint:
            save_checkpoint(config.checkpoint, params, checkpoint_meta(model_config, config, report.best_epoch))
    report.seconds = time.perf_counter() - start
    return params, report


def checkpoint_meta(model_config: ModelConfig, config: TrainConfig, epoch: int) -> dict:
    return {"model": model_config.to_dict(), "train": asdict(config), "epoch": epoch, "seed": config.seed}


def load_model(path: str | Path) -> tuple[ParameterStore, ModelConfig, dict]:
    params, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ValueError(f"{path}: checkpoint carries no model configuration")
    return params, ModelConfig(**meta["model"]), meta


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float
    abs_floor: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    @property
    def failures(self) -> list[str]:
        return [k for k, e in self.errors.items() if e > self.tolerance]

    def lines(self) -> list[str]:
        width = max((len(k) for k in self.errors), default=0)
        return [
            f"{k.ljust(width)}  {e:.3e}  {'ok' if e <= self.tolerance else 'FAIL'}"
            for k, e in self.errors.items()
        ]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, abs_floor: float = 1e-8) -> float:
    """Max elementwise |a - n| / max(|a|, |n|), ignoring entries with |a - n| <= abs_floor."""
    diff = np.abs(analytic - numeric)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    rel = np.where(diff > abs_floor, diff / np.maximum(scale, 1e-300), 0.0)
    return float(rel.max()) if rel.size else 0.0


def gradient_check(
    loss_fn: Callable[[], object],
    params: ParameterStore,
    tolerance: float = 1e-3,
    step: float = 1e-5,
    abs_floor: float = 1e-8,
    analytic: dict[str, np.ndarray] | None = None,
    names: Sequence[str] | None = None,
) -> GradCheckReport:
    """Compare tape gradients of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the computation from ``params`` on every call and
    return a scalar Tensor. ``analytic`` overrides the tape gradients, which is
    how the harness is tested against a deliberately wrong gradient.
    """
    if analytic is None:
        with Tape() as tape:
            loss = loss_fn()
        analytic = tape.backward(loss, params)
    errors = {}
    for name in names if names is not None else list(params):
        p = params[name]
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_fn().item()
            flat[i] = orig - step
            down = loss_fn().item()
            flat[i] = orig
            numeric[i] = (up - down) / (2 * step)
        errors[name] = relative_error(analytic[name].reshape(-1), numeric, abs_floor)
    return GradCheckReport(errors, tolerance, abs_floor)


def gradient_check_instance(
    inst: Instance, config: ModelConfig, params: ParameterStore, tolerance: float = 1e-3, step: float = 1e-5
) -> GradCheckReport:
    return gradient_check(
        lambda: example_loss(inst, config, params)[0], params, tolerance=tolerance, step=step
    )
