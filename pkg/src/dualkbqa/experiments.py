"""Experiment drivers shared by the CLI, scripts/ and the acceptance tests."""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .data import Dataset
from .metrics import EvalSummary, format_table, summarize
from .model import ModelConfig
from .optim import ParameterStore
from .training import TrainConfig, TrainReport, evaluate, instances_for, model_config_for, train

ABLATIONS = {
    "full": {},
    "-dual": {"disable_dual_propagation": True},
    "-interaction": {"disable_interaction": True},
    "-attention": {"dual_mode": "cooc"},
}
ABLATION_LABELS = {
    "-dual": "-Dual Graph Propagation",
    "-interaction": "-Interaction",
    "-attention": "-Attention",
    "full": "Full model",
}


@dataclass
class RunResult:
    params: ParameterStore
    config: ModelConfig
    report: TrainReport
    test: EvalSummary | None
    seconds: float


def run(dataset: Dataset, tcfg: TrainConfig, verbose: bool = False, **model_overrides) -> RunResult:
    """Train on train/dev, restore the best-dev parameters, score the test split."""
    start = time.perf_counter()
    mcfg = model_config_for(dataset, **model_overrides)
    train_set = instances_for(dataset, "train", mcfg)
    dev_set = instances_for(dataset, "dev", mcfg) if dataset.splits.get("dev") else []
    hook = (lambda row: print(json.dumps(row), flush=True)) if verbose else None
    params, report = train(train_set, dev_set, tcfg, mcfg, on_epoch=hook)
    test = None
    if dataset.splits.get("test"):
        test = summarize(evaluate(instances_for(dataset, "test", mcfg), mcfg, params, tcfg.tau))
    return RunResult(params, mcfg, report, test, time.perf_counter() - start)


def ablation(dataset: Dataset, tcfg: TrainConfig, seeds: Sequence[int], verbose: bool = False, **base) -> dict:
    """Test metrics of the full model and the three ablations, per seed and averaged."""
    results = {}
    for variant, change in ABLATIONS.items():
        runs = []
        for seed in seeds:
            res = run(dataset, replace(tcfg, seed=seed), **{**base, **change})
            runs.append({"seed": seed, "hits1": res.test.hits_at_1, "f1": res.test.f1, "epochs": len(res.report.epochs)})
            if verbose:
                print(f"{variant} {json.dumps(runs[-1])}", flush=True)
        results[variant] = {
            "runs": runs,
            "hits1": float(np.mean([r["hits1"] for r in runs])),
            "f1": float(np.mean([r["f1"] for r in runs])),
        }
    return results


def ablation_table(results: dict) -> str:
    order = ["-dual", "-interaction", "-attention", "full"]
    rows = [[ABLATION_LABELS[k], results[k]["hits1"], results[k]["f1"]] for k in order]
    return format_table(["Model", "Hits@1", "F1"], rows)


def steps_sweep(dataset: Dataset, tcfg: TrainConfig, steps=(2, 3, 4), verbose: bool = False, **base) -> dict:
    out = {}
    for n in steps:
        res = run(dataset, tcfg, verbose=verbose, **{**base, "steps": n})
        out[n] = {"hits1": res.test.hits_at_1, "f1": res.test.f1, "epochs": len(res.report.epochs)}
    return out


def steps_table(results: dict) -> str:
    return format_table(["Model", "Hits@1", "F1"], [[f"steps={n}", r["hits1"], r["f1"]] for n, r in results.items()])
