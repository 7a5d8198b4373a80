"""Command-line entry point: ``dualkbqa <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 gradient check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import DataError, Dataset, SynthConfig, generate, load_dataset, save_dataset, statistics, tiny_dataset
from .experiments import ablation, ablation_table, run
from .graph import GraphError
from .metrics import QUANTILE_KEYS, format_table, quantile_report, quantile_table, summarize
from .model import ModelConfig, forward, init_parameters
from .optim import CheckpointError
from .training import TrainConfig, evaluate, gradient_check_instance, instances_for, load_model, model_config_for

EXIT_USAGE, EXIT_DATA, EXIT_VERIFY = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _model_flags(p: argparse.ArgumentParser, hidden: int = 128, steps: int = 3) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--steps", type=int, default=steps, help=f"reasoning steps (default {steps})")
    g.add_argument("--hidden", type=int, default=hidden, help=f"hidden size (default {hidden})")
    g.add_argument("--gamma", type=float, default=2.0, help="focal loss gamma (default 2.0)")
    g.add_argument("--dual-mode", choices=("attention", "cooc", "off"), default="attention")
    g.add_argument("--interaction", choices=("on", "off"), default="on")
    g.add_argument("--entity-init", choices=("relation-derived", "lookup"), default="relation-derived")
    g.add_argument("--role-matched-dual", action="store_true", help="link relations only on same-role entities")
    g.add_argument("--no-inverse", action="store_true", help="do not add inverse facts")


def _train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--lr", type=float, default=7e-4)
    g.add_argument("--batch", type=int, default=8)
    g.add_argument("--epochs", type=int, default=200)
    g.add_argument("--patience", type=int, default=10, help="early-stop patience in evaluations")
    g.add_argument("--eval-every", type=int, default=1)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.5, help="answer selection ratio to the max probability")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dualkbqa", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=500)
    p.add_argument("--dev", type=int, default=100)
    p.add_argument("--test", type=int, default=100)
    p.add_argument("--entities", type=int, default=40, help="entities per question subgraph")
    p.add_argument("--entity-pool", type=int, default=400)
    p.add_argument("--relations", type=int, default=8)
    p.add_argument("--facts", type=int, default=80, help="facts per question subgraph")
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--constraint-prob", type=float, default=0.3)
    p.add_argument("--max-answers", type=int, default=5)
    p.add_argument("--stress", action="store_true", help="co-relation stress mode (paired inverse relations)")

    p = sub.add_parser("train", help="train and write checkpoint + report")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _common(p)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("eval", help="metrics and quantile tables for a checkpoint")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--json", type=Path, help="also write metrics JSON here")
    _common(p)

    p = sub.add_parser("ablate", help="train full model and the three ablations, compare on test")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--json", type=Path)
    _common(p)
    _model_flags(p)
    _train_flags(p)

    p = sub.add_parser("gradcheck", help="reverse-mode vs finite-difference gradients")
    p.add_argument("--data", type=Path, help="dataset directory; default is a built-in 5-entity instance")
    p.add_argument("--index", type=int, default=0, help="train question to check")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--fd-step", type=float, default=1e-5)
    _common(p)
    _model_flags(p, hidden=8, steps=2)

    p = sub.add_parser("dump-attention", help="per-step word and dual-edge attention as JSON")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--split", default="test", choices=("train", "dev", "test"))
    p.add_argument("--limit", type=int, default=10)
    p.add_argument("--out", required=True, type=Path)
    _common(p)
    return parser


def model_overrides(args) -> dict:
    return dict(
        hidden=args.hidden,
        steps=args.steps,
        gamma=args.gamma,
        entity_init=args.entity_init,
        dual_mode="attention" if args.dual_mode == "off" else args.dual_mode,
        disable_dual_propagation=args.dual_mode == "off",
        disable_interaction=args.interaction == "off",
        inverse_facts=not args.no_inverse,
        role_matched_dual=args.role_matched_dual,
    )


def train_config(args, **kw) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch,
        lr=args.lr,
        epochs=args.epochs,
        seed=args.seed,
        patience=args.patience,
        eval_every=args.eval_every,
        tau=args.tau,
        **kw,
    )


def _split(dataset: Dataset, name: str):
    if name not in dataset.splits:
        raise DataError(f"dataset has no {name} split")
    return dataset[name]


def cmd_gen_data(args) -> int:
    cfg = SynthConfig(
        entities_per_question=args.entities,
        entity_pool=args.entity_pool,
        num_relations=args.relations,
        facts_per_question=args.facts,
        hops=args.hops,
        constraint_prob=args.constraint_prob,
        max_answers=args.max_answers,
        train=args.train,
        dev=args.dev,
        test=args.test,
        seed=args.seed,
        stress=args.stress,
    )
    ds = generate(cfg)
    save_dataset(ds, args.out)
    for split, items in ds.splits.items():
        print(f"{split}: {json.dumps(statistics(items), sort_keys=True)}")
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    dataset = load_dataset(args.data)
    args.out.mkdir(parents=True, exist_ok=True)
    tcfg = train_config(args, checkpoint=str(args.out / "model.ckpt"), report=str(args.out / "report.jsonl"))
    res = run(dataset, tcfg, verbose=args.verbose, **model_overrides(args))
    summary = {
        "best_epoch": res.report.best_epoch,
        "best_dev": res.report.best_dev,
        "epochs_run": len(res.report.epochs),
        "seconds": round(res.seconds, 2),
    }
    if res.test is not None:
        summary["test"] = res.test.to_dict()
    text = json.dumps(summary, indent=2, sort_keys=True)
    (args.out / "summary.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_eval(args) -> int:
    dataset = load_dataset(args.data)
    params, mcfg, _ = load_model(args.checkpoint)
    records = evaluate(instances_for(dataset, args.split, mcfg), mcfg, params, args.tau)
    s = summarize(records)
    print(format_table(["split", "Hits@1", "F1", "TransE-score", "questions"],
                       [[args.split, s.hits_at_1, s.f1, s.transe_score, s.questions]]))
    out = {"split": args.split, "summary": s.to_dict()}
    if len(records) >= 4:
        print("\nmean F1 by quantile group")
        print(quantile_table(records, "f1"))
        print("\nmean TransE-score by quantile group")
        print(quantile_table(records, "transe"))
        out["quantiles"] = {k: quantile_report(records, k) for k in QUANTILE_KEYS}
    if args.json:
        args.json.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_ablate(args) -> int:
    dataset = load_dataset(args.data)
    _split(dataset, "test")
    base = model_overrides(args)
    for key in ("disable_dual_propagation", "disable_interaction", "dual_mode"):
        base.pop(key)
    results = ablation(dataset, train_config(args), args.seeds, args.verbose, **base)
    print(ablation_table(results))
    if args.json:
        args.json.write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    dataset = load_dataset(args.data) if args.data else tiny_dataset()
    mcfg = model_config_for(dataset, **model_overrides(args))
    examples = _split(dataset, "train")
    if not 0 <= args.index < len(examples):
        raise UsageError(f"--index {args.index} outside the {len(examples)} train questions")
    inst = instances_for(Dataset({"train": [examples[args.index]]}, dataset.vocab), "train", mcfg)[0]
    params = init_parameters(mcfg, seed=args.seed)
    report = gradient_check_instance(inst, mcfg, params, tolerance=args.tolerance, step=args.fd_step)
    for line in report.lines():
        print(line)
    worst = max(report.errors.values(), default=0.0)
    print(f"{len(report.errors)} parameters, max relative error {worst:.3e}: {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else EXIT_VERIFY


def attention_records(dataset: Dataset, split: str, params, mcfg: ModelConfig, limit: int) -> list[dict]:
    vocab = dataset.vocab
    out = []
    for inst in instances_for(dataset, split, mcfg)[:limit]:
        state = forward(inst.graph, inst.token_ids, mcfg, params)
        rel_names = [vocab.relation_name(int(r)) for r in inst.graph.relation_ids]
        steps = []
        for k, alpha in enumerate(state.word_attention, start=1):
            att = state.dual_attention[k - 1]
            dual = None
            if att is not None:
                dual = {
                    src: {dst: float(att.data[i, j]) for j, dst in enumerate(rel_names) if inst.graph.dual_mask[i, j]}
                    for i, src in enumerate(rel_names)
                }
            steps.append({
                "step": k,
                "word_attention": [[tok, float(a)] for tok, a in zip(inst.example.question_tokens, alpha.data)],
                "dual_attention": dual,
            })
        out.append({
            "id": inst.example.id,
            "question_tokens": inst.example.question_tokens,
            "relations": rel_names,
            "steps": steps,
        })
    return out


def cmd_dump_attention(args) -> int:
    dataset = load_dataset(args.data)
    params, mcfg, _ = load_model(args.checkpoint)
    _split(dataset, args.split)
    records = attention_records(dataset, args.split, params, mcfg, args.limit)
    args.out.write_text(json.dumps(records, indent=1) + "\n")
    print(f"wrote attention for {len(records)} questions to {args.out}")
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "dump-attention": cmd_dump_attention,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"dualkbqa: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        if isinstance(exc, (DataError, GraphError, CheckpointError)) or args.command != "gradcheck":
            print(f"dualkbqa: data error: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise
    except (FileNotFoundError, KeyError) as exc:
        print(f"dualkbqa: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
