"""Full model versus the three ablations, averaged over seeds (co-relation stress set by default)."""

import argparse
import json

from dualkbqa.data import SynthConfig, generate
from dualkbqa.experiments import ablation, ablation_table
from dualkbqa.training import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--data-seed", type=int, default=5)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--no-stress", action="store_true", help="use the plain generator instead")
    p.add_argument("--json", help="write per-seed results here")
    args = p.parse_args()

    ds = generate(SynthConfig(seed=args.data_seed, stress=not args.no_stress, entities_per_question=20,
                              entity_pool=200, facts_per_question=40, train=args.train,
                              dev=args.train // 4, test=args.train // 4))
    results = ablation(ds, TrainConfig(epochs=args.epochs, patience=args.patience), args.seeds,
                       verbose=True, hidden=args.hidden)
    print(ablation_table(results))
    if args.json:
        with open(args.json, "w") as f:
            json.dump(results, f, indent=2)


if __name__ == "__main__":
    main()
