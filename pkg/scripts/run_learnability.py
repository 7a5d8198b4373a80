"""Train the default configuration on the 2-hop synthetic set and report test metrics."""

import argparse
import json

from dualkbqa.data import SynthConfig, generate
from dualkbqa.experiments import run
from dualkbqa.metrics import format_table
from dualkbqa.training import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--train", type=int, default=500)
    p.add_argument("--quiet", action="store_true")
    args = p.parse_args()

    ds = generate(SynthConfig(seed=args.data_seed, train=args.train, dev=args.train // 5, test=args.train // 5))
    res = run(ds, TrainConfig(epochs=args.epochs, seed=args.seed), verbose=not args.quiet, hidden=args.hidden)
    print(format_table(["Split", "Hits@1", "F1"], [["test", res.test.hits_at_1, res.test.f1]]))
    print(json.dumps({"best_epoch": res.report.best_epoch, "epochs": len(res.report.epochs),
                      "minutes": round(res.seconds / 60, 2)}))


if __name__ == "__main__":
    main()
