"""Sweep the number of reasoning steps and report test metrics per setting."""

import argparse

from dualkbqa.data import SynthConfig, generate
from dualkbqa.experiments import steps_sweep, steps_table
from dualkbqa.training import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, nargs="+", default=[2, 3, 4])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data-seed", type=int, default=7)
    p.add_argument("--hops", type=int, default=2)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--train", type=int, default=200)
    args = p.parse_args()

    ds = generate(SynthConfig(seed=args.data_seed, hops=args.hops, train=args.train,
                              dev=args.train // 4, test=args.train // 4))
    results = steps_sweep(ds, TrainConfig(epochs=args.epochs, seed=args.seed), steps=tuple(args.steps),
                          hidden=args.hidden)
    print(steps_table(results))


if __name__ == "__main__":
    main()
