"""Hyperparameter sensitivity: M sweep at fixed sigma, sigma sweep at fixed M."""

import argparse
import logging
from pathlib import Path

from attnscene.data import load_split
from attnscene.experiments import budget_config, ensure_corpus, sweep_corpus_config
from attnscene.model import ModelConfig
from attnscene.training import hyper_sweep


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--work", default="work/sweep")
    p.add_argument("--M", type=int, nargs="*", default=[1, 3, 5, 7, 9])
    p.add_argument("--sigma", type=float, nargs="*", default=[0.1, 0.2, 0.5, 1.0])
    p.add_argument("--fixed-sigma", type=float, default=0.2)
    p.add_argument("--fixed-M", type=int, default=9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--max-epochs", type=int, default=20)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    corpus = ensure_corpus(sweep_corpus_config(), Path(args.work) / "corpus")
    tr, dev = load_split(corpus, "train"), load_split(corpus, "dev")
    rows = hyper_sweep(tr.index, dev.index, ModelConfig.toy(seed=args.seed),
                       budget_config(max_epochs=args.max_epochs, seed=args.seed), args.M, args.sigma,
                       Path(args.work) / f"seed{args.seed}", args.fixed_sigma, args.fixed_M)
    for r in rows:
        print(f"{r['sweep']:>5}  M={r['M']:<2d} sigma={r['sigma']:<4g} dev macro F1 {r['dev_macro_f1']:.4f}")
    print(f"table: {Path(args.work) / f'seed{args.seed}' / 'sweep.csv'}")


if __name__ == "__main__":
    main()
