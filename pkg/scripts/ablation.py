"""Attention pooling versus global max pooling, eval macro F1 over several seeds."""

import argparse
import logging
from pathlib import Path

from attnscene.experiments import ablation, converged_config, ensure_corpus, mean, reference_corpus_config


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--work", default="work/ablation")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--max-epochs", type=int, default=60)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    corpus = ensure_corpus(reference_corpus_config(), Path(args.work) / "corpus")
    scores = ablation(corpus, Path(args.work) / "runs", args.seeds, converged_config(max_epochs=args.max_epochs))
    for mode, vals in scores.items():
        print(f"{mode:>9}: " + " ".join(f"{v:.4f}" for v in vals) + f"  mean {mean(vals):.4f}")


if __name__ == "__main__":
    main()
