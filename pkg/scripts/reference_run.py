"""Reference run: default corpus, toy attention model, eval F1 and alignment statistics."""

import argparse
import logging
from pathlib import Path

from attnscene.experiments import alignment_report, ensure_corpus, reference_corpus_config, run_once
from attnscene.model import ModelConfig
from attnscene.training import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--work", default="work/reference")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", type=float, default=0.95, help="stop once dev macro F1 reaches this (0: never)")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")

    work = Path(args.work)
    corpus = ensure_corpus(reference_corpus_config(args.seed), work / "corpus")
    run = run_once(corpus, work / "run", ModelConfig.toy(seed=args.seed),
                   TrainConfig(seed=args.seed, target_dev_f1=args.target), target=args.target or None)
    print(f"best dev macro F1 {run.result.best_dev_f1:.4f} at epoch {run.result.best_epoch}")
    if run.epoch_reached is not None:
        print(f"dev macro F1 >= {args.target} at epoch {run.epoch_reached}, {run.seconds_to_target:.0f} s")
    print(f"eval macro F1 {run.eval_macro_f1:.4f}; training wall clock {run.wall_seconds:.0f} s")

    rep = alignment_report(run.result.best_checkpoint, corpus, work / "alignments")
    print(f"landing rate {rep.landing_rate:.3f} (random pick {rep.chance_rate:.3f}); mean purity {rep.mean_purity:.3f}")
    for head, hist in rep.histograms.items():
        print(f"  head {head}: purity {rep.purity[head]:.2f} {dict(hist.most_common())}")


if __name__ == "__main__":
    main()
