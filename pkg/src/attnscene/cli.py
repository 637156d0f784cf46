"""``asc`` command-line entry point.

Exit codes: 0 success, 2 usage / config / input / unsupported mode,
3 file or format problems, 4 numeric failure (gradcheck or non-finite loss).
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import FeatureSource, load_split
from .errors import AscError, ConfigError, DataError, FormatError, NumericError, UnsupportedModeError
from .evaluation import evaluate, export_alignments
from .features import cache_features, log_mel
from .model import SceneModel
from .synth import SPLITS, class_event_sets, render_clip, synth_corpus
from .training import hyper_sweep, load_model, model_gradcheck, train

log = logging.getLogger("attnscene")

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, (FormatError, DataError, OSError)):
        return EXIT_IO
    return EXIT_USAGE  # config, input, parameter, shape and unsupported-mode errors


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse's default is also 2; keep the contract explicit
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"model.seed={args.seed}", f"synth.seed={args.seed}"]
    cfg = RunConfig.load(args.config, overrides)
    cfg.log(log)
    return cfg


def _save_config(cfg: RunConfig, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text("\n".join(cfg.lines()) + "\n", encoding="utf-8")


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = synth_corpus(cfg.synth, args.out)
    print(f"wrote {sum(cfg.synth.split_sizes().values())} clips to {out}")
    return EXIT_OK


def cmd_cache(args) -> int:
    cfg = _config(args)
    src, out = Path(args.data), Path(args.out)
    for split in SPLITS:
        if (src / split / "manifest.csv").exists():
            cache_features(src / split, out / split, cfg.features)
            if (src / split / "events.csv").exists():
                shutil.copyfile(src / split / "events.csv", out / split / "events.csv")
    if (src / "classes.csv").exists():
        shutil.copyfile(src / "classes.csv", out / "classes.csv")
    print(f"feature cache at {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    tr = load_split(args.data, "train", cfg.model.n_classes)
    dev = load_split(args.data, "dev", cfg.model.n_classes)
    source = FeatureSource(cfg.features, args.cache)
    _save_config(cfg, args.out)
    res = train(tr.index, dev.index, cfg.model, cfg.train, args.out, source,
                resume=Path(args.out) / "last.ckpt" if args.resume else None,
                extra={"synth": cfg.to_dict()["synth"]})
    print(f"best dev macro F1 {res.best_dev_f1:.4f} at epoch {res.best_epoch}; "
          f"{res.epochs_run} epochs; checkpoint {res.best_checkpoint}")
    return EXIT_OK


def _model_and_split(args):
    model = load_model(args.ckpt)
    split = load_split(args.data, args.split, model.config.n_classes)
    return model, split


def cmd_eval(args) -> int:
    model, split = _model_and_split(args)
    report = evaluate(split.index, model, FeatureSource(cache_dir=args.cache), split.class_names)
    print(report.table())
    if args.out:
        report.write_csv(args.out)
    return EXIT_OK


def cmd_attend(args) -> int:
    model, split = _model_and_split(args)
    if model.config.pooling_mode != "attention":
        raise UnsupportedModeError(f"{args.ckpt} is a {model.config.pooling_mode} checkpoint; "
                                   "alignments need attention pooling")
    records = export_alignments(split.index, model, FeatureSource(cache_dir=args.cache), args.out,
                                snippets=args.snippets, top_k=args.top_k)
    print(f"wrote {len(records)} alignment rows to {Path(args.out) / 'alignments.csv'}")
    return EXIT_OK


def gradcheck_example(cfg: RunConfig, seconds: float = 1.0):
    """One short synthetic clip of class 0 as log-Mel features, with its label."""
    sc = cfg.synth
    clip_cfg = type(sc)(**{**sc.__dict__, "clip_seconds": seconds, "event_seconds": (0.1, 0.2)})
    sets = class_event_sets(clip_cfg)
    clip = render_clip(clip_cfg, "gradcheck", 0, sets[0], np.random.default_rng(cfg.train.seed))
    return log_mel(clip.samples, cfg.features).data, 0


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    X, y = gradcheck_example(cfg)
    model = SceneModel(cfg.model)
    report = model_gradcheck(model, X[None], [y], seed=cfg.train.seed, max_coords=args.max_coords,
                             corrupt=args.corrupt)
    print("\n".join(report.lines()))
    if not report.passed:
        print(f"gradcheck FAILED for {report.failures()}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"gradcheck passed: {len(report.max_rel_err)} slots below {report.tolerance:g}")
    return EXIT_OK


def parse_grid(text: str) -> dict[str, list]:
    grid: dict[str, list] = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"grid entry {part!r} is not key=v1,v2,...")
        key, values = (p.strip() for p in part.split("=", 1))
        if key not in ("M", "sigma"):
            raise ConfigError(f"grid key must be M or sigma, got {key!r}")
        try:
            grid[key] = [int(v) if key == "M" else float(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad grid values for {key}: {values!r}") from exc
    return grid


def cmd_sweep(args) -> int:
    cfg = _config(args)
    grid = parse_grid(args.grid)
    tr = load_split(args.data, "train", cfg.model.n_classes)
    dev = load_split(args.data, "dev", cfg.model.n_classes)
    out = Path(args.out)
    work = Path(args.workdir) if args.workdir else out.with_suffix("")
    _save_config(cfg, work)
    rows = hyper_sweep(tr.index, dev.index, cfg.model, cfg.train, grid.get("M", []), grid.get("sigma", []),
                       work, fixed_sigma=args.fixed_sigma, fixed_M=args.fixed_M,
                       source=FeatureSource(cfg.features, args.cache))
    out.parent.mkdir(parents=True, exist_ok=True)
    shutil.copyfile(work / "sweep.csv", out)
    for r in rows:
        print(f"{r['sweep']:>5}  M={r['M']:<3d} sigma={r['sigma']:<5g} dev_macro_f1={r['dev_macro_f1']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="asc", description="Multi-head attention pooling for acoustic scene classification.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--config", help="file of 'section.key = value' lines")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")
        if seed:
            sp.add_argument("--seed", type=int, help="seed for model, training and corpus")

    sp = sub.add_parser("synth", help="write a synthetic scene corpus")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("cache", help="precompute log-Mel features for every split")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    common(sp, seed=False)
    sp.set_defaults(func=cmd_cache)

    sp = sub.add_parser("train", help="train a model; writes metrics.csv, best.ckpt, last.ckpt")
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--cache", help="directory for computed feature files")
    sp.add_argument("--resume", action="store_true", help="continue from OUT/last.ckpt")
    common(sp)
    sp.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "per-class and macro F1 of a checkpoint"),
                                 ("attend", cmd_attend, "export attention alignments")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--ckpt", required=True)
        sp.add_argument("--data", required=True)
        sp.add_argument("--split", default="eval", choices=SPLITS)
        sp.add_argument("--cache")
        if name == "eval":
            sp.add_argument("--out", help="metrics CSV path")
        else:
            sp.add_argument("--out", required=True)
            sp.add_argument("--snippets", action="store_true", help="write 1 s WAV around each argmax")
            sp.add_argument("--top-k", type=int, help="snippets only for each head's k best clips")
        sp.set_defaults(func=func)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every parameter slot")
    sp.add_argument("--max-coords", type=int, default=12, help="coordinates probed per slot")
    sp.add_argument("--corrupt", metavar="SLOT", help=argparse.SUPPRESS)
    common(sp)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("sweep", help="M sweep at fixed sigma and sigma sweep at fixed M")
    sp.add_argument("--grid", required=True, help='e.g. "M=1,3,5,7,9;sigma=0.1,0.2,0.5,1.0"')
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="CSV path")
    sp.add_argument("--workdir", help="per-cell run directories (default: OUT without suffix)")
    sp.add_argument("--fixed-sigma", type=float, default=0.2)
    sp.add_argument("--fixed-M", type=int, default=9)
    sp.add_argument("--cache")
    common(sp)
    sp.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (AscError, OSError) as exc:
        print(f"asc {args.command}: error: {exc}", file=sys.stderr)
        return exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
