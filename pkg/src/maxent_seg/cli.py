"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 I/O or input-format error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from maxent_seg import pipeline
from maxent_seg.data.dataset import SchemaError
from maxent_seg.data.nifti import NiftiError
from maxent_seg.model import DivergenceError

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DIVERGED = 4

log = logging.getLogger("maxent_seg")


def _load_config(args) -> pipeline.ExperimentConfig:
    cfg = pipeline.ExperimentConfig.load(args.config) if args.config else pipeline.ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _cmd_synth(args):
    cfg = _load_config(args)
    manifest = pipeline.cmd_synth(cfg, args.out)
    print(f"wrote {len(manifest['samples'])} samples to {args.out} (config hash {manifest['config_hash']})")


def _cmd_train(args):
    cfg = _load_config(args)
    grid = [float(x) for x in args.grid.split(",")] if args.grid else None
    result = pipeline.train_strategy(cfg, args.dataset, args.strategy, args.lam, grid)
    pipeline.write_train_outputs(result, cfg, args.out)
    last = result.history.records[-1]
    print(f"{args.strategy}: lambda={result.lam:g} final loss={last.train_loss:.5f} val dice={last.val_dice}")


def _cmd_predict(args):
    params, _, extra = pipeline.read_checkpoint(args.checkpoint)
    normalize = extra.get("normalize", _load_config(args).normalize)
    probs = pipeline.predict_dataset(params, args.dataset, normalize)
    pipeline.write_predictions(probs, args.out)
    print(f"wrote {len(probs)} probability maps to {args.out}")


def _cmd_eval(args):
    cfg = _load_config(args)
    if bool(args.checkpoint) == bool(args.predictions):
        raise pipeline.UsageError("eval needs exactly one of --checkpoint or --predictions")
    info = {"seed": cfg.seed, "config_hash": cfg.config_hash()}
    if args.checkpoint:
        params, _, extra = pipeline.read_checkpoint(args.checkpoint)
        info.update({k: extra[k] for k in ("strategy", "lambda", "seed", "config_hash") if k in extra})
        probs = pipeline.predict_dataset(params, args.dataset, extra.get("normalize", cfg.normalize))
    else:
        probs = pipeline.read_predictions(args.predictions, args.dataset)
        info["strategy"] = args.name or Path(args.predictions).name
    if args.name:
        info["strategy"] = args.name
    reports, aggregate = pipeline.evaluate(probs, args.dataset, cfg, info)
    pipeline.write_eval_outputs(reports, aggregate, args.out)
    print(f"evaluated {len(reports)} scans into {args.out}")


def _cmd_report(args):
    evals = [pipeline.load_eval(d) for d in args.inputs]
    report = pipeline.build_report(evals)
    pipeline.write_report(report, args.out)
    print(f"report for {len(evals)} evaluation(s) written to {args.out}")


def _cmd_run(args):
    cfg = _load_config(args)
    report = pipeline.run_experiment(cfg, args.out)
    print(json.dumps([r for r in report["comparison"] if r["domain"] != "ALL"], indent=1))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maxent-seg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="experiment config JSON")
        sp.add_argument("--seed", type=int, help="root seed (overrides the config)")
        sp.add_argument("--out", required=out_required, help="output directory")

    sp = sub.add_parser("synth", help="generate the synthetic ID/OOD dataset")
    common(sp)
    sp.set_defaults(func=_cmd_synth)

    sp = sub.add_parser("train", help="train one strategy")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--strategy", required=True, choices=sorted(pipeline.STRATEGIES))
    sp.add_argument("--lambda", dest="lam", type=float, help="regularization weight; omit to grid-search")
    sp.add_argument("--grid", help="comma-separated lambda grid overriding the config")
    sp.set_defaults(func=_cmd_train)

    sp = sub.add_parser("predict", help="write probability maps for the test splits")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=_cmd_predict)

    sp = sub.add_parser("eval", help="per-scan and aggregate evaluation")
    common(sp)
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--checkpoint")
    sp.add_argument("--predictions", help="directory of probability maps instead of a checkpoint")
    sp.add_argument("--name", help="label for this model in reports")
    sp.set_defaults(func=_cmd_eval)

    sp = sub.add_parser("report", help="compare evaluation outputs")
    common(sp)
    sp.add_argument("inputs", nargs="+", help="eval output directories")
    sp.set_defaults(func=_cmd_report)

    sp = sub.add_parser("run", help="synth, train all strategies, eval and report")
    common(sp)
    sp.set_defaults(func=_cmd_run)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except pipeline.UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, NiftiError, SchemaError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
