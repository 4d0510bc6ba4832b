"""Command-line runner.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, experiment
from .config import ConfigError, ExperimentConfig
from .data import DataUnavailableError
from .training import NumericError

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
ABLATION_CLS = ["baseline", "rr", "fr", "fr+rj", "mbj"]
ABLATION_MEMORY = ["baseline", "mbj-w", "mbj-f", "mbj-wf"]


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not section.key=value")
        key, value = item.split("=", 1)
        cfg.override(key.strip(), value)
    if getattr(args, "seed", None) is not None:
        cfg.experiment.seed = args.seed
    if getattr(args, "output_dir", None):
        cfg.experiment.output_dir = args.output_dir
    if getattr(args, "variant", None):
        cfg.experiment.variant = args.variant
    return cfg.validate()


def cmd_synth_data(args) -> int:
    cfg = _load_config(args)
    out = experiment.prepare_dir(Path(cfg.experiment.output_dir))
    data = experiment.resolve_datasets(cfg)
    experiment.write_data_artifacts(out, data)
    splits = {"train": data.train, "test": data.test, "query": data.query, "gallery": data.gallery}
    arrays = {}
    for name, ds in splits.items():
        if ds is not None:
            arrays[f"{name}_x"], arrays[f"{name}_y"] = ds.x, ds.y
    np.savez(out / "data" / "arrays.npz", **arrays)
    cfg.save(out / "config.ini")
    print(f"wrote dataset for {cfg.data.source} to {out / 'data'} ({len(data.train)} training samples)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    result = experiment.run(cfg)
    for k, v in result["summary"].items():
        print(f"{k:>32}  {v:.4f}" if isinstance(v, float) else f"{k:>32}  {v}")
    print(f"run directory: {result['output_dir']}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args)
    variants = args.variants.split(",") if args.variants else (
        ABLATION_MEMORY if cfg.experiment.task == "metric-learning" else ABLATION_CLS
    )
    result = experiment.ablate(cfg, variants)
    print(experiment.format_comparison(result["table"]))
    return 0


def cmd_eval(args) -> int:
    print(json.dumps(experiment.evaluate_run(args.run_dir), indent=2))
    return 0


def cmd_jitter_stats(args) -> int:
    trace = experiment.read_trace(args.trace)
    curve = analysis.jitter_curve(trace)
    first, last = analysis.quarter_slopes(curve)
    out = args.output or str(Path(args.trace).with_name(Path(args.trace).stem + "_curve.csv"))
    analysis.write_curve_csv(out, curve)
    print(f"points={len(curve)} final_variance={curve[-1][1]:.6g} deg^2 "
          f"initial_slope={first:.6g} final_slope={last:.6g} curve={out}")
    return 0


def cmd_export_embeddings(args) -> int:
    _, model, data = experiment.load_run(args.run_dir)
    out = Path(args.output_dir or args.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    for path in experiment.export_run_embeddings(model, data, out):
        print(path)
    return 0


def cmd_compare(args) -> int:
    table = experiment.compare(args.run_dirs)
    if args.output:
        experiment.write_comparison(args.output, table)
    print(experiment.format_comparison(table))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mbj", description="Memory-based jitter experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", "-c", help="INI experiment config")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--output-dir", "-o")
        sp.add_argument("--variant")
        return sp

    with_config(sub.add_parser("synth-data", help="build and write a dataset")).set_defaults(func=cmd_synth_data)
    with_config(sub.add_parser("train", help="phase 1 + phase 2 for one variant")).set_defaults(func=cmd_train)
    ab = with_config(sub.add_parser("ablate", help="shared phase 1, several phase-2 variants"))
    ab.add_argument("--variants", help="comma-separated variant ids")
    ab.set_defaults(func=cmd_ablate)

    ev = sub.add_parser("eval", help="re-evaluate a run directory")
    ev.add_argument("run_dir")
    ev.set_defaults(func=cmd_eval)

    js = sub.add_parser("jitter-stats", help="angular-variance curve of a recorded trace CSV")
    js.add_argument("trace")
    js.add_argument("--output")
    js.set_defaults(func=cmd_jitter_stats)

    ex = sub.add_parser("export-embeddings", help="write embedding matrices for a run")
    ex.add_argument("run_dir")
    ex.add_argument("--output-dir")
    ex.set_defaults(func=cmd_export_embeddings)

    cp = sub.add_parser("compare", help="compare final metrics of run directories")
    cp.add_argument("run_dirs", nargs="+")
    cp.add_argument("--output")
    cp.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataUnavailableError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
