"""Command-line entry point: ``anoonly {run,sweep,compare,gen-data}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import DataRecipe, generate, save_csv
from .errors import AnoOnlyError
from .harness.experiment import (
    AXES,
    METRICS,
    ExperimentConfig,
    Sweep,
    aggregate,
    compare,
    run_experiment,
)


def parse_values(axis: str, raw: str) -> list:
    items = [v.strip() for v in raw.split(",") if v.strip()]
    if axis in ("batch_size", "seen_types"):
        return [int(v) for v in items]
    if axis in ("gamma_la", "gamma_n", "lambda_n"):
        return [float(v) for v in items]
    return items


def _print_aggregate(cfg: ExperimentConfig, records) -> None:
    axis = cfg.sweep.axis if cfg.sweep else "-"
    print(f"{cfg.name}  ({len(records)} runs, axis {axis})")
    print(f"{'value':>12} " + " ".join(f"{m:>14}" for m in METRICS) + "   ok/err")
    for row in aggregate(cfg, records):
        vals = " ".join(f"{row.get(f'{m}_mean', float('nan')):14.4f}" for m in METRICS)
        print(f"{str(row['value']):>12} {vals}   {row['n_ok']}/{row['n_error']}")


def _load(path: str, output: str | None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path)
    if output:
        cfg = replace(cfg, output_path=output)
    return cfg


def cmd_run(args) -> int:
    cfg = _load(args.config, args.output)
    records = run_experiment(cfg, resume=not args.no_resume)
    _print_aggregate(cfg, records)
    return 0 if all(r.status == "ok" for r in records) else 1


def cmd_sweep(args) -> int:
    cfg = _load(args.config, args.output)
    cfg = replace(cfg, sweep=Sweep(args.axis, parse_values(args.axis, args.values)))
    if args.name:
        cfg = replace(cfg, name=args.name)
    records = run_experiment(cfg, resume=not args.no_resume)
    _print_aggregate(cfg, records)
    return 0 if all(r.status == "ok" for r in records) else 1


def cmd_compare(args) -> int:
    a = _load(args.a, args.output)
    b = _load(args.b, args.output)
    out = compare(a, b, output_dir=args.output or a.output_path, metric=args.metric)
    s = out["summary"]
    print(f"{b.name} - {a.name} on {s['metric']}: mean delta {s['mean_delta']:+.4f} "
          f"over {s['n_pairs']} pairs (+{s['n_positive']} / -{s['n_negative']} / ={s['n_zero']}), "
          f"sign test p = {s['sign_test_p']:.4g}")
    return 0


def cmd_gen_data(args) -> int:
    recipe = DataRecipe.from_dict(json.loads(Path(args.recipe).read_text()))
    train_ds, test_ds = generate(recipe)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(train_ds, out / "train.csv")
    save_csv(test_ds, out / "test.csv")
    print(f"train: {train_ds.counts()}")
    print(f"test:  {test_ds.counts()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anoonly", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment config")
    r.add_argument("--config", required=True)
    r.add_argument("--output", help="override the config's output directory")
    r.add_argument("--no-resume", action="store_true")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run a config along one ablation axis")
    s.add_argument("--axis", required=True, choices=AXES)
    s.add_argument("--values", required=True, help="comma-separated list")
    s.add_argument("--config", required=True)
    s.add_argument("--name", help="experiment name for the output files")
    s.add_argument("--output")
    s.add_argument("--no-resume", action="store_true")
    s.set_defaults(func=cmd_sweep)

    c = sub.add_parser("compare", help="paired per-seed comparison of two configs")
    c.add_argument("--a", required=True, help="baseline config")
    c.add_argument("--b", required=True, help="variant config")
    c.add_argument("--metric", default="aucroc", choices=METRICS)
    c.add_argument("--output")
    c.set_defaults(func=cmd_compare)

    g = sub.add_parser("gen-data", help="write a synthetic train/test pair as CSV")
    g.add_argument("--recipe", required=True)
    g.add_argument("--out", default="data")
    g.set_defaults(func=cmd_gen_data)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (AnoOnlyError, OSError, json.JSONDecodeError, TypeError) as exc:
        print(f"anoonly: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
