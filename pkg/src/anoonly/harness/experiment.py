"""Seeded experiment sweeps: config model, run execution, result files.

One *run* is a (sweep value, repeat) pair. Its data, model and batching
seeds all equal ``base_seed + repeat``, so paired configs see identical
data. Results go to ``<output>/<name>_results.csv`` (one row per run,
bit-reproducible), ``<name>_aggregate.json`` (means over repeats plus
timings) and ``<name>_curve.dat`` (whitespace columns for gnuplot). With
``save_artifacts`` each run also leaves a model checkpoint and its
per-step loss trace under ``<output>/artifacts/``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ..data import DataRecipe, generate
from ..errors import AnoOnlyError, ConfigError
from ..losses import LossConfig
from ..model import save_checkpoint
from .train import TrainConfig, evaluate, train

log = logging.getLogger(__name__)

AXES = ("gamma_la", "gamma_n", "lambda_n", "batch_size", "normalizer", "noise", "seen_types")
METRICS = ("aucroc", "aucpr_anomaly", "aucpr_normal")
PARTITION_METRICS = tuple(f"{p}_{m}" for p in ("seen", "unseen") for m in METRICS)
WORKERS_ENV = "ANOONLY_WORKERS"

GAMMA_LA_GRID = (0.01, 0.05, 0.10, 0.25, 0.50, 0.75, 1.0)
BATCH_SIZE_GRID = (1, 2, 4, 8, 16, 32, 64, 128)
LAMBDA_N_GRID = (1.0, 1e-2, 1e-4, 1e-6, 0.0)
NORMALIZER_GRID = ("none", "ln", "bn*", "bn", "bn_dagger")


@dataclass(frozen=True)
class Sweep:
    axis: str
    values: tuple

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {AXES}")
        object.__setattr__(self, "values", tuple(self.values))
        if not self.values:
            raise ConfigError("a sweep needs at least one value")
        for v in self.values:
            _validate_axis_value(self.axis, v)


def _validate_axis_value(axis: str, v) -> None:
    if axis in ("gamma_la", "gamma_n") and not (isinstance(v, (int, float)) and 0 < v <= 1):
        raise ConfigError(f"{axis} values must lie in (0, 1], got {v!r}")
    if axis == "lambda_n" and not (isinstance(v, (int, float)) and v >= 0):
        raise ConfigError(f"lambda_n values must be >= 0, got {v!r}")
    if axis in ("batch_size", "seen_types") and not (isinstance(v, int) and v >= 1):
        raise ConfigError(f"{axis} values must be positive integers, got {v!r}")
    if axis == "noise" and v not in ("contaminated", "clean"):
        raise ConfigError(f"noise values are 'contaminated' or 'clean', got {v!r}")
    if axis == "normalizer" and v not in ("none", "ln", "bn*", "bn", "bn_dagger"):
        raise ConfigError(f"unknown normalizer label {v!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    data: DataRecipe = field(default_factory=DataRecipe)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep: Sweep | None = None
    repeats: int = 5
    base_seed: int = 0
    output_path: str = "results"
    save_artifacts: bool = False

    def __post_init__(self):
        if isinstance(self.data, dict):
            object.__setattr__(self, "data", DataRecipe.from_dict(self.data))
        if isinstance(self.train, dict):
            object.__setattr__(self, "train", TrainConfig.from_dict(self.train))
        if isinstance(self.sweep, dict):
            object.__setattr__(self, "sweep", Sweep(**self.sweep))
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if not self.name or any(c in self.name for c in "/\\"):
            raise ConfigError(f"invalid experiment name {self.name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "data": self.data.to_dict(),
            "train": self.train.to_dict(),
            "sweep": None if self.sweep is None else {"axis": self.sweep.axis,
                                                       "values": list(self.sweep.values)},
            "repeats": self.repeats,
            "base_seed": self.base_seed,
            "output_path": self.output_path,
            "save_artifacts": self.save_artifacts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def seeds(self) -> list[int]:
        return [self.base_seed + r for r in range(self.repeats)]

    def sweep_values(self) -> list:
        return [None] if self.sweep is None else list(self.sweep.values)


def apply_axis(data: DataRecipe, tcfg: TrainConfig, axis: str | None, value):
    """Resolve one sweep point into concrete (data recipe, train config)."""
    if axis is None:
        return data, tcfg
    if axis == "gamma_la":
        return replace(data, gamma_la=float(value)), tcfg
    if axis == "gamma_n":
        return replace(data, gamma_n=float(value)), tcfg
    if axis == "noise":
        return replace(data, contamination=(value == "contaminated")), tcfg
    if axis == "seen_types":
        k = len(data.anomaly_types)
        if value > k:
            raise ConfigError(f"cannot see {value} of {k} anomaly types")
        return replace(data, seen_types=tuple(range(1, int(value) + 1))), tcfg
    if axis == "batch_size":
        return data, replace(tcfg, batch_size=int(value))
    if axis == "lambda_n":
        loss = replace(tcfg.loss, objective="reweighted", lambda_n=float(value))
        return data, replace(tcfg, loss=loss)
    if axis == "normalizer":
        model = dict(tcfg.model)
        loss = tcfg.loss
        if value == "bn_dagger":
            model["normalizer"] = "none"
            loss = replace(loss, objective="anoonly_explicit_bn", lambda_n=0.0)
        else:
            model["normalizer"] = value
            if loss.objective == "anoonly_explicit_bn":
                loss = replace(loss, objective="anoonly")
        return data, replace(tcfg, model=model, loss=loss)
    raise ConfigError(f"unknown sweep axis {axis!r}")


def config_hash(payload: dict) -> str:
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunSpec:
    name: str
    axis: str | None
    value: object
    repeat: int
    seed: int
    data: DataRecipe
    train: TrainConfig
    artifact_dir: str | None = None

    @property
    def stem(self) -> str:
        value = "" if self.value is None else f"_{_fmt(self.value)}"
        return f"{self.name}{value.replace('*', 'star')}_r{self.repeat}"

    def payload(self) -> dict:
        return {"data": self.data.to_dict(), "train": self.train.to_dict()}

    @property
    def run_hash(self) -> str:
        return config_hash(self.payload())


@dataclass
class RunRecord:
    config_hash: str
    name: str
    axis: str | None
    value: object
    repeat: int
    seed: int
    status: str = "ok"
    metrics: dict = field(default_factory=dict)
    epoch_loss: list = field(default_factory=list)
    n_steps: int = 0
    n_skipped: int = 0
    final_loss: float = float("nan")
    wall_time: float = 0.0
    error: str = ""

    def csv_row(self) -> dict:
        row = {
            "name": self.name, "axis": self.axis or "", "value": _fmt(self.value),
            "repeat": self.repeat, "seed": self.seed, "config_hash": self.config_hash,
            "status": self.status,
        }
        for m in METRICS + PARTITION_METRICS:
            row[m] = _fmt(self.metrics.get(m, ""))
        row.update(n_steps=self.n_steps, n_skipped=self.n_skipped,
                   final_loss=_fmt(self.final_loss), error=self.error)
        return row


CSV_FIELDS = (["name", "axis", "value", "repeat", "seed", "config_hash", "status"]
              + list(METRICS) + list(PARTITION_METRICS)
              + ["n_steps", "n_skipped", "final_loss", "error"])


def _fmt(v) -> str:
    if v is None or v == "":
        return ""
    if isinstance(v, bool):
        return str(v).lower()
    if isinstance(v, float):
        return repr(v)
    return str(v)


def expand(cfg: ExperimentConfig, artifact_dir=None) -> list[RunSpec]:
    specs = []
    axis = cfg.sweep.axis if cfg.sweep else None
    for value in cfg.sweep_values():
        for repeat, seed in enumerate(cfg.seeds()):
            data = replace(cfg.data, seed=seed)
            tcfg = replace(cfg.train, seed=seed)
            data, tcfg = apply_axis(data, tcfg, axis, value)
            specs.append(RunSpec(cfg.name, axis, value, repeat, seed, data, tcfg,
                                 None if artifact_dir is None else str(artifact_dir)))
    return specs


def execute(spec: RunSpec) -> RunRecord:
    """Generate, train, evaluate one run; failures become error records."""
    rec = RunRecord(spec.run_hash, spec.name, spec.axis, spec.value, spec.repeat, spec.seed)
    t0 = time.perf_counter()
    try:
        train_ds, test_ds = generate(spec.data)
        result = train(None, train_ds, spec.train)
        seen = spec.data.seen_types
        rec.metrics = evaluate(result.model, test_ds, seen_types=seen)
        rec.epoch_loss = result.epoch_losses()
        rec.n_steps, rec.n_skipped = result.n_steps, result.n_skipped
        rec.final_loss = rec.epoch_loss[-1] if rec.epoch_loss else float("nan")
        if spec.artifact_dir is not None:
            _save_artifacts(spec, result)
    except (AnoOnlyError, ValueError, FloatingPointError) as exc:
        rec.status = "error"
        rec.error = f"{type(exc).__name__}: {exc}"
        log.warning("run %s value=%s seed=%s failed: %s", spec.name, spec.value, spec.seed, rec.error)
    rec.wall_time = time.perf_counter() - t0
    return rec


TRACE_FIELDS = ("epoch", "step", "skipped", "total", "l_normal", "l_anomaly", "l_bn_explicit",
                "l_reg", "n_anomaly_rows", "n_unlabeled_rows", "zero_anomaly")


def _save_artifacts(spec: RunSpec, result) -> None:
    out = Path(spec.artifact_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, out / f"{spec.stem}.ckpt.json")
    with (out / f"{spec.stem}_trace.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in result.trace:
            w.writerow({k: _fmt(v) for k, v in row.items()})


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None


def _read_existing(path: Path) -> dict[tuple, dict]:
    if not path.exists():
        return {}
    with path.open(newline="") as fh:
        return {(r["config_hash"], r["value"], r["repeat"]): r for r in csv.DictReader(fh)}


def _record_from_row(row: dict, spec: RunSpec) -> RunRecord:
    metrics = {k: float(row[k]) for k in METRICS + PARTITION_METRICS if row.get(k)}
    rec = RunRecord(row["config_hash"], spec.name, spec.axis, spec.value, spec.repeat, spec.seed,
                    status=row["status"], metrics=metrics, n_steps=int(row["n_steps"]),
                    n_skipped=int(row["n_skipped"]), error=row["error"])
    rec.final_loss = float(row["final_loss"]) if row["final_loss"] else float("nan")
    return rec


def run_experiment(cfg: ExperimentConfig, output_dir=None, resume: bool = True,
                   write: bool = True) -> list[RunRecord]:
    """Execute the sweep x repeats grid and write result files.

    With ``resume`` an existing results CSV is consulted and runs whose
    config hash already has an ``ok`` row are not re-executed.
    """
    out_dir = Path(output_dir or cfg.output_path)
    csv_path = out_dir / f"{cfg.name}_results.csv"
    specs = expand(cfg, out_dir / "artifacts" if (cfg.save_artifacts and write) else None)
    existing = _read_existing(csv_path) if (resume and write) else {}

    records: list[RunRecord | None] = [None] * len(specs)
    todo = []
    for i, spec in enumerate(specs):
        row = existing.get((spec.run_hash, _fmt(spec.value), str(spec.repeat)))
        if row is not None and row["status"] == "ok":
            records[i] = _record_from_row(row, spec)
        else:
            todo.append(i)

    workers = _workers()
    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for i, rec in zip(todo, pool.map(execute, [specs[i] for i in todo])):
                records[i] = rec
    else:
        for i in todo:
            records[i] = execute(specs[i])

    if write:
        write_outputs(cfg, records, out_dir)
    return records


def aggregate(cfg: ExperimentConfig, records: list[RunRecord]) -> list[dict]:
    rows = []
    for value in cfg.sweep_values():
        group = [r for r in records if r.value == value and r.status == "ok"]
        row = {"value": value, "n_ok": len(group),
               "n_error": sum(1 for r in records if r.value == value and r.status != "ok")}
        for m in METRICS + PARTITION_METRICS:
            vals = [r.metrics[m] for r in group if m in r.metrics]
            if vals:
                row[f"{m}_mean"] = float(np.mean(vals))
                row[f"{m}_std"] = float(np.std(vals))
        rows.append(row)
    return rows


def write_outputs(cfg: ExperimentConfig, records: list[RunRecord], out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": out_dir / f"{cfg.name}_results.csv",
        "aggregate": out_dir / f"{cfg.name}_aggregate.json",
        "curve": out_dir / f"{cfg.name}_curve.dat",
    }
    with paths["results"].open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for rec in records:
            w.writerow(rec.csv_row())

    agg = aggregate(cfg, records)
    paths["aggregate"].write_text(json.dumps({
        "config": cfg.to_dict(),
        "aggregate": agg,
        "wall_time": {f"{_fmt(r.value)}#{r.repeat}": r.wall_time for r in records},
    }, indent=2, default=str))

    axis = cfg.sweep.axis if cfg.sweep else "none"
    cols = [m for m in METRICS if any(f"{m}_mean" in row for row in agg)]
    with paths["curve"].open("w") as fh:
        fh.write(f"# {cfg.name}: mean over {cfg.repeats} seeds vs {axis}\n")
        fh.write("# index " + axis + " " + " ".join(f"{m}_mean {m}_std" for m in cols) + "\n")
        for i, row in enumerate(agg):
            vals = " ".join(f"{row.get(f'{m}_mean', float('nan')):.6f} {row.get(f'{m}_std', float('nan')):.6f}"
                            for m in cols)
            fh.write(f"{i} {_fmt(row['value']) or '-'} {vals}\n")
    return paths


def _sign_test_p(n_pos: int, n_neg: int) -> float:
    """Two-sided exact binomial p-value with p = 1/2; zero deltas excluded."""
    n = n_pos + n_neg
    if n == 0:
        return 1.0
    k = min(n_pos, n_neg)
    tail = sum(math.comb(n, i) for i in range(k + 1)) / 2.0**n
    return min(1.0, 2.0 * tail)


def compare(a: ExperimentConfig, b: ExperimentConfig, output_dir=None, metric: str = "aucroc",
            records_a=None, records_b=None) -> dict:
    """Paired per-seed deltas (b - a) with a sign-test summary per sweep value."""
    if a.seeds() != b.seeds() or a.data != b.data:
        raise ConfigError("compare needs identical data recipes and seeds")
    if a.sweep_values() != b.sweep_values():
        raise ConfigError("compare needs identical sweep values")
    ra = records_a if records_a is not None else run_experiment(a, output_dir)
    rb = records_b if records_b is not None else run_experiment(b, output_dir)
    index_b = {(_fmt(r.value), r.seed): r for r in rb}
    rows = []
    for r in ra:
        other = index_b[(_fmt(r.value), r.seed)]
        row = {"value": r.value, "seed": r.seed, "status_a": r.status, "status_b": other.status}
        for m in METRICS:
            va, vb = r.metrics.get(m, float("nan")), other.metrics.get(m, float("nan"))
            row[f"{m}_a"], row[f"{m}_b"], row[f"delta_{m}"] = va, vb, vb - va
        rows.append(row)
    deltas = np.array([row[f"delta_{metric}"] for row in rows], dtype=np.float64)
    finite = deltas[np.isfinite(deltas)]
    n_pos, n_neg = int((finite > 0).sum()), int((finite < 0).sum())
    summary = {
        "metric": metric, "n_pairs": len(rows),
        "mean_delta": float(finite.mean()) if finite.size else float("nan"),
        "n_positive": n_pos, "n_negative": n_neg, "n_zero": int((finite == 0).sum()),
        "sign_test_p": _sign_test_p(n_pos, n_neg),
    }
    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"compare_{a.name}__{b.name}.csv"
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: _fmt(v) for k, v in row.items()})
        (out / f"compare_{a.name}__{b.name}.json").write_text(json.dumps(summary, indent=2))
    return {"rows": rows, "summary": summary}


def default_experiment(name: str = "default", objective: str = "anoonly", **overrides) -> ExperimentConfig:
    train_cfg = TrainConfig(loss=LossConfig(objective))
    return replace(ExperimentConfig(name=name, train=train_cfg), **overrides)


def mean_metric(records: list[RunRecord], value=None, metric: str = "aucroc") -> float:
    vals = [r.metrics[metric] for r in records
            if r.status == "ok" and (value is None or r.value == value) and metric in r.metrics]
    if not vals:
        return float("nan")
    return float(np.mean(vals))


def records_to_jsonable(records: list[RunRecord]) -> list[dict]:
    return [asdict(r) for r in records]
