"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Training-based checks use the package defaults (data recipe, model,
optimizer, 200 epochs) with 5 repeat seeds 0..4. Sweeps shared by more
than one criterion are run once per session.
"""
import csv
import functools
import time
from dataclasses import replace

import numpy as np
import pytest

from anoonly.data import DataRecipe
from anoonly.harness.experiment import ExperimentConfig, Sweep, mean_metric, run_experiment
from anoonly.harness.train import TrainConfig
from anoonly.losses import LossConfig, composite_loss
from anoonly.metrics import aucpr_anomaly, aucpr_normal, aucroc
from anoonly.tensor_core import BatchNormLayer

from conftest import fd_err
from helpers import (
    NORMALIZERS,
    loss_fd_check,
    pair_count_auc,
    random_batch,
    random_scored_set,
    small_model,
    threshold_walk_ap,
    well_posed,
)

REPEATS = 5


def experiment(name, objective="anoonly", sweep=None, data=None, **train_kw):
    tcfg = TrainConfig(loss=LossConfig(objective), **train_kw)
    return ExperimentConfig(name=name, data=data or DataRecipe(), train=tcfg, sweep=sweep,
                            repeats=REPEATS)


@functools.lru_cache(maxsize=None)
def sweep_records(name, objective, axis, values, data_kw=(), train_kw=()):
    cfg = experiment(name, objective, Sweep(axis, values), DataRecipe(**dict(data_kw)), **dict(train_kw))
    t0 = time.perf_counter()
    records = run_experiment(cfg, write=False)
    assert all(r.status == "ok" for r in records), [r.error for r in records if r.error]
    return records, time.perf_counter() - t0


def means(records, values, metric="aucroc"):
    return {v: mean_metric(records, v, metric) for v in values}


def fmt(d):
    return ", ".join(f"{k}={v:.4f}" for k, v in d.items())


# -- property criteria ------------------------------------------------------

def test_c01_gradient_correctness(verdict):
    t0 = time.perf_counter()
    combos = [(o, n) for o in ("deepsad", "anoonly", "reweighted") for n in NORMALIZERS]
    combos.append(("anoonly_explicit_bn", "none"))
    worst, checked, resampled = 0.0, 0, 0
    for objective, normalizer in combos:
        for i in range(100):
            rng = np.random.default_rng(10_000 + i)
            extra = {}
            if objective == "reweighted":
                extra["lambda_n"] = float(rng.choice([1e-6, 1e-2, 0.5, 1.0]))
            if objective == "anoonly_explicit_bn":
                extra["bn_loss_weight"] = float(rng.choice([1e-3, 0.1, 1.0]))
            cfg = LossConfig(objective, weight_decay=float(rng.choice([0.0, 1e-3])), **extra)
            while True:
                model = small_model(normalizer, seed=int(rng.integers(2**31)), hidden=(5,), rep=3,
                                    final_activation=bool(i % 2))
                x, labels = random_batch(rng, rows=8, cols=4, n_anomalies=int(rng.integers(1, 4)))
                x *= rng.uniform(0.5, 3.0)
                if well_posed(model, x, labels, kink_margin=1e-3):
                    break
                resampled += 1
            _, analytic, numeric = loss_fd_check(model, x, labels, cfg, step=1e-5)
            worst = max(worst, fd_err(analytic, numeric))
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    verdict(1, "composite gradients vs finite differences", ok,
            f"{checked} instances ({resampled} ill-posed draws resampled), max rel err {worst:.2e} "
            f"(tol 1e-4), {elapsed:.1f}s (limit 60s)")
    assert ok


def test_c02_batchnorm_identity(verdict):
    rng = np.random.default_rng(2)
    worst_mean = worst_var = 0.0
    eps = 1e-5
    for _ in range(500):
        b, d = int(rng.integers(2, 65)), int(rng.integers(1, 17))
        h = rng.normal(loc=rng.uniform(-50, 50, d), scale=rng.uniform(0.01, 20, d), size=(b, d))
        y = BatchNormLayer(d, eps=eps).forward_train(h)
        var = h.var(axis=0)
        worst_mean = max(worst_mean, float(np.abs(y.mean(axis=0)).max()))
        worst_var = max(worst_var, float(np.abs(y.var(axis=0) - var / (var + eps)).max()))
    ok = worst_mean < 1e-9 and worst_var < 1e-6
    verdict(2, "batch norm output is standardized", ok,
            f"max |col mean| {worst_mean:.1e} (<1e-9), max var deviation {worst_var:.1e} (<1e-6)")
    assert ok


def _anomaly_row_grads(model, x, labels):
    composite_loss(model, x, labels, LossConfig("anoonly", weight_decay=0.0))
    return model.input_grad[labels == -1].copy()


def test_c03_statistical_coupling(verdict):
    changed_bn, max_none = 0, 0.0
    for i in range(100):
        rng = np.random.default_rng(30_000 + i)
        x, labels = random_batch(rng, rows=8, cols=4, n_anomalies=2)
        normal_rows = np.flatnonzero(labels == 1)
        drop = rng.choice(normal_rows, size=int(rng.integers(1, len(normal_rows) + 1)), replace=False)
        keep = np.setdiff1d(np.arange(8), drop)
        for normalizer in ("bn*", "none"):
            model = small_model(normalizer, seed=i)
            full = _anomaly_row_grads(model, x, labels)
            part = _anomaly_row_grads(model, x[keep], labels[keep])
            delta = float(np.linalg.norm(full - part))
            if normalizer == "none":
                max_none = max(max_none, delta)
            elif delta > 1e-8:
                changed_bn += 1
    ok = changed_bn >= 95 and max_none == 0.0
    verdict(3, "deleting normal rows moves anomaly gradients only under BN", ok,
            f"BN changed on {changed_bn}/100 (need >=95), none max change {max_none:.1e} (need 0)")
    assert ok


def test_c04_metric_oracles(verdict):
    rng = np.random.default_rng(4)
    worst, mono_ok = 0.0, True
    for _ in range(1000):
        s, y = random_scored_set(rng)
        fast = (aucroc(s, y), aucpr_anomaly(s, y), aucpr_normal(s, y))
        slow = (pair_count_auc(s, y), threshold_walk_ap(list(s), list(y)),
                threshold_walk_ap(list(-s), list(~y)))
        worst = max(worst, max(abs(a - b) for a, b in zip(fast, slow)))
        t = np.exp(s / 8.0) * 3.0 + 1.0
        mono_ok &= (aucroc(t, y), aucpr_anomaly(t, y), aucpr_normal(t, y)) == fast
    ok = worst <= 1e-12 and mono_ok
    verdict(4, "metrics match brute-force oracles", ok,
            f"1000 draws, max abs diff {worst:.1e} (<=1e-12), monotone invariance exact: {mono_ok}")
    assert ok


def test_c05_lambda_continuity(verdict):
    mismatches = 0
    for i in range(200):
        rng = np.random.default_rng(50_000 + i)
        x, labels = random_batch(rng, rows=8, cols=4, n_anomalies=int(rng.integers(0, 4)))
        normalizer = NORMALIZERS[i % 4]
        for a, b in ((LossConfig("reweighted", lambda_n=1.0), LossConfig("deepsad")),
                     (LossConfig("reweighted", lambda_n=0.0), LossConfig("anoonly"))):
            ra, ga = composite_loss(small_model(normalizer, seed=i), x, labels, a)
            rb, gb = composite_loss(small_model(normalizer, seed=i), x, labels, b)
            same = ra.total == rb.total and all(np.array_equal(ga[k], gb[k]) for k in ga)
            mismatches += not same
    ok = mismatches == 0
    verdict(5, "reweighted limits equal DeepSAD and AnoOnly bit for bit", ok,
            f"{mismatches} mismatches over 400 loss+gradient comparisons")
    assert ok


# -- training criteria ------------------------------------------------------

NORM_VALUES = ("none", "ln", "bn*", "bn", "bn_dagger")


def test_c06_explicit_loss_matches_batchnorm(verdict):
    records, _ = sweep_records("norm", "anoonly", "normalizer", NORM_VALUES)
    m = means(records, ("bn", "bn_dagger"))
    seconds = sum(r.wall_time for r in records if r.value in ("bn", "bn_dagger"))
    gap = abs(m["bn_dagger"] - m["bn"])
    ok = gap <= 0.03 and seconds < 600
    verdict(6, "explicit clustering loss tracks implicit batch norm", ok,
            f"{fmt(m)}, |gap| {gap:.4f} (<=0.03), runtime {seconds:.0f}s (<600s)")
    assert ok


def test_c07_normalizer_ordering(verdict):
    records, _ = sweep_records("norm", "anoonly", "normalizer", NORM_VALUES)
    m = means(records, ("none", "ln", "bn"))
    ok = m["none"] < m["ln"] < m["bn"] and m["bn"] - m["none"] >= 0.10
    verdict(7, "none < LN < BN with a >=0.10 deficit without BN", ok,
            f"{fmt(m)}, deficit {m['bn'] - m['none']:.4f}")
    assert ok


def test_c08_lambda_sweep(verdict):
    values = (1.0, 1e-6, 0.0)
    records, _ = sweep_records("lambda", "anoonly", "lambda_n", values)
    m = means(records, values)
    margin = min(m[0.0], m[1e-6]) - m[1.0]
    ok = margin >= 0.03
    verdict(8, "small normal-loss weight beats lambda_n = 1", ok,
            f"{fmt(m)}, margin {margin:.4f} (>=0.03)")
    assert ok


GAMMA_N = (0.05, 0.2, 0.5, 1.0)


def test_c09_normal_ratio_trend(verdict):
    per_method, ok = {}, True
    for objective in ("anoonly", "deepsad"):
        records, _ = sweep_records("gamma_n", objective, "gamma_n", GAMMA_N)
        per_method[objective] = m = means(records, GAMMA_N)
        sharp = m[0.05] <= min(m[0.2], m[0.5], m[1.0]) - 0.05
        ok &= sharp
        if objective == "anoonly":
            ok &= m[0.5] >= m[0.2] - 0.02 and m[1.0] >= m[0.5] - 0.02
    detail = "; ".join(f"{k}: {fmt(v)}" for k, v in per_method.items())
    verdict(9, "AnoOnly non-decreasing in gamma_n, both collapse at 0.05", ok, detail)
    assert ok


def test_c10_batch_size_plateau(verdict):
    values = (2, 8, 16, 32, 64)
    records, _ = sweep_records("batch", "anoonly", "batch_size", values)
    m = means(records, values)
    plateau = [m[b] for b in (8, 16, 32, 64)]
    spread = max(plateau) - min(plateau)
    shortfall = min(plateau) - m[2]
    ok = spread <= 0.03 and shortfall >= 0.03
    verdict(10, "plateau for b>=8, batch size 2 underperforms", ok,
            f"{fmt(m)}, plateau spread {spread:.4f} (<=0.03), b=2 shortfall {shortfall:.4f} (>=0.03)")
    assert ok


def test_c11_label_noise(verdict):
    drops = {}
    for objective in ("deepsad", "anoonly"):
        records, _ = sweep_records("noise", objective, "noise", ("contaminated", "clean"))
        m = means(records, ("contaminated", "clean"))
        drops[objective] = m["clean"] - m["contaminated"]
    ok = drops["deepsad"] - drops["anoonly"] >= 0.01
    verdict(11, "contamination hurts DeepSAD more than AnoOnly", ok,
            f"clean-noisy drop: deepsad {drops['deepsad']:.4f}, anoonly {drops['anoonly']:.4f}, "
            f"difference {drops['deepsad'] - drops['anoonly']:.4f} (>=0.01)")
    assert ok


def test_c12_unseen_types(verdict):
    ano, _ = sweep_records("seen", "anoonly", "seen_types", (3,))
    dsad, _ = sweep_records("seen", "deepsad", "seen_types", (3,), train_kw=(("batching", "uniform"),))
    res = {name: {p: mean_metric(recs, 3, f"{p}_aucroc") for p in ("seen", "unseen")}
           for name, recs in (("anoonly", ano), ("deepsad_uniform", dsad))}
    ok = (res["anoonly"]["seen"] >= res["deepsad_uniform"]["seen"]
          and res["anoonly"]["unseen"] >= res["deepsad_uniform"]["unseen"]
          and all(v["seen"] >= v["unseen"] for v in res.values()))
    detail = "; ".join(f"{k}: seen {v['seen']:.4f} unseen {v['unseen']:.4f}" for k, v in res.items())
    verdict(12, "AnoOnly >= DeepSAD on seen and unseen types, seen >= unseen", ok, detail)
    assert ok


def test_c13_reproducible_csv(verdict, tmp_path, monkeypatch):
    cfg = experiment("repro", sweep=Sweep("normalizer", ("none", "bn", "bn_dagger")),
                     data=DataRecipe(n_total=600), epochs=20)
    cfg = replace(cfg, repeats=2)
    run_experiment(cfg, tmp_path / "a", resume=False)
    monkeypatch.setenv("ANOONLY_WORKERS", "2")
    run_experiment(cfg, tmp_path / "b", resume=False)
    a = (tmp_path / "a" / "repro_results.csv").read_bytes()
    b = (tmp_path / "b" / "repro_results.csv").read_bytes()
    rows = list(csv.DictReader((tmp_path / "a" / "repro_results.csv").open()))
    ok = a == b and len(rows) == 6 and all(r["status"] == "ok" for r in rows)
    verdict(13, "rerunning a config gives a bit-identical results CSV", ok,
            f"{len(rows)} rows, serial vs 2-worker rerun identical: {a == b}")
    assert ok
