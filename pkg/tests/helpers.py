"""Shared builders and brute-force oracles for the test suite."""
import itertools

import numpy as np

from anoonly.losses import LossConfig, composite_loss
from anoonly.model import ModelRecipe, build_model
from conftest import central_diff

NORMALIZERS = ("none", "ln", "bn*", "bn")


def small_model(normalizer="bn*", seed=0, input_dim=4, hidden=(6,), rep=3, **kw):
    recipe = ModelRecipe(input_dim=input_dim, hidden_dims=hidden, rep_dim=rep,
                         normalizer=normalizer, seed=seed, **kw)
    model = build_model(recipe)
    if model.normalizer is not None and getattr(model.normalizer, "affine", False):
        r = np.random.default_rng(seed + 99)
        model.normalizer.gamma[:] = r.uniform(0.5, 1.5, size=model.normalizer.dim)
        model.normalizer.beta[:] = r.normal(scale=0.3, size=model.normalizer.dim)
    return model


def random_batch(rng, rows=8, cols=4, n_anomalies=2):
    x = rng.normal(size=(rows, cols))
    labels = np.ones(rows, dtype=np.int64)
    labels[rng.choice(rows, size=n_anomalies, replace=False)] = -1
    return x, labels


def loss_fd_check(model, x, labels, config: LossConfig, step=1e-6):
    """Analytic composite gradient and central differences over all parameters."""
    report, grads = composite_loss(model, x, labels, config)
    analytic = model.flatten_grads(grads)
    theta = model.get_flat()

    def total(flat):
        model.set_flat(flat)
        return composite_loss(model, x, labels, config)[0].total

    numeric = central_diff(total, theta, step=step)
    model.set_flat(theta)
    return report, analytic, numeric


def pair_count_auc(s, y):
    """O(n^2) oracle: fraction of (anomaly, normal) pairs ordered correctly."""
    pos = [a for a, t in zip(s, y) if t]
    neg = [b for b, t in zip(s, y) if not t]
    total = 0.0
    for a, b in itertools.product(pos, neg):
        total += 1.0 if a > b else 0.5 if a == b else 0.0
    return total / (len(pos) * len(neg))


def threshold_walk_ap(s, positive):
    """Oracle: sweep each distinct threshold from high to low, sum dRecall * precision."""
    n_pos = sum(positive)
    ap, prev_tp = 0.0, 0
    for t in sorted(set(s), reverse=True):
        flagged = [p for v, p in zip(s, positive) if v >= t]
        tp = sum(flagged)
        ap += (tp - prev_tp) / n_pos * (tp / len(flagged))
        prev_tp = tp
    return ap


def random_scored_set(rng, max_size=12):
    n = int(rng.integers(2, max_size + 1))
    y = rng.random(n) < rng.uniform(0.2, 0.8)
    y[0], y[1] = True, False
    y = rng.permutation(y)
    if rng.random() < 0.5:
        s = rng.integers(0, 4, size=n).astype(float)  # plenty of ties
    else:
        s = rng.normal(size=n)
    return s, y


def well_posed(model, x, labels, kink_margin=1e-4, min_score=1e-3):
    """True when central differences are a trustworthy oracle at this point.

    Every enhancer pre-activation sits at least ``kink_margin`` from the
    ReLU kink and every labeled-anomaly score stays clear of the 1/s pole.
    """
    h = np.asarray(x, dtype=np.float64)
    for layer, act in zip(model.enhancer, model.activations):
        pre = layer.forward(h)
        if np.abs(pre).min() < kink_margin:
            return False
        h = act.forward(pre)
    model.train()
    scores = model.score(x)
    return bool(np.all(scores[np.asarray(labels) == -1] >= min_score))
