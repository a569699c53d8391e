"""Objectives for semi-supervised anomaly detection.

Scores are squared output norms. Each term returns its value together with
the gradient w.r.t. the quantity it is defined on (scores or hidden batch);
``composite_loss`` chains them through the model.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import BatchTooSmallError, ConfigError, ShapeError
from .model import SSADModel
from .tensor_core import as_matrix

OBJECTIVES = ("deepsad", "anoonly", "reweighted", "anoonly_explicit_bn")

LABELED_ANOMALY = -1
UNLABELED = 1


@dataclass(frozen=True)
class LossConfig:
    objective: str = "anoonly"
    lambda_n: float | None = None
    weight_decay: float = 1e-6
    score_eps: float = 1e-6
    bn_loss_weight: float = 1e-6

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if self.lambda_n is None:
            default = {"deepsad": 1.0, "reweighted": 1.0}.get(self.objective, 0.0)
            object.__setattr__(self, "lambda_n", default)
        if self.objective == "deepsad" and self.lambda_n != 1.0:
            raise ConfigError("DeepSAD fixes lambda_n = 1; use 'reweighted' to vary it")
        if self.objective in ("anoonly", "anoonly_explicit_bn") and self.lambda_n != 0.0:
            raise ConfigError("AnoOnly objectives fix lambda_n = 0")
        if self.lambda_n < 0 or self.weight_decay < 0 or self.bn_loss_weight < 0:
            raise ConfigError("lambda_n and weight_decay must be non-negative")
        if not self.score_eps > 0:
            raise ConfigError("score_eps must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class BatchLossReport:
    total: float
    l_normal: float
    l_anomaly: float
    l_bn_explicit: float
    l_reg: float
    n_anomaly_rows: int
    n_unlabeled_rows: int
    zero_anomaly: bool = False

    def to_row(self) -> dict:
        return asdict(self)


def _check_mask(scores: np.ndarray, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.shape:
        raise ShapeError("mask does not align with scores")
    return mask


def loss_normal(scores, unlabeled_mask, lambda_n: float):
    scores = np.asarray(scores, dtype=np.float64)
    mask = _check_mask(scores, unlabeled_mask)
    value = lambda_n * float(scores[mask].sum())
    grad = np.where(mask, lambda_n, 0.0)
    return value, grad


def loss_anomaly(scores, anomaly_mask, score_eps: float = 1e-6):
    """Sum of inverse scores over labeled anomalies; pushes their scores up."""
    scores = np.asarray(scores, dtype=np.float64)
    mask = _check_mask(scores, anomaly_mask)
    guarded = scores + score_eps
    value = float((1.0 / guarded[mask]).sum())
    grad = np.where(mask, -1.0 / guarded**2, 0.0)
    return value, grad


def loss_bn_explicit(h):
    """Clustering penalty pulling each hidden column to mean 0 and unbiased variance 1.

    Per column: mean**2 + (var_unbiased - 1)**2, summed over columns.
    """
    h = as_matrix(h)
    b = h.shape[0]
    if b < 2:
        raise BatchTooSmallError("the explicit clustering loss needs at least 2 rows")
    mean = h.mean(axis=0)
    centered = h - mean
    var = (centered**2).sum(axis=0) / (b - 1)
    value = float((mean**2).sum() + ((var - 1.0) ** 2).sum())
    grad = 2.0 * mean / b + 2.0 * (var - 1.0) * 2.0 * centered / (b - 1)
    return value, grad


def loss_reg(model: SSADModel, weight_decay: float):
    """Squared L2 norm of the weight matrices (biases and BN affine excluded)."""
    params = dict(model.named_parameters())
    value = 0.0
    grads = {}
    for name in model.weight_names():
        w = params[name]
        value += float((w * w).sum())
        grads[name] = 2.0 * weight_decay * w
    return weight_decay * value, grads


def composite_loss(model: SSADModel, x, train_labels, config: LossConfig):
    """Forward the batch, evaluate the configured objective, backpropagate.

    Returns ``(report, grads)`` with grads keyed by parameter name. All
    rows are forwarded, so under BatchNorm unlabeled rows shape the anomaly
    gradients through the batch statistics even when they carry no loss.
    """
    x = as_matrix(x)
    labels = np.asarray(train_labels)
    if labels.shape != (x.shape[0],):
        raise ShapeError("train_labels must have one entry per row")
    explicit = config.objective == "anoonly_explicit_bn"
    if explicit and model.normalizer is not None:
        raise ConfigError("the explicit clustering objective replaces the normalizer; "
                          "build the model with normalizer 'none'")
    anomaly_mask = labels == LABELED_ANOMALY
    unlabeled_mask = labels == UNLABELED

    out = model.forward(x)
    scores = np.einsum("ij,ij->i", out, out)

    if config.objective in ("deepsad", "reweighted"):
        l_normal, g_normal = loss_normal(scores, unlabeled_mask, config.lambda_n)
    else:
        l_normal, g_normal = 0.0, np.zeros_like(scores)
    l_anomaly, g_anomaly = loss_anomaly(scores, anomaly_mask, config.score_eps)

    grad_hidden = None
    l_bn = 0.0
    if explicit:
        l_bn, grad_hidden = loss_bn_explicit(model.hidden)
        l_bn *= config.bn_loss_weight
        grad_hidden = grad_hidden * config.bn_loss_weight

    grad_scores = g_normal + g_anomaly
    grad_output = 2.0 * out * grad_scores[:, None]
    grads = {k: (None if v is None else v.copy())
             for k, v in model.backward(grad_output, grad_hidden).items()}

    l_reg, reg_grads = loss_reg(model, config.weight_decay)
    for name, g in reg_grads.items():
        grads[name] = grads[name] + g

    n_anom = int(anomaly_mask.sum())
    total = l_normal + l_anomaly + l_bn + l_reg
    report = BatchLossReport(
        total=total, l_normal=l_normal, l_anomaly=l_anomaly, l_bn_explicit=l_bn,
        l_reg=l_reg, n_anomaly_rows=n_anom, n_unlabeled_rows=int(unlabeled_mask.sum()),
        zero_anomaly=n_anom == 0,
    )
    return report, grads
