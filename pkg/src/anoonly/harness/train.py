"""Optimizers, the mini-batch training loop and test-split evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from ..data import Batcher, SemiDataset
from ..errors import ConfigError, NumericError
from ..losses import BatchLossReport, LossConfig, composite_loss
from ..metrics import all_metrics
from ..model import ModelRecipe, NormalizerKind, SSADModel, build_model
from ..tensor_core import BatchNormLayer

log = logging.getLogger(__name__)

ZERO_ANOMALY_POLICIES = ("skip_update", "skip_entirely")


class TrainingDiverged(NumericError):
    def __init__(self, message: str, diagnostic: dict):
        super().__init__(message)
        self.diagnostic = diagnostic


class SGD:
    def __init__(self, lr: float, momentum: float = 0.0):
        self.lr = lr
        self.momentum = momentum
        self._velocity: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray]) -> None:
        for name, p in params:
            g = grads[name]
            if self.momentum:
                v = self._velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self._velocity[name] = v
                g = v
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: list[tuple[str, np.ndarray]], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params:
            g = grads[name]
            m = self._m.get(name, np.zeros_like(p))
            v = self._v.get(name, np.zeros_like(p))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self._m[name], self._v[name] = m, v
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    batching: str = "stratified"
    min_anomalies: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    model: dict = field(default_factory=dict)  # ModelRecipe fields minus input_dim/seed
    zero_anomaly_policy: str = "skip_update"
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.loss, dict):
            object.__setattr__(self, "loss", LossConfig(**self.loss))
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.zero_anomaly_policy not in ZERO_ANOMALY_POLICIES:
            raise ConfigError(f"zero_anomaly_policy must be one of {ZERO_ANOMALY_POLICIES}")
        bad = {"input_dim", "seed"} & set(self.model)
        if bad:
            raise ConfigError(f"model overrides may not set {sorted(bad)}")

    def recipe(self, input_dim: int) -> ModelRecipe:
        return ModelRecipe(input_dim=input_dim, seed=self.seed, **self.model)

    def batcher(self) -> Batcher:
        return Batcher(self.batch_size, self.batching, self.min_anomalies, seed=self.seed)

    def make_optimizer(self):
        if self.optimizer == "sgd":
            return SGD(self.lr, self.momentum)
        return Adam(self.lr, self.beta1, self.beta2, self.adam_eps)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = _jsonable_model(self.model)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _jsonable_model(model: dict) -> dict:
    out = dict(model)
    norm = out.get("normalizer")
    if isinstance(norm, NormalizerKind):
        out["normalizer"] = norm.label
    if "hidden_dims" in out:
        out["hidden_dims"] = list(out["hidden_dims"])
    return out


@dataclass
class TrainResult:
    model: SSADModel
    trace: list[dict]
    n_steps: int = 0
    n_skipped: int = 0

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for row in self.trace:
            by_epoch.setdefault(row["epoch"], []).append(row["total"])
        return [float(np.mean(v)) for _, v in sorted(by_epoch.items())]


def _no_signal(report: BatchLossReport, loss: LossConfig) -> bool:
    """True when a zero-anomaly batch carries no loss supervision at all."""
    return report.zero_anomaly and loss.objective in ("anoonly", "reweighted") and loss.lambda_n == 0.0


def train(model_or_recipe, ds: SemiDataset, cfg: TrainConfig) -> TrainResult:
    """Run ``cfg.epochs`` passes of mini-batch training on ``ds``.

    Deterministic for a fixed config; every step's BatchLossReport lands in
    the trace. Non-finite losses abort with ``TrainingDiverged``.
    """
    if isinstance(model_or_recipe, SSADModel):
        model = model_or_recipe
    else:
        model = build_model(model_or_recipe or cfg.recipe(ds.d))
    model.train()
    if cfg.loss.objective == "anoonly_explicit_bn" and model.normalizer is not None:
        raise ConfigError("the explicit clustering objective needs normalizer 'none'")
    batcher = cfg.batcher()
    opt = cfg.make_optimizer()
    params = model.named_parameters()
    bn = model.normalizer if isinstance(model.normalizer, BatchNormLayer) else None
    trace: list[dict] = []
    n_steps = n_skipped = 0
    warned = False
    for epoch in range(cfg.epochs):
        for step, idx in enumerate(batcher.epoch(ds)):
            small = len(idx) < 2
            if small and cfg.loss.objective == "anoonly_explicit_bn":
                n_skipped += 1
                continue
            model.freeze_bn_stats = bool(bn is not None and small)
            if model.freeze_bn_stats and not warned:
                log.warning("batch of %d row(s): batch norm falls back to running statistics", len(idx))
                warned = True
            saved = None
            if bn is not None and cfg.zero_anomaly_policy == "skip_entirely":
                saved = (bn.running_mean.copy(), bn.running_var.copy())
            report, grads = composite_loss(model, ds.features[idx], ds.train_label[idx], cfg.loss)
            if not np.isfinite(report.total):
                diag = {"epoch": epoch, "step": step, **report.to_row()}
                raise TrainingDiverged(f"non-finite loss at epoch {epoch} step {step}", diag)
            skipped = _no_signal(report, cfg.loss)
            if skipped:
                n_skipped += 1
                if saved is not None:
                    bn.running_mean, bn.running_var = saved
            else:
                opt.step(params, grads)
                n_steps += 1
            trace.append({"epoch": epoch, "step": step, "skipped": skipped, **report.to_row()})
    model.freeze_bn_stats = False
    return TrainResult(model, trace, n_steps, n_skipped)


def evaluate(model: SSADModel, test: SemiDataset, seen_types=None) -> dict[str, float]:
    """Eval-mode metrics on the test split, plus seen/unseen partitions.

    The partitions pair all test normals with the anomalies of the given
    types; they are reported only when some anomaly types are unseen.
    """
    model.eval()
    scores = model.score(test.features)
    anomaly = test.truth > 0
    out = all_metrics(scores, anomaly)
    types = np.unique(test.truth[anomaly])
    if seen_types is not None and not set(types.tolist()) <= set(seen_types):
        normal = ~anomaly
        seen = np.isin(test.truth, list(seen_types))
        unseen = anomaly & ~seen
        for prefix, mask in (("seen", seen), ("unseen", unseen)):
            keep = normal | mask
            if mask.any():
                for k, v in all_metrics(scores[keep], anomaly[keep]).items():
                    out[f"{prefix}_{k}"] = v
    return out
