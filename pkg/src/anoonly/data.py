"""Synthetic semi-supervised datasets in a pre-extracted feature space.

Normal rows come from a Gaussian mixture sitting on a common offset (like
non-negative backbone features); anomalies come from K typed generators.
Training labels follow the usual SSAD convention: -1 for the few labeled
anomalies, +1 for everything unlabeled.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .losses import LABELED_ANOMALY, UNLABELED

ANOMALY_KINDS = ("cluster", "shell", "box")
NORMAL = 0


def round_half_up(x: float) -> int:
    # the 1e-9 nudge absorbs products like 0.1 * 35 = 3.5000000000000004 vs 3.4999...
    return int(math.floor(x + 0.5 + 1e-9))


@dataclass(frozen=True)
class DataRecipe:
    d: int = 16
    n_total: int = 2000
    anomaly_ratio: float = 0.05
    normal_clusters: int = 3
    cluster_spread: float = 1.0
    cluster_separation: float = 2.0
    offset: float = 6.0
    anomaly_types: tuple[str, ...] = ("cluster", "cluster", "shell", "cluster", "box")
    anomaly_shift: float = 3.0
    seen_types: tuple[int, ...] | None = None
    gamma_la: float = 0.1
    gamma_n: float = 1.0
    contamination: bool = True
    train_frac: float = 0.7
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "anomaly_types", tuple(self.anomaly_types))
        k = len(self.anomaly_types)
        if self.seen_types is None:
            object.__setattr__(self, "seen_types", tuple(range(1, k + 1)))
        else:
            object.__setattr__(self, "seen_types", tuple(sorted(int(t) for t in self.seen_types)))
        if self.d < 1 or self.n_total < 2 or self.normal_clusters < 1:
            raise ConfigError("d, n_total and normal_clusters must be positive")
        if not 0.0 < self.anomaly_ratio < 1.0:
            raise ConfigError("anomaly_ratio must lie in (0, 1)")
        if not 0.0 < self.gamma_la <= 1.0 or not 0.0 < self.gamma_n <= 1.0:
            raise ConfigError("gamma_la and gamma_n must lie in (0, 1]")
        if not 0.0 < self.train_frac < 1.0:
            raise ConfigError("train_frac must lie in (0, 1)")
        if k < 1 or any(kind not in ANOMALY_KINDS for kind in self.anomaly_types):
            raise ConfigError(f"anomaly_types must be drawn from {ANOMALY_KINDS}")
        if not self.seen_types or not set(self.seen_types) <= set(range(1, k + 1)):
            raise ConfigError("seen_types must be a non-empty subset of 1..K")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["anomaly_types"] = list(self.anomaly_types)
        d["seen_types"] = list(self.seen_types)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DataRecipe":
        return cls(**d)


@dataclass
class SemiDataset:
    features: np.ndarray
    train_label: np.ndarray  # -1 labeled anomaly, +1 unlabeled
    truth: np.ndarray  # 0 normal, k >= 1 anomaly type
    row_id: np.ndarray
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def is_anomaly(self) -> np.ndarray:
        return self.truth > 0

    @property
    def labeled_mask(self) -> np.ndarray:
        return self.train_label == LABELED_ANOMALY

    def take(self, idx) -> "SemiDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return SemiDataset(self.features[idx], self.train_label[idx], self.truth[idx],
                           self.row_id[idx], self.split, dict(self.meta))

    def counts(self) -> dict:
        return {
            "rows": len(self),
            "labeled_anomalies": int(self.labeled_mask.sum()),
            "unlabeled_anomalies": int((self.is_anomaly & ~self.labeled_mask).sum()),
            "normals": int((self.truth == NORMAL).sum()),
        }


def _apportion(total: int, weights) -> np.ndarray:
    """Largest-remainder split of an integer total in proportion to weights."""
    w = np.asarray(weights, dtype=np.float64)
    raw = total * w / w.sum()
    base = np.floor(raw).astype(np.int64)
    rest = total - base.sum()
    order = np.argsort(-(raw - base), kind="stable")
    base[order[:rest]] += 1
    return base


def _type_counts(n_anom: int, k: int) -> np.ndarray:
    return _apportion(n_anom, np.ones(k))


def _sample_anomalies(kind: str, n: int, centers: np.ndarray, offset_vec: np.ndarray,
                      recipe: DataRecipe, direction: np.ndarray, rng) -> np.ndarray:
    d = recipe.d
    spread = recipe.cluster_spread
    if kind == "cluster":
        # a tight cluster displaced from a normal mode along a random direction
        anchor = centers[rng.integers(len(centers))]
        center = anchor + recipe.anomaly_shift * spread * direction
        return center + 0.5 * spread * rng.standard_normal((n, d))
    if kind == "shell":
        # thin spherical shell around the normal mass
        mass_center = centers.mean(axis=0)
        radius = np.sqrt(d) * spread + recipe.anomaly_shift * spread
        v = rng.standard_normal((n, d))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        r = radius + 0.25 * spread * rng.standard_normal((n, 1))
        return mass_center + r * v
    # uniform box enclosing the normal mass with margin
    lo = centers.min(axis=0) - (2.0 + recipe.anomaly_shift) * spread
    hi = centers.max(axis=0) + (2.0 + recipe.anomaly_shift) * spread
    return rng.uniform(lo, hi, size=(n, d))


def _stratified_train_index(truth: np.ndarray, train_frac: float, rng) -> np.ndarray:
    """Per-class (and per anomaly type) train selection with exact class totals."""
    chosen = []
    n_norm_train = round_half_up(train_frac * int((truth == NORMAL).sum()))
    norm_idx = rng.permutation(np.flatnonzero(truth == NORMAL))
    chosen.append(norm_idx[:n_norm_train])
    types = [t for t in np.unique(truth) if t != NORMAL]
    if types:
        n_anom_train = round_half_up(train_frac * int((truth != NORMAL).sum()))
        sizes = [int((truth == t).sum()) for t in types]
        per_type = _apportion(n_anom_train, sizes)
        for t, k in zip(types, per_type):
            idx = rng.permutation(np.flatnonzero(truth == t))
            chosen.append(idx[:k])
    return np.sort(np.concatenate(chosen))


def generate(recipe: DataRecipe) -> tuple[SemiDataset, SemiDataset]:
    """Build the (train, test) pair for a recipe; a pure function of the recipe."""
    rng = np.random.default_rng(recipe.seed)
    d, k = recipe.d, len(recipe.anomaly_types)
    n_anom = round_half_up(recipe.anomaly_ratio * recipe.n_total)
    n_norm = recipe.n_total - n_anom
    if n_anom < 1 or n_norm < 1:
        raise ConfigError("recipe yields an empty class")

    offset_vec = recipe.offset * np.abs(rng.standard_normal(d))
    centers = offset_vec + recipe.cluster_separation * recipe.cluster_spread * rng.standard_normal(
        (recipe.normal_clusters, d))
    directions = rng.standard_normal((k, d))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)

    comp = rng.integers(recipe.normal_clusters, size=n_norm)
    normals = centers[comp] + recipe.cluster_spread * rng.standard_normal((n_norm, d))
    blocks = [normals]
    truth = [np.zeros(n_norm, dtype=np.int64)]
    for t, (kind, n) in enumerate(zip(recipe.anomaly_types, _type_counts(n_anom, k)), start=1):
        blocks.append(_sample_anomalies(kind, int(n), centers, offset_vec, recipe,
                                        directions[t - 1], rng))
        truth.append(np.full(int(n), t, dtype=np.int64))
    features = np.vstack(blocks)
    truth = np.concatenate(truth)

    train_idx = _stratified_train_index(truth, recipe.train_frac, rng)
    test_mask = np.ones(len(truth), dtype=bool)
    test_mask[train_idx] = False
    test_idx = np.flatnonzero(test_mask)

    meta = {"recipe": recipe.to_dict()}
    train = SemiDataset(features[train_idx], np.full(len(train_idx), UNLABELED, dtype=np.int64),
                        truth[train_idx], train_idx.astype(np.int64), "train", dict(meta))
    test = SemiDataset(features[test_idx], np.full(len(test_idx), UNLABELED, dtype=np.int64),
                       truth[test_idx], test_idx.astype(np.int64), "test", dict(meta))

    n_train_anom = int(train.is_anomaly.sum())
    n_lab = round_half_up(recipe.gamma_la * n_train_anom)
    seen_pool = np.flatnonzero(np.isin(train.truth, recipe.seen_types))
    if n_lab < 1:
        raise ConfigError("gamma_la yields zero labeled anomalies")
    if n_lab > len(seen_pool):
        raise ConfigError(f"need {n_lab} labeled anomalies but seen types provide {len(seen_pool)}")
    labeled = rng.choice(seen_pool, size=n_lab, replace=False)
    train.train_label[labeled] = LABELED_ANOMALY

    if not recipe.contamination:
        train = decontaminate(train)
    if recipe.gamma_n < 1.0:
        train = subsample_normal(train, recipe.gamma_n, seed=recipe.seed)
    return train, test


def subsample_normal(ds: SemiDataset, gamma_n: float, seed: int) -> SemiDataset:
    """Keep a seeded prefix of the normal rows; all anomaly rows stay.

    Prefixes of one permutation make smaller ratios nest inside larger ones.
    """
    if not 0.0 < gamma_n <= 1.0:
        raise ConfigError("gamma_n must lie in (0, 1]")
    normal_idx = np.flatnonzero(ds.truth == NORMAL)
    keep_n = round_half_up(gamma_n * len(normal_idx))
    if keep_n < 1:
        raise ConfigError("gamma_n leaves no normal rows")
    perm = np.random.default_rng([seed, 0x5EED]).permutation(len(normal_idx))
    kept = normal_idx[perm[:keep_n]]
    idx = np.sort(np.concatenate([kept, np.flatnonzero(ds.truth != NORMAL)]))
    return ds.take(idx)


def decontaminate(ds: SemiDataset) -> SemiDataset:
    """Drop true anomalies hiding in the unlabeled pool."""
    hidden = (ds.truth != NORMAL) & (ds.train_label == UNLABELED)
    return ds.take(np.flatnonzero(~hidden))


@dataclass
class Batcher:
    """Seeded mini-batch sampler.

    ``uniform`` shuffles and partitions the set into ceil(N / b) batches.
    ``stratified`` uses the same partition but tops up any batch holding
    fewer than ``min_anomalies`` labeled anomalies with labeled rows drawn
    with replacement, replacing unlabeled rows.
    """

    batch_size: int = 32
    strategy: str = "uniform"
    min_anomalies: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.strategy not in ("uniform", "stratified"):
            raise ConfigError(f"unknown batching strategy {self.strategy!r}")
        self._rng = np.random.default_rng([self.seed, 0xBA7C])
        self._pending: list[np.ndarray] = []

    def reset(self) -> None:
        self._rng = np.random.default_rng([self.seed, 0xBA7C])
        self._pending = []

    def n_batches(self, ds: SemiDataset) -> int:
        return -(-len(ds) // self.batch_size)

    def epoch(self, ds: SemiDataset) -> list[np.ndarray]:
        n = len(ds)
        if n == 0:
            raise ConfigError("cannot batch an empty dataset")
        if self.batch_size > n:
            raise ConfigError(f"batch size {self.batch_size} exceeds dataset size {n}")
        perm = self._rng.permutation(n)
        batches = [perm[i:i + self.batch_size] for i in range(0, n, self.batch_size)]
        if self.strategy == "uniform":
            return batches
        labeled = np.flatnonzero(ds.labeled_mask)
        if len(labeled) == 0:
            raise ConfigError("stratified batching needs at least one labeled anomaly")
        out = []
        for batch in batches:
            is_lab = ds.labeled_mask[batch]
            missing = min(self.min_anomalies, len(batch)) - int(is_lab.sum())
            if missing > 0:
                batch = batch.copy()
                slots = np.flatnonzero(~is_lab)[:missing]
                batch[slots] = self._rng.choice(labeled, size=missing, replace=True)
            out.append(batch)
        return out

    def next_batch(self, ds: SemiDataset) -> np.ndarray:
        if not self._pending:
            self._pending = self.epoch(ds)[::-1]
        return self._pending.pop()


def next_batch(batcher: Batcher, ds: SemiDataset) -> tuple[np.ndarray, np.ndarray]:
    idx = batcher.next_batch(ds)
    return ds.features[idx], ds.train_label[idx]


def _float_repr(v: float) -> str:
    return repr(float(v))


def save_csv(ds: SemiDataset, path) -> None:
    """Write ``<path>`` (CSV) plus ``<path>.json`` sidecar carrying the recipe."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"f{j}" for j in range(ds.d)] + ["train_label", "truth_type"])
        for row, lab, t in zip(ds.features, ds.train_label, ds.truth):
            w.writerow([_float_repr(v) for v in row] + [int(lab), int(t)])
    sidecar = {"split": ds.split, "row_id": ds.row_id.tolist(), **ds.meta}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def load_csv(path) -> SemiDataset:
    path = Path(path)
    with path.open(newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        d = len(header) - 2
        if header != [f"f{j}" for j in range(d)] + ["train_label", "truth_type"]:
            raise ConfigError(f"unexpected dataset header in {path}")
        rows = list(r)
    feats = np.array([[float(v) for v in row[:d]] for row in rows], dtype=np.float64).reshape(-1, d)
    labels = np.array([int(row[d]) for row in rows], dtype=np.int64)
    truth = np.array([int(row[d + 1]) for row in rows], dtype=np.int64)
    side_path = Path(str(path) + ".json")
    meta, split, row_id = {}, "train", np.arange(len(rows), dtype=np.int64)
    if side_path.exists():
        side = json.loads(side_path.read_text())
        split = side.pop("split", split)
        row_id = np.asarray(side.pop("row_id", row_id), dtype=np.int64)
        meta = side
    return SemiDataset(feats, labels, truth, row_id, split, meta)


def with_seed(recipe: DataRecipe, seed: int) -> DataRecipe:
    return replace(recipe, seed=seed)
