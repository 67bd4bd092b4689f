"""Synthetic 2-D classification data, labeled/unlabeled splits and augmentation."""

from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError

SPLITS = ("labeled", "unlabeled", "test")


@dataclass(frozen=True)
class LabeledData:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return len(self.y)


def _class_counts(total: int, num_classes: int) -> list[int]:
    base, extra = divmod(total, num_classes)
    return [base + (1 if c < extra else 0) for c in range(num_classes)]


def make_dataset(kind: str, total: int, noise: float = 0.1, num_classes: int = 2, seed: int = 0) -> LabeledData:
    """Generate a class-balanced toy dataset.

    ``two_moons`` and ``rings`` are binary; ``blobs`` centres one class per
    point on a circle of radius 4.  ``noise`` is the std of added Gaussian noise.
    Rows are shuffled, so the result is deterministic in ``seed`` only.
    """
    if kind not in ("two_moons", "blobs", "rings"):
        raise ConfigError(f"unknown dataset kind {kind!r}", "data.kind")
    if kind in ("two_moons", "rings") and num_classes != 2:
        raise ConfigError(f"{kind} only supports num_classes=2", "data.num_classes")
    if num_classes < 2:
        raise ConfigError("num_classes must be >= 2", "data.num_classes")
    if total < 2 * num_classes:
        raise ConfigError(f"total must be >= {2 * num_classes}", "data.total")
    if noise < 0:
        raise ConfigError("noise must be >= 0", "data.noise")

    rng = np.random.default_rng(seed)
    counts = _class_counts(total, num_classes)
    xs, ys = [], []
    for c, n in enumerate(counts):
        if kind == "two_moons":
            t = np.linspace(0.0, np.pi, n)
            if c == 0:
                pts = np.column_stack([np.cos(t), np.sin(t)])
            else:
                pts = np.column_stack([1.0 - np.cos(t), 0.5 - np.sin(t)])
        elif kind == "rings":
            t = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
            radius = 1.0 if c == 0 else 0.5
            pts = radius * np.column_stack([np.cos(t), np.sin(t)])
        else:
            angle = 2.0 * np.pi * c / num_classes
            pts = np.tile([4.0 * np.cos(angle), 4.0 * np.sin(angle)], (n, 1))
        xs.append(pts)
        ys.append(np.full(n, c))
    x = np.concatenate(xs)
    y = np.concatenate(ys)
    if noise > 0:
        x = x + rng.normal(0.0, noise, size=x.shape)
    order = rng.permutation(total)
    return LabeledData(x[order], y[order].astype(np.intp), num_classes)


@dataclass(frozen=True)
class SslDataset:
    """Labeled, unlabeled and test partitions of one dataset.

    Ground-truth labels of unlabeled points are kept out of every public
    training field; only :meth:`oracle_unlabeled_labels` exposes them, for
    diagnostics such as pseudo-label accuracy.
    """

    labeled_x: np.ndarray
    labeled_y: np.ndarray
    unlabeled_x: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    labeled_idx: np.ndarray | None = None
    unlabeled_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    _hidden_y: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def n(self) -> int:
        return len(self.labeled_y)

    @property
    def m(self) -> int:
        return len(self.unlabeled_x)

    @property
    def dim(self) -> int:
        return self.labeled_x.shape[1]

    @property
    def centroid(self) -> np.ndarray:
        """Mean of all training inputs (labeled and unlabeled)."""
        return np.concatenate([self.labeled_x, self.unlabeled_x]).mean(axis=0)

    def oracle_unlabeled_labels(self) -> np.ndarray | None:
        return self._hidden_y

    def with_hidden_labels(self, y) -> "SslDataset":
        """Copy with replaced hidden labels; training must be unaffected."""
        return dataclasses.replace(self, _hidden_y=np.asarray(y))


def split_ssl(full: LabeledData, labels_per_class: int, test_fraction: float = 0.2, seed: int = 0) -> SslDataset:
    """Partition ``full`` into an exactly class-balanced labeled set, an unlabeled pool and a test set."""
    total, c = len(full), full.num_classes
    if not 0 <= test_fraction < 1:
        raise ConfigError("test_fraction must be in [0, 1)", "data.test_fraction")
    if labels_per_class < 1:
        raise ConfigError("labels_per_class must be >= 1", "data.labels_per_class")
    if labels_per_class * c > (1 - test_fraction) * total:
        raise ConfigError(
            f"{labels_per_class} labels x {c} classes do not fit in the training split", "data.labels_per_class"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(total)
    n_test = int(round(test_fraction * total))
    test_idx, train_idx = order[:n_test], order[n_test:]
    chosen = []
    for k in range(c):
        members = train_idx[full.y[train_idx] == k]
        if len(members) < labels_per_class:
            raise ConfigError(f"class {k} has only {len(members)} training points", "data.labels_per_class")
        chosen.append(members[:labels_per_class])
    labeled_idx = np.concatenate(chosen)
    unlabeled_idx = train_idx[~np.isin(train_idx, labeled_idx)]
    return SslDataset(
        labeled_x=full.x[labeled_idx],
        labeled_y=full.y[labeled_idx],
        unlabeled_x=full.x[unlabeled_idx],
        test_x=full.x[test_idx],
        test_y=full.y[test_idx],
        num_classes=c,
        labeled_idx=labeled_idx,
        unlabeled_idx=unlabeled_idx,
        test_idx=test_idx,
        _hidden_y=full.y[unlabeled_idx],
    )


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentationSpec:
    weak_jitter_std: float = 0.05
    strong_jitter_std: float = 0.2
    strong_rotation_max_deg: float = 30.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.weak_jitter_std <= self.strong_jitter_std:
            raise ConfigError("need 0 <= weak_jitter_std <= strong_jitter_std", "augment")
        if not 0 <= self.strong_rotation_max_deg <= 180:
            raise ConfigError("strong_rotation_max_deg must be in [0, 180]", "augment.strong_rotation_max_deg")


def augment_batch(
    x: np.ndarray,
    spec: AugmentationSpec,
    strength: str,
    rng: np.random.Generator,
    centroid: np.ndarray | None = None,
    angle_deg=None,
) -> np.ndarray:
    """Weak: Gaussian jitter.  Strong: rotation about ``centroid`` then jitter.

    Rotation only applies to 2-D inputs.  ``angle_deg`` forces the rotation
    angle (scalar or per-row) instead of drawing it.
    """
    x = np.asarray(x, dtype=np.float64)
    if strength == "weak":
        std = spec.weak_jitter_std
    elif strength == "strong":
        std = spec.strong_jitter_std
        max_deg = spec.strong_rotation_max_deg
        if x.shape[1] == 2 and (max_deg > 0 or angle_deg is not None):
            if angle_deg is None:
                angle_deg = rng.uniform(-max_deg, max_deg, size=len(x))
            theta = np.deg2rad(np.broadcast_to(np.asarray(angle_deg, dtype=np.float64), (len(x),)))
            c = np.zeros(2) if centroid is None else np.asarray(centroid, dtype=np.float64)
            d = x - c
            cos, sin = np.cos(theta), np.sin(theta)
            x = np.column_stack([cos * d[:, 0] - sin * d[:, 1], sin * d[:, 0] + cos * d[:, 1]]) + c
    else:
        raise ConfigError(f"strength must be 'weak' or 'strong', got {strength!r}", "augment")
    if std > 0:
        x = x + rng.normal(0.0, std, size=x.shape)
    return x


def augment(x, spec: AugmentationSpec, strength: str, rng: np.random.Generator | None = None, **kwargs) -> np.ndarray:
    """Augment a single point; see :func:`augment_batch`."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    return augment_batch(np.asarray(x, dtype=np.float64)[None, :], spec, strength, rng, **kwargs)[0]


# ---------------------------------------------------------------------------
# batch sampling


class IndexStream:
    """Endless index stream that reshuffles at every epoch boundary."""

    def __init__(self, n: int, rng: np.random.Generator):
        if n < 1:
            raise ConfigError("cannot sample from an empty split")
        self.n = n
        self.rng = rng
        self._order = rng.permutation(n)
        self._pos = 0

    def take(self, k: int) -> np.ndarray:
        out = np.empty(k, dtype=np.intp)
        filled = 0
        while filled < k:
            if self._pos == self.n:
                self._order = self.rng.permutation(self.n)
                self._pos = 0
            chunk = min(k - filled, self.n - self._pos)
            out[filled : filled + chunk] = self._order[self._pos : self._pos + chunk]
            filled += chunk
            self._pos += chunk
        return out


class BatchSampler:
    """Pairs each labeled batch with ``mu`` times as many unlabeled points.

    Labeled and unlabeled streams use independent generators spawned from
    ``seed``, so the labeled stream does not depend on ``mu`` and the two
    batches are randomly coupled.
    """

    def __init__(self, ds: SslDataset, labeled_batch: int = 64, mu: int = 7, seed: int = 0):
        if labeled_batch < 1:
            raise ConfigError("labeled_batch must be >= 1", "labeled_batch")
        if mu < 1:
            raise ConfigError("mu must be >= 1", "mu")
        if ds.n == 0 or ds.m == 0:
            raise ConfigError("labeled and unlabeled splits must be nonempty")
        self.ds = ds
        self.labeled_batch = labeled_batch
        self.mu = mu
        root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
        l_seed, u_seed = root.spawn(2)
        self.labeled = IndexStream(ds.n, np.random.default_rng(l_seed))
        self.unlabeled = IndexStream(ds.m, np.random.default_rng(u_seed))

    def next_labeled(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.labeled.take(self.labeled_batch)
        return self.ds.labeled_x[idx], self.ds.labeled_y[idx]

    def next_unlabeled(self) -> tuple[np.ndarray, np.ndarray]:
        idx = self.unlabeled.take(self.mu * self.labeled_batch)
        return self.ds.unlabeled_x[idx], idx

    def __iter__(self) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
        while True:
            xl, yl = self.next_labeled()
            xu, _ = self.next_unlabeled()
            yield xl, yl, xu


def batch_sampler(ds: SslDataset, labeled_batch: int = 64, mu: int = 7, seed: int = 0) -> BatchSampler:
    return BatchSampler(ds, labeled_batch, mu, seed)


# ---------------------------------------------------------------------------
# CSV dump / load


def save_csv(ds: SslDataset, path: str | Path) -> None:
    """Header ``x0,...,x{d-1},label,split``; unlabeled rows carry label -1."""
    d = ds.dim
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i}" for i in range(d)] + ["label", "split"])
        for x, y in zip(ds.labeled_x, ds.labeled_y):
            w.writerow([repr(float(v)) for v in x] + [int(y), "labeled"])
        for x in ds.unlabeled_x:
            w.writerow([repr(float(v)) for v in x] + [-1, "unlabeled"])
        for x, y in zip(ds.test_x, ds.test_y):
            w.writerow([repr(float(v)) for v in x] + [int(y), "test"])


def load_csv(path: str | Path, num_classes: int | None = None) -> SslDataset:
    rows = {s: ([], []) for s in SPLITS}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[-2:] != ["label", "split"]:
            raise ConfigError(f"{path}: header must end with label,split")
        d = len(header) - 2
        for line in reader:
            split = line[-1]
            if split not in rows:
                raise ConfigError(f"{path}: unknown split {split!r}")
            rows[split][0].append([float(v) for v in line[:d]])
            rows[split][1].append(int(line[d]))

    def arr(split, i, dtype):
        data = rows[split][i]
        return np.asarray(data, dtype=dtype).reshape((len(data), d) if i == 0 else (len(data),))

    labels = np.concatenate([arr("labeled", 1, np.intp), arr("test", 1, np.intp)])
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    return SslDataset(
        labeled_x=arr("labeled", 0, np.float64),
        labeled_y=arr("labeled", 1, np.intp),
        unlabeled_x=arr("unlabeled", 0, np.float64),
        test_x=arr("test", 0, np.float64),
        test_y=arr("test", 1, np.intp),
        num_classes=k,
    )
