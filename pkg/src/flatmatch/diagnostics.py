"""Measurement tools: worst-case sharpness, loss-landscape slices, gradient angles."""

from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import MaskedTargets, consistency_loss, cross_entropy, pseudo_targets
from .model import MlpSpec, ParamVector, forward, random_direction
from .optim import DEGENERATE_NORM, sam_perturbation


class Sharpness(NamedTuple):
    value: float
    degenerate: bool


class Angle(NamedTuple):
    degrees: float
    degenerate: bool


def worst_case_sharpness(loss_fn: Callable[[Tensor], Tensor], theta: ParamVector, rho: float) -> Sharpness:
    """``L(theta + eps*) - L(theta)`` with ``eps*`` the normalized-gradient step of radius ``rho``."""
    if not rho > 0:
        raise ValueError(f"rho must be > 0, got {rho}")
    base, g = ad.value_and_grad(loss_fn, theta)
    eps, degenerate = sam_perturbation(theta.like(g), rho)
    if degenerate:
        return Sharpness(0.0, True)
    return Sharpness(loss_fn(Tensor(theta.values + eps.values)).item() - base, False)


def probe_loss(spec: MlpSpec, x, targets) -> Callable[[Tensor], Tensor]:
    """Loss closure over a batch: CE for integer labels, masked consistency for pseudo-targets."""
    if isinstance(targets, MaskedTargets):
        return lambda t: consistency_loss(forward(spec, t, x), targets)
    labels = np.asarray(targets)
    return lambda t: cross_entropy(forward(spec, t, x), labels)


def sharpness_probe(spec: MlpSpec, theta: ParamVector, x, targets, rho: float = 0.05) -> Sharpness:
    """Sharpness of the model on ``(x, targets)``; see :func:`worst_case_sharpness`."""
    return worst_case_sharpness(probe_loss(spec, x, targets), theta, rho)


def gradient_angle(grad_l: ParamVector, grad_ssl: ParamVector) -> Angle:
    """Angle in degrees between two gradients; 0 with ``degenerate=True`` if either vanishes."""
    a = np.asarray(getattr(grad_l, "values", grad_l), dtype=np.float64)
    b = np.asarray(getattr(grad_ssl, "values", grad_ssl), dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        return Angle(0.0, True)
    # half-angle form stays exact for parallel inputs, unlike arccos of a rounded cosine
    ua, ub = a / na, b / nb
    rad = 2.0 * np.arctan2(np.linalg.norm(ua - ub), np.linalg.norm(ua + ub))
    return Angle(float(np.degrees(rad)), False)


# ---------------------------------------------------------------------------
# landscapes


@dataclass
class LandscapeGrid:
    a: np.ndarray
    b: np.ndarray
    loss: np.ndarray  # shape (len(a), len(b))
    tag: str = "labeled"
    seeds: tuple[int, ...] = ()
    ranges: tuple[tuple[float, float], ...] = ()
    filter_normalized: bool = True
    meta: dict = field(default_factory=dict)

    @property
    def ndim(self) -> int:
        return len(self.seeds)

    def center_loss(self) -> float:
        i = int(np.flatnonzero(self.a == 0.0)[0])
        j = int(np.flatnonzero(self.b == 0.0)[0])
        return float(self.loss[i, j])

    def curvature_at_zero(self) -> float:
        """Second difference along the first axis at offset zero."""
        i = int(np.flatnonzero(self.a == 0.0)[0])
        j = int(np.flatnonzero(self.b == 0.0)[0])
        h = float(self.a[i + 1] - self.a[i])
        return float((self.loss[i + 1, j] - 2 * self.loss[i, j] + self.loss[i - 1, j]) / h**2)

    def to_csv(self, path: str | Path) -> tuple[Path, Path]:
        """Write ``a,b,loss`` rows and a JSON header next to them."""
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["a", "b", "loss"])
            for i, av in enumerate(self.a):
                for j, bv in enumerate(self.b):
                    w.writerow([repr(float(av)), repr(float(bv)), repr(float(self.loss[i, j]))])
        header = path.with_suffix(".json")
        header.write_text(
            json.dumps(
                {
                    "tag": self.tag,
                    "seeds": list(self.seeds),
                    "ranges": [list(r) for r in self.ranges],
                    "filter_normalized": self.filter_normalized,
                    "shape": list(self.loss.shape),
                    **self.meta,
                },
                indent=2,
                sort_keys=True,
            )
            + "\n"
        )
        return path, header


def symmetric_offsets(lo: float, hi: float, num: int) -> np.ndarray:
    if num < 3:
        raise ValueError("need at least 3 grid points")
    if not np.isclose(lo, -hi):
        raise ValueError(f"range must be symmetric about 0, got ({lo}, {hi})")
    t = np.linspace(lo, hi, num)
    if num % 2:
        t[num // 2] = 0.0
    return t


def scan(
    loss_value: Callable[[np.ndarray], float],
    theta: ParamVector,
    directions: list[ParamVector],
    offsets: list[np.ndarray],
    workers: int = 1,
) -> np.ndarray:
    """Evaluate ``loss_value(theta + sum_k offsets_k * d_k)`` on the full offset grid.

    Cells are independent; with ``workers > 1`` they are spread over a
    thread pool and merged back by index, so the result does not depend on
    the worker count.
    """
    shape = tuple(len(o) for o in offsets)
    cells = list(np.ndindex(*shape))
    base = theta.values

    def cell(idx):
        point = base.copy()
        for d, o, i in zip(directions, offsets, idx):
            c = o[i]
            if c != 0.0:
                point += c * d.values
        return loss_value(point)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            values = list(pool.map(cell, cells))
    else:
        values = [cell(c) for c in cells]
    return np.asarray(values, dtype=np.float64).reshape(shape)


def _scan_loss(spec: MlpSpec, theta: ParamVector, x, y, tag: str, tau: float):
    if tag == "labeled":
        fn = probe_loss(spec, x, y)
    elif tag == "unlabeled":
        # pseudo-targets are frozen at theta so every cell measures the same functional
        fn = probe_loss(spec, x, pseudo_targets(forward(spec, theta, x), tau))
    else:
        raise ValueError(f"tag must be 'labeled' or 'unlabeled', got {tag!r}")
    return lambda values: fn(Tensor(values)).item()


def landscape_1d(
    spec: MlpSpec,
    theta: ParamVector,
    x,
    y=None,
    seed: int = 0,
    t_range: tuple[float, float] = (-1.0, 1.0),
    num_points: int = 21,
    filter_normalized: bool = True,
    tag: str = "labeled",
    tau: float = 0.0,
    workers: int = 1,
) -> LandscapeGrid:
    """Loss along ``theta + t*d`` for one random direction ``d``."""
    t = symmetric_offsets(*t_range, num_points)
    d = random_direction(theta, seed, filter_normalized)
    values = scan(_scan_loss(spec, theta, x, y, tag, tau), theta, [d], [t], workers)
    return LandscapeGrid(t, np.zeros(1), values[:, None], tag, (seed,), (tuple(t_range),), filter_normalized)


def landscape_2d(
    spec: MlpSpec,
    theta: ParamVector,
    x,
    y=None,
    seeds: tuple[int, int] = (0, 1),
    ranges: tuple[tuple[float, float], tuple[float, float]] = ((-1.0, 1.0), (-1.0, 1.0)),
    n: int = 21,
    filter_normalized: bool = True,
    tag: str = "labeled",
    tau: float = 0.0,
    workers: int = 1,
) -> LandscapeGrid:
    """Loss over the plane ``theta + a*d1 + b*d2`` spanned by two seeded directions."""
    a = symmetric_offsets(*ranges[0], n)
    b = symmetric_offsets(*ranges[1], n)
    d1 = random_direction(theta, seeds[0], filter_normalized)
    d2 = random_direction(theta, seeds[1], filter_normalized)
    values = scan(_scan_loss(spec, theta, x, y, tag, tau), theta, [d1, d2], [a, b], workers)
    return LandscapeGrid(a, b, values, tag, tuple(seeds), tuple(tuple(r) for r in ranges), filter_normalized)
