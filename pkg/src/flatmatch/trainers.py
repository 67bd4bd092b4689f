"""Training loops: supervised, pseudo-label SSL baseline, FlatMatch(-e) and fixed labels."""

from __future__ import annotations

import csv
import dataclasses
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .data import AugmentationSpec, BatchSampler, IndexStream, SslDataset, augment_batch, make_dataset, split_ssl
from .diagnostics import gradient_angle, sharpness_probe
from .errors import ConfigError, NumericError
from .losses import consistency_loss, cross_entropy
from .model import MlpSpec, ParamVector, forward, init_params, softmax
from .optim import (
    FlatMatchConfig,
    GradBuffer,
    SgdState,
    StepDiagnostics,
    anchor_targets,
    flatmatch_step,
    labeled_loss_and_grad,
    sgd_step,
)

COLUMNS = (
    "step",
    "loss_l",
    "loss_u",
    "xsharp",
    "test_acc",
    "test_err",
    "mask_rate",
    "sharpness",
    "grad_angle_deg",
    "grad_norm_l",
    "wall_ms",
)


# ---------------------------------------------------------------------------
# configuration


@dataclass
class ModelConfig:
    hidden_dims: tuple[int, ...] = (32, 32)


@dataclass
class DataConfig:
    kind: str = "two_moons"
    total: int = 2000
    noise: float = 0.15
    num_classes: int = 2
    labels_per_class: int = 4
    test_fraction: float = 0.2


@dataclass
class OptimizerConfig:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4


@dataclass
class SslConfig:
    tau: float = 0.95
    lambda_u: float = 1.0


@dataclass
class FixedLabelConfig:
    enabled: bool = False
    num_fix: int = 50
    pretrain_epochs: int = 16


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    flatmatch: FlatMatchConfig = field(default_factory=FlatMatchConfig)
    fixed_label: FixedLabelConfig = field(default_factory=FixedLabelConfig)
    epochs: int = 200
    steps_per_epoch: int = 50
    labeled_batch: int = 64
    mu: int = 7
    seed: int = 0
    eval_every: int = 50
    ema_decay: float = 0.999
    sharpness_rho: float = 0.05
    record_wall_time: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("must be >= 1", "epochs")
        if self.steps_per_epoch < 1:
            raise ConfigError("must be >= 1", "steps_per_epoch")
        if self.eval_every < 1:
            raise ConfigError("must be >= 1", "eval_every")
        if not 0 <= self.ema_decay < 1:
            raise ConfigError("must be in [0, 1)", "ema_decay")
        if not 0 <= self.ssl.tau <= 1:
            raise ConfigError("must be in [0, 1]", "ssl.tau")
        fl = self.fixed_label
        if fl.enabled and not 0 <= fl.pretrain_epochs < self.epochs:
            raise ConfigError("must satisfy 0 <= pretrain_epochs < epochs", "fixed_label.pretrain_epochs")
        if fl.num_fix < 0:
            raise ConfigError("must be >= 0", "fixed_label.num_fix")
        return self

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ---------------------------------------------------------------------------
# experiment record


class ExperimentRecord:
    """Rows of :data:`COLUMNS`, one per evaluation point.

    With a ``path`` every row is appended to the CSV and flushed at once,
    so an interrupted run leaves a readable file behind.
    """

    def __init__(self, path: str | Path | None = None):
        self.rows: list[dict[str, float]] = []
        self.extra: list[dict[str, float]] = []
        self.meta: dict = {}
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(COLUMNS)

    def append(self, row: dict, **extra) -> None:
        missing = set(COLUMNS) - set(row)
        if missing:
            raise ValueError(f"record row is missing {sorted(missing)}")
        if self.rows and row["step"] <= self.rows[-1]["step"]:
            raise ValueError("record steps must increase")
        bad = [k for k in COLUMNS if not math.isfinite(row[k])]
        if bad:
            raise NumericError(f"non-finite values in record columns {bad} at step {row['step']}")
        clean = {k: (int(row[k]) if k == "step" else float(row[k])) for k in COLUMNS}
        self.rows.append(clean)
        self.extra.append(extra)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([_fmt(clean[k]) for k in COLUMNS])

    def column(self, name: str) -> np.ndarray:
        if name in COLUMNS:
            return np.array([r[name] for r in self.rows])
        return np.array([e[name] for e in self.extra])

    def final(self, name: str) -> float:
        return float(self.column(name)[-1])

    def __len__(self) -> int:
        return len(self.rows)

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentRecord) and self.rows == other.rows

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(COLUMNS)
            for r in self.rows:
                w.writerow([_fmt(r[k]) for k in COLUMNS])
        return path

    @classmethod
    def from_csv(cls, path: str | Path) -> "ExperimentRecord":
        rec = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = tuple(next(reader))
            if header != COLUMNS:
                raise ConfigError(f"{path}: unexpected header {','.join(header)}")
            for line in reader:
                rec.rows.append({k: (int(v) if k == "step" else float(v)) for k, v in zip(COLUMNS, line)})
                rec.extra.append({})
        return rec


def _fmt(v) -> str:
    return str(v) if isinstance(v, int) else repr(float(v))


class TrainResult(NamedTuple):
    theta: ParamVector
    record: ExperimentRecord
    eval_theta: ParamVector
    dataset: SslDataset
    spec: MlpSpec


# ---------------------------------------------------------------------------
# shared run state

_STREAMS = ("data", "split", "init", "sampler", "aug_labeled", "aug_unlabeled", "fixed")


def build_dataset(cfg: TrainConfig, seed: int | None = None) -> SslDataset:
    """Dataset and split derived from the top-level seed (or ``seed``)."""
    seeds = np.random.SeedSequence(cfg.seed if seed is None else seed).spawn(len(_STREAMS))
    d = cfg.data
    full = make_dataset(d.kind, d.total, d.noise, d.num_classes, np.random.default_rng(seeds[0]))
    return split_ssl(full, d.labels_per_class, d.test_fraction, np.random.default_rng(seeds[1]))


class Run:
    """Model, optimizer, sampler and record shared by every training loop.

    Each source of randomness has its own generator spawned from
    ``cfg.seed``, so drawing from one stream never shifts another.
    """

    def __init__(self, cfg: TrainConfig, dataset: SslDataset | None = None, record_path=None):
        self.cfg = cfg.validate()
        seeds = dict(zip(_STREAMS, np.random.SeedSequence(cfg.seed).spawn(len(_STREAMS))))
        self.ds = dataset if dataset is not None else build_dataset(cfg)
        self.spec = MlpSpec(self.ds.dim, tuple(cfg.model.hidden_dims), self.ds.num_classes)
        self.theta = init_params(self.spec, np.random.default_rng(seeds["init"]))
        self.eval_theta = self.theta.copy()
        self.sgd = SgdState(cfg.optimizer.lr, cfg.optimizer.momentum, cfg.optimizer.weight_decay)
        self.buf = GradBuffer.zeros_like(self.theta, cfg.flatmatch.alpha)
        self.sampler = BatchSampler(self.ds, cfg.labeled_batch, cfg.mu, seeds["sampler"])
        self.rng_l = np.random.default_rng(seeds["aug_labeled"])
        self.rng_u = np.random.default_rng(seeds["aug_unlabeled"])
        self.fixed_seed = seeds["fixed"]
        self.centroid = self.ds.centroid
        self.record = ExperimentRecord(record_path)
        self.step = 0
        self._t0 = time.perf_counter()

    # -- batches -----------------------------------------------------------

    def labeled_batch(self) -> tuple[np.ndarray, np.ndarray]:
        x, y = self.sampler.next_labeled()
        return augment_batch(x, self.cfg.augment, "weak", self.rng_l), y

    def unlabeled_views(self) -> tuple[np.ndarray, np.ndarray]:
        x, _ = self.sampler.next_unlabeled()
        aug = self.cfg.augment
        weak = augment_batch(x, aug, "weak", self.rng_u)
        strong = augment_batch(x, aug, "strong", self.rng_u, centroid=self.centroid)
        return weak, strong

    # -- steps -------------------------------------------------------------

    def supervised_step(self) -> tuple[StepDiagnostics, float]:
        xl, yl = self.labeled_batch()
        loss, g = labeled_loss_and_grad(self.spec, self.theta, xl, yl)
        self.theta = sgd_step(self.theta, g, self.sgd)
        diag = StepDiagnostics(loss, 0.0, 0.0, 0.0, g.norm(), g.norm(), False, g, g)
        return self._finish(diag, 0.0)

    def ssl_step(self) -> tuple[StepDiagnostics, float]:
        """Labeled CE plus masked pseudo-label CE (weak view -> strong view)."""
        xl, yl = self.labeled_batch()
        xw, xs = self.unlabeled_views()
        targets = anchor_targets(self.spec, self.theta, xw, self.cfg.ssl.tau)
        with Tape():
            t_l = Tensor(self.theta.values, requires_grad=True)
            t_u = Tensor(self.theta.values, requires_grad=True)
            loss_l = cross_entropy(forward(self.spec, t_l, xl), yl)
            loss_u = consistency_loss(forward(self.spec, t_u, xs), targets)
            ad.backward(ad.add(loss_l, ad.scale(loss_u, self.cfg.ssl.lambda_u)))
        g_l = self.theta.like(t_l.grad)
        g_total = self.theta.like(t_l.grad + t_u.grad)
        self.theta = sgd_step(self.theta, g_total, self.sgd)
        diag = StepDiagnostics(
            loss_l.item(), 0.0, 0.0, targets.mask_rate, g_l.norm(), g_total.norm(), False, g_l, g_total
        )
        return self._finish(diag, loss_u.item())

    def flatmatch_step(self, fixed: tuple[np.ndarray, np.ndarray] | None = None, fixed_stream=None):
        xl, yl = self.labeled_batch()
        xw, xs = self.unlabeled_views()
        sharp_x = sharp_y = None
        if fixed is not None:
            # perturbation batch drawn from the labeled set augmented with the fixed-label points
            idx = fixed_stream.take(self.cfg.labeled_batch)
            sharp_x = augment_batch(fixed[0][idx], self.cfg.augment, "weak", self.rng_fixed)
            sharp_y = fixed[1][idx]
        self.theta, diag = flatmatch_step(
            self.spec, self.theta, xl, yl, xw, self.cfg.flatmatch, self.sgd, self.buf,
            x_student=xs, sharp_x=sharp_x, sharp_y=sharp_y,
        )
        return self._finish(diag, diag.xsharp)

    def _finish(self, diag: StepDiagnostics, loss_u: float):
        if not (math.isfinite(diag.loss_l) and math.isfinite(loss_u)):
            raise NumericError(f"non-finite loss at step {self.step + 1}")
        # warm-up keeps the initial weights from dominating short runs
        d = min(self.cfg.ema_decay, (1.0 + self.step) / (10.0 + self.step))
        self.eval_theta = self.eval_theta.like(d * self.eval_theta.values + (1.0 - d) * self.theta.values)
        self.step += 1
        return diag, loss_u

    # -- evaluation --------------------------------------------------------

    def accuracy(self, theta: ParamVector) -> float:
        logits = forward(self.spec, theta, self.ds.test_x).data
        return float(np.mean(np.argmax(logits, axis=1) == self.ds.test_y))

    def maybe_log(self, diag: StepDiagnostics, loss_u: float, force: bool = False) -> None:
        if not force and self.step % self.cfg.eval_every:
            return
        acc = self.accuracy(self.eval_theta)
        sharp = sharpness_probe(self.spec, self.eval_theta, self.ds.test_x, self.ds.test_y, self.cfg.sharpness_rho)
        angle = gradient_angle(diag.grad_l, diag.grad_total)
        wall = (time.perf_counter() - self._t0) * 1e3 if self.cfg.record_wall_time else 0.0
        self.record.append(
            {
                "step": self.step,
                "loss_l": diag.loss_l,
                "loss_u": loss_u,
                "xsharp": diag.xsharp,
                "test_acc": acc,
                "test_err": 1.0 - acc,
                "mask_rate": diag.mask_rate,
                "sharpness": sharp.value,
                "grad_angle_deg": angle.degrees,
                "grad_norm_l": diag.grad_norm_l,
                "wall_ms": wall,
            },
            test_acc_raw=self.accuracy(self.theta),
            eps_norm=diag.eps_norm,
        )

    def loop(self, step_fn, steps: int) -> None:
        last = self.cfg.total_steps
        for _ in range(steps):
            diag, loss_u = step_fn()
            self.maybe_log(diag, loss_u, force=self.step == last)

    def result(self) -> TrainResult:
        return TrainResult(self.theta, self.record, self.eval_theta, self.ds, self.spec)


# ---------------------------------------------------------------------------
# public trainers


def train_supervised(cfg: TrainConfig, dataset: SslDataset | None = None, record_path=None) -> TrainResult:
    """Labeled cross-entropy only."""
    run = Run(cfg, dataset, record_path)
    run.loop(run.supervised_step, cfg.total_steps)
    return run.result()


def train_ssl_baseline(cfg: TrainConfig, dataset: SslDataset | None = None, record_path=None) -> TrainResult:
    """Confidence-thresholded pseudo-labeling with weak/strong views."""
    run = Run(cfg, dataset, record_path)
    run.loop(run.ssl_step, cfg.total_steps)
    return run.result()


def train_flatmatch(cfg: TrainConfig, dataset: SslDataset | None = None, record_path=None) -> TrainResult:
    """FlatMatch, or FlatMatch-e when ``cfg.flatmatch.efficient`` is set."""
    run = Run(cfg, dataset, record_path)
    run.loop(run.flatmatch_step, cfg.total_steps)
    return run.result()


def select_topk_confident(spec: MlpSpec, theta: ParamVector, x_u, k: int) -> list[tuple[int, int]]:
    """The ``k`` most confident unlabeled points and their argmax labels.

    Ties in confidence are broken by ascending index.
    """
    m = len(x_u)
    if not 0 <= k <= m:
        raise ConfigError(f"cannot select {k} of {m} unlabeled points", "fixed_label.num_fix")
    logits = forward(spec, theta, x_u).data
    probs = softmax(logits)
    conf = probs.max(axis=1)
    labels = np.argmax(logits, axis=1)
    order = np.lexsort((np.arange(m), -conf))[:k]
    return [(int(i), int(labels[i])) for i in order]


def train_flatmatch_fixed_labels(
    cfg: TrainConfig, dataset: SslDataset | None = None, record_path=None
) -> TrainResult:
    """SSL pre-training, then FlatMatch with the perturbation computed on labeled + fixed-label data.

    After ``pretrain_epochs`` the ``num_fix`` most confident unlabeled
    points get frozen pseudo-labels.  They only enter the first (perturbation)
    propagation; the second propagation still treats every unlabeled point
    through the cross-sharpness term.
    """
    fl = cfg.fixed_label
    if not fl.enabled:
        raise ConfigError("fixed_label.enabled must be true for this trainer", "fixed_label.enabled")
    if cfg.flatmatch.efficient:
        # the buffered direction would ignore the fixed labels
        cfg = dataclasses.replace(cfg, flatmatch=dataclasses.replace(cfg.flatmatch, efficient=False))
    run = Run(cfg, dataset, record_path)
    if fl.num_fix > run.ds.m:
        raise ConfigError(f"num_fix={fl.num_fix} exceeds {run.ds.m} unlabeled points", "fixed_label.num_fix")
    run.loop(run.ssl_step, fl.pretrain_epochs * cfg.steps_per_epoch)
    run.record.meta["boundary_step"] = run.step
    run.fixed_labels = tuple(select_topk_confident(run.spec, run.theta, run.ds.unlabeled_x, fl.num_fix))
    run.record.meta["fixed_labels"] = run.fixed_labels
    fixed = None
    stream = None
    if run.fixed_labels:
        idx = np.array([i for i, _ in run.fixed_labels])
        fixed = (
            np.concatenate([run.ds.labeled_x, run.ds.unlabeled_x[idx]]),
            np.concatenate([run.ds.labeled_y, [y for _, y in run.fixed_labels]]).astype(np.intp),
        )
        s_stream, s_aug = run.fixed_seed.spawn(2)
        stream = IndexStream(len(fixed[1]), np.random.default_rng(s_stream))
        run.rng_fixed = np.random.default_rng(s_aug)
    remaining = cfg.total_steps - run.step
    run.loop(lambda: run.flatmatch_step(fixed, stream), remaining)
    return run.result()


TRAINERS = {
    "supervised": train_supervised,
    "ssl_baseline": train_ssl_baseline,
    "flatmatch": train_flatmatch,
    "flatmatch_e": train_flatmatch,
    "flatmatch_fixlabel": train_flatmatch_fixed_labels,
}
