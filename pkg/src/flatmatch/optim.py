"""Optimizers in parameter space.

Contains plain SGD with momentum and weight decay, the worst-case (SAM)
perturbation, the cross-sharpness regularizer and the FlatMatch update in
its two-propagation and EMA-buffered ("efficient") forms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, ContractError, NumericError
from .losses import MaskedTargets, consistency_loss, cross_entropy, pseudo_targets
from .model import MlpSpec, ParamVector, check_layout, forward, perturb

DEGENERATE_NORM = 1e-12

# Perturbation radius presets; "main" is the default, "appendix" the smaller alternative.
RHO_PRESETS = {"main": 0.1, "appendix": 0.05}


@dataclass
class SgdState:
    lr: float = 0.03
    momentum: float = 0.9
    weight_decay: float = 5e-4
    velocity: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be > 0", "optimizer.lr")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)", "optimizer.momentum")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0", "optimizer.weight_decay")


def sgd_step(theta: ParamVector, grad: ParamVector, state: SgdState) -> ParamVector:
    """``v <- momentum*v + grad + wd*theta``; ``theta <- theta - lr*v``.  Returns a new vector."""
    check_layout(theta, grad)
    g = grad.values
    if not np.all(np.isfinite(g)):
        i = int(np.flatnonzero(~np.isfinite(g))[0])
        slot = next(s for s in grad.layout if s.offset <= i < s.offset + s.size)
        raise NumericError(f"non-finite gradient at coordinate {i} ({slot.name}[{i - slot.offset}])")
    step = g + state.weight_decay * theta.values if state.weight_decay else g.copy()
    if state.velocity is None:
        state.velocity = step
    else:
        if state.velocity.shape != g.shape:
            raise ContractError("optimizer velocity does not match the parameter layout")
        state.velocity = state.momentum * state.velocity + step
    return theta.like(theta.values - state.lr * state.velocity)


class Perturbation(NamedTuple):
    epsilon: ParamVector
    degenerate: bool


def sam_perturbation(grad_l: ParamVector, rho: float) -> Perturbation:
    """Worst-case step ``rho * g / ||g||_2`` inside the l2 ball of radius ``rho``.

    A gradient with norm below 1e-12 yields the zero vector and
    ``degenerate=True``.
    """
    if rho < 0:
        raise ContractError(f"rho must be >= 0, got {rho}")
    g = grad_l.values
    if not np.all(np.isfinite(g)):
        raise NumericError("labeled gradient contains non-finite values")
    norm = float(np.linalg.norm(g))
    if norm < DEGENERATE_NORM:
        return Perturbation(grad_l.like(np.zeros_like(g)), True)
    if rho == 0:
        return Perturbation(grad_l.like(np.zeros_like(g)), False)
    return Perturbation(grad_l.like(g * (rho / norm)), False)


@dataclass
class GradBuffer:
    """EMA memory of past labeled-data gradients."""

    M: ParamVector
    alpha: float = 0.999
    step_count: int = 0

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)", "flatmatch.alpha")

    @classmethod
    def zeros_like(cls, theta: ParamVector, alpha: float = 0.999) -> "GradBuffer":
        return cls(ParamVector.zeros(theta.layout), alpha)


def ema_update(buf: GradBuffer, g: ParamVector, convention: str = "conventional") -> GradBuffer:
    """Fold ``g`` into the buffer in place and return it.

    ``conventional``:  M <- alpha*M + (1-alpha)*g
    ``paper_literal``: M <- (1-alpha)*M + alpha*g
    """
    check_layout(buf.M, g)
    a = buf.alpha
    if convention == "conventional":
        buf.M = buf.M.like(a * buf.M.values + (1.0 - a) * g.values)
    elif convention == "paper_literal":
        buf.M = buf.M.like((1.0 - a) * buf.M.values + a * g.values)
    else:
        raise ContractError(f"unknown EMA convention {convention!r}")
    buf.step_count += 1
    return buf


@dataclass
class FlatMatchConfig:
    rho: float = RHO_PRESETS["main"]
    alpha: float = 0.999
    tau: float = 0.95
    lambda_xsharp: float = 1.0
    efficient: bool = False
    ema_convention: str = "conventional"
    distance: str = "ce"
    use_threshold: bool = True

    def __post_init__(self):
        if self.rho < 0:
            raise ConfigError("rho must be >= 0", "flatmatch.rho")
        if self.lambda_xsharp < 0:
            raise ConfigError("lambda_xsharp must be >= 0", "flatmatch.lambda_xsharp")
        if not 0 < self.alpha < 1:
            raise ConfigError("alpha must be in (0, 1)", "flatmatch.alpha")
        if not 0 <= self.tau <= 1:
            raise ConfigError("tau must be in [0, 1]", "flatmatch.tau")
        if self.ema_convention not in ("conventional", "paper_literal"):
            raise ConfigError("must be 'conventional' or 'paper_literal'", "flatmatch.ema_convention")
        if self.distance not in ("ce", "kl"):
            raise ConfigError("must be 'ce' or 'kl'", "flatmatch.distance")


def anchor_targets(spec: MlpSpec, theta: ParamVector, x_u, tau: float) -> MaskedTargets:
    """Frozen pseudo-targets from the unperturbed model; never differentiated."""
    with ad.no_grad():
        logits = forward(spec, theta, x_u)
    return pseudo_targets(logits, tau)


def cross_sharpness(
    spec: MlpSpec,
    theta: ParamVector,
    theta_tilde,
    x_u,
    tau: float = 0.95,
    x_student=None,
    distance: str = "ce",
    targets: MaskedTargets | None = None,
) -> Tensor:
    """Disagreement on unlabeled data between ``theta`` and the worst-case ``theta_tilde``.

    ``theta`` supplies stop-gradient pseudo-targets on ``x_u``; the loss is
    the masked consistency loss of ``theta_tilde``'s predictions on
    ``x_student`` (defaults to ``x_u``).  Pass ``theta_tilde`` as a
    gradient-tracking :class:`Tensor` to differentiate through it.
    """
    if isinstance(theta_tilde, ParamVector):
        check_layout(theta, theta_tilde)
    if targets is None:
        targets = anchor_targets(spec, theta, x_u, tau)
    student = forward(spec, theta_tilde, x_u if x_student is None else x_student)
    return consistency_loss(student, targets, distance)


class StepDiagnostics(NamedTuple):
    loss_l: float
    xsharp: float
    eps_norm: float
    mask_rate: float
    grad_norm_l: float
    grad_norm_total: float
    degenerate: bool
    grad_l: ParamVector
    grad_total: ParamVector


def labeled_loss_and_grad(spec: MlpSpec, theta: ParamVector, x, y) -> tuple[float, ParamVector]:
    loss, g = ad.value_and_grad(lambda t: cross_entropy(forward(spec, t, x), y), theta)
    return loss, theta.like(g)


def flatmatch_step(
    spec: MlpSpec,
    theta: ParamVector,
    x_l,
    y_l,
    x_u,
    cfg: FlatMatchConfig,
    sgd: SgdState,
    buf: GradBuffer,
    x_student=None,
    sharp_x=None,
    sharp_y=None,
) -> tuple[ParamVector, StepDiagnostics]:
    """One FlatMatch / FlatMatch-e update.

    1. Perturbation direction: the buffer ``buf.M`` when ``cfg.efficient``,
       otherwise a first propagation of the labeled loss on
       ``(sharp_x, sharp_y)`` (default: the labeled batch).
    2. ``theta_tilde = theta + rho * g / ||g||``.
    3. Second propagation: labeled CE at ``theta`` plus
       ``lambda_xsharp * cross_sharpness`` at ``theta_tilde``; the gradient
       taken at ``theta_tilde`` is applied to ``theta``.
    4. SGD step on the summed gradient, then the buffer absorbs this step's
       labeled gradient.
    """
    if len(y_l) == 0 or len(x_u) == 0:
        raise ContractError("labeled and unlabeled batches must be nonempty")
    if cfg.efficient:
        direction = buf.M
    else:
        if sharp_x is None:
            sharp_x, sharp_y = x_l, y_l
        _, direction = labeled_loss_and_grad(spec, theta, sharp_x, sharp_y)
    eps, degenerate = sam_perturbation(direction, cfg.rho)
    theta_tilde = perturb(theta, eps)

    tau = cfg.tau if cfg.use_threshold else 0.0
    targets = anchor_targets(spec, theta, x_u, tau)
    with Tape():
        t = Tensor(theta.values, requires_grad=True)
        t_tilde = Tensor(theta_tilde.values, requires_grad=True)
        loss_l = cross_entropy(forward(spec, t, x_l), y_l)
        xs = cross_sharpness(spec, theta, t_tilde, x_u, x_student=x_student, distance=cfg.distance, targets=targets)
        ad.backward(ad.add(loss_l, ad.scale(xs, cfg.lambda_xsharp)))
    grad_l = theta.like(t.grad)
    g_total = grad_l.values if t_tilde.grad is None else grad_l.values + t_tilde.grad
    grad_total = theta.like(g_total)

    new_theta = sgd_step(theta, grad_total, sgd)
    ema_update(buf, grad_l, cfg.ema_convention)
    diag = StepDiagnostics(
        loss_l=loss_l.item(),
        xsharp=xs.item(),
        eps_norm=eps.norm(),
        mask_rate=targets.mask_rate,
        grad_norm_l=grad_l.norm(),
        grad_norm_total=grad_total.norm(),
        degenerate=degenerate,
        grad_l=grad_l,
        grad_total=grad_total,
    )
    return new_theta, diag
