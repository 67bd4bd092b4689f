"""Classification loss, pseudo-labels and confidence masking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .model import softmax


@dataclass(frozen=True)
class MaskedTargets:
    pseudo_labels: np.ndarray
    confidences: np.ndarray
    mask: np.ndarray
    probs: np.ndarray
    tau: float

    @property
    def mask_rate(self) -> float:
        return float(self.mask.mean()) if self.mask.size else 0.0

    @property
    def count(self) -> int:
        return int(self.mask.sum())


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels``."""
    labels = np.asarray(labels, dtype=np.intp)
    c = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    return ad.neg(ad.tensor_mean(ad.pick(ad.log_softmax(logits), labels)))


def pseudo_targets(logits, tau: float) -> MaskedTargets:
    """Hard pseudo-labels with a strict ``confidence > tau`` mask.

    Ties in the argmax go to the lowest class index.  No gradient is kept.
    """
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must be in [0, 1], got {tau}")
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    probs = softmax(data)
    labels = np.argmax(data, axis=1)
    conf = probs[np.arange(len(labels)), labels]
    return MaskedTargets(labels, conf, conf > tau, probs, float(tau))


def consistency_loss(student_logits: Tensor, targets: MaskedTargets, distance: str = "ce") -> Tensor:
    """Mean loss over masked-in rows; an exact zero when nothing is selected.

    ``distance="ce"`` uses the hard pseudo-labels, ``"kl"`` the full anchor
    distribution (KL(anchor || student)).  Only ``student_logits`` carries a
    gradient.
    """
    b = student_logits.shape[0]
    if targets.mask.shape != (b,):
        raise ContractError(f"targets cover {targets.mask.shape[0]} rows, logits have {b}")
    k = targets.count
    weights = targets.mask / k if k else np.zeros(b)
    logp = ad.log_softmax(student_logits)
    if distance == "ce":
        per_row = ad.neg(ad.pick(logp, targets.pseudo_labels))
    elif distance == "kl":
        p = targets.probs
        neg_entropy = (p * np.log(np.where(p > 0, p, 1.0))).sum(axis=1)
        per_row = ad.sub(Tensor(neg_entropy), ad.row_sum(ad.mul(logp, p)))
    else:
        raise ContractError(f"unknown distance {distance!r}")
    return ad.tensor_sum(ad.mul(per_row, weights))
