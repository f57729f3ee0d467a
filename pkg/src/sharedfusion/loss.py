"""Per-branch multi-task cross-entropy and the branch-weighted total loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DataError
from .numcore import Tensor


def multitask_ce(logits: list[Tensor], labels) -> Tensor:
    """Mean over tasks of the batch-mean softmax cross-entropy.

    ``labels`` is an integer array ``[batch, T]`` (or ``[batch]`` for T=1).
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.shape[1] != len(logits):
        raise DataError(f"{labels.shape[1]} label columns for {len(logits)} tasks")
    total = None
    for t, z in enumerate(logits):
        k = z.shape[-1]
        y = labels[:, t]
        if y.min(initial=0) < 0 or y.max(initial=0) >= k:
            raise DataError(f"task {t} labels must lie in [0, {k - 1}], got range [{y.min()}, {y.max()}]")
        onehot = np.zeros((len(y), k))
        onehot[np.arange(len(y)), y] = 1.0
        ce = nc.mul(nc.sum(nc.mul(nc.log_softmax(z), onehot)), -1.0 / len(y))
        total = ce if total is None else total + ce
    return total * (1.0 / len(logits))


@dataclass(frozen=True)
class BranchLosses:
    """Losses of the clinical, dermoscopy and fusion branches.

    Values may be floats or scalar tensors.
    """

    L_C: object
    L_D: object
    L_F: object


@dataclass(frozen=True)
class LossWeights:
    """Single-factor weighting: ``W_C = W``, ``W_D = 0.5 - W``, ``W_F = 0.5``."""

    W: float = 0.1

    def __post_init__(self):
        if not 0.0 <= float(self.W) <= 0.5:
            raise ConfigError(f"weight factor W must lie in [0, 0.5], got {self.W}")
        object.__setattr__(self, "W", float(self.W))

    @classmethod
    def clipped(cls, W: float) -> LossWeights:
        return cls(min(max(float(W), 0.0), 0.5))

    @property
    def W_C(self) -> float:
        return self.W

    @property
    def W_D(self) -> float:
        return 0.5 - self.W

    @property
    def W_F(self) -> float:
        return 0.5

    def triple(self) -> tuple[float, float, float]:
        return (self.W_C, self.W_D, self.W_F)


EQUAL_TRIPLE = (1 / 3, 1 / 3, 1 / 3)


def weighted_total(l: BranchLosses, triple: tuple[float, float, float]):
    w_c, w_d, w_f = triple
    return w_c * l.L_C + w_d * l.L_D + w_f * l.L_F


def biased_total(l: BranchLosses, w: LossWeights):
    return weighted_total(l, w.triple())


def equal_total(l: BranchLosses):
    return (l.L_C + l.L_D + l.L_F) / 3


def branch_losses(outs, labels) -> BranchLosses:
    return BranchLosses(multitask_ce(outs.C, labels), multitask_ce(outs.D, labels), multitask_ce(outs.F, labels))
