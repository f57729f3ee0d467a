"""Branch classifiers and prediction-level late fusion."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import numcore as nc
from .encoder import derive_rng
from .errors import ConfigError, DataError, DimensionError
from .numcore import Tensor

BRANCHES = ("C", "D", "F")


class ClassifierSharing(str, enum.Enum):
    INDIVIDUAL = "individual"
    SHARED_CD = "shared_cd"


@dataclass(frozen=True)
class HeadConfig:
    tasks: tuple[int, ...] = (2, 2)
    classifier_sharing: ClassifierSharing = ClassifierSharing.INDIVIDUAL

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(int(k) for k in self.tasks))
        object.__setattr__(self, "classifier_sharing", ClassifierSharing(self.classifier_sharing))
        if not self.tasks:
            raise ConfigError("at least one task is required")
        if any(k < 2 for k in self.tasks):
            raise ConfigError(f"every task needs at least 2 classes, got {list(self.tasks)}")


@dataclass
class Linear:
    weight: Tensor  # [d_in, K]
    bias: Tensor  # [K]

    @classmethod
    def init(cls, d_in: int, k: int, rng: np.random.Generator) -> Linear:
        w = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, k))
        return cls(Tensor(w, requires_grad=True), Tensor(np.zeros(k), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"feature dim {x.shape[-1]} does not match classifier input {self.weight.shape[0]}")
        if x.ndim == 1:
            return nc.reshape(nc.matmul(nc.reshape(x, (1, -1)), self.weight), (-1,)) + self.bias
        return nc.matmul(x, self.weight) + self.bias


def global_avg_pool(feat: Tensor) -> Tensor:
    """``[..., C, H, W]`` to ``[..., C]``."""
    return nc.mean(feat, axis=(-2, -1))


def classify(features: Tensor, head: list[Linear]) -> list[Tensor]:
    """One logit tensor per task from pooled features."""
    return [lin(features) for lin in head]


class Heads:
    def __init__(self, cfg: HeadConfig, clinical: list[Linear], derm: list[Linear], fusion: list[Linear]):
        self.cfg = cfg
        self.clinical = clinical
        self.derm = derm
        self.fusion = fusion

    def __call__(self, pooled_c: Tensor, pooled_d: Tensor) -> BranchOutputs:
        joint = nc.concat([pooled_c, pooled_d], axis=-1)
        return BranchOutputs(
            C=classify(pooled_c, self.clinical),
            D=classify(pooled_d, self.derm),
            F=classify(joint, self.fusion),
        )

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        groups = [("clinical", self.clinical), ("derm", self.derm), ("fusion", self.fusion)]
        if self.cfg.classifier_sharing is ClassifierSharing.SHARED_CD:
            groups = [("shared_cd", self.clinical), ("fusion", self.fusion)]
        for name, head in groups:
            for t, lin in enumerate(head):
                params[f"head.{name}.task{t}.w"] = lin.weight
                params[f"head.{name}.task{t}.b"] = lin.bias
        return params


def build_heads(cfg: HeadConfig, feature_dim: int, seed: int) -> Heads:
    def make(name: str, d_in: int) -> list[Linear]:
        return [Linear.init(d_in, k, derive_rng(seed, "head", name, str(t))) for t, k in enumerate(cfg.tasks)]

    clinical = make("clinical", feature_dim)
    derm = clinical if cfg.classifier_sharing is ClassifierSharing.SHARED_CD else make("derm", feature_dim)
    return Heads(cfg, clinical, derm, make("fusion", 2 * feature_dim))


def count_head_params(cfg: HeadConfig, feature_dim: int) -> int:
    single = sum(feature_dim * k + k for k in cfg.tasks)
    fusion = sum(2 * feature_dim * k + k for k in cfg.tasks)
    n_modal = 1 if cfg.classifier_sharing is ClassifierSharing.SHARED_CD else 2
    return n_modal * single + fusion


@dataclass
class BranchOutputs:
    """Per-branch, per-task logits ``[batch, K_t]``.

    Entries may be tensors (during training) or plain arrays (evaluation).
    """

    C: list = field(default_factory=list)
    D: list = field(default_factory=list)
    F: list = field(default_factory=list)

    def __post_init__(self):
        sizes = {_rows(x) for branch in (self.C, self.D, self.F) for x in branch}
        if len(sizes) > 1:
            raise DimensionError(f"inconsistent batch sizes across branches: {sorted(sizes)}")
        if not (len(self.C) == len(self.D) == len(self.F)):
            raise DimensionError("every branch must carry the same number of tasks")

    def branch(self, name: str) -> list:
        return {"C": self.C, "D": self.D, "F": self.F}[name]

    @property
    def n_tasks(self) -> int:
        return len(self.C)

    def arrays(self) -> BranchOutputs:
        return BranchOutputs(*[[_array(x) for x in self.branch(b)] for b in BRANCHES])

    def probabilities(self, name: str) -> list[np.ndarray]:
        return [softmax(_array(x)) for x in self.branch(name)]

    @staticmethod
    def concatenate(parts: list[BranchOutputs]) -> BranchOutputs:
        return BranchOutputs(
            *[
                [np.concatenate([_array(p.branch(b)[t]) for p in parts]) for t in range(parts[0].n_tasks)]
                for b in BRANCHES
            ]
        )


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _rows(x) -> int:
    return _array(x).shape[0]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class FusionWeightTriple:
    w_C: float
    w_D: float
    w_F: float

    def __post_init__(self):
        ws = (self.w_C, self.w_D, self.w_F)
        if any(w < 0 for w in ws):
            raise ConfigError(f"fusion weights must be nonnegative, got {ws}")
        if abs(self.w_C + self.w_D + self.w_F - 1.0) > 1e-9:
            raise ConfigError(f"fusion weights must sum to 1, got {ws}")

    @classmethod
    def equal(cls) -> FusionWeightTriple:
        return cls(1 / 3, 1 / 3, 1 / 3)

    def as_dict(self) -> dict[str, float]:
        return {"w_C": self.w_C, "w_D": self.w_D, "w_F": self.w_F}


def late_fuse(outs: BranchOutputs, w: FusionWeightTriple) -> list[np.ndarray]:
    """Weighted average of per-branch softmax probabilities, per task."""
    pc, pd, pf = (outs.probabilities(b) for b in BRANCHES)
    return [w.w_C * c + w.w_D * d + w.w_F * f for c, d, f in zip(pc, pd, pf)]


def simplex_grid(step: float = 0.1) -> list[FusionWeightTriple]:
    """All ``(w_C, w_D, w_F)`` on the simplex at the given step.

    When ``1/step`` is an integer ``n`` the coordinates are exactly ``i/n``;
    otherwise the remainder of each triple goes to ``w_F``.
    """
    if not 0 < step <= 0.5:
        raise ConfigError(f"step must be in (0, 0.5], got {step}")
    n = int(np.floor(1.0 / step + 1e-9))
    exact = abs(n * step - 1.0) < 1e-9
    grid = []
    for i in range(n + 1):
        for j in range(n + 1 - i):
            if exact:
                wc, wd, wf = i / n, j / n, (n - i - j) / n
            else:
                wc, wd = i * step, j * step
                wf = 1.0 - wc - wd
            grid.append(FusionWeightTriple(wc, wd, max(wf, 0.0)))
    return grid


def _correct_total(probs: list[np.ndarray], labels: np.ndarray) -> int:
    return int(sum(int(np.count_nonzero(p.argmax(axis=1) == labels[:, t])) for t, p in enumerate(probs)))


def search_fusion_weights(val_outs: BranchOutputs, val_labels, step: float = 0.1) -> FusionWeightTriple:
    """Grid-search the late-fusion triple maximizing mean per-task accuracy.

    Ties prefer larger ``w_F``, then larger ``w_D``, then larger ``w_C``.
    """
    labels = np.asarray(val_labels, dtype=np.int64)
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.shape[0] == 0 or val_outs.n_tasks == 0 or _rows(val_outs.C[0]) == 0:
        raise DataError("validation set is empty")
    if labels.shape != (_rows(val_outs.C[0]), val_outs.n_tasks):
        raise DimensionError(f"labels {labels.shape} do not match outputs")
    pc, pd, pf = (val_outs.probabilities(b) for b in BRANCHES)
    best, best_key = None, None
    for w in simplex_grid(step):
        fused = [w.w_C * c + w.w_D * d + w.w_F * f for c, d, f in zip(pc, pd, pf)]
        # all tasks share n samples, so total correct orders mean accuracy exactly
        key = (_correct_total(fused, labels), w.w_F, w.w_D, w.w_C)
        if best_key is None or key > best_key:
            best, best_key = w, key
    return best


def mean_task_accuracy(probs: list[np.ndarray], labels) -> Fraction:
    labels = np.asarray(labels, dtype=np.int64).reshape(len(probs[0]), -1)
    return Fraction(_correct_total(probs, labels), labels.shape[0] * labels.shape[1])
