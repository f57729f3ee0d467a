"""Training loop: Adam, per-epoch cosine annealing, stochastic weight averaging."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .data import DatasetSplits, PairedDataset
from .encoder import derive_rng
from .errors import ConfigError, ContractError, StateError, TrainingDiverged, UndefinedMetricError
from .heads import BranchOutputs
from .loss import EQUAL_TRIPLE, LossWeights, branch_losses, weighted_total
from .metrics import report
from .model import Model
from .numcore import Tensor

logger = logging.getLogger(__name__)

HISTORY_COLUMNS = ("epoch", "lr", "L_C", "L_D", "L_F", "L_total", "val_avg_acc", "val_avg_auc")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 24
    # from-scratch desk models need a larger rate than fine-tuned backbones (3e-5)
    lr_max: float = 1e-3
    lr_min: float = 0.0
    seed: int = 0
    W: float = 0.1
    loss: str = "biased"  # "biased" or "equal"
    swa_start_fraction: float = 0.75
    select: str = "swa"  # "swa" or "best_val"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.swa_start_fraction < 1.0:
            raise ConfigError(f"swa_start_fraction must lie in [0, 1), got {self.swa_start_fraction}")
        if self.loss not in ("biased", "equal"):
            raise ConfigError(f"loss must be 'biased' or 'equal', got {self.loss!r}")
        if self.select not in ("swa", "best_val"):
            raise ConfigError(f"select must be 'swa' or 'best_val', got {self.select!r}")
        if self.lr_max < 0 or self.lr_min < 0:
            raise ConfigError("learning rates must be nonnegative")
        LossWeights(self.W)

    def loss_triple(self) -> tuple[float, float, float]:
        return EQUAL_TRIPLE if self.loss == "equal" else LossWeights(self.W).triple()

    def swa_epochs(self) -> list[int]:
        """Zero-based epochs after which a weight snapshot is averaged in."""
        return [e for e in range(self.epochs) if e + 1 > self.swa_start_fraction * self.epochs]


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update using each parameter's ``grad``."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise ContractError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def cosine_lr(t: int, T: int, lr_max: float, lr_min: float = 0.0) -> float:
    if T < 1 or not 0 <= t <= T:
        raise ContractError(f"cosine schedule needs 0 <= t <= T, got t={t}, T={T}")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


@dataclass
class SwaState:
    mean: dict[str, np.ndarray] | None = None
    count: int = 0


def swa_update(state: SwaState, weights: dict[str, np.ndarray]) -> None:
    if state.mean is None:
        state.mean = {k: np.zeros_like(v, dtype=np.float64) for k, v in weights.items()}
    state.count += 1
    for k, w in weights.items():
        state.mean[k] += (w - state.mean[k]) / state.count


def swa_finalize(state: SwaState) -> dict[str, np.ndarray]:
    if state.count == 0 or state.mean is None:
        raise StateError("no weight snapshots were accumulated")
    return {k: v.copy() for k, v in state.mean.items()}


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    L_C: float
    L_D: float
    L_F: float
    L_total: float
    val_avg_acc: float
    val_avg_auc: float


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord]
    final_state: dict[str, np.ndarray]
    swa_count: int
    linearity_max_dev: float | None = None


def ensure_grads(params: dict[str, Tensor]) -> None:
    """Give parameters the loss never reached an explicit zero gradient."""
    for p in params.values():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def predict(model: Model, ds: PairedDataset, idx=None, batch_size: int = 100) -> BranchOutputs:
    idx = np.arange(len(ds)) if idx is None else np.asarray(idx, dtype=np.int64)
    parts = []
    with nc.no_grad():
        for start in range(0, len(idx), batch_size):
            sel = idx[start : start + batch_size]
            parts.append(model(ds.clinical[sel], ds.derm[sel]).arrays())
    return BranchOutputs.concatenate(parts)


def gradient_decomposition(model: Model, clinical, derm, labels, triple) -> dict:
    """Check that the weighted-loss gradient is the weighted sum of branch gradients.

    Runs one forward pass, then four backward passes (one per branch loss and
    one for the total). Returns per-branch gradients, the total gradient and
    the largest absolute deviation over all parameters.
    """
    params = model.parameters()
    losses = branch_losses(model(clinical, derm), labels)
    per_branch = {}
    for name, l in (("C", losses.L_C), ("D", losses.L_D), ("F", losses.L_F)):
        nc.zero_grad(params.values())
        nc.backward(l)
        per_branch[name] = {k: _grad_or_zero(p) for k, p in params.items()}
    nc.zero_grad(params.values())
    nc.backward(weighted_total(losses, triple))
    total = {k: _grad_or_zero(p) for k, p in params.items()}
    nc.zero_grad(params.values())
    w_c, w_d, w_f = triple
    dev = 0.0
    for k in params:
        combo = w_c * per_branch["C"][k] + w_d * per_branch["D"][k] + w_f * per_branch["F"][k]
        dev = max(dev, float(np.max(np.abs(total[k] - combo), initial=0.0)))
    return {"per_branch": per_branch, "total": total, "max_dev": dev}


def _grad_or_zero(p: Tensor) -> np.ndarray:
    return np.zeros_like(p.data) if p.grad is None else p.grad.copy()


def _val_metrics(model: Model, ds: PairedDataset, idx) -> tuple[float, float]:
    if len(idx) == 0:
        return float("nan"), float("nan")
    outs = predict(model, ds, idx)
    try:
        rep = report(outs.probabilities("F"), ds.labels[np.asarray(idx)])
    except UndefinedMetricError:
        return float("nan"), float("nan")
    return rep.avg_acc, rep.avg_auc


def fit(
    model: Model,
    dataset: PairedDataset,
    splits: DatasetSplits,
    cfg: TrainConfig,
    *,
    probe_linearity: bool = False,
) -> TrainResult:
    """Train all three branches jointly; returns the SWA (or best-val) weights loaded."""
    if len(splits.train) == 0:
        raise ConfigError("training split is empty")
    params = model.parameters()
    triple = cfg.loss_triple()
    adam = AdamState()
    swa = SwaState()
    swa_epochs = set(cfg.swa_epochs())
    train_idx = np.asarray(splits.train, dtype=np.int64)
    probe = train_idx[: cfg.batch_size]
    history: list[EpochRecord] = []
    best_auc, best_state = -math.inf, None
    lin_dev = 0.0 if probe_linearity else None

    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)
        order = derive_rng(cfg.seed, "shuffle", str(epoch)).permutation(train_idx)
        sums = np.zeros(4)
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            if probe_linearity:
                check = gradient_decomposition(
                    model, dataset.clinical[probe], dataset.derm[probe], dataset.labels[probe], triple
                )
                lin_dev = max(lin_dev, check["max_dev"])
            losses = branch_losses(model(dataset.clinical[sel], dataset.derm[sel]), dataset.labels[sel])
            total = weighted_total(losses, triple)
            values = np.array([losses.L_C.item(), losses.L_D.item(), losses.L_F.item(), total.item()])
            if not np.all(np.isfinite(values)):
                raise TrainingDiverged(epoch + 1)
            sums += values * len(sel)
            nc.zero_grad(params.values())
            nc.backward(total)
            ensure_grads(params)
            adam_step(params, adam, lr)
        nc.zero_grad(params.values())
        means = sums / len(order)
        val_acc, val_auc = _val_metrics(model, dataset, splits.val)
        history.append(EpochRecord(epoch + 1, lr, *means.tolist(), val_acc, val_auc))
        logger.info("epoch %d lr %.3g loss %.4f val acc %.4f auc %.4f", epoch + 1, lr, means[3], val_acc, val_auc)
        if epoch in swa_epochs:
            swa_update(swa, model.state())
        if cfg.select == "best_val" and val_auc > best_auc:
            best_auc, best_state = val_auc, model.state()

    final = swa_finalize(swa)
    if cfg.select == "best_val" and best_state is not None:
        final = best_state
    model.load_state(final)
    return TrainResult(model, history, final, swa.count, lin_dev)


def history_csv(history: list[EpochRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HISTORY_COLUMNS)
    for r in history:
        writer.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in HISTORY_COLUMNS[1:]])
    return buf.getvalue()
