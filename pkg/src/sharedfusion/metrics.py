"""Classification metrics: ROC AUC, confusion-based rates, average precision."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, UndefinedMetricError


def auc_binary(scores, labels) -> float:
    """Probability that a random positive outscores a random negative (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    pos, neg = scores[labels], np.sort(scores[~labels])
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative sample")
    below = np.searchsorted(neg, pos, side="left")
    below_or_tied = np.searchsorted(neg, pos, side="right")
    # twice the Mann-Whitney U, kept integral so the ratio is exact
    u2 = int(np.sum(below + below_or_tied))
    return u2 / (2 * pos.size * neg.size)


def auc_ovr(probs: np.ndarray, labels) -> list[float]:
    """One-vs-rest AUC for every class column."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    return [auc_binary(probs[:, k], labels == k) for k in range(probs.shape[1])]


@dataclass(frozen=True)
class ConfusionMetrics:
    precision: float
    sensitivity: float
    specificity: float
    accuracy: float
    # metrics whose denominator was zero (reported as 0.0)
    undefined: tuple[str, ...] = ()


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def confusion_metrics(pred, truth, positive_class=1) -> ConfusionMetrics:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise DimensionError(f"predictions {pred.shape} and truth {truth.shape} differ")
    p, t = pred == positive_class, truth == positive_class
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = int(np.sum(~p & ~t))
    values = {
        "precision": _ratio(tp, tp + fp),
        "sensitivity": _ratio(tp, tp + fn),
        "specificity": _ratio(tn, tn + fp),
        "accuracy": _ratio(tp + tn, pred.size),
    }
    undefined = tuple(k for k, v in values.items() if v is None)
    return ConfusionMetrics(**{k: 0.0 if v is None else v for k, v in values.items()}, undefined=undefined)


def average_precision(scores, labels) -> float:
    """Non-interpolated AP: mean precision at the rank of each positive.

    Ranking is by descending score, ties broken by ascending index.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DimensionError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    if not labels.any():
        raise UndefinedMetricError("average precision needs at least one positive sample")
    order = np.lexsort((np.arange(scores.size), -scores))
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    total = 0.0
    for r in ranks:
        total += hits[r - 1] / r
    return total / ranks.size


@dataclass
class TaskMetrics:
    task: int
    n_classes: int
    auc: list[float]
    acc: float
    precision: list[float]
    sensitivity: list[float]
    specificity: list[float]
    ap: float | None = None


@dataclass
class MetricReport:
    tasks: list[TaskMetrics] = field(default_factory=list)
    avg_auc: float = 0.0
    avg_acc: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> MetricReport:
        return cls(tasks=[TaskMetrics(**t) for t in d["tasks"]], avg_auc=d["avg_auc"], avg_acc=d["avg_acc"])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> MetricReport:
        return cls.from_dict(json.loads(text))

    def rows(self, prefix: tuple = ()) -> list[tuple]:
        """Flat ``(task, class, metric, value)`` rows; class is -1 for task-level values."""
        out = []
        for tm in self.tasks:
            for k in range(tm.n_classes):
                out.append(prefix + (tm.task, k, "auc", tm.auc[k]))
                out.append(prefix + (tm.task, k, "precision", tm.precision[k]))
                out.append(prefix + (tm.task, k, "sensitivity", tm.sensitivity[k]))
                out.append(prefix + (tm.task, k, "specificity", tm.specificity[k]))
            out.append(prefix + (tm.task, -1, "acc", tm.acc))
            if tm.ap is not None:
                out.append(prefix + (tm.task, -1, "ap", tm.ap))
        out.append(prefix + (-1, -1, "avg_auc", self.avg_auc))
        out.append(prefix + (-1, -1, "avg_acc", self.avg_acc))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS[1:])
        writer.writerows((t, k, m, repr(float(v))) for t, k, m, v in self.rows())
        return buf.getvalue()


CSV_COLUMNS = ("branch", "task", "class", "metric", "value")


def report(probs: list[np.ndarray], truth) -> MetricReport:
    """Metrics for per-task probability matrices against ``truth[:, t]``.

    Accepts a :class:`~sharedfusion.heads.BranchOutputs` branch already
    converted to probabilities, or late-fused probabilities.
    """
    truth = np.asarray(truth, dtype=np.int64)
    if truth.ndim == 1:
        truth = truth[:, None]
    if truth.shape[1] != len(probs):
        raise DimensionError(f"{truth.shape[1]} label columns for {len(probs)} tasks")
    tasks = []
    all_aucs: list[float] = []
    for t, p in enumerate(probs):
        p = np.asarray(p, dtype=np.float64)
        y = truth[:, t]
        if p.shape[0] != y.shape[0]:
            raise DimensionError(f"task {t}: {p.shape[0]} predictions for {y.shape[0]} labels")
        k = p.shape[1]
        pred = p.argmax(axis=1)
        aucs = auc_ovr(p, y)
        conf = [confusion_metrics(pred, y, positive_class=c) for c in range(k)]
        tasks.append(
            TaskMetrics(
                task=t,
                n_classes=k,
                auc=aucs,
                acc=float(np.mean(pred == y)),
                precision=[c.precision for c in conf],
                sensitivity=[c.sensitivity for c in conf],
                specificity=[c.specificity for c in conf],
                ap=average_precision(p[:, 1], y == 1) if k == 2 else None,
            )
        )
        all_aucs.extend(aucs)
    return MetricReport(
        tasks=tasks,
        avg_auc=float(np.mean(all_aucs)),
        avg_acc=float(np.mean([tm.acc for tm in tasks])),
    )


REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["tasks", "avg_auc", "avg_acc"],
    "additionalProperties": False,
    "properties": {
        "avg_auc": {"type": "number", "minimum": 0, "maximum": 1},
        "avg_acc": {"type": "number", "minimum": 0, "maximum": 1},
        "tasks": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["task", "n_classes", "auc", "acc", "precision", "sensitivity", "specificity", "ap"],
                "properties": {
                    "task": {"type": "integer", "minimum": 0},
                    "n_classes": {"type": "integer", "minimum": 2},
                    "auc": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "acc": {"type": "number", "minimum": 0, "maximum": 1},
                    "precision": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "sensitivity": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "specificity": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "ap": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
                },
            },
        },
    },
}
