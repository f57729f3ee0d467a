"""End-to-end runs shared by the CLI and the acceptance suite."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .data import DatasetSplits, PairedDataset, load_dataset, load_manifest, split
from .errors import ConfigError
from .heads import BranchOutputs, FusionWeightTriple, late_fuse, search_fusion_weights
from .metrics import REPORT_SCHEMA, report
from .model import Model, build_model
from .trainer import TrainResult, fit, predict

logger = logging.getLogger(__name__)


def load_data(cfg: RunConfig) -> PairedDataset:
    if cfg.dataset and cfg.manifest:
        raise ConfigError("set only one of data.dataset and data.manifest")
    if cfg.dataset:
        return load_dataset(cfg.dataset)
    if cfg.manifest:
        return load_manifest(cfg.manifest)
    raise ConfigError("no data source: set data.dataset or data.manifest")


def make_splits(cfg: RunConfig, ds: PairedDataset) -> DatasetSplits:
    return split(len(ds), cfg.split_ratios, cfg.split_seed)


def check_compatible(cfg: RunConfig, ds: PairedDataset) -> None:
    enc = cfg.model.encoder
    want = (enc.in_channels, enc.input_size, enc.input_size)
    if ds.clinical.shape[1:] != want:
        raise ConfigError(f"dataset images are {ds.clinical.shape[1:]}, encoder expects {want}")
    if ds.n_tasks != len(cfg.model.heads.tasks):
        raise ConfigError(f"dataset has {ds.n_tasks} tasks, heads configure {len(cfg.model.heads.tasks)}")
    for t, k in enumerate(cfg.model.heads.tasks):
        if ds.labels[:, t].max(initial=0) >= k:
            raise ConfigError(f"task {t} labels exceed the configured {k} classes")


def train_run(cfg: RunConfig, ds: PairedDataset, splits: DatasetSplits, **fit_kw) -> TrainResult:
    check_compatible(cfg, ds)
    model = build_model(cfg.model, cfg.train.seed)
    return fit(model, ds, splits, cfg.train, **fit_kw)


@dataclass
class Evaluation:
    weights: FusionWeightTriple
    searched: bool
    outputs: dict[str, BranchOutputs] = field(default_factory=dict)
    labels: dict[str, np.ndarray] = field(default_factory=dict)
    reports: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.as_dict(),
            "search_weights": self.searched,
            "splits": {
                name: {
                    "fused": rep["fused"].to_dict(),
                    "branches": {b: rep[b].to_dict() for b in ("C", "D", "F")},
                }
                for name, rep in self.reports.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("split", "branch", "task", "class", "metric", "value"))
        for split_name, rep in self.reports.items():
            for branch in ("fused", "C", "D", "F"):
                for row in rep[branch].rows((split_name, branch)):
                    writer.writerow(row[:-1] + (repr(float(row[-1])),))
        return buf.getvalue()

    def predictions_json(self) -> str:
        payload = {
            name: {
                "labels": self.labels[name].tolist(),
                **{b: [x.tolist() for x in outs.branch(b)] for b in ("C", "D", "F")},
            }
            for name, outs in self.outputs.items()
        }
        return json.dumps(payload, sort_keys=True)


def evaluate_model(
    model: Model, ds: PairedDataset, splits: DatasetSplits, *, search: bool = True, step: float = 0.1
) -> Evaluation:
    """Branch and late-fused metrics on validation and test splits.

    With ``search`` the late-fusion weights are grid-searched on validation;
    otherwise all three branches get weight 1/3.
    """
    outputs = {}
    labels = {}
    for name in ("val", "test"):
        idx = getattr(splits, name)
        if len(idx):
            outputs[name] = predict(model, ds, idx)
            labels[name] = ds.labels[np.asarray(idx)]
    if search:
        if "val" not in outputs:
            raise ConfigError("weight search needs a non-empty validation split")
        weights = search_fusion_weights(outputs["val"], labels["val"], step)
    else:
        weights = FusionWeightTriple.equal()
    ev = Evaluation(weights, search, outputs, labels)
    for name, outs in outputs.items():
        rep = {b: report(outs.probabilities(b), labels[name]) for b in ("C", "D", "F")}
        rep["fused"] = report(late_fuse(outs, weights), labels[name])
        ev.reports[name] = rep
    return ev


EVALUATION_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "additionalProperties": False,
    "required": ["weights", "search_weights", "splits"],
    "properties": {
        "weights": {
            "type": "object",
            "additionalProperties": False,
            "required": ["w_C", "w_D", "w_F"],
            "properties": {k: {"type": "number", "minimum": 0, "maximum": 1} for k in ("w_C", "w_D", "w_F")},
        },
        "search_weights": {"type": "boolean"},
        "splits": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                name: {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["fused", "branches"],
                    "properties": {
                        "fused": REPORT_SCHEMA,
                        "branches": {
                            "type": "object",
                            "additionalProperties": False,
                            "required": ["C", "D", "F"],
                            "properties": {b: REPORT_SCHEMA for b in ("C", "D", "F")},
                        },
                    },
                }
                for name in ("val", "test")
            },
        },
    },
}


# ---------------------------------------------------------------------------
# comparison suites

COMPARE_COLUMNS = (
    "cell",
    "sharing",
    "fusion",
    "loss",
    "W",
    "n_seeds",
    "encoder_params",
    "fusion_params",
    "head_params",
    "total_params",
    "avg_auc_mean",
    "avg_auc_std",
    "avg_acc_mean",
    "avg_acc_std",
    "fusion_acc_mean",
    "fusion_acc_std",
    "clinical_auc_mean",
    "derm_auc_mean",
    "status",
)


@dataclass
class SuiteCell:
    name: str
    overrides: dict[str, dict]


def run_cell(base: RunConfig, cell: SuiteCell, seeds, ds: PairedDataset, splits: DatasetSplits) -> dict:
    """Train and evaluate one configuration over several seeds."""
    cfg = base.with_overrides(cell.overrides)
    model = build_model(cfg.model, 0)
    counts = model.param_counts()
    row = {
        "cell": cell.name,
        "sharing": cfg.model.encoder.sharing.value,
        "fusion": cfg.model.fusion.mode.value,
        "loss": cfg.train.loss,
        "W": "" if cfg.train.loss == "equal" else repr(cfg.train.W),
        "n_seeds": 0,
        "encoder_params": counts["encoder_params"],
        "fusion_params": counts["fusion_params"],
        "head_params": counts["head_params"],
        "total_params": counts["total"],
    }
    metrics = {"avg_auc": [], "avg_acc": [], "fusion_acc": [], "clinical_auc": [], "derm_auc": []}
    errors = []
    for seed in seeds:
        seeded = cfg.with_overrides({"train": {"seed": seed}})
        try:
            result = train_run(seeded, ds, splits)
            ev = evaluate_model(result.model, ds, splits, search=True, step=seeded.search_step)
        except Exception as exc:  # recorded per cell; the suite continues
            logger.warning("cell %s seed %s failed: %s", cell.name, seed, exc)
            errors.append(f"seed {seed}: {type(exc).__name__}: {exc}")
            continue
        test = ev.reports["test"]
        metrics["avg_auc"].append(test["fused"].avg_auc)
        metrics["avg_acc"].append(test["fused"].avg_acc)
        metrics["fusion_acc"].append(test["F"].avg_acc)
        metrics["clinical_auc"].append(test["C"].avg_auc)
        metrics["derm_auc"].append(test["D"].avg_auc)
    row["n_seeds"] = len(metrics["avg_auc"])
    for key, values in metrics.items():
        row[f"{key}_mean"] = _mean(values)
        if key in ("avg_auc", "avg_acc", "fusion_acc"):
            row[f"{key}_std"] = _std(values)
    row["status"] = "ok" if not errors else "; ".join(errors)
    row["_raw"] = metrics
    return row


def _mean(values) -> float:
    return float(np.mean(values)) if values else math.nan


def _std(values) -> float:
    if not values:
        return math.nan
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COMPARE_COLUMNS)
    for row in rows:
        writer.writerow([_cell(row.get(c, "")) for c in COMPARE_COLUMNS])
    return buf.getvalue()


def _cell(v):
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return v
