"""Command-line interface.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 training divergence,
5 checkpoint/config mismatch.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as config_mod
from .config import RunConfig, load_run_config, parse_sections, parse_spec
from .data import generate, save_dataset
from .errors import ConfigError, DataError, MismatchError, TrainingDiverged
from .model import build_model, load_checkpoint, save_checkpoint
from .pipeline import SuiteCell, evaluate_model, load_data, make_splits, rows_to_csv, run_cell, train_run
from .trainer import history_csv

logger = logging.getLogger("sharedfusion")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH = 0, 2, 3, 4, 5


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def cmd_gen_data(args) -> int:
    spec_path = Path(args.spec)
    spec = parse_spec(spec_path.read_text(), str(spec_path))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    digest = save_dataset(generate(spec), out)
    print(json.dumps({"path": str(out), "n_samples": spec.n_samples, "sha256": digest}))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    if args.output:
        cfg = replace(cfg, output_dir=args.output)
    out = Path(cfg.output_dir)
    if not out.is_absolute():
        out = Path(args.config).parent / out
    ds = load_data(cfg)
    splits = make_splits(cfg, ds)
    _write(out / "resolved_config.ini", cfg.to_text())
    result = train_run(cfg, ds, splits)
    save_checkpoint(out / "model.pemw", cfg.model, result.final_state)
    _write(out / "history.csv", history_csv(result.history))
    last = result.history[-1]
    print(
        json.dumps(
            {
                "checkpoint": str(out / "model.pemw"),
                "epochs": len(result.history),
                "swa_snapshots": result.swa_count,
                "final_L_total": last.L_total,
                "val_avg_auc": last.val_avg_auc,
            }
        )
    )
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_run_config(args.config)
    _, state = load_checkpoint(args.checkpoint, cfg.model)
    model = build_model(cfg.model, cfg.train.seed)
    model.load_state(state)
    ds = load_data(cfg)
    splits = make_splits(cfg, ds)
    ev = evaluate_model(model, ds, splits, search=args.search_weights, step=cfg.search_step)
    out = Path(args.output) if args.output else Path(args.checkpoint).parent
    _write(out / "report.json", ev.to_json() + "\n")
    _write(out / "report.csv", ev.to_csv())
    _write(out / "predictions.json", ev.predictions_json() + "\n")
    _write(out / "resolved_config.ini", cfg.to_text())
    test = ev.reports.get("test")
    summary = {"weights": ev.weights.as_dict()}
    if test:
        summary.update(test_avg_auc=test["fused"].avg_auc, test_avg_acc=test["fused"].avg_acc)
    print(json.dumps(summary))
    return EXIT_OK


SUITE_SCHEMA = {
    **config_mod.SCHEMA,
    "suite": {
        "seeds": config_mod._int_list,
        "w_sweep": lambda s: tuple(float(v) for v in s.split(",") if v.strip()),
        "include_eq": config_mod._bool,
        "jobs": int,
    },
}


def load_suite(path: Path):
    text = path.read_text()
    sections = parse_sections(text, SUITE_SCHEMA, str(path), allow_extra_prefix="cell:")
    suite = sections.pop("suite", {})
    cell_sections = {k: v for k, v in sections.items() if k.startswith("cell:")}
    base_sections = {k: v for k, v in sections.items() if not k.startswith("cell:")}
    try:
        base = config_mod.build_run_config(base_sections)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if base.dataset and not Path(base.dataset).is_absolute():
        base = replace(base, dataset=str((path.parent / base.dataset).resolve()))
    if base.manifest and not Path(base.manifest).is_absolute():
        base = replace(base, manifest=str((path.parent / base.manifest).resolve()))
    cells = []
    for name, raw in cell_sections.items():
        overrides: dict[str, dict] = {}
        for dotted, value in raw.items():
            section, _, key = dotted.partition(".")
            if section not in config_mod.SCHEMA or key not in config_mod.SCHEMA[section]:
                raise ConfigError(f"{path}: unknown override '{dotted}' in [{name}]")
            try:
                overrides.setdefault(section, {})[key] = config_mod.SCHEMA[section][key](value)
            except ValueError as exc:
                raise ConfigError(f"{path}: bad value for {dotted} in [{name}]: {exc}") from exc
        cells.append(SuiteCell(name[len("cell:") :], overrides))
    for w in suite.get("w_sweep", ()):
        cells.append(SuiteCell(f"W={w!r}", {"loss": {"mode": "biased", "W": w}}))
    if suite.get("include_eq", False):
        cells.append(SuiteCell("EQ", {"loss": {"mode": "equal"}}))
    if not cells:
        raise ConfigError(f"{path}: suite declares no cells")
    for cell in cells:
        base.with_overrides(cell.overrides)  # validate every cell up front
    seeds = suite.get("seeds", (0, 1, 2, 3, 4))
    return base, cells, seeds, suite.get("jobs", 1)


def _run_cell_job(payload):
    base, cell, seeds = payload
    ds = load_data(base)
    return run_cell(base, cell, seeds, ds, make_splits(base, ds))


def cmd_compare(args) -> int:
    suite_path = Path(args.suite)
    base, cells, seeds, jobs = load_suite(suite_path)
    if args.jobs is not None:
        jobs = args.jobs
    out = Path(args.output) if args.output else suite_path.parent / base.output_dir
    ds = load_data(base)
    splits = make_splits(base, ds)
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell_job, [(base, c, seeds) for c in cells]))
    else:
        rows = [run_cell(base, c, seeds, ds, splits) for c in cells]
    table = rows_to_csv(rows)
    _write(out / "compare.csv", table)
    _write(out / "resolved_config.ini", base.to_text())
    sys.stdout.write(table)
    return EXIT_OK


def cmd_params(args) -> int:
    cfg = load_run_config(args.config)
    counts = build_model(cfg.model, cfg.train.seed).param_counts()
    print(json.dumps(counts))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sharedfusion", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic paired dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--output", help="override output.dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on the val/test splits")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--search-weights", action="store_true", help="grid-search late-fusion weights on val")
    p.add_argument("--output", help="directory for report files (default: checkpoint's directory)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("compare", help="run an ablation/sweep suite over several seeds")
    p.add_argument("--suite", required=True)
    p.add_argument("--output")
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("params", help="print parameter counts for a config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_params)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MismatchError as exc:
        print(f"mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except TrainingDiverged as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, DataError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
