"""Sectioned ``key = value`` run configuration (INI grammar via configparser).

Unknown sections or keys are rejected. Values are validated by the
dataclasses they populate; errors name the offending file line.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import DEFAULT_RATIOS, SyntheticSpec, parse_ratio
from .encoder import EncoderConfig
from .errors import ConfigError
from .fusion import FusionConfig
from .heads import HeadConfig
from .model import ModelConfig
from .trainer import TrainConfig


def _int_list(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ratios(text: str) -> tuple[float, ...]:
    return tuple(parse_ratio(v) for v in text.split(","))


# section -> key -> parser
SCHEMA: dict[str, dict[str, callable]] = {
    "encoder": {
        "in_channels": int,
        "stage_channels": _int_list,
        "kernel": int,
        "sharing": str,
        "input_size": int,
    },
    "fusion": {
        "mode": str,
        "stages": _int_list,
        "scale": str,
        "self_variant": _bool,
        "map_from": str,
    },
    "heads": {"tasks": _int_list, "classifier_sharing": str},
    "train": {
        "epochs": int,
        "batch_size": int,
        "lr_max": float,
        "lr_min": float,
        "seed": int,
        "swa_start_fraction": float,
        "select": str,
    },
    "loss": {"mode": str, "W": float},
    "data": {"dataset": str, "manifest": str, "split_ratios": _ratios, "split_seed": int},
    "evaluate": {"search_step": float},
    "output": {"dir": str},
}

SPEC_SCHEMA: dict[str, dict[str, callable]] = {
    "synthetic": {
        "n_samples": int,
        "tasks": _int_list,
        "image_size": int,
        "channels": int,
        "snr_derm": float,
        "snr_clinical": float,
        "nuisance_strength": float,
        "seed": int,
        "enforce_prior": _bool,
    }
}


def _line_of(text: str, section: str, key: str | None = None) -> int | None:
    current = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return lineno
            continue
        if key is not None and current == section:
            name = re.split(r"[=:]", stripped, maxsplit=1)[0].strip()
            if name.lower() == key.lower():
                return lineno
    return None


def _where(source: str, text: str, section: str, key: str | None = None) -> str:
    line = _line_of(text, section, key)
    return f"{source}:{line}" if line else source


def parse_sections(text: str, schema: dict, source: str = "<config>", allow_extra_prefix: str | None = None):
    """Parse and type-convert every key; returns ``{section: {key: value}}``."""
    parser = configparser.ConfigParser(
        interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"), inline_comment_prefixes=("#", ";")
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        lineno = getattr(exc, "lineno", None)
        if lineno is None and getattr(exc, "errors", None):
            lineno = exc.errors[0][0]
        where = f"{source}:{lineno}" if lineno else source
        raise ConfigError(f"{where}: malformed config: {exc.message.splitlines()[0]}") from exc
    out: dict[str, dict] = {}
    for section in parser.sections():
        if allow_extra_prefix and section.startswith(allow_extra_prefix):
            out[section] = dict(parser[section])
            continue
        if section not in schema:
            raise ConfigError(f"{_where(source, text, section)}: unknown section [{section}]")
        values = {}
        for key, raw in parser[section].items():
            if key not in schema[section]:
                raise ConfigError(f"{_where(source, text, section, key)}: unknown key '{key}' in [{section}]")
            try:
                values[key] = schema[section][key](raw)
            except ValueError as exc:
                raise ConfigError(f"{_where(source, text, section, key)}: bad value for {section}.{key}: {exc}") from exc
        out[section] = values
    return out


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: str | None = None
    manifest: str | None = None
    split_ratios: tuple[float, ...] = DEFAULT_RATIOS
    split_seed: int = 0
    search_step: float = 0.1
    output_dir: str = "run"

    def with_overrides(self, overrides: dict[str, dict]) -> RunConfig:
        return build_run_config(_merge(self.to_sections(), overrides))

    def to_sections(self) -> dict[str, dict]:
        m = self.model.to_dict()
        t = self.train
        data = {"split_ratios": tuple(self.split_ratios), "split_seed": self.split_seed}
        if self.dataset is not None:
            data["dataset"] = self.dataset
        if self.manifest is not None:
            data["manifest"] = self.manifest
        return {
            "encoder": {k: _tuple(v) for k, v in m["encoder"].items()},
            "fusion": {k: _tuple(v) for k, v in m["fusion"].items()},
            "heads": {k: _tuple(v) for k, v in m["heads"].items()},
            "train": {
                "epochs": t.epochs,
                "batch_size": t.batch_size,
                "lr_max": t.lr_max,
                "lr_min": t.lr_min,
                "seed": t.seed,
                "swa_start_fraction": t.swa_start_fraction,
                "select": t.select,
            },
            "loss": {"mode": t.loss, "W": t.W},
            "data": data,
            "evaluate": {"search_step": self.search_step},
            "output": {"dir": self.output_dir},
        }

    def to_text(self) -> str:
        lines = []
        for section, values in self.to_sections().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {_format(value)}")
            lines.append("")
        return "\n".join(lines)


def _tuple(v):
    return tuple(v) if isinstance(v, list) else v


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _merge(base: dict[str, dict], overrides: dict[str, dict]) -> dict[str, dict]:
    merged = {s: dict(v) for s, v in base.items()}
    for section, values in overrides.items():
        merged.setdefault(section, {}).update(values)
    return merged


def build_run_config(sections: dict[str, dict]) -> RunConfig:
    try:
        enc = EncoderConfig(**sections.get("encoder", {}))
        fus = FusionConfig(**sections.get("fusion", {}))
        heads = HeadConfig(**sections.get("heads", {}))
        loss = sections.get("loss", {})
        train_kw = dict(sections.get("train", {}))
        if "mode" in loss:
            train_kw["loss"] = loss["mode"]
        if "W" in loss:
            train_kw["W"] = loss["W"]
        train = TrainConfig(**train_kw)
        data = sections.get("data", {})
        cfg = RunConfig(
            model=ModelConfig(enc, fus, heads),
            train=train,
            dataset=data.get("dataset"),
            manifest=data.get("manifest"),
            split_ratios=tuple(data.get("split_ratios", DEFAULT_RATIOS)),
            split_seed=data.get("split_seed", 0),
            search_step=sections.get("evaluate", {}).get("search_step", 0.1),
            output_dir=sections.get("output", {}).get("dir", "run"),
        )
    except ValueError as exc:  # includes ConfigError and enum lookups
        raise ConfigError(str(exc)) from exc
    if len(cfg.split_ratios) != 3 or abs(sum(cfg.split_ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split_ratios must be three values summing to 1, got {cfg.split_ratios}")
    if not 0 < cfg.search_step <= 0.5:
        raise ConfigError(f"search_step must lie in (0, 0.5], got {cfg.search_step}")
    return cfg


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    sections = parse_sections(text, SCHEMA, source)
    try:
        return build_run_config(sections)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_run_config(path) -> RunConfig:
    path = Path(path)
    cfg = parse_run_config(path.read_text(), str(path))
    # relative data paths are relative to the config file
    updates = {}
    for name in ("dataset", "manifest"):
        value = getattr(cfg, name)
        if value is not None and not Path(value).is_absolute():
            updates[name] = str((path.parent / value).resolve())
    return replace(cfg, **updates) if updates else cfg


def parse_spec(text: str, source: str = "<spec>") -> SyntheticSpec:
    sections = parse_sections(text, SPEC_SCHEMA, source)
    try:
        return SyntheticSpec(**sections.get("synthetic", {}))
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def spec_to_text(spec: SyntheticSpec) -> str:
    lines = ["[synthetic]"]
    for f in fields(spec):
        lines.append(f"{f.name} = {_format(getattr(spec, f.name))}")
    return "\n".join(lines) + "\n"
