"""Synthetic paired clinical/dermoscopy data, splits and binary containers.

Each sample carries one label per task. Every (task, class) pair owns a
fixed low-frequency spatial template; a sample's signal is the sum of the
templates selected by its labels. The dermoscopy image shows that signal at
a higher amplitude than the clinical image, and the clinical image also
carries a per-sample low-frequency nuisance pattern. Both get unit Gaussian
pixel noise.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import numcore as nc
from .encoder import derive_rng
from .errors import ConfigError, CorruptionError, DataError, FormatError

# per-pixel RMS of one class template at unit SNR
TEMPLATE_RMS = 0.03
# per-pixel RMS of the clinical nuisance pattern at unit nuisance_strength
NUISANCE_RMS = 0.15
# template frequencies per axis are drawn from 0..MAX_FREQ cycles across the image
MAX_FREQ = 3


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 1000
    tasks: tuple[int, ...] = (2, 2)
    image_size: int = 32
    channels: int = 3
    snr_derm: float = 4.0
    snr_clinical: float = 1.0
    nuisance_strength: float = 1.0
    seed: int = 0
    # set False to allow snr_derm <= snr_clinical (falsification runs)
    enforce_prior: bool = True

    def __post_init__(self):
        object.__setattr__(self, "tasks", tuple(int(k) for k in self.tasks))
        if self.n_samples < 1:
            raise ConfigError("n_samples must be positive")
        if not self.tasks or any(k < 2 for k in self.tasks):
            raise ConfigError(f"every task needs at least 2 classes, got {list(self.tasks)}")
        if self.image_size < 1 or self.channels < 1:
            raise ConfigError("image_size and channels must be positive")
        if self.nuisance_strength < 0:
            raise ConfigError("nuisance_strength must be nonnegative")
        if self.enforce_prior and not self.snr_derm > self.snr_clinical:
            raise ConfigError(
                f"snr_derm ({self.snr_derm}) must exceed snr_clinical ({self.snr_clinical}); "
                "set enforce_prior = false to override"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tasks"] = list(self.tasks)
        return d


@dataclass
class PairedDataset:
    labels: np.ndarray  # [n, T] int64
    clinical: np.ndarray  # [n, C, S, S]
    derm: np.ndarray  # [n, C, S, S]
    spec: SyntheticSpec | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.clinical = np.asarray(self.clinical, dtype=np.float64)
        self.derm = np.asarray(self.derm, dtype=np.float64)
        n = self.labels.shape[0]
        if self.labels.ndim != 2 or self.clinical.shape[0] != n or self.derm.shape != self.clinical.shape:
            raise DataError(
                f"inconsistent dataset arrays: labels {self.labels.shape}, "
                f"clinical {self.clinical.shape}, derm {self.derm.shape}"
            )

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def n_tasks(self) -> int:
        return self.labels.shape[1]

    def subset(self, idx) -> PairedDataset:
        idx = np.asarray(idx, dtype=np.int64)
        return PairedDataset(self.labels[idx], self.clinical[idx], self.derm[idx], self.spec)

    def equals(self, other: PairedDataset) -> bool:
        return (
            self.spec == other.spec
            and np.array_equal(self.labels, other.labels)
            and self.clinical.tobytes() == other.clinical.tobytes()
            and self.derm.tobytes() == other.derm.tobytes()
        )


def low_frequency_pattern(rng: np.random.Generator, channels: int, size: int) -> np.ndarray:
    """Random smooth pattern with zero mean and unit per-pixel RMS."""
    coords = (np.arange(size) + 0.5) / size
    pattern = np.zeros((channels, size, size))
    freqs = [(u, v) for u in range(MAX_FREQ + 1) for v in range(MAX_FREQ + 1) if u or v]
    for c in range(channels):
        amps = rng.normal(size=len(freqs))
        phases = rng.uniform(0.0, 2.0 * np.pi, size=(len(freqs), 2))
        for a, (u, v), (pu, pv) in zip(amps, freqs, phases):
            pattern[c] += a * np.outer(np.cos(2 * np.pi * u * coords + pu), np.cos(2 * np.pi * v * coords + pv))
    pattern -= pattern.mean()
    return pattern / np.sqrt(np.mean(pattern**2))


def class_templates(spec: SyntheticSpec) -> list[list[np.ndarray]]:
    rng = derive_rng(spec.seed, "templates")
    return [
        [low_frequency_pattern(rng, spec.channels, spec.image_size) * TEMPLATE_RMS for _ in range(k)]
        for k in spec.tasks
    ]


def generate(spec: SyntheticSpec) -> PairedDataset:
    templates = class_templates(spec)
    n, shape = spec.n_samples, (spec.channels, spec.image_size, spec.image_size)
    labels = np.zeros((n, len(spec.tasks)), dtype=np.int64)
    clinical = np.zeros((n,) + shape)
    derm = np.zeros((n,) + shape)
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed & 0xFFFFFFFF, i]))
        y = [int(rng.integers(k)) for k in spec.tasks]
        signal = np.sum([templates[t][k] for t, k in enumerate(y)], axis=0)
        nuisance = low_frequency_pattern(rng, spec.channels, spec.image_size) * NUISANCE_RMS
        labels[i] = y
        derm[i] = spec.snr_derm * signal + rng.normal(size=shape)
        clinical[i] = spec.snr_clinical * signal + spec.nuisance_strength * nuisance + rng.normal(size=shape)
    return PairedDataset(labels, clinical, derm, spec)


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class DatasetSplits:
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)

    def sizes(self) -> tuple[int, int, int]:
        return (len(self.train), len(self.val), len(self.test))


DEFAULT_RATIOS = (0.7, 0.1, 0.2)


def parse_ratio(text) -> float:
    """Accept decimals or fractions such as ``8/11``."""
    return float(Fraction(str(text).strip()))


def split(n: int, ratios=DEFAULT_RATIOS, seed: int = 0) -> DatasetSplits:
    """Seeded shuffle, then a contiguous train/val/test cut.

    Validation and test sizes are ``floor(n * ratio)``; the remainder goes to
    training.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"need three nonnegative split ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)}")
    if n < len(ratios):
        raise DataError(f"cannot split {n} samples into {len(ratios)} parts")
    n_val = int(np.floor(n * ratios[1] + 1e-9))
    n_test = int(np.floor(n * ratios[2] + 1e-9))
    n_train = n - n_val - n_test
    perm = derive_rng(seed, "split").permutation(n)
    return DatasetSplits(
        train=sorted(int(i) for i in perm[:n_train]),
        val=sorted(int(i) for i in perm[n_train : n_train + n_val]),
        test=sorted(int(i) for i in perm[n_train + n_val :]),
    )


# ---------------------------------------------------------------------------
# "PEMD" container: magic, u32 version, u32 spec length, spec JSON,
# u32 n, u32 T, then per sample T x u32 labels + clinical + derm tensors

DATASET_MAGIC = b"PEMD"
DATASET_VERSION = 1


def _spec_bytes(spec: SyntheticSpec | None) -> bytes:
    return json.dumps(spec.to_dict() if spec else None, sort_keys=True).encode()


def dataset_bytes(ds: PairedDataset) -> bytes:
    buf = io.BytesIO()
    spec_raw = _spec_bytes(ds.spec)
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<II", DATASET_VERSION, len(spec_raw)))
    buf.write(spec_raw)
    buf.write(struct.pack("<II", len(ds), ds.n_tasks))
    for i in range(len(ds)):
        buf.write(struct.pack(f"<{ds.n_tasks}I", *ds.labels[i]))
        nc.write_tensor(buf, ds.clinical[i])
        nc.write_tensor(buf, ds.derm[i])
    return buf.getvalue()


def expected_file_size(ds: PairedDataset) -> int:
    header = 4 + 8 + len(_spec_bytes(ds.spec)) + 8
    per_sample = 4 * ds.n_tasks + 2 * nc.tensor_nbytes(ds.clinical.shape[1:])
    return header + len(ds) * per_sample


def save_dataset(ds: PairedDataset, path) -> str:
    """Write the container and return its sha256 hex digest."""
    raw = dataset_bytes(ds)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def dataset_digest(ds: PairedDataset) -> str:
    return hashlib.sha256(dataset_bytes(ds)).hexdigest()


def _read(fp, n: int) -> bytes:
    buf = fp.read(n)
    if len(buf) != n:
        raise CorruptionError(f"dataset file truncated: wanted {n} bytes, got {len(buf)}")
    return buf


def load_dataset(path) -> PairedDataset:
    raw = Path(path).read_bytes()
    fp = io.BytesIO(raw)
    magic = fp.read(4)
    if magic != DATASET_MAGIC:
        raise FormatError(f"not a dataset container (magic {magic!r})")
    version, spec_len = struct.unpack("<II", _read(fp, 8))
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}")
    try:
        spec_dict = json.loads(_read(fp, spec_len).decode())
        spec = None if spec_dict is None else SyntheticSpec(**spec_dict)
    except (UnicodeDecodeError, json.JSONDecodeError, TypeError) as exc:
        raise CorruptionError(f"unreadable spec header: {exc}") from exc
    n, n_tasks = struct.unpack("<II", _read(fp, 8))
    labels, clinical, derm = [], [], []
    for _ in range(n):
        labels.append(struct.unpack(f"<{n_tasks}I", _read(fp, 4 * n_tasks)))
        clinical.append(nc.read_tensor(fp).data)
        derm.append(nc.read_tensor(fp).data)
    if fp.read(1):
        raise CorruptionError("trailing bytes after dataset payload")
    if n == 0:
        raise CorruptionError("dataset contains no samples")
    return PairedDataset(np.array(labels, dtype=np.int64).reshape(n, n_tasks), np.stack(clinical), np.stack(derm), spec)


def load_manifest(path) -> PairedDataset:
    """Read ``sample_id, clinical_path, derm_path, label_1..label_T`` rows.

    Image paths point at single-tensor files in the binary tensor format and
    are resolved relative to the manifest's directory.
    """
    path = Path(path)
    root = path.parent
    labels, clinical, derm = [], [], []
    with open(path, newline="") as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        if not header or header[:3] != ["sample_id", "clinical_path", "derm_path"] or len(header) < 4:
            raise FormatError("manifest header must be: sample_id,clinical_path,derm_path,label_1[,...]")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"manifest line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                labels.append([int(v) for v in row[3:]])
            except ValueError as exc:
                raise DataError(f"manifest line {lineno}: non-integer label") from exc
            for col, sink in ((1, clinical), (2, derm)):
                with open(root / row[col], "rb") as tf:
                    sink.append(nc.read_tensor(tf).data)
    if not labels:
        raise DataError("manifest lists no samples")
    return PairedDataset(np.array(labels), np.stack(clinical), np.stack(derm), None)
