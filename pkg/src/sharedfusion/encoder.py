"""Multi-stage convolutional encoder with optional weight tying across modalities."""

from __future__ import annotations

import enum
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .errors import ConfigError, DimensionError
from .numcore import Tensor


class Sharing(str, enum.Enum):
    INDIVIDUAL = "individual"
    SHARED = "shared"


def derive_rng(seed: int, *labels: str) -> np.random.Generator:
    """Independent generator for a named component, stable across runs."""
    keys = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(label.encode()) for label in labels]
    return np.random.default_rng(np.random.SeedSequence(keys))


@dataclass(frozen=True)
class EncoderConfig:
    in_channels: int = 3
    stage_channels: tuple[int, ...] = (8, 16, 32, 64)
    kernel: int = 3
    sharing: Sharing = Sharing.SHARED
    input_size: int = 32

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "sharing", Sharing(self.sharing))
        self.validate()

    def validate(self) -> None:
        if not self.stage_channels:
            raise ConfigError("stage_channels must be non-empty")
        if self.in_channels < 1 or any(c < 1 for c in self.stage_channels):
            raise ConfigError("channel counts must be positive")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be a positive odd integer, got {self.kernel}")
        factor = 2 ** len(self.stage_channels)
        if self.input_size < factor or self.input_size % factor:
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2^{len(self.stage_channels)}"
            )

    @property
    def n_stages(self) -> int:
        return len(self.stage_channels)

    def stage_shape(self, s: int) -> tuple[int, int, int]:
        side = self.input_size // 2 ** (s + 1)
        return (self.stage_channels[s], side, side)


@dataclass
class StageWeights:
    conv_w: list[Tensor] = field(default_factory=list)
    conv_b: list[Tensor] = field(default_factory=list)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for s, (w, b) in enumerate(zip(self.conv_w, self.conv_b)):
            out[f"{prefix}.stage{s}.w"] = w
            out[f"{prefix}.stage{s}.b"] = b
        return out


def _init_weight_set(cfg: EncoderConfig, rng: np.random.Generator) -> StageWeights:
    ws = StageWeights()
    c_prev = cfg.in_channels
    k = cfg.kernel
    for c in cfg.stage_channels:
        fan_in = c_prev * k * k
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c, c_prev, k, k))
        ws.conv_w.append(Tensor(w, requires_grad=True))
        ws.conv_b.append(Tensor(np.zeros(c), requires_grad=True))
        c_prev = c
    return ws


# Stage features are plain lists: features[s] has shape stage_shape(s),
# with a leading batch axis when the input was batched.
StageFeatures = list


class Encoder:
    """Feature extractor for the clinical (index 0) and dermoscopy (index 1) inputs.

    In shared mode both modalities index the same weight set.
    """

    def __init__(self, cfg: EncoderConfig, weight_sets: list[StageWeights]):
        expected = 1 if cfg.sharing is Sharing.SHARED else 2
        if len(weight_sets) != expected:
            raise ConfigError(f"{cfg.sharing.value} encoder needs {expected} weight set(s)")
        self.cfg = cfg
        self.weight_sets = weight_sets

    def weights_for(self, modality: int) -> StageWeights:
        return self.weight_sets[0] if len(self.weight_sets) == 1 else self.weight_sets[modality]

    def check_input(self, x: Tensor) -> None:
        want = (self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size)
        if tuple(x.shape[-3:]) != want or x.ndim not in (3, 4):
            raise DimensionError(f"encoder input must be [{want}] (optionally batched), got {x.shape}")

    def pre_pool(self, s: int, x: Tensor, modality: int) -> Tensor:
        ws = self.weights_for(modality)
        return nc.gelu(nc.conv2d(x, ws.conv_w[s], ws.conv_b[s], stride=1, pad=self.cfg.kernel // 2))

    def run_stage(self, s: int, x: Tensor, modality: int) -> Tensor:
        return nc.avg_pool2d(self.pre_pool(s, x, modality), 2)

    def encode(self, x: Tensor, modality: int) -> StageFeatures:
        self.check_input(x)
        feats = []
        for s in range(self.cfg.n_stages):
            x = self.run_stage(s, x, modality)
            feats.append(x)
        return feats

    def parameters(self) -> dict[str, Tensor]:
        if len(self.weight_sets) == 1:
            return self.weight_sets[0].named("encoder.shared")
        params = self.weight_sets[0].named("encoder.clinical")
        params.update(self.weight_sets[1].named("encoder.derm"))
        return params


def build_encoder(cfg: EncoderConfig, seed: int) -> Encoder:
    if cfg.sharing is Sharing.SHARED:
        sets = [_init_weight_set(cfg, derive_rng(seed, "encoder", "shared"))]
    else:
        sets = [
            _init_weight_set(cfg, derive_rng(seed, "encoder", "clinical")),
            _init_weight_set(cfg, derive_rng(seed, "encoder", "derm")),
        ]
    return Encoder(cfg, sets)


def encode_pair(enc: Encoder, clinical: Tensor, derm: Tensor) -> tuple[StageFeatures, StageFeatures]:
    """Run both modalities through the encoder without any cross-modal fusion."""
    if clinical.shape != derm.shape:
        raise DimensionError(f"clinical {clinical.shape} and dermoscopy {derm.shape} shapes differ")
    return enc.encode(clinical, 0), enc.encode(derm, 1)


def count_params(enc: Encoder) -> int:
    """Number of scalar weights; tied tensors count once."""
    unique = {id(t): t for t in enc.parameters().values()}
    return int(sum(t.size for t in unique.values()))


def expected_encoder_params(cfg: EncoderConfig) -> int:
    per_set = 0
    c_prev = cfg.in_channels
    for c in cfg.stage_channels:
        per_set += c_prev * c * cfg.kernel**2 + c
        c_prev = c
    return per_set if cfg.sharing is Sharing.SHARED else 2 * per_set
