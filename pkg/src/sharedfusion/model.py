"""Full two-modality classifier: encoder, stage fusion and three branch heads."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .encoder import Encoder, EncoderConfig, build_encoder, count_params
from .errors import CorruptionError, FormatError, MismatchError
from .fusion import FusionConfig, FusionModule, build_fusion, count_fusion_params
from .heads import BranchOutputs, HeadConfig, Heads, build_heads, count_head_params, global_avg_pool
from .numcore import Tensor


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)

    def __post_init__(self):
        self.fusion.validate_against(self.encoder.n_stages)

    def to_dict(self) -> dict:
        def plain(obj):
            if isinstance(obj, dict):
                return {k: plain(v) for k, v in obj.items()}
            if isinstance(obj, (list, tuple)):
                return [plain(v) for v in obj]
            return getattr(obj, "value", obj)

        return plain(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(
            encoder=EncoderConfig(**d["encoder"]),
            fusion=FusionConfig(**d["fusion"]),
            heads=HeadConfig(**d["heads"]),
        )

    def digest(self) -> bytes:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).digest()


class Model:
    def __init__(self, cfg: ModelConfig, encoder: Encoder, fusion: FusionModule, heads: Heads):
        self.cfg = cfg
        self.encoder = encoder
        self.fusion = fusion
        self.heads = heads

    def features(self, clinical: Tensor, derm: Tensor) -> tuple[Tensor, Tensor]:
        """Final-stage (refined) feature maps for both modalities."""
        self.encoder.check_input(clinical)
        self.encoder.check_input(derm)
        c, d = clinical, derm
        for s in range(self.cfg.encoder.n_stages):
            c = self.encoder.run_stage(s, c, 0)
            d = self.encoder.run_stage(s, d, 1)
            c, d = self.fusion.apply(s, c, d)
        return c, d

    def __call__(self, clinical, derm) -> BranchOutputs:
        clinical = clinical if isinstance(clinical, Tensor) else Tensor(clinical)
        derm = derm if isinstance(derm, Tensor) else Tensor(derm)
        c, d = self.features(clinical, derm)
        return self.heads(global_avg_pool(c), global_avg_pool(d))

    def parameters(self) -> dict[str, Tensor]:
        params = self.encoder.parameters()
        params.update(self.fusion.parameters())
        params.update(self.heads.parameters())
        return params

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(params) != set(state):
            missing = sorted(set(params) - set(state))
            extra = sorted(set(state) - set(params))
            raise MismatchError(f"state keys differ: missing {missing}, unexpected {extra}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise MismatchError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()

    def param_counts(self) -> dict[str, int]:
        enc = count_params(self.encoder)
        fus = _count_unique(self.fusion.parameters())
        head = _count_unique(self.heads.parameters())
        return {"encoder_params": enc, "fusion_params": fus, "head_params": head, "total": enc + fus + head}


def _count_unique(params: dict[str, Tensor]) -> int:
    return int(sum(t.size for t in {id(t): t for t in params.values()}.values()))


def build_model(cfg: ModelConfig, seed: int) -> Model:
    return Model(
        cfg,
        build_encoder(cfg.encoder, seed),
        build_fusion(cfg.fusion, cfg.encoder.stage_channels, seed),
        build_heads(cfg.heads, cfg.encoder.stage_channels[-1], seed),
    )


def expected_param_counts(cfg: ModelConfig) -> dict[str, int]:
    """Closed-form parameter accounting, independent of any built model."""
    from .encoder import expected_encoder_params

    enc = expected_encoder_params(cfg.encoder)
    fus = count_fusion_params(cfg.fusion, cfg.encoder.stage_channels)
    head = count_head_params(cfg.heads, cfg.encoder.stage_channels[-1])
    return {"encoder_params": enc, "fusion_params": fus, "head_params": head, "total": enc + fus + head}


# ---------------------------------------------------------------------------
# checkpoint: "PEMW", u32 version, 32-byte config digest, u32 count,
# then per tensor: u32 name length, utf-8 name, PEMT tensor

CHECKPOINT_MAGIC = b"PEMW"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, cfg: ModelConfig, state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fp:
        fp.write(CHECKPOINT_MAGIC)
        fp.write(struct.pack("<I", CHECKPOINT_VERSION))
        fp.write(cfg.digest())
        fp.write(struct.pack("<I", len(state)))
        for name in sorted(state):
            raw = name.encode()
            fp.write(struct.pack("<I", len(raw)))
            fp.write(raw)
            nc.write_tensor(fp, state[name])


def load_checkpoint(path, cfg: ModelConfig | None = None) -> tuple[bytes, dict[str, np.ndarray]]:
    """Read a checkpoint; when ``cfg`` is given its digest must match."""
    with open(Path(path), "rb") as fp:
        magic = fp.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"not a weight checkpoint (magic {magic!r})")
        head = fp.read(4 + 32 + 4)
        if len(head) != 40:
            raise CorruptionError("truncated checkpoint header")
        (version,) = struct.unpack("<I", head[:4])
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        digest = head[4:36]
        (count,) = struct.unpack("<I", head[36:])
        if cfg is not None and digest != cfg.digest():
            raise MismatchError("checkpoint was written for a different model configuration")
        state = {}
        for _ in range(count):
            raw_len = fp.read(4)
            if len(raw_len) != 4:
                raise CorruptionError("truncated checkpoint entry")
            (n,) = struct.unpack("<I", raw_len)
            name = fp.read(n)
            if len(name) != n:
                raise CorruptionError("truncated checkpoint entry name")
            state[name.decode()] = nc.read_tensor(fp).data
        return digest, state
