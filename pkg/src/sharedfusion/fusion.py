"""Cross-modal interaction between clinical and dermoscopy stage features.

Three modes:

* ``concat``: no interaction inside the encoder; the fusion classifier sees
  the concatenated pooled features.
* ``ca``: cross-attention with one set of q/k/v projections per modality.
* ``sca``: cross-attention whose q/k/v projections are shared by both
  modalities, so it carries half the projection weights of ``ca``.

Projections are 1x1 convolutions without bias, i.e. a ``[d, d]`` matrix
applied to every spatial token.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .encoder import derive_rng
from .errors import ConfigError, DimensionError
from .numcore import Tensor


class FusionMode(str, enum.Enum):
    CONCAT = "concat"
    CA = "ca"
    SCA = "sca"


class AttentionScale(str, enum.Enum):
    NONE = "none"
    INV_SQRT_D = "inv_sqrt_d"


@dataclass(frozen=True)
class FusionConfig:
    mode: FusionMode = FusionMode.SCA
    # middle stages: with the desk encoder, full CA at the last two stages
    # would outweigh a second encoder
    stages: tuple[int, ...] = (1, 2)
    scale: AttentionScale = AttentionScale.INV_SQRT_D
    # literal reading of the module figure: queries, keys and values all
    # come from the modality being refined
    self_variant: bool = False
    # "qk": map = softmax(Q K^T); "qv": map = softmax(Q V^T)
    map_from: str = "qk"

    def __post_init__(self):
        object.__setattr__(self, "mode", FusionMode(self.mode))
        object.__setattr__(self, "scale", AttentionScale(self.scale))
        object.__setattr__(self, "stages", tuple(sorted({int(s) for s in self.stages})))
        if self.map_from not in ("qk", "qv"):
            raise ConfigError(f"map_from must be 'qk' or 'qv', got {self.map_from!r}")

    def validate_against(self, n_stages: int) -> None:
        bad = [s for s in self.stages if not 0 <= s < n_stages]
        if bad:
            raise ConfigError(f"fusion stages {bad} outside encoder stages 0..{n_stages - 1}")


@dataclass
class AttentionProjections:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1:
            raise DimensionError(f"projection shapes differ: {sorted(shapes)}")
        (shape,) = shapes
        if len(shape) != 2 or shape[0] != shape[1]:
            raise DimensionError(f"projections must be square [d, d], got {shape}")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, d: int, rng: np.random.Generator) -> AttentionProjections:
        std = 1.0 / np.sqrt(d)
        mats = [Tensor(rng.normal(0.0, std, size=(d, d)), requires_grad=True) for _ in range(3)]
        return cls(*mats)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k, f"{prefix}.w_v": self.w_v}


def cross_attend(
    xq_src: Tensor,
    xkv_src: Tensor,
    proj: AttentionProjections,
    scale: AttentionScale | str = AttentionScale.INV_SQRT_D,
    *,
    map_from: str = "qk",
    return_map: bool = False,
):
    """Refine ``xq_src`` tokens by attending over ``xkv_src`` tokens.

    Inputs are ``[N, d]`` token matrices (optionally with a leading batch
    axis). Returns ``xq_src + softmax(Q K^T * s) V``.
    """
    d = proj.dim
    if xq_src.shape[-1] != d or xkv_src.shape[-1] != d:
        raise DimensionError(
            f"token dims {xq_src.shape[-1]}/{xkv_src.shape[-1]} do not match projection dim {d}"
        )
    if xq_src.shape != xkv_src.shape:
        raise DimensionError(f"query tokens {xq_src.shape} and key/value tokens {xkv_src.shape} differ")
    q = nc.matmul(xq_src, proj.w_q)
    v = nc.matmul(xkv_src, proj.w_v)
    k = v if map_from == "qv" else nc.matmul(xkv_src, proj.w_k)
    scores = nc.matmul(q, nc.transpose(k))
    if AttentionScale(scale) is AttentionScale.INV_SQRT_D:
        scores = scores * (1.0 / np.sqrt(d))
    attn_map = nc.softmax_rows(scores)
    out = xq_src + nc.matmul(attn_map, v)
    return (out, attn_map) if return_map else out


def to_tokens(x: Tensor) -> Tensor:
    """``[..., C, H, W]`` feature map to ``[..., H*W, C]`` tokens."""
    *lead, c, h, w = x.shape
    flat = nc.reshape(x, (*lead, c, h * w))
    return nc.transpose(flat)


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    *lead, n, c = t.shape
    return nc.reshape(nc.transpose(t), (*lead, c, h, w))


def refine_pair(
    c_feat: Tensor, d_feat: Tensor, cfg: FusionConfig, weights: list[AttentionProjections]
) -> tuple[Tensor, Tensor]:
    """Refine clinical and dermoscopy stage features against each other."""
    if c_feat.shape != d_feat.shape:
        raise DimensionError(f"stage features differ: {c_feat.shape} vs {d_feat.shape}")
    wanted = {FusionMode.CONCAT: 0, FusionMode.CA: 2, FusionMode.SCA: 1}[cfg.mode]
    if len(weights) != wanted:
        raise ConfigError(f"{cfg.mode.value} fusion needs {wanted} projection set(s), got {len(weights)}")
    if cfg.mode is FusionMode.CONCAT:
        return c_feat, d_feat
    proj_c = weights[0]
    proj_d = weights[-1]
    h, w = c_feat.shape[-2:]
    tc, td = to_tokens(c_feat), to_tokens(d_feat)
    c_kv, d_kv = (tc, td) if cfg.self_variant else (td, tc)
    rc = cross_attend(tc, c_kv, proj_c, cfg.scale, map_from=cfg.map_from)
    rd = cross_attend(td, d_kv, proj_d, cfg.scale, map_from=cfg.map_from)
    return from_tokens(rc, h, w), from_tokens(rd, h, w)


class FusionModule:
    """Projection weights for every fused stage."""

    def __init__(self, cfg: FusionConfig, stage_weights: dict[int, list[AttentionProjections]]):
        self.cfg = cfg
        self.stage_weights = stage_weights

    def fuses(self, s: int) -> bool:
        return self.cfg.mode is not FusionMode.CONCAT and s in self.cfg.stages

    def apply(self, s: int, c_feat: Tensor, d_feat: Tensor) -> tuple[Tensor, Tensor]:
        if not self.fuses(s):
            return c_feat, d_feat
        return refine_pair(c_feat, d_feat, self.cfg, self.stage_weights[s])

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for s, projs in sorted(self.stage_weights.items()):
            if self.cfg.mode is FusionMode.SCA:
                params.update(projs[0].named(f"fusion.stage{s}.shared"))
            else:
                params.update(projs[0].named(f"fusion.stage{s}.clinical"))
                params.update(projs[1].named(f"fusion.stage{s}.derm"))
        return params


def build_fusion(cfg: FusionConfig, stage_channels, seed: int) -> FusionModule:
    stage_channels = tuple(stage_channels)
    cfg.validate_against(len(stage_channels))
    weights: dict[int, list[AttentionProjections]] = {}
    if cfg.mode is FusionMode.CONCAT:
        return FusionModule(cfg, weights)
    for s in cfg.stages:
        d = stage_channels[s]
        if cfg.mode is FusionMode.SCA:
            weights[s] = [AttentionProjections.init(d, derive_rng(seed, "fusion", str(s), "shared"))]
        else:
            weights[s] = [
                AttentionProjections.init(d, derive_rng(seed, "fusion", str(s), "clinical")),
                AttentionProjections.init(d, derive_rng(seed, "fusion", str(s), "derm")),
            ]
    return FusionModule(cfg, weights)


def count_fusion_params(cfg: FusionConfig, stage_channels) -> int:
    stage_channels = tuple(stage_channels)
    cfg.validate_against(len(stage_channels))
    per_set = {FusionMode.CONCAT: 0, FusionMode.SCA: 1, FusionMode.CA: 2}[cfg.mode]
    return per_set * sum(3 * stage_channels[s] ** 2 for s in cfg.stages)
