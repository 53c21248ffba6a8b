"""Map-conditioned multi-view fusion and concatenation baselines.

For each pixel the present inputs are concatenated and passed through K
parameter-disjoint two-layer MLPs, giving K candidate views ``h_k`` of width
``D_f``. A single linear layer on the map features predicts ``K x D_f``
logits which are softmaxed over K, so every output channel picks its own
convex mixture of the views.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, DimensionError, Tensor
from .params import Params, linear_params, uniform_init
from .raster import write_raster

REGIMES = ("bi_temporal", "conditional", "cross_modal")
FUSION_KINDS = ("mapformer", "concat")


@dataclass
class FusionConfig:
    K: int = 4
    # set from the experiment's top-level regime; not a separate config key
    regime: str = field(default="conditional", metadata={"internal": True})
    kind: str = "mapformer"
    hidden: int = 0  # 0 -> same as the output width D_f

    def validate(self) -> None:
        if self.K < 1:
            raise ConfigurationError(f"FusionConfig.K must be >= 1, got {self.K}")
        if self.hidden < 0:
            raise ConfigurationError("FusionConfig.hidden must be >= 0")
        if self.regime not in REGIMES:
            raise ConfigurationError(f"FusionConfig.regime must be one of {REGIMES}, got {self.regime!r}")
        if self.kind not in FUSION_KINDS:
            raise ConfigurationError(f"FusionConfig.kind must be one of {FUSION_KINDS}, got {self.kind!r}")
        if self.kind == "mapformer" and self.regime == "bi_temporal":
            raise ConfigurationError("FusionConfig: mapformer fusion needs a map input; "
                                     "regime bi_temporal is invalid with kind mapformer")

    @property
    def uses_map(self) -> bool:
        return self.regime != "bi_temporal"

    @property
    def uses_pre_image(self) -> bool:
        return self.regime != "cross_modal"


@dataclass
class AttentionWeights:
    """Per-scale softmaxed weights, each ``([N,] K, D_f, H_s, W_s)``."""

    a: List[Tensor]


@dataclass
class FusionViews:
    h: List[Tensor]


def fusion_fan_in(d_img: int, d_map: int, regime: str) -> int:
    n_img = 2 if regime in ("bi_temporal", "conditional") else 1
    return n_img * d_img + (d_map if regime != "bi_temporal" else 0)


def init_mapformer(params: Params, prefix: str, rng, d_img: int, d_map: int,
                   cfg: FusionConfig, dtype=np.float32) -> None:
    k, d_f = cfg.K, d_img
    d_h = cfg.hidden or d_f
    c_in = fusion_fan_in(d_img, d_map, cfg.regime)
    params[f"{prefix}.views.w1"] = uniform_init(rng, (k, d_h, c_in), c_in, dtype)
    params[f"{prefix}.views.b1"] = uniform_init(rng, (k, d_h), c_in, dtype)
    params[f"{prefix}.views.w2"] = uniform_init(rng, (k, d_f, d_h), d_h, dtype)
    params[f"{prefix}.views.b2"] = uniform_init(rng, (k, d_f), d_h, dtype)
    linear_params(params, f"{prefix}.attn", rng, d_map, k * d_f, dtype)


def init_concat(params: Params, prefix: str, rng, d_img: int, d_map: int,
                cfg: FusionConfig, dtype=np.float32) -> None:
    d_f = d_img
    d_h = cfg.hidden or d_f
    c_in = fusion_fan_in(d_img, d_map, cfg.regime)
    linear_params(params, f"{prefix}.l1", rng, c_in, d_h, dtype)
    linear_params(params, f"{prefix}.l2", rng, d_h, d_f, dtype)


def _present(f1, f2, g1, regime: str) -> List[Tensor]:
    if f2 is None:
        raise ConfigurationError("post-change image features are required")
    if regime == "conditional" and f1 is None:
        raise ConfigurationError("conditional regime needs pre-change image features")
    if regime == "cross_modal" and f1 is not None:
        raise ConfigurationError("cross_modal regime takes no pre-change image features")
    if regime == "bi_temporal" and f1 is None:
        raise ConfigurationError("bi_temporal regime needs pre-change image features")
    inputs = [t for t in (f1, f2, g1) if t is not None]
    size = inputs[0].shape[-2:]
    for t in inputs[1:]:
        if t.shape[-2:] != size:
            raise DimensionError(f"fusion inputs disagree spatially: {size} vs {t.shape[-2:]}")
    return inputs


def fuse_mapformer(f1: Optional[Tensor], f2: Tensor, g1: Optional[Tensor], params: Params,
                   prefix: str, cfg: FusionConfig) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns ``(fused, attention, views)`` for one scale.

    ``attention`` and ``views`` have shape ``([N,] K, D_f, H, W)``.
    """
    if g1 is None:
        raise ConfigurationError("mapformer fusion needs map features g1")
    inputs = _present(f1, f2, g1, cfg.regime)
    x = ad.concat(inputs, axis=-3)
    w1 = params[f"{prefix}.views.w1"]
    if w1.shape[-1] != x.shape[-3]:
        raise DimensionError(f"fusion inputs have {x.shape[-3]} channels, views expect {w1.shape[-1]}")
    k, d_f = params[f"{prefix}.views.w2"].shape[:2]
    views = ad.grouped_pointwise_mlp(x, w1, params[f"{prefix}.views.b1"],
                                     params[f"{prefix}.views.w2"], params[f"{prefix}.views.b2"])
    lead = x.shape[:-3]
    hw = x.shape[-2:]
    views = ad.reshape(views, lead + (k, d_f) + hw)
    logits = ad.pointwise_linear(g1, params[f"{prefix}.attn.w"], params[f"{prefix}.attn.b"])
    attn = ad.softmax(ad.reshape(logits, lead + (k, d_f) + hw), axis=-4)
    fused = ad.tsum(ad.mul(attn, views), axis=-4)
    return fused, attn, views


def fuse_concat(f1: Optional[Tensor], f2: Optional[Tensor], g1: Optional[Tensor], params: Params,
                prefix: str, cfg: Optional[FusionConfig] = None) -> Tensor:
    inputs = [t for t in (f1, f2, g1) if t is not None]
    if f1 is None and f2 is None:
        raise ConfigurationError("concat fusion needs at least one image feature map")
    if cfg is not None:
        inputs = _present(f1, f2, g1, cfg.regime)
    x = ad.concat(inputs, axis=-3)
    hid = ad.relu(ad.pointwise_linear(x, params[f"{prefix}.l1.w"], params[f"{prefix}.l1.b"]))
    return ad.pointwise_linear(hid, params[f"{prefix}.l2.w"], params[f"{prefix}.l2.b"])


def attention_argmax(a: np.ndarray, channel: int) -> np.ndarray:
    """Winning view per pixel for one output channel; ties go to the smallest k."""
    a = np.asarray(a)
    if not 0 <= channel < a.shape[-3]:
        raise ConfigurationError(f"channel id {channel} outside [0, {a.shape[-3]})")
    return a[..., :, channel, :, :].argmax(axis=-3).astype(np.uint8)


def export_attention_argmax(attention: Sequence[np.ndarray], channel_ids: Sequence[int],
                            out_dir=None) -> Dict[Tuple[int, int], np.ndarray]:
    """Argmax-over-K label rasters for one sample.

    ``attention[s]`` is ``(K, D_f, H_s, W_s)``. When ``out_dir`` is given the
    rasters are written as ``attn_scale{s}_ch{d}.cdr``.
    """
    out = {}
    for s, a in enumerate(attention):
        a = a.data if isinstance(a, Tensor) else np.asarray(a)
        if a.ndim != 4:
            raise DimensionError(f"attention for one sample must be (K, D_f, H, W), got {a.shape}")
        for d in channel_ids:
            out[(s, d)] = attention_argmax(a, d)
    if out_dir is not None:
        path = Path(out_dir)
        path.mkdir(parents=True, exist_ok=True)
        for (s, d), lab in out.items():
            write_raster(lab, path / f"attn_scale{s}_ch{d}.cdr")
    return out
