"""End-to-end change detector assembled from encoders, per-scale fusion and heads."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Tensor
from .encoders import (EncoderConfig, FeaturePyramid, image_encode, init_image_encoder,
                       init_map_encoder, map_encode, one_hot_batch, resize_map_features)
from .fusion import FusionConfig, fuse_concat, fuse_mapformer, init_concat, init_mapformer
from .heads import HeadConfig, contrastive_loss, init_head, init_projection, predict_binary, predict_semantic
from .params import Params
from .synthetic import stream


@dataclass
class ModelSpec:
    encoder: EncoderConfig
    fusion: FusionConfig
    heads: HeadConfig
    num_classes: int
    map_classes: int

    @property
    def contrastive_active(self) -> bool:
        return self.heads.contrastive_enabled and self.fusion.uses_map


def init_params(spec: ModelSpec, seed: int, dtype=np.float32) -> Params:
    rng = stream(seed, 0xC0DE)
    params: Params = {}
    enc, fus = spec.encoder, spec.fusion
    init_image_encoder(params, rng, enc, dtype)
    d_map = enc.map_channels if fus.uses_map else 0
    if fus.uses_map:
        init_map_encoder(params, rng, spec.map_classes, enc, dtype)
    for s, d in enumerate(enc.channels):
        if fus.kind == "mapformer":
            init_mapformer(params, f"fuse.s{s}", rng, d, d_map, fus, dtype)
        else:
            init_concat(params, f"fuse.s{s}", rng, d, d_map, fus, dtype)
    init_head(params, "bin", rng, enc.channels, spec.heads.embed, 2, dtype)
    if spec.heads.scd_placement != "none":
        init_head(params, "sem", rng, enc.channels, spec.heads.embed, spec.num_classes, dtype)
    if spec.contrastive_active:
        init_projection(params, rng, enc.channels, enc.map_channels, spec.heads, dtype)
    return params


def forward(spec: ModelSpec, params: Params, batch: Dict[str, np.ndarray],
            keep_attention: bool = False) -> Dict[str, object]:
    """Run the detector on a batch.

    ``batch`` holds ``img_pre``/``img_post`` ``(N,3,H,W)`` and ``map_pre``
    labels ``(N,H,W)`` in the model's map class space; ``change`` is needed
    only for the contrastive term.
    """
    enc, fus, hcfg = spec.encoder, spec.fusion, spec.heads
    dtype = params["img.s0.down.w"].dtype
    post = batch["img_post"].astype(dtype, copy=False)
    f1 = None
    if fus.uses_pre_image:
        # one pass over the stacked pair; the encoder weights are shared
        n = post.shape[0]
        both = image_encode(Tensor(np.concatenate([batch["img_pre"].astype(dtype, copy=False), post])),
                            params, enc, "image_post")
        halves = [ad.split(t, [n, n]) for t in both.features]
        f1 = FeaturePyramid([(s, h[0]) for s, h in zip(both.strides, halves)], "image_pre", both.full_size)
        f2 = FeaturePyramid([(s, h[1]) for s, h in zip(both.strides, halves)], "image_post", both.full_size)
    else:
        f2 = image_encode(Tensor(post), params, enc, "image_post")
    g_levels: List[Optional[Tensor]] = [None] * len(f2)
    if fus.uses_map:
        labels = batch["map_pre"]
        if labels.max(initial=0) >= spec.map_classes:
            raise ConfigurationError(f"map label {int(labels.max())} outside the model's {spec.map_classes} classes")
        g = map_encode(Tensor(one_hot_batch(labels, spec.map_classes, dtype)), params)
        g_levels = resize_map_features(g, f2)

    fused_levels, attention = [], []
    for s, (stride, x2) in enumerate(f2.levels):
        x1 = f1.features[s] if f1 is not None else None
        if fus.kind == "mapformer":
            fused, attn, _ = fuse_mapformer(x1, x2, g_levels[s], params, f"fuse.s{s}", fus)
            if keep_attention:
                attention.append(attn)
        else:
            fused = fuse_concat(x1, x2, g_levels[s], params, f"fuse.s{s}", fus)
        fused_levels.append((stride, fused))
    fused_pyr = FeaturePyramid(fused_levels, "fused", f2.full_size)

    out: Dict[str, object] = {"binary_logits": predict_binary(fused_pyr, params), "attention": attention,
                              "f1": f1, "f2": f2, "fused": fused_pyr}
    if hcfg.scd_placement == "on_post_features":
        out["semantic_logits"] = predict_semantic(f2, params, hcfg.scd_placement)
    elif hcfg.scd_placement == "on_fused":
        out["semantic_logits"] = predict_semantic(fused_pyr, params, hcfg.scd_placement)
    if spec.contrastive_active and "change" in batch:
        out["contrastive"] = contrastive_loss(
            g_levels, f1.features if f1 is not None else None, f2.features,
            batch["change"], params, hcfg)
    return out


def predicted_premap_labels(spec: ModelSpec, params: Params, img_pre: np.ndarray) -> np.ndarray:
    """Argmax of the uni-temporal semantic head applied to the pre-change image (ties -> lowest id)."""
    if spec.heads.scd_placement != "on_post_features":
        raise ConfigurationError("predicted pre-change maps need scd_placement = on_post_features")
    if spec.map_classes != spec.num_classes:
        raise ConfigurationError("predicted pre-change maps need the map encoder over the full class set")
    dtype = params["img.s0.down.w"].dtype
    with ad.no_grad():
        f1 = image_encode(Tensor(img_pre.astype(dtype, copy=False)), params, spec.encoder, "image_pre")
        logits = predict_semantic(f1, params, "on_post_features")
    return logits.data.argmax(axis=-3).astype(np.uint8)
