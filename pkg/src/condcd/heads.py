"""Prediction heads, the projection head and the training objectives."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, ContractError, DimensionError, Tensor
from .encoders import FeaturePyramid
from .params import Params, linear_params, uniform_init

PLACEMENTS = ("none", "on_post_features", "on_fused")


@dataclass
class HeadConfig:
    scd_placement: str = "none"
    contrastive_enabled: bool = True
    stop_grad_on_map: bool = True
    project_map: bool = False
    w_contrastive: float = 1.0
    w_binary: float = 1.0
    w_semantic: float = 1.0
    embed: int = 32
    proj_hidden: int = 0  # 0 -> map feature width

    def validate(self) -> None:
        if self.scd_placement not in PLACEMENTS:
            raise ConfigurationError(f"HeadConfig.scd_placement must be one of {PLACEMENTS}")
        if min(self.w_contrastive, self.w_binary, self.w_semantic) < 0:
            raise ConfigurationError("HeadConfig loss weights must be >= 0")
        if self.embed < 1 or self.proj_hidden < 0:
            raise ConfigurationError("HeadConfig.embed must be >= 1 and proj_hidden >= 0")


# ---------------------------------------------------------------- segmentation-style heads


def init_head(params: Params, prefix: str, rng, widths: Sequence[int], embed: int,
              n_out: int, dtype=np.float32) -> None:
    fan = embed * len(widths)
    for s, d in enumerate(widths):
        linear_params(params, f"{prefix}.s{s}.embed", rng, d, embed, dtype)
        params[f"{prefix}.s{s}.out.w"] = uniform_init(rng, (n_out, embed), fan, dtype)
    params[f"{prefix}.out.b"] = uniform_init(rng, (n_out,), fan, dtype)


def predict_head(pyr: FeaturePyramid, params: Params, prefix: str) -> Tensor:
    """Per-scale pointwise embedding + ReLU, bilinear upsampling, concatenation, linear classifier.

    The classifier is linear, so it is applied per scale before upsampling and
    the scale contributions are summed; this equals classifying the upsampled
    concatenation while resizing only ``n_out`` channels.
    """
    if len(pyr) == 0:
        raise ContractError("prediction head needs a non-empty pyramid")
    out_h, out_w = pyr.full_size
    total = None
    for s, f in enumerate(pyr.features):
        e = ad.relu(ad.pointwise_linear(f, params[f"{prefix}.s{s}.embed.w"], params[f"{prefix}.s{s}.embed.b"]))
        z = ad.bilinear_resize(ad.pointwise_linear(e, params[f"{prefix}.s{s}.out.w"]), out_h, out_w)
        total = z if total is None else total + z
    b = params[f"{prefix}.out.b"]
    return total + ad.reshape(b, (b.shape[0], 1, 1))


def predict_binary(fused: FeaturePyramid, params: Params) -> Tensor:
    return predict_head(fused, params, "bin")


def predict_semantic(source: FeaturePyramid, params: Params, placement: Optional[str] = None) -> Tensor:
    if placement == "on_post_features" and source.source not in ("image_pre", "image_post"):
        raise ConfigurationError(f"placement on_post_features expects image features, got {source.source!r}")
    if placement == "on_fused" and source.source != "fused":
        raise ConfigurationError(f"placement on_fused expects fused features, got {source.source!r}")
    if placement == "none":
        raise ConfigurationError("semantic head requested with scd_placement = none")
    return predict_head(source, params, "sem")


# ---------------------------------------------------------------- contrastive objective


def init_projection(params: Params, rng, widths: Sequence[int], d_map: int, cfg: HeadConfig,
                    dtype=np.float32) -> None:
    hid = cfg.proj_hidden or d_map
    for s, d in enumerate(widths):
        linear_params(params, f"proj.s{s}.l1", rng, d, hid, dtype)
        linear_params(params, f"proj.s{s}.l2", rng, hid, d_map, dtype)
        if cfg.project_map:
            linear_params(params, f"proj.map.s{s}", rng, d_map, d_map, dtype)


def project(f: Tensor, params: Params, s: int) -> Tensor:
    h = ad.relu(ad.pointwise_linear(f, params[f"proj.s{s}.l1.w"], params[f"proj.s{s}.l1.b"]))
    return ad.pointwise_linear(h, params[f"proj.s{s}.l2.w"], params[f"proj.s{s}.l2.b"])


def max_pool_mask(b: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """A coarse pixel is changed if any fine pixel it covers changed."""
    b = np.asarray(b)
    h, w = b.shape[-2:]
    fy, fx = -(-h // out_h), -(-w // out_w)
    pad = [(0, 0)] * (b.ndim - 2) + [(0, out_h * fy - h), (0, out_w * fx - w)]
    bp = np.pad(b, pad)
    bp = bp.reshape(b.shape[:-2] + (out_h, fy, out_w, fx))
    return bp.max(axis=(-3, -1))


def contrastive_pixel_loss(g: Tensor, p1: Optional[Tensor], p2: Tensor, b: np.ndarray) -> Tensor:
    """Per-pixel objective; ``b`` already at the features' resolution."""
    sim2 = ad.cosine_similarity(g, p2, axis=-3)
    bt = Tensor(b.astype(sim2.dtype))
    changed = ad.mul(bt, ad.relu(sim2))
    unchanged = ad.mul(1.0 - bt, ad.neg(sim2))
    loss = changed + unchanged
    if p1 is not None:
        loss = loss + ad.neg(ad.cosine_similarity(g, p1, axis=-3))
    return loss


def contrastive_loss(g1: Sequence[Tensor], f1: Optional[Sequence[Tensor]], f2: Sequence[Tensor],
                     b: np.ndarray, params: Params, cfg: HeadConfig) -> Tensor:
    """Mean over pixels, then over scales, of the supervised cross-modal objective.

    ``g1[s]`` are map features already resized to scale s; ``b`` is the
    full-resolution change mask. ``f1`` is None in the cross-modal regime.
    """
    terms = []
    for s, (g, f_post) in enumerate(zip(g1, f2)):
        if g.shape[-2:] != f_post.shape[-2:] or (f1 is not None and f1[s].shape != f_post.shape):
            raise DimensionError(f"scale {s}: contrastive inputs are not spatially aligned")
        if cfg.stop_grad_on_map:
            g = ad.stop_gradient(g)
        if cfg.project_map:
            g = ad.pointwise_linear(g, params[f"proj.map.s{s}.w"], params[f"proj.map.s{s}.b"])
        p2 = project(f_post, params, s)
        p1 = project(f1[s], params, s) if f1 is not None else None
        bs = max_pool_mask(b, *f_post.shape[-2:])
        terms.append(ad.mean(contrastive_pixel_loss(g, p1, p2, bs)))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.mul(total, 1.0 / len(terms))


# ---------------------------------------------------------------- total objective


@dataclass
class LossReport:
    total: float
    ce_binary: float
    contrastive: Optional[float] = None
    ce_semantic: Optional[float] = None

    def to_json(self, step: int) -> str:
        rec = {"step": step, "total": self.total, "contrastive": self.contrastive,
               "ce_binary": self.ce_binary, "ce_semantic": self.ce_semantic}
        # disabled terms are left out rather than logged as null
        return json.dumps({k: v for k, v in rec.items() if v is not None})


def total_loss(outputs: dict, targets: dict, cfg: HeadConfig):
    """Weighted sum of binary CE, semantic CE (when a semantic head exists) and contrastive terms.

    ``outputs``: ``binary_logits``, optional ``semantic_logits``, optional ``contrastive``.
    ``targets``: ``change``, optional ``map_post``. Report fields hold the
    weighted addends, so they sum to ``total``.
    """
    if "change" not in targets:
        raise ConfigurationError("binary change target missing")
    ce_b = ad.cross_entropy(outputs["binary_logits"], targets["change"])
    total = ad.mul(ce_b, cfg.w_binary)
    report = LossReport(total=0.0, ce_binary=cfg.w_binary * float(ce_b.data))
    if cfg.scd_placement != "none":
        if "map_post" not in targets:
            raise ConfigurationError("semantic target missing while a semantic head is enabled")
        ce_s = ad.cross_entropy(outputs["semantic_logits"], targets["map_post"])
        total = total + ad.mul(ce_s, cfg.w_semantic)
        report.ce_semantic = cfg.w_semantic * float(ce_s.data)
    contr = outputs.get("contrastive")
    if cfg.contrastive_enabled and contr is not None:
        total = total + ad.mul(contr, cfg.w_contrastive)
        report.contrastive = cfg.w_contrastive * float(contr.data)
    report.total = float(total.data)
    return total, report
