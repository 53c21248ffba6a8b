"""Shared-weight image pyramid encoder and the shallow map encoder."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Tensor
from .params import Params, conv_params, linear_params
from .raster import ClassSet, ImageRaster, SemanticMap, one_hot

SOURCES = ("image_pre", "image_post", "map_pre", "fused")


@dataclass
class EncoderConfig:
    num_scales: int = 3
    channels: Tuple[int, ...] = (16, 32, 64)
    map_channels: int = 32
    in_channels: int = 3

    def validate(self) -> None:
        if self.num_scales < 1:
            raise ConfigurationError("EncoderConfig.num_scales must be >= 1")
        if len(self.channels) != self.num_scales:
            raise ConfigurationError(
                f"EncoderConfig.channels lists {len(self.channels)} widths for {self.num_scales} scales")
        if min(self.channels) < 1 or self.map_channels < 1:
            raise ConfigurationError("EncoderConfig channel counts must be positive")

    @property
    def strides(self) -> List[int]:
        return [2 ** (s + 1) for s in range(self.num_scales)]


@dataclass
class FeaturePyramid:
    levels: List[Tuple[int, Tensor]]
    source: str = "fused"
    full_size: Tuple[int, int] = field(default=(0, 0))

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ConfigurationError(f"unknown pyramid source {self.source!r}")
        strides = [s for s, _ in self.levels]
        if any(b <= a for a, b in zip(strides, strides[1:])):
            raise ConfigurationError(f"pyramid strides must increase, got {strides}")

    def __len__(self) -> int:
        return len(self.levels)

    @property
    def features(self) -> List[Tensor]:
        return [t for _, t in self.levels]

    @property
    def strides(self) -> List[int]:
        return [s for s, _ in self.levels]


def init_image_encoder(params: Params, rng, cfg: EncoderConfig, dtype=np.float32) -> None:
    c_prev = cfg.in_channels
    for s, c in enumerate(cfg.channels):
        conv_params(params, f"img.s{s}.down", rng, c_prev, c, 3, dtype)
        conv_params(params, f"img.s{s}.res1", rng, c, c, 3, dtype)
        conv_params(params, f"img.s{s}.res2", rng, c, c, 3, dtype)
        c_prev = c


def _as_input(x) -> Tensor:
    if isinstance(x, ImageRaster):
        return Tensor(x.values)
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float32))


def image_encode(image, params: Params, cfg: EncoderConfig, source: str = "image_post") -> FeaturePyramid:
    """Stride-2 downsampling then two dilated residual blocks (dilation 1, then 2) per scale."""
    x = _as_input(image)
    w0 = params["img.s0.down.w"]
    if x.shape[-3] != w0.shape[1]:
        raise ConfigurationError(f"image has {x.shape[-3]} channels, encoder expects {w0.shape[1]}")
    full = x.shape[-2:]
    levels = []
    for s in range(cfg.num_scales):
        p = f"img.s{s}"
        x = ad.relu(ad.conv2d(x, params[f"{p}.down.w"], params[f"{p}.down.b"], stride=2))
        x = x + ad.relu(ad.conv2d(x, params[f"{p}.res1.w"], params[f"{p}.res1.b"], dilation=1))
        x = x + ad.relu(ad.conv2d(x, params[f"{p}.res2.w"], params[f"{p}.res2.b"], dilation=2))
        levels.append((2 ** (s + 1), x))
    return FeaturePyramid(levels, source, tuple(full))


def init_map_encoder(params: Params, rng, num_classes: int, cfg: EncoderConfig, dtype=np.float32) -> None:
    d = cfg.map_channels
    linear_params(params, "map.pw", rng, num_classes, d, dtype)
    conv_params(params, "map.c1", rng, d, d, 5, dtype)
    conv_params(params, "map.c2", rng, d, d, 5, dtype)


def map_encode(m, params: Params) -> Tensor:
    """Pointwise conv, ReLU, 5x5 dilation-2 conv, ReLU, 5x5 dilation-2 conv.

    ``m`` is a SemanticMap, or an already one-hot array/Tensor of shape
    ``([N,] |C|, H, W)``. Receptive field is 17x17.
    """
    if isinstance(m, SemanticMap):
        x = Tensor(one_hot(m, params["map.pw.w"].dtype))
    else:
        x = _as_input(m)
    n_cls = params["map.pw.w"].shape[1]
    if x.shape[-3] != n_cls:
        raise ConfigurationError(f"map has {x.shape[-3]} classes, map encoder expects {n_cls}")
    g = ad.relu(ad.pointwise_linear(x, params["map.pw.w"], params["map.pw.b"]))
    g = ad.relu(ad.conv2d(g, params["map.c1.w"], params["map.c1.b"], dilation=2))
    return ad.conv2d(g, params["map.c2.w"], params["map.c2.b"], dilation=2)


def resize_map_features(g: Tensor, pyramid: FeaturePyramid) -> List[Tensor]:
    return [ad.bilinear_resize(g, *t.shape[-2:]) for t in pyramid.features]


def one_hot_batch(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``(N, H, W)`` labels -> ``(N, C, H, W)`` indicators."""
    return (np.arange(num_classes)[None, :, None, None] == labels[:, None]).astype(dtype)


def predict_premap(f1: FeaturePyramid, seg_params: Params, class_set: ClassSet) -> SemanticMap:
    """Stand-in pre-change map from a semantic head over uni-temporal features."""
    from .heads import predict_semantic

    if f1.source not in ("image_pre", "image_post"):
        raise ConfigurationError(f"premap prediction needs uni-temporal features, got {f1.source!r}")
    with ad.no_grad():
        logits = predict_semantic(f1, seg_params)
    if logits.shape[-3] != len(class_set):
        raise ConfigurationError(
            f"semantic head predicts {logits.shape[-3]} classes, class set has {len(class_set)}")
    data = logits.data if logits.ndim == 3 else logits.data[0]
    return SemanticMap(data.argmax(axis=0).astype(np.uint8), class_set)
