"""Seeded bi-temporal scenes: Voronoi land cover, blob-shaped changes, class-coloured renders."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ConfigurationError
from .raster import (ClassSet, ImageRaster, Sample, SemanticMap, derive_change,
                     write_raster)

log = logging.getLogger(__name__)

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``."""
    h = splitmix64(seed & _MASK64)
    for k in keys:
        h = splitmix64(h ^ (k & _MASK64))
    return np.random.Generator(np.random.PCG64(h))


# stream tags
_PALETTE, _MAP, _CHANGE, _RENDER_PRE, _RENDER_POST, _DRIFT = range(6)


@dataclass
class WorldConfig:
    height: int = 64
    width: int = 64
    num_classes: int = 5
    num_seed_regions: int = 12
    change_rate_target: float = 0.05
    change_blob_count: int = 3
    appearance_noise_sigma: float = 0.08
    temporal_drift_sigma: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if not 0 < self.change_rate_target < 1:
            raise ConfigurationError("WorldConfig.change_rate_target must lie in (0, 1)")
        if self.num_classes < 2:
            raise ConfigurationError("WorldConfig.num_classes must be >= 2")
        if self.num_classes > 255:
            raise ConfigurationError("WorldConfig.num_classes must fit a u8 label")
        if self.appearance_noise_sigma < 0 or self.temporal_drift_sigma < 0:
            raise ConfigurationError("WorldConfig sigmas must be >= 0")
        if self.height < 1 or self.width < 1 or self.num_seed_regions < 1 or self.change_blob_count < 0:
            raise ConfigurationError("WorldConfig sizes and counts must be positive")

    @property
    def class_set(self) -> ClassSet:
        return ClassSet.numbered(self.num_classes)


def generate_map(cfg: WorldConfig, index: int = 0) -> SemanticMap:
    rng = stream(cfg.seed, index, _MAP)
    sites = rng.uniform(0, 1, size=(cfg.num_seed_regions, 2)) * (cfg.height, cfg.width)
    labels = rng.integers(0, cfg.num_classes, size=cfg.num_seed_regions)
    ii, jj = np.mgrid[0:cfg.height, 0:cfg.width]
    centers = np.stack([ii + 0.5, jj + 0.5], axis=-1)
    d2 = ((centers[:, :, None, :] - sites[None, None]) ** 2).sum(-1)
    nearest = d2.argmin(axis=-1)
    return SemanticMap(labels[nearest].astype(np.uint8), cfg.class_set)


def _stamp(m1: np.ndarray, blobs, scale: float, n_classes: int) -> np.ndarray:
    h, w = m1.shape
    ii, jj = np.mgrid[0:h, 0:w] + 0.5
    out = m1.copy()
    for cy, cx, ry, rx, theta, pick in blobs:
        ry, rx = ry * scale, rx * scale
        dy, dx = ii - cy, jj - cx
        u = dy * np.cos(theta) + dx * np.sin(theta)
        v = -dy * np.sin(theta) + dx * np.cos(theta)
        inside = (u / ry) ** 2 + (v / rx) ** 2 <= 1.0
        if not inside.any():
            continue
        majority = int(np.bincount(m1[inside], minlength=n_classes).argmax())
        others = [c for c in range(n_classes) if c != majority]
        new = others[int(pick * len(others)) % len(others)]
        out[inside] = new
    # a pixel whose blob class equals its old label stays unchanged, by construction
    return out


def inject_changes(m1: SemanticMap, cfg: WorldConfig, index: int = 0) -> SemanticMap:
    """Stamp elliptical blobs relabelled away from their majority class.

    Blob radii share one scale factor found by bisection so the changed
    fraction lands within 20% of ``cfg.change_rate_target``.
    """
    if cfg.change_blob_count == 0:
        return m1
    rng = stream(cfg.seed, index, _CHANGE)
    h, w = m1.shape
    blobs = []
    for _ in range(cfg.change_blob_count):
        blobs.append((rng.uniform(0, h), rng.uniform(0, w), rng.uniform(0.5, 1.0),
                      rng.uniform(0.5, 1.0), rng.uniform(0, np.pi), rng.uniform()))
    n_cls = len(m1.class_set)
    target = cfg.change_rate_target
    lo, hi = 0.0, float(max(h, w))
    best, best_err = m1.labels, np.inf
    for _ in range(32):
        mid = 0.5 * (lo + hi)
        cand = _stamp(m1.labels, blobs, mid, n_cls)
        rate = float((cand != m1.labels).mean())
        err = abs(rate - target)
        if err < best_err:
            best, best_err = cand, err
        if abs(rate - target) <= 0.2 * target * 0.5:
            break
        if rate < target:
            lo = mid
        else:
            hi = mid
    if best_err > 0.2 * target:
        log.warning("sample %d: change rate %.4f misses target %.4f", index,
                    float((best != m1.labels).mean()), target)
    return SemanticMap(best, m1.class_set)


def palette(cfg: WorldConfig) -> np.ndarray:
    """Fixed per-class base colours, shape ``(num_classes, 3)``."""
    rng = stream(cfg.seed, 0, _PALETTE)
    return rng.uniform(0.15, 0.85, size=(cfg.num_classes, 3))


def post_palette(cfg: WorldConfig) -> np.ndarray:
    """Base palette plus one seasonal shift per class, shared by every post-change render of the world.

    A shared shift is learnable; two classes that look alike in one epoch can
    separate in the other, which is what makes the pre-change map informative.
    """
    return palette(cfg) + stream(cfg.seed, 0, _DRIFT).normal(0, cfg.temporal_drift_sigma, (cfg.num_classes, 3))


def render_image(m: SemanticMap, epoch: str, cfg: WorldConfig, index: int = 0) -> ImageRaster:
    if epoch not in ("pre", "post"):
        raise ConfigurationError(f"epoch must be 'pre' or 'post', got {epoch!r}")
    colors = palette(cfg)
    if epoch == "post":
        colors = post_palette(cfg)
    tag = _RENDER_PRE if epoch == "pre" else _RENDER_POST
    noise = stream(cfg.seed, index, tag).normal(0, cfg.appearance_noise_sigma, (3,) + m.shape)
    img = colors[m.labels.astype(np.intp)].transpose(2, 0, 1) + noise
    return ImageRaster(np.clip(img, 0, 1).astype(np.float32))


def generate_sample(cfg: WorldConfig, index: int) -> Sample:
    m1 = generate_map(cfg, index)
    m2 = inject_changes(m1, cfg, index)
    return Sample(render_image(m1, "pre", cfg, index), render_image(m2, "post", cfg, index),
                  m1, m2, derive_change(m1, m2))


SAMPLE_FILES = ("img_pre", "img_post", "map_pre", "map_post", "change")


def generate_dataset(cfg: WorldConfig, n_samples: int, out_dir, first_index: int = 0) -> Path:
    """Write ``n_samples`` samples plus ``manifest.tsv`` and ``classes.txt``; returns the manifest path.

    Samples are indices ``first_index .. first_index + n_samples - 1`` of the
    world, so disjoint index ranges of one config give train/test splits that
    share the palette.
    """
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    cfg.class_set.save(out / "classes.txt")
    lines = []
    if first_index < 0:
        raise ConfigurationError("first_index must be >= 0")
    for i in range(first_index, first_index + n_samples):
        s = generate_sample(cfg, i)
        sid = f"{i:05d}"
        rasters = (s.image_pre, s.image_post, s.map_pre, s.map_post, s.change)
        names = [f"{sid}_{k}.cdr" for k in SAMPLE_FILES]
        for r, name in zip(rasters, names):
            write_raster(r, out / name)
        rate = float(s.change.values.mean())
        lines.append("\t".join([sid, *names, f"{rate:.6f}"]))
    manifest = out / "manifest.tsv"
    manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return manifest
