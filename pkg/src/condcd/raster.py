"""Rasters for images, semantic maps and change masks, plus the CDR1 file format.

CDR1 layout (little-endian)::

    b"CDR1" | dtype u8 (0 = u8 labels, 1 = f32) | channels u16 | height u32 | width u32
    | payload [c][i][j]

Class sets live next to label rasters as a text file, one name per line.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .autodiff import ConfigurationError, DataError

MAGIC = b"CDR1"
HEADER = struct.Struct("<4sBHII")
DTYPE_U8 = 0
DTYPE_F32 = 1


class RasterFormatError(DataError):
    """Base class for CDR1 parse failures."""


class BadMagicError(RasterFormatError):
    pass


class TruncatedPayloadError(RasterFormatError):
    pass


class LabelRangeError(RasterFormatError):
    pass


class NonFiniteValueError(RasterFormatError):
    pass


@dataclass(frozen=True)
class ClassSet:
    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        object.__setattr__(self, "names", names)
        if len(names) < 2:
            raise ConfigurationError(f"a class set needs at least 2 classes, got {len(names)}")
        if any(not n for n in names) or len(set(names)) != len(names):
            raise ConfigurationError("class names must be unique and non-empty")

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def numbered(cls, n: int) -> "ClassSet":
        return cls(tuple(f"class{i}" for i in range(n)))

    def save(self, path) -> None:
        Path(path).write_text("".join(f"{n}\n" for n in self.names), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ClassSet":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(line.strip() for line in lines if line.strip()))


@dataclass(frozen=True, eq=False)
class ImageRaster:
    """Float32 image, values in [0, 1], stored channel-major ``(C, H, W)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim != 3:
            raise DataError(f"image must be (C, H, W), got shape {v.shape}")
        if not np.all(np.isfinite(v)) or v.min(initial=0) < 0 or v.max(initial=0) > 1:
            raise DataError("image values must be finite and within [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True, eq=False)
class SemanticMap:
    labels: np.ndarray
    class_set: ClassSet

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise DataError(f"semantic map must be (H, W), got shape {lab.shape}")
        if lab.size and (lab.min() < 0 or lab.max() >= len(self.class_set)):
            raise DataError(f"labels must lie in [0, {len(self.class_set)})")
        lab = lab.astype(np.uint8)
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def shape(self) -> tuple:
        return self.labels.shape


@dataclass(frozen=True, eq=False)
class ChangeMask:
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise DataError(f"change mask must be (H, W), got shape {v.shape}")
        if not np.all((v == 0) | (v == 1)):
            raise DataError("change mask must be binary")
        v = v.astype(np.uint8)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class Sample:
    image_pre: ImageRaster
    image_post: ImageRaster
    map_pre: SemanticMap
    map_post: SemanticMap
    change: ChangeMask = field(default=None)

    def __post_init__(self):
        if self.change is None:
            object.__setattr__(self, "change", derive_change(self.map_pre, self.map_post))
        size = self.map_pre.shape
        for r in (self.image_pre, self.image_post):
            if (r.height, r.width) != size:
                raise DataError("all rasters of a sample must share height and width")
        if self.map_post.shape != size or self.change.shape != size:
            raise DataError("all rasters of a sample must share height and width")
        if not np.array_equal(self.change.values, derive_change(self.map_pre, self.map_post).values):
            raise DataError("change mask disagrees with the pre/post maps")


# ---------------------------------------------------------------- label operations


def derive_change(m1: SemanticMap, m2: SemanticMap) -> ChangeMask:
    if m1.shape != m2.shape:
        raise DataError(f"map sizes differ: {m1.shape} vs {m2.shape}")
    if m1.class_set != m2.class_set:
        raise DataError("maps use different class sets")
    return ChangeMask(m1.labels != m2.labels)


def merge_classes(m: SemanticMap, mapping: Mapping[int, int],
                  superclasses: Optional[ClassSet] = None) -> SemanticMap:
    """Relabel every class through ``mapping`` onto a coarser class set."""
    missing = [c for c in range(len(m.class_set)) if c not in mapping]
    if missing:
        raise ConfigurationError(f"class mapping is partial, missing ids {missing}")
    n_out = max(mapping.values()) + 1
    if superclasses is None:
        superclasses = m.class_set if n_out <= len(m.class_set) and _is_identity(mapping) \
            else ClassSet.numbered(max(n_out, 2))
    lut = np.array([mapping[c] for c in range(len(m.class_set))], dtype=np.uint8)
    return SemanticMap(lut[m.labels], superclasses)


def _is_identity(mapping: Mapping[int, int]) -> bool:
    return all(k == v for k, v in mapping.items())


def degrade_resolution(m: SemanticMap, factor: int) -> SemanticMap:
    """Majority label per ``factor x factor`` block, then nearest-neighbour upsampling.

    Ties go to the smallest class id. Edge blocks may be partial.
    """
    h, w = m.shape
    if factor < 1:
        raise ConfigurationError(f"degradation factor must be >= 1, got {factor}")
    if factor > min(h, w):
        raise ConfigurationError(f"degradation factor {factor} exceeds map size {h}x{w}")
    if factor == 1:
        return m
    n_cls = len(m.class_set)
    bh, bw = -(-h // factor), -(-w // factor)
    rows = np.arange(h) // factor
    cols = np.arange(w) // factor
    block = rows[:, None] * bw + cols[None, :]
    counts = np.zeros((bh * bw, n_cls), dtype=np.int64)
    np.add.at(counts, (block.ravel(), m.labels.ravel().astype(np.intp)), 1)
    winner = counts.argmax(axis=1)  # argmax returns the first maximum -> smallest id
    return SemanticMap(winner[block].astype(np.uint8), m.class_set)


def one_hot(m: SemanticMap, dtype=np.float32) -> np.ndarray:
    """``(|C|, H, W)`` indicator array."""
    n = len(m.class_set)
    return (np.arange(n)[:, None, None] == m.labels[None]).astype(dtype)


# ---------------------------------------------------------------- CDR1 io


Raster = Union[ImageRaster, SemanticMap, ChangeMask, np.ndarray]


def encode_raster(raster: Raster) -> bytes:
    if isinstance(raster, ImageRaster):
        arr = raster.values
    elif isinstance(raster, SemanticMap):
        arr = raster.labels[None]
    elif isinstance(raster, ChangeMask):
        arr = raster.values[None]
    else:
        arr = np.asarray(raster)
        if arr.ndim == 2:
            arr = arr[None]
    if arr.ndim != 3:
        raise DataError(f"raster must be 2-D or 3-D, got shape {arr.shape}")
    if arr.dtype == np.uint8:
        code = DTYPE_U8
        payload = np.ascontiguousarray(arr).tobytes()
    elif arr.dtype in (np.float32, np.float64):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValueError("refusing to write non-finite float raster")
        code = DTYPE_F32
        payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    else:
        raise DataError(f"unsupported raster dtype {arr.dtype}")
    c, h, w = arr.shape
    return HEADER.pack(MAGIC, code, c, h, w) + payload


def decode_raster(buf: bytes, num_classes: Optional[int] = None) -> np.ndarray:
    """Parse CDR1 bytes into a ``(C, H, W)`` array (uint8 or float32)."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < HEADER.size:
        raise TruncatedPayloadError("header truncated")
    _, code, c, h, w = HEADER.unpack_from(buf)
    if code == DTYPE_U8:
        dt, item = np.dtype(np.uint8), 1
    elif code == DTYPE_F32:
        dt, item = np.dtype("<f4"), 4
    else:
        raise RasterFormatError(f"unknown dtype code {code}")
    need = c * h * w * item
    body = buf[HEADER.size:]
    if len(body) < need:
        raise TruncatedPayloadError(f"payload has {len(body)} bytes, header promises {need}")
    if len(body) > need:
        raise RasterFormatError(f"{len(body) - need} trailing bytes after payload")
    arr = np.frombuffer(body, dtype=dt).reshape(c, h, w)
    if code == DTYPE_U8 and num_classes is not None and arr.size and arr.max() >= num_classes:
        raise LabelRangeError(f"label {int(arr.max())} >= number of classes {num_classes}")
    if code == DTYPE_F32 and not np.all(np.isfinite(arr)):
        raise NonFiniteValueError("non-finite value in float raster")
    return arr.astype(np.float32) if code == DTYPE_F32 else arr.copy()


def write_raster(raster: Raster, path) -> None:
    Path(path).write_bytes(encode_raster(raster))


def read_raster(path, num_classes: Optional[int] = None) -> np.ndarray:
    return decode_raster(Path(path).read_bytes(), num_classes)


def read_image(path) -> ImageRaster:
    arr = read_raster(path)
    if arr.dtype != np.float32:
        raise DataError(f"{path}: expected a float raster")
    return ImageRaster(arr)


def read_map(path, class_set: ClassSet) -> SemanticMap:
    arr = read_raster(path, num_classes=len(class_set))
    if arr.dtype != np.uint8 or arr.shape[0] != 1:
        raise DataError(f"{path}: expected a single-channel u8 raster")
    return SemanticMap(arr[0], class_set)


def read_mask(path) -> ChangeMask:
    arr = read_raster(path, num_classes=2)
    if arr.dtype != np.uint8 or arr.shape[0] != 1:
        raise DataError(f"{path}: expected a single-channel u8 raster")
    return ChangeMask(arr[0])


def parse_mapping(text: str) -> dict:
    """``"0:0,1:0,2:1"`` -> ``{0: 0, 1: 0, 2: 1}``."""
    out = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        k, _, v = part.partition(":")
        out[int(k)] = int(v)
    return out


def format_mapping(mapping: Mapping[int, int]) -> str:
    return ",".join(f"{k}:{v}" for k, v in sorted(mapping.items()))


def stack_maps(maps: Sequence[SemanticMap]) -> np.ndarray:
    return np.stack([m.labels for m in maps])
