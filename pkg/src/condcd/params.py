"""Parameter initialisation and the binary parameter-table file.

File layout (little-endian)::

    b"CDP1" | step u64 | header length u16 | header (UTF-8) | entry count u32
    then per entry, names sorted:
    name length u16 | name (UTF-8) | rank u8 | extents u32 * rank | f32 payload

The header string is free text; training checkpoints store the resolved
config there so a file describes the run that produced it.
"""
from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .autodiff import Tensor
from .raster import BadMagicError, TruncatedPayloadError

Params = Dict[str, Tensor]

MAGIC = b"CDP1"


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> Tensor:
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def linear_params(params: Params, prefix: str, rng, c_in: int, c_out: int, dtype) -> None:
    params[f"{prefix}.w"] = uniform_init(rng, (c_out, c_in), c_in, dtype)
    params[f"{prefix}.b"] = uniform_init(rng, (c_out,), c_in, dtype)


def conv_params(params: Params, prefix: str, rng, c_in: int, c_out: int, k: int, dtype) -> None:
    fan_in = c_in * k * k
    params[f"{prefix}.w"] = uniform_init(rng, (c_out, c_in, k, k), fan_in, dtype)
    params[f"{prefix}.b"] = uniform_init(rng, (c_out,), fan_in, dtype)


def count(params: Params, prefix: str = "") -> int:
    return sum(t.data.size for n, t in params.items() if n.startswith(prefix))


def cast(params: Params, dtype) -> Params:
    return {n: Tensor(t.data.astype(dtype), requires_grad=True) for n, t in params.items()}


def encode_table(arrays: Dict[str, np.ndarray], step: int = 0, config_hash: str = "") -> bytes:
    h = config_hash.encode("utf-8")
    parts = [MAGIC, struct.pack("<QH", step, len(h)), h, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_table(buf: bytes) -> Tuple[Dict[str, np.ndarray], int, str]:
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedPayloadError("parameter table truncated")
        out = buf[pos:pos + n]
        pos += n
        return out

    step, hlen = struct.unpack("<QH", take(10))
    config_hash = take(hlen).decode("utf-8")
    (n,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(n):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    return arrays, step, config_hash


def save_params(params: Params, path, step: int = 0, config_hash: str = "",
                extra: Optional[Dict[str, np.ndarray]] = None) -> None:
    arrays = {n: t.data for n, t in params.items()}
    arrays.update(extra or {})
    Path(path).write_bytes(encode_table(arrays, step, config_hash))


def load_params(path) -> Tuple[Dict[str, np.ndarray], int, str]:
    return decode_table(Path(path).read_bytes())
