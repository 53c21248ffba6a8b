"""Dense tensors with reverse-mode differentiation.

Spatial operations take ``(C, H, W)`` or batched ``(N, C, H, W)`` inputs; the
channel axis is always ``-3``. Every node records its parents and a backward
rule at creation time, and ``backward`` replays the recorded operations in
reverse creation order, so gradient accumulation order is fixed.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Shapes of operands do not conform."""


class ConfigurationError(ValueError):
    """Invalid operation or model configuration."""


class DataError(ValueError):
    """Input data violates an operation's contract."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


_counter = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording operations."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        backward(self)

    # arithmetic sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other, self)))

    def __rsub__(self, other):
        return add(_lift(other, self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _lift(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op; ``rule(g)`` returns one grad per parent."""
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(t) into ``t.grad`` for every reachable ``requires_grad`` tensor.

    Repeated calls add to existing grads.
    """
    if root.data.size != 1 or root.data.ndim > 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    grads = {root._id: np.ones_like(root.data)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g
        if t._backward is None:
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if p._id in grads:
                grads[p._id] = grads[p._id] + pg
            else:
                grads[p._id] = pg


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    if not isinstance(a, Tensor):
        a = _lift(a, b)
    b = _lift(b, a)
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def tsum(x: Tensor, axis=None) -> Tensor:
    out = np.sum(x.data, axis=axis)

    def rule(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), rule)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(xs: Sequence[Tensor], axis: int = -3) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, splits, axis=axis)))


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    """Inverse of ``concat``: consecutive chunks of ``sizes`` along ``axis``."""
    if sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    bounds = np.cumsum([0, *sizes])
    outs = []
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        index = [slice(None)] * x.ndim
        index[axis] = slice(lo, hi)
        index = tuple(index)

        def rule(g, index=index):
            full = np.zeros_like(x.data)
            full[index] = g
            return (full,)

        outs.append(_make(x.data[index], (x,), rule))
    return outs


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; nothing flows back to ``x``."""
    out = Tensor(x.data)
    out.requires_grad = False
    return out


# ---------------------------------------------------------------- pointwise layers


def _check_channels(x: Tensor, c_in: int, what: str) -> None:
    if x.ndim not in (3, 4):
        raise DimensionError(f"{what}: expected (C,H,W) or (N,C,H,W) input, got shape {x.shape}")
    if x.shape[-3] != c_in:
        raise DimensionError(f"{what}: channel axis has {x.shape[-3]} entries, weight expects {c_in}")


def pointwise_linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-pixel affine map over channels, i.e. a 1x1 convolution."""
    if weight.ndim != 2:
        raise DimensionError(f"pointwise_linear: weight must be 2-D, got shape {weight.shape}")
    c_out, c_in = weight.shape
    _check_channels(x, c_in, "pointwise_linear")
    if bias is not None and bias.shape != (c_out,):
        raise DimensionError(f"pointwise_linear: bias axis 0 has {bias.shape}, expected ({c_out},)")
    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    xf = x.data.reshape(lead + (c_in, h * w))
    y = weight.data @ xf
    if bias is not None:
        y = y + bias.data[:, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        gf = g.reshape(lead + (c_out, h * w))
        gx = (weight.data.T @ gf).reshape(x.shape)
        if lead:
            gw = np.einsum("npq,nrq->pr", gf, xf)
            gb = gf.sum(axis=(0, 2))
        else:
            gw = gf @ xf.T
            gb = gf.sum(axis=1)
        return (gx, gw) if bias is None else (gx, gw, gb)

    return _make(y.reshape(lead + (c_out, h, w)), parents, rule)


def grouped_linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """K independent pointwise linears; group k reads channel block k and writes block k.

    ``weight`` is ``(K, D_out, D_in)``, ``bias`` is ``(K, D_out)``.
    """
    k, d_out, d_in = weight.shape
    _check_channels(x, k * d_in, "grouped_linear")
    lead = x.shape[:-3]
    h, w = x.shape[-2:]
    xg = x.data.reshape(lead + (k, d_in, h * w))
    y = weight.data @ xg + bias.data[..., None]

    def rule(g):
        gg = g.reshape(lead + (k, d_out, h * w))
        gx = np.swapaxes(weight.data, -1, -2) @ gg
        gw = gg @ np.swapaxes(xg, -1, -2)
        gb = gg.sum(axis=-1)
        if lead:
            gw = gw.sum(axis=0)
            gb = gb.sum(axis=0)
        return gx.reshape(x.shape), gw, gb

    return _make(y.reshape(lead + (k * d_out, h, w)), (x, weight, bias), rule)


def grouped_pointwise_mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """K two-layer MLPs (linear, ReLU, linear), each reading all input channels.

    ``w1``: ``(K, D_h, C_in)``, ``b1``: ``(K, D_h)``, ``w2``: ``(K, D_f, D_h)``,
    ``b2``: ``(K, D_f)``. Group k's output lands in channels ``[k*D_f, (k+1)*D_f)``.
    """
    if w1.ndim != 3 or w2.ndim != 3:
        raise DimensionError("grouped_pointwise_mlp: weights must be (K, D_out, D_in)")
    k, d_h, c_in = w1.shape
    if k < 1 or w2.shape[1] < 1:
        raise ConfigurationError(f"grouped_pointwise_mlp: need K>=1 and D_f>=1, got K={k}, D_f={w2.shape[1]}")
    if w2.shape[0] != k or w2.shape[2] != d_h:
        raise DimensionError(f"grouped_pointwise_mlp: second-layer weight {w2.shape} does not follow {w1.shape}")
    hidden = pointwise_linear(x, reshape(w1, (k * d_h, c_in)), reshape(b1, (k * d_h,)))
    return grouped_linear(relu(hidden), w2, b2)


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           dilation: int = 1, stride: int = 1) -> Tensor:
    """Dilated cross-correlation with zero padding ``(k-1)*dilation/2``.

    With ``stride=1`` the spatial size is preserved; otherwise the output is
    ``ceil(H/stride) x ceil(W/stride)``.
    """
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise DimensionError(f"conv2d: weight must be (C_out, C_in, k, k), got {weight.shape}")
    c_out, c_in, ksize, _ = weight.shape
    if ksize % 2 == 0:
        raise ConfigurationError(f"conv2d: kernel size must be odd, got {ksize}")
    if dilation < 1 or stride < 1:
        raise ConfigurationError("conv2d: dilation and stride must be positive")
    _check_channels(x, c_in, "conv2d")
    batched = x.ndim == 4
    xd = x.data if batched else x.data[None]
    n, _, h, w = xd.shape
    pad = (ksize - 1) * dilation // 2
    ho, wo = -(-h // stride), -(-w // stride)
    # channel-major padded copy: (c_in, n, H+2p, W+2p)
    xp = np.zeros((c_in, n, h + 2 * pad, w + 2 * pad), dtype=xd.dtype)
    xp[:, :, pad:pad + h, pad:pad + w] = xd.transpose(1, 0, 2, 3)
    taps = [(a * dilation, b * dilation) for a in range(ksize) for b in range(ksize)]
    cols = np.empty((ksize * ksize, c_in, n, ho, wo), dtype=xd.dtype)
    for t, (r0, c0) in enumerate(taps):
        cols[t] = xp[:, :, r0:r0 + (ho - 1) * stride + 1:stride, c0:c0 + (wo - 1) * stride + 1:stride]
    cols = cols.reshape(ksize * ksize * c_in, n * ho * wo)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    y = (wmat @ cols).reshape(c_out, n, ho, wo)
    if bias is not None:
        y = y + bias.data[:, None, None, None]
    y = np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def rule(g):
        gb = g if batched else g[None]
        gmat = np.ascontiguousarray(gb.transpose(1, 0, 2, 3)).reshape(c_out, -1)
        gw = (cols @ gmat.T).T.reshape(c_out, ksize, ksize, c_in).transpose(0, 3, 1, 2)
        if not x.requires_grad:
            out = (None, np.ascontiguousarray(gw))
            return out if bias is None else out + (gb.sum(axis=(0, 2, 3)),)
        gcols = (wmat.T @ gmat).reshape(ksize * ksize, c_in, n, ho, wo)
        gxp = np.zeros_like(xp)
        for t, (r0, c0) in enumerate(taps):
            gxp[:, :, r0:r0 + (ho - 1) * stride + 1:stride, c0:c0 + (wo - 1) * stride + 1:stride] += gcols[t]
        gx = np.ascontiguousarray(gxp[:, :, pad:pad + h, pad:pad + w].transpose(1, 0, 2, 3))
        out = (gx if batched else gx[0], np.ascontiguousarray(gw))
        return out if bias is None else out + (gb.sum(axis=(0, 2, 3)),)

    return _make(y if batched else y[0], parents, rule)


# ---------------------------------------------------------------- normalisation & losses


def softmax(x: Tensor, axis: int) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax: axis {axis} out of range for {x.ndim}-D input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return _make(s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def cosine_similarity(u: Tensor, v: Tensor, axis: Optional[int] = None, eps: float = 1e-8) -> Tensor:
    """<u,v> / (max(|u|,eps) * max(|v|,eps)), reduced over ``axis`` (all axes if None)."""
    if u.shape != v.shape:
        raise DimensionError(f"cosine_similarity: shapes {u.shape} and {v.shape} differ")
    dot = np.sum(u.data * v.data, axis=axis, keepdims=True)
    nu = np.sqrt(np.sum(u.data * u.data, axis=axis, keepdims=True))
    nv = np.sqrt(np.sum(v.data * v.data, axis=axis, keepdims=True))
    du, dv = np.maximum(nu, eps), np.maximum(nv, eps)
    sim = dot / (du * dv)
    # Below eps the norm is clamped to a constant and contributes no gradient.
    au = np.where(nu > eps, 1.0 / np.where(nu > 0, nu, 1.0), 0.0) / du
    av = np.where(nv > eps, 1.0 / np.where(nv > 0, nv, 1.0), 0.0) / dv

    def rule(g):
        g = g if axis is None else np.expand_dims(g, axis)
        gu = g * (v.data / (du * dv) - sim * u.data * au)
        gv = g * (u.data / (du * dv) - sim * v.data * av)
        return gu.astype(u.dtype), gv.astype(v.dtype)

    out = sim.reshape(()) if axis is None else np.squeeze(sim, axis)
    return _make(out.astype(u.dtype), (u, v), rule)


def cross_entropy(logits: Tensor, target: np.ndarray, ignore_label: int = 255) -> Tensor:
    """Mean of -log softmax(logits)[target] over pixels whose label is not ``ignore_label``."""
    c = logits.shape[-3]
    target = np.asarray(target)
    if target.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise DimensionError(f"cross_entropy: target shape {target.shape} vs logits {logits.shape}")
    valid = target != ignore_label
    if np.any(target[valid] >= c) or np.any(target[valid] < 0):
        raise DataError(f"cross_entropy: target label outside [0, {c}) and not ignore_label={ignore_label}")
    t = np.where(valid, target, 0).astype(np.intp)
    z = logits.data - logits.data.max(axis=-3, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-3, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, np.expand_dims(t, -3), axis=-3)[..., 0, :, :]
    count = max(int(valid.sum()), 1)
    loss = -(picked * valid).sum() / count

    def rule(g):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, np.expand_dims(t, -3), 1.0, axis=-3)
        return (g * (p - onehot) * np.expand_dims(valid, -3) / count,)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), rule)


# ---------------------------------------------------------------- resampling


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Row i holds the bilinear weights for output sample i (half-pixel centers, edge clamp)."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ConfigurationError(f"bilinear_resize: output size must be positive, got {out_h}x{out_w}")
    h, w = x.shape[-2:]
    if (h, w) == (out_h, out_w):
        return _make(x.data.copy(), (x,), lambda g: (g,))
    rh = interp_matrix(h, out_h, x.dtype)
    rw = interp_matrix(w, out_w, x.dtype)
    y = rh @ x.data @ rw.T
    return _make(y, (x,), lambda g: (rh.T @ g @ rw,))


# ---------------------------------------------------------------- verification


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-5,
               max_coords: Optional[int] = None, seed: int = 0) -> float:
    """Worst relative error between analytic grads and central differences.

    ``fn`` maps ``inputs`` to a scalar Tensor. Relative error per coordinate is
    ``|a - n| / max(|a|, |n|)``; coordinates whose absolute disagreement is
    below 1e-8 count as exact, which keeps round-off on vanishing grads from
    dominating. Inputs are promoted to float64 in place. With ``max_coords``
    each input is probed at that many seeded random coordinates instead of all.
    """
    pick = np.random.default_rng(seed)
    inputs = list(inputs)
    for t in inputs:
        if t.dtype != np.float64:
            t.data = t.data.astype(np.float64)
        t.grad = None
    out = fn(*inputs)
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    worst = 0.0
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            af = a.reshape(-1)
            coords = range(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(pick.choice(flat.size, max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                flat[i] = orig + h
                fp = float(fn(*inputs).data)
                flat[i] = orig - h
                fm = float(fn(*inputs).data)
                flat[i] = orig
                num = (fp - fm) / (2 * h)
                diff = abs(af[i] - num)
                err = 0.0 if diff <= 1e-8 else diff / max(abs(af[i]), abs(num))
                worst = max(worst, err)
    for t in inputs:
        t.grad = None
    return worst
