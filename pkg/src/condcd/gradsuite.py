"""Finite-difference suite over every differentiable operation and the end-to-end regimes.

Each entry reduces an op's output to a scalar through a fixed random
cotangent, so every output coordinate contributes to the checked gradient.
"""
from __future__ import annotations

from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .encoders import EncoderConfig
from .fusion import FusionConfig, fuse_concat, fuse_mapformer, init_concat, init_mapformer
from .heads import HeadConfig, contrastive_loss, init_projection, total_loss
from .model import ModelSpec, forward, init_params
from .synthetic import WorldConfig, generate_sample, stream

END_TO_END = (("bi_temporal", "concat"), ("conditional", "mapformer"), ("cross_modal", "mapformer"))
SIZE = 16


def _dot(y: Tensor) -> Tensor:
    # the cotangent depends on the shape only, so repeated evaluations agree
    return ad.tsum(ad.mul(y, Tensor(np.random.default_rng(len(y.shape)).standard_normal(y.shape))))


def _op_cases(rng) -> List[Tuple[str, Callable, list]]:
    def t(*shape):
        return Tensor(rng.standard_normal(shape), requires_grad=True)

    n = SIZE
    cases = [
        ("add", lambda a, b: _dot(ad.add(a, b)), [t(2, n, n), t(1, n, n)]),
        ("mul", lambda a, b: _dot(ad.mul(a, b)), [t(2, n, n), t(2, 1, n)]),
        ("neg", lambda a: _dot(ad.neg(a)), [t(2, n, n)]),
        ("relu", lambda a: _dot(ad.relu(a)), [t(2, n, n)]),
        ("sum", lambda a: _dot(ad.tsum(a, axis=-3)), [t(3, n, n)]),
        ("mean", lambda a: ad.mul(ad.mean(a), ad.mean(a)), [t(2, n, n)]),
        ("reshape", lambda a: _dot(ad.reshape(a, (n, 2 * n))), [t(2, n, n)]),
        ("concat", lambda a, b: _dot(ad.concat([a, b])), [t(2, n, n), t(1, n, n)]),
        ("split", lambda a: _dot(ad.mul(*ad.split(a, [2, 2], axis=0))), [t(4, n, n)]),
        ("pointwise_linear", lambda x, w, b: _dot(ad.pointwise_linear(x, w, b)),
         [t(3, n, n), t(4, 3), t(4)]),
        ("grouped_linear", lambda x, w, b: _dot(ad.grouped_linear(x, w, b)),
         [t(6, n, n), t(2, 4, 3), t(2, 4)]),
        ("grouped_pointwise_mlp", lambda x, w1, b1, w2, b2: _dot(ad.grouped_pointwise_mlp(x, w1, b1, w2, b2)),
         [t(3, n, n), t(2, 4, 3), t(2, 4), t(2, 3, 4), t(2, 3)]),
        ("conv2d", lambda x, w, b: _dot(ad.conv2d(x, w, b)), [t(2, n, n), t(3, 2, 3, 3), t(3)]),
        ("conv2d_dilated", lambda x, w, b: _dot(ad.conv2d(x, w, b, dilation=2)),
         [t(2, n, n), t(3, 2, 3, 3), t(3)]),
        ("conv2d_strided", lambda x, w, b: _dot(ad.conv2d(x, w, b, stride=2)),
         [t(2, n, n), t(3, 2, 5, 5), t(3)]),
        ("softmax", lambda x: _dot(ad.softmax(x, axis=-3)), [t(4, n, n)]),
        ("cosine_similarity", lambda u, v: _dot(ad.cosine_similarity(u, v, axis=-3)),
         [t(3, n, n), t(3, n, n)]),
        ("bilinear_resize", lambda x: _dot(ad.bilinear_resize(x, 2 * n, n // 2 + 1)), [t(2, n, n)]),
    ]
    target = rng.integers(0, 3, size=(n, n))
    cases.append(("cross_entropy", lambda z: ad.cross_entropy(z, target), [t(3, n, n)]))
    return cases


def _fusion_cases(rng) -> List[Tuple[str, Callable, list]]:
    n = SIZE
    f1, f2, g = (Tensor(rng.standard_normal(s), requires_grad=True) for s in ((4, n, n), (4, n, n), (3, n, n)))
    cases = []
    for kind in ("mapformer", "concat"):
        cfg = FusionConfig(K=3, regime="conditional", kind=kind)
        params: dict = {}
        (init_mapformer if kind == "mapformer" else init_concat)(params, "f", rng, 4, 3, cfg, np.float64)
        names = sorted(params)

        def fn(a, b, c, *ws, kind=kind, cfg=cfg, names=names):
            q = dict(zip(names, ws))
            out = fuse_mapformer(a, b, c, q, "f", cfg)[0] if kind == "mapformer" else fuse_concat(a, b, c, q, "f", cfg)
            return _dot(out)

        cases.append((f"fuse_{kind}", fn, [f1, f2, g] + [params[k] for k in names]))

    hcfg = HeadConfig(stop_grad_on_map=False)
    proj: dict = {}
    init_projection(proj, rng, [4, 4], 3, hcfg, np.float64)
    pn = sorted(proj)
    b = (rng.random((n, n)) < 0.3).astype(np.uint8)
    levels = [Tensor(rng.standard_normal(s), requires_grad=True) for s in ((3, n, n), (4, n, n), (4, n, n),
                                                                         (3, n // 2, n // 2), (4, n // 2, n // 2),
                                                                         (4, n // 2, n // 2))]

    def contr(g0, a0, c0, g1, a1, c1, *ws):
        return contrastive_loss([g0, g1], [a0, a1], [c0, c1], b, dict(zip(pn, ws)), hcfg)

    cases.append(("contrastive_loss", contr, levels + [proj[k] for k in pn]))
    return cases


def end_to_end_case(regime: str, kind: str, seed: int = 0):
    """Loss closure and parameters for a small float64 model on a seeded 16x16 sample."""
    enc = EncoderConfig(num_scales=2, channels=(3, 4), map_channels=3)
    fus = FusionConfig(K=2, regime=regime, kind=kind)
    fus.validate()
    # stop-gradient removes a real dependence from the analytic gradient that
    # finite differences still see, so the numeric check runs with it off
    heads = HeadConfig(stop_grad_on_map=False, embed=3)
    spec = ModelSpec(enc, fus, heads, 3, 3)
    params = init_params(spec, seed, np.float64)
    s = generate_sample(WorldConfig(height=SIZE, width=SIZE, num_classes=3, num_seed_regions=4,
                                    change_rate_target=0.15, seed=seed), 0)
    batch = {"img_pre": s.image_pre.values[None].astype(np.float64),
             "img_post": s.image_post.values[None].astype(np.float64),
             "map_pre": s.map_pre.labels[None], "map_post": s.map_post.labels[None],
             "change": s.change.values[None]}
    names = sorted(params)

    def fn(*ws):
        return total_loss(forward(spec, dict(zip(names, ws)), batch), batch, heads)[0]

    return fn, [params[k] for k in names]


def run_grad_suite(seed: int = 0, max_coords: int = 12) -> Dict[str, float]:
    """Worst relative error per operation, fusion, loss and end-to-end regime.

    Ops are probed at every coordinate; the end-to-end models at ``max_coords``
    seeded coordinates per parameter tensor.
    """
    rng = stream(seed, 0x6AD)
    results: Dict[str, float] = {}
    for name, fn, inputs in _op_cases(rng) + _fusion_cases(rng):
        results[name] = grad_check(fn, inputs)
    for regime, kind in END_TO_END:
        fn, inputs = end_to_end_case(regime, kind, seed)
        results[f"end_to_end:{regime}/{kind}"] = grad_check(fn, inputs, max_coords=max_coords, seed=seed)
    return results
