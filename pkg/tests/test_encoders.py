import numpy as np
import pytest

from condcd import autodiff as ad
from condcd.autodiff import ConfigurationError, Tensor, grad_check
from condcd.encoders import (EncoderConfig, FeaturePyramid, image_encode, init_image_encoder,
                             init_map_encoder, map_encode, predict_premap, resize_map_features)
from condcd.heads import init_head
from condcd.raster import ClassSet, ImageRaster, SemanticMap
from condcd.synthetic import stream

from oracles import bilinear_sample


def image_params(cfg, dtype=np.float64, seed=0):
    params = {}
    init_image_encoder(params, stream(seed, 1), cfg, dtype)
    return params


def map_params(n_cls, cfg, dtype=np.float64, seed=0):
    params = {}
    init_map_encoder(params, stream(seed, 2), n_cls, cfg, dtype)
    return params


def test_default_pyramid_sizes():
    cfg = EncoderConfig()
    img = ImageRaster(np.random.default_rng(0).uniform(0, 1, (3, 64, 64)).astype(np.float32))
    pyr = image_encode(img, image_params(cfg, np.float32), cfg)
    assert [t.shape for t in pyr.features] == [(16, 32, 32), (32, 16, 16), (64, 8, 8)]
    assert pyr.strides == [2, 4, 8]


def test_encoding_deterministic_and_finite():
    cfg = EncoderConfig(channels=(4, 4, 4))
    p = image_params(cfg)
    x = np.random.default_rng(1).uniform(0, 1, (3, 20, 20))
    a, b = image_encode(x, p, cfg), image_encode(x, p, cfg)
    for u, v in zip(a.features, b.features):
        assert u.data.tobytes() == v.data.tobytes()
        assert np.all(np.isfinite(u.data))


def test_odd_sizes_use_ceil():
    cfg = EncoderConfig(channels=(2, 2, 2))
    pyr = image_encode(np.zeros((3, 13, 9)), image_params(cfg), cfg)
    assert [t.shape[-2:] for t in pyr.features] == [(7, 5), (4, 3), (2, 2)]


def test_weight_sharing_swap():
    cfg = EncoderConfig(channels=(3, 3, 3))
    p = image_params(cfg)
    rng = np.random.default_rng(2)
    i1, i2 = rng.uniform(0, 1, (2, 3, 16, 16))
    both = image_encode(np.stack([i1, i2]), p, cfg)
    swapped = image_encode(np.stack([i2, i1]), p, cfg)
    for u, v in zip(both.features, swapped.features):
        np.testing.assert_array_equal(u.data[0], v.data[1])
        np.testing.assert_array_equal(u.data[1], v.data[0])


def test_channel_mismatch():
    cfg = EncoderConfig(channels=(2, 2, 2))
    with pytest.raises(ConfigurationError):
        image_encode(np.zeros((4, 8, 8)), image_params(cfg), cfg)


def test_image_encoder_grad():
    cfg = EncoderConfig(num_scales=2, channels=(2, 3))
    p = image_params(cfg, seed=3)
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(0, 1, (3, 16, 16)), requires_grad=True)
    heads = [Tensor(rng.standard_normal(t)) for t in [(2, 8, 8), (3, 4, 4)]]

    def fn(x, *ws):
        q = dict(zip(names, ws))
        pyr = image_encode(x, q, cfg)
        return ad.tsum(ad.mul(pyr.features[0], heads[0])) + ad.tsum(ad.mul(pyr.features[1], heads[1]))

    names = sorted(p)
    assert grad_check(fn, [x] + [p[n] for n in names], max_coords=40) < 1e-5


def test_map_encoder_locality():
    cfg = EncoderConfig(map_channels=3)
    cs = ClassSet.numbered(4)
    p = map_params(4, cfg)
    rng = np.random.default_rng(4)
    lab = rng.integers(0, 4, (30, 30))
    other = lab.copy()
    # (15,15) sees rows/cols 7..23; change pixels just outside that window
    other[15, 24] = (lab[15, 24] + 1) % 4
    other[6, 6] = (lab[6, 6] + 1) % 4
    ga = map_encode(SemanticMap(lab, cs), p).data
    gb = map_encode(SemanticMap(other, cs), p).data
    assert ga[:, 15, 15].tobytes() == gb[:, 15, 15].tobytes()
    # a change inside the window does reach the pixel
    inside = lab.copy()
    inside[15, 23] = (lab[15, 23] + 1) % 4
    assert not np.array_equal(map_encode(SemanticMap(inside, cs), p).data[:, 15, 15], ga[:, 15, 15])


def test_map_encoder_constant_interior():
    cfg = EncoderConfig(map_channels=3)
    g = map_encode(SemanticMap(np.full((24, 24), 2), ClassSet.numbered(3)), map_params(3, cfg)).data
    interior = g[:, 8:16, 8:16]
    np.testing.assert_allclose(interior, interior[:, :1, :1] + np.zeros_like(interior), atol=1e-12)


def test_map_encoder_shape_and_class_check():
    cfg = EncoderConfig(map_channels=5)
    p = map_params(3, cfg)
    g = map_encode(SemanticMap(np.zeros((9, 7)), ClassSet.numbered(3)), p)
    assert g.shape == (5, 9, 7)
    with pytest.raises(ConfigurationError):
        map_encode(SemanticMap(np.zeros((9, 7)), ClassSet.numbered(4)), p)


def test_map_encoder_grad():
    cfg = EncoderConfig(map_channels=2)
    p = map_params(3, cfg, seed=5)
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(0, 1, (3, 16, 16)), requires_grad=True)
    c = Tensor(rng.standard_normal((2, 16, 16)))
    names = sorted(p)

    def fn(x, *ws):
        return ad.tsum(ad.mul(map_encode(x, dict(zip(names, ws))), c))

    assert grad_check(fn, [x] + [p[n] for n in names], max_coords=40) < 1e-5


def _pyramid(sizes, full):
    return FeaturePyramid([(s, Tensor(np.zeros((1,) + hw))) for s, hw in sizes], "image_post", full)


def test_resize_identity_and_constant():
    g = Tensor(np.random.default_rng(6).standard_normal((2, 8, 8)))
    out = resize_map_features(g, _pyramid([(1, (8, 8)), (2, (4, 4))], (8, 8)))
    np.testing.assert_array_equal(out[0].data, g.data)
    const = Tensor(np.full((2, 8, 8), -0.25))
    for t in resize_map_features(const, _pyramid([(2, (4, 4)), (4, (2, 2)), (8, (1, 1))], (8, 8))):
        np.testing.assert_allclose(t.data, -0.25)


def test_resize_stride4_oracle():
    g = np.random.default_rng(7).standard_normal((3, 16, 16))
    out = resize_map_features(Tensor(g), _pyramid([(4, (4, 4))], (16, 16)))[0]
    np.testing.assert_allclose(out.data, bilinear_sample(g, 4, 4), atol=1e-6)


def _seg_params(logits_bias, n_cls=3, width=2):
    params = {}
    init_head(params, "sem", stream(0, 9), [width], 2, n_cls, np.float64)
    params["sem.s0.out.w"].data[:] = 0
    params["sem.out.b"].data[:] = logits_bias
    return params


def test_predict_premap_argmax_and_ties():
    cs = ClassSet.numbered(3)
    pyr = FeaturePyramid([(2, Tensor(np.ones((2, 4, 4))))], "image_pre", (8, 8))
    m = predict_premap(pyr, _seg_params([0.0, 1.0, 5.0]), cs)
    assert m.shape == (8, 8) and np.all(m.labels == 2)
    tie = predict_premap(pyr, _seg_params([3.0, 1.0, 3.0]), cs)
    assert np.all(tie.labels == 0)
    assert tie.class_set == cs


def test_predict_premap_class_mismatch():
    pyr = FeaturePyramid([(2, Tensor(np.ones((2, 4, 4))))], "image_pre", (8, 8))
    with pytest.raises(ConfigurationError):
        predict_premap(pyr, _seg_params([0.0, 0.0, 0.0]), ClassSet.numbered(4))
