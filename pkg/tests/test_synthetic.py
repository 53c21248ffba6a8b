import numpy as np
import pytest

from condcd.autodiff import ConfigurationError
from condcd.raster import derive_change, read_image, read_map, read_mask
from condcd.synthetic import (WorldConfig, generate_dataset, generate_map, generate_sample,
                              inject_changes, palette, render_image)


def test_map_deterministic():
    cfg = WorldConfig(seed=3)
    assert generate_map(cfg, 4).labels.tobytes() == generate_map(cfg, 4).labels.tobytes()
    assert generate_map(cfg, 4).labels.tobytes() != generate_map(cfg, 5).labels.tobytes()


def test_single_region_is_constant():
    m = generate_map(WorldConfig(num_seed_regions=1), 0)
    assert len(np.unique(m.labels)) == 1


def test_labels_in_range():
    cfg = WorldConfig(num_classes=3, num_seed_regions=40)
    for i in range(5):
        assert generate_map(cfg, i).labels.max() < 3


def test_no_blobs_no_change():
    cfg = WorldConfig(change_blob_count=0)
    m1 = generate_map(cfg, 0)
    m2 = inject_changes(m1, cfg, 0)
    assert m2.labels.tobytes() == m1.labels.tobytes()
    assert not derive_change(m1, m2).values.any()


def test_change_rate_on_seeds_0_to_9():
    for seed in range(10):
        cfg = WorldConfig(seed=seed, change_rate_target=0.05)
        m1 = generate_map(cfg, 0)
        rate = derive_change(m1, inject_changes(m1, cfg, 0)).values.mean()
        assert 0.8 * 0.05 <= rate <= 1.2 * 0.05, (seed, rate)


def test_mean_rate_over_100_samples():
    cfg = WorldConfig(seed=1)
    rates = [generate_sample(cfg, i).change.values.mean() for i in range(100)]
    assert 0.8 * 0.05 <= np.mean(rates) <= 1.2 * 0.05


def test_changed_pixels_get_new_labels():
    cfg = WorldConfig(seed=2)
    m1 = generate_map(cfg, 0)
    m2 = inject_changes(m1, cfg, 0)
    changed = derive_change(m1, m2).values.astype(bool)
    assert changed.any()
    assert np.all(m1.labels[changed] != m2.labels[changed])


def test_noiseless_renders_identical():
    cfg = WorldConfig(appearance_noise_sigma=0, temporal_drift_sigma=0)
    m = generate_map(cfg, 0)
    assert render_image(m, "pre", cfg, 0).values.tobytes() == render_image(m, "post", cfg, 0).values.tobytes()


def test_class_mean_color_near_palette():
    sigma = 0.05
    cfg = WorldConfig(height=96, width=96, num_seed_regions=4, appearance_noise_sigma=sigma)
    m = generate_map(cfg, 0)
    img = render_image(m, "pre", cfg, 0).values
    pal = palette(cfg)
    for c in np.unique(m.labels):
        sel = m.labels == c
        n = int(sel.sum())
        if n < 500:
            continue
        mean = img[:, sel].mean(axis=1)
        # palette entries sit in [0.15, 0.85], so clamping is negligible at this sigma
        assert np.all(np.abs(mean - pal[c]) < 3 * sigma / np.sqrt(n)), c


def test_outputs_clamped():
    cfg = WorldConfig(appearance_noise_sigma=2.0, temporal_drift_sigma=1.0)
    img = render_image(generate_map(cfg, 0), "post", cfg, 0).values
    assert img.min() >= 0 and img.max() <= 1


def test_invalid_config():
    with pytest.raises(ConfigurationError):
        WorldConfig(change_rate_target=1.0).validate()
    with pytest.raises(ConfigurationError):
        WorldConfig(num_classes=1).validate()
    with pytest.raises(ConfigurationError):
        WorldConfig(appearance_noise_sigma=-1).validate()


def test_dataset_bytes_reproducible(tmp_path):
    cfg = WorldConfig(height=16, width=16, seed=9)
    generate_dataset(cfg, 3, tmp_path / "a")
    generate_dataset(cfg, 3, tmp_path / "b")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.tsv" in files and "classes.txt" in files
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dataset_manifest_and_samples(tmp_path):
    cfg = WorldConfig(height=16, width=16, seed=4)
    manifest = generate_dataset(cfg, 4, tmp_path)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 4
    for line in lines:
        sid, ip, iq, mp, mq, ch, rate = line.split("\t")
        m1, m2 = read_map(tmp_path / mp, cfg.class_set), read_map(tmp_path / mq, cfg.class_set)
        b = read_mask(tmp_path / ch)
        np.testing.assert_array_equal(b.values, derive_change(m1, m2).values)
        assert float(rate) == pytest.approx(b.values.mean(), abs=1e-6)
        assert read_image(tmp_path / ip).values.shape == (3, 16, 16)


def test_dataset_is_per_index(tmp_path):
    cfg = WorldConfig(height=16, width=16, seed=4)
    generate_dataset(cfg, 2, tmp_path / "two")
    generate_dataset(cfg, 3, tmp_path / "three")
    for name in ("00001_img_post.cdr", "00001_map_post.cdr"):
        assert (tmp_path / "two" / name).read_bytes() == (tmp_path / "three" / name).read_bytes()
