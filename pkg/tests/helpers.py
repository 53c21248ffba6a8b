"""Small float64 models and batches shared by the test modules."""
import numpy as np

from condcd.encoders import EncoderConfig
from condcd.fusion import FusionConfig
from condcd.heads import HeadConfig
from condcd.model import ModelSpec, init_params
from condcd.synthetic import WorldConfig, generate_sample


def tiny_spec(regime="conditional", kind="mapformer", K=2, scd="none", contrastive=True,
              stop_grad=True, project_map=False, num_classes=3):
    enc = EncoderConfig(num_scales=2, channels=(3, 4), map_channels=3)
    fus = FusionConfig(K=K, regime=regime, kind=kind)
    fus.validate()
    heads = HeadConfig(scd_placement=scd, contrastive_enabled=contrastive, stop_grad_on_map=stop_grad,
                       project_map=project_map, embed=3)
    return ModelSpec(enc, fus, heads, num_classes, num_classes)


def tiny_batch(size=16, n=1, num_classes=3, seed=0):
    cfg = WorldConfig(height=size, width=size, num_classes=num_classes, num_seed_regions=4,
                      change_rate_target=0.15, seed=seed)
    samples = [generate_sample(cfg, i) for i in range(n)]
    return {
        "img_pre": np.stack([s.image_pre.values for s in samples]).astype(np.float64),
        "img_post": np.stack([s.image_post.values for s in samples]).astype(np.float64),
        "map_pre": np.stack([s.map_pre.labels for s in samples]),
        "map_post": np.stack([s.map_post.labels for s in samples]),
        "change": np.stack([s.change.values for s in samples]),
    }


def tiny_model(seed=0, **kw):
    spec = tiny_spec(**kw)
    return spec, init_params(spec, seed, np.float64)


def small_experiment(regime="conditional", kind="mapformer", seed=0, steps=200, **overrides):
    """The reference desk-scale configuration with a short schedule."""
    from condcd.protocol import experiment

    return experiment(regime, kind, seed, steps, **overrides)
