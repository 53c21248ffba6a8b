"""The desk-scale reference protocol: one synthetic world, a small model and the experiment grids.

Scripts and the acceptance suite build every configuration through these
helpers, so the numbers they report come from one frozen setup.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .synthetic import WorldConfig, generate_dataset
from .training import ExperimentConfig, MatrixRow

WORLD_SEED = 100
TRAIN_SAMPLES = 200
TEST_SAMPLES = 50
STEPS = 2000
LEARNING_RATE = 5e-3
SEEDS = (0, 1, 2)
# chosen once on the reference seed, then frozen
ORDERING_MARGIN = 0.05

ORDERING = (("bi_temporal", "concat"), ("conditional", "concat"), ("conditional", "mapformer"))
CROSS_MODAL = ("cross_modal", "mapformer")


def reference_world(seed: int = WORLD_SEED) -> WorldConfig:
    return WorldConfig(height=64, width=64, num_classes=5, change_rate_target=0.05, seed=seed)


def write_reference_data(root, world: Optional[WorldConfig] = None) -> Tuple[Path, Path]:
    """Train and test splits as disjoint index ranges of one world; returns both manifests."""
    world = world or reference_world()
    root = Path(root)
    train = generate_dataset(world, TRAIN_SAMPLES, root / "train")
    test = generate_dataset(world, TEST_SAMPLES, root / "test", first_index=TRAIN_SAMPLES)
    return train, test


def experiment(regime: str, kind: str, seed: int = 0, steps: int = STEPS, manifests=("", ""),
               **overrides) -> ExperimentConfig:
    """Reference configuration for one grid cell.

    Overrides use ``section__field`` names (``heads__contrastive_enabled=False``).
    Concat fusion in map regimes trains without the contrastive term, matching
    the concat baseline; the bi-temporal regime has no map to contrast with.
    """
    cfg = ExperimentConfig(regime=regime, steps=steps, batch_size=2, seed=seed)
    cfg.fusion.kind = kind
    cfg.encoder.channels = (8, 16, 16)
    cfg.encoder.map_channels = 8
    cfg.heads.embed = 16
    cfg.optim.lr = LEARNING_RATE
    cfg.data.train_manifest, cfg.data.test_manifest = (str(m) for m in manifests)
    if kind == "concat":
        cfg.heads.contrastive_enabled = False
    for key, value in overrides.items():
        obj = cfg
        *path, last = key.split("__")
        for p in path:
            obj = getattr(obj, p)
        if not hasattr(obj, last):
            raise AttributeError(f"unknown override {key!r}")
        setattr(obj, last, value)
    cfg.validate()
    return cfg


ABLATIONS: Dict[str, dict] = {
    "no_contrastive": {"heads__contrastive_enabled": False},
    "high_level": {"degradation__kind": "high_level"},
    "low_res": {"degradation__kind": "low_res", "degradation__factor": 8},
}


def grid(manifests=("", ""), seeds: Sequence[int] = SEEDS, steps: int = STEPS,
         ablations: bool = True) -> List[Tuple[str, ExperimentConfig]]:
    """``(label, config)`` for the ordering, cross-modal and (optionally) ablation runs."""
    cells = [(f"{r}-{k}", r, k, {}) for r, k in ORDERING + (CROSS_MODAL,)]
    if ablations:
        cells += [(f"conditional-mapformer-{name}", "conditional", "mapformer", ov) for name, ov in ABLATIONS.items()]
    return [(label, experiment(r, k, seed, steps, manifests, **ov))
            for label, r, k, ov in cells for seed in seeds]


@dataclass
class GridResult:
    label: str
    seed: int
    bc: Optional[float]
    wall_s: float


def summarize(results: Sequence[GridResult]) -> Dict[str, float]:
    """Median test BC per label; failed runs count as NaN."""
    by_label: Dict[str, List[float]] = {}
    for r in results:
        by_label.setdefault(r.label, []).append(np.nan if r.bc is None else r.bc)
    return {label: float(np.median(v)) for label, v in by_label.items()}


def from_rows(labels: Sequence[str], rows: Sequence[MatrixRow]) -> List[GridResult]:
    return [GridResult(lab, row.config.seed, row.report.bc if row.report else None, row.wall_s)
            for lab, row in zip(labels, rows)]


def check_claims(med: Dict[str, float]) -> List[Tuple[str, bool, str]]:
    """The ordering, cross-modal and ablation claims as ``(name, passed, detail)``."""
    bi, cc, cm = med["bi_temporal-concat"], med["conditional-concat"], med["conditional-mapformer"]
    out = [
        ("ordering", cm > cc > bi, f"cond-mapformer {cm:.4f} > cond-concat {cc:.4f} > bi-concat {bi:.4f}"),
        ("ordering margin", cm >= bi + ORDERING_MARGIN,
         f"cond-mapformer - bi-concat = {cm - bi:.4f} >= {ORDERING_MARGIN}"),
    ]
    if "cross_modal-mapformer" in med:
        cx = med["cross_modal-mapformer"]
        out.append(("cross-modal viability", cx > bi, f"cross-mapformer {cx:.4f} > bi-concat {bi:.4f}"))
    if "conditional-mapformer-no_contrastive" in med:
        nc = med["conditional-mapformer-no_contrastive"]
        hl, lr = med["conditional-mapformer-high_level"], med["conditional-mapformer-low_res"]
        out += [
            ("contrastive ablation", nc <= cm, f"without contrastive {nc:.4f} <= with {cm:.4f}"),
            ("degradation monotonicity", cm >= hl and cm >= lr,
             f"none {cm:.4f} >= high_level {hl:.4f} and >= low_res x8 {lr:.4f}"),
            ("degraded above bi-temporal", hl > bi and lr > bi,
             f"high_level {hl:.4f}, low_res {lr:.4f} > bi-concat {bi:.4f}"),
        ]
    return out
