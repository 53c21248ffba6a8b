"""Change detection scores from integer pixel counts.

``bc`` is the IoU of the binary change masks, ``sc`` the class-mean IoU
restricted to truly changed pixels, ``scs`` their mean, ``miou`` the usual
class-mean IoU over all pixels. Classes whose union is empty are left out of
a mean; if no class is left the mean is reported as 1.0 and flagged.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import DataError
from .raster import ChangeMask, SemanticMap


def _labels(x) -> np.ndarray:
    if isinstance(x, SemanticMap):
        return x.labels
    if isinstance(x, ChangeMask):
        return x.values
    return np.asarray(x)


def _same_size(*arrs) -> None:
    shapes = {a.shape for a in arrs}
    if len(shapes) != 1:
        raise DataError(f"metric inputs differ in size: {sorted(shapes)}")


def _class_counts(truth: np.ndarray, pred: np.ndarray, n_cls: int, where: Optional[np.ndarray] = None):
    t = truth.ravel().astype(np.int64)
    p = pred.ravel().astype(np.int64)
    if where is not None:
        keep = where.ravel().astype(bool)
        t, p = t[keep], p[keep]
    if t.size and (t.max() >= n_cls or p.max() >= n_cls):
        raise DataError(f"label outside [0, {n_cls})")
    inter = np.bincount(t[t == p], minlength=n_cls)
    union = np.bincount(t, minlength=n_cls) + np.bincount(p, minlength=n_cls) - inter
    return inter.astype(np.int64), union.astype(np.int64)


def _mean_iou(inter: np.ndarray, union: np.ndarray):
    counted = [int(c) for c in np.flatnonzero(union > 0)]
    if not counted:
        return 1.0, counted
    ratios = [int(inter[c]) / int(union[c]) for c in counted]
    return sum(ratios) / len(ratios), counted


def binary_change_iou(b, b_hat) -> float:
    b, b_hat = _labels(b).astype(bool), _labels(b_hat).astype(bool)
    _same_size(b, b_hat)
    union = int(np.count_nonzero(b | b_hat))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(b & b_hat)) / union


def semantic_change_score(m2, m2_hat, b, num_classes: Optional[int] = None) -> float:
    m2, m2_hat, b = _labels(m2), _labels(m2_hat), _labels(b)
    _same_size(m2, m2_hat, b)
    n = num_classes or _infer_classes(m2, m2_hat)
    inter, union = _class_counts(m2, m2_hat, n, where=b)
    return _mean_iou(inter, union)[0]


def scs(bc: float, sc: float) -> float:
    return (bc + sc) / 2


def miou(m, m_hat, num_classes: Optional[int] = None) -> float:
    m, m_hat = _labels(m), _labels(m_hat)
    _same_size(m, m_hat)
    n = num_classes or _infer_classes(m, m_hat)
    return _mean_iou(*_class_counts(m, m_hat, n))[0]


def _infer_classes(*maps) -> int:
    for m in maps:
        if isinstance(m, SemanticMap):
            return len(m.class_set)
    return int(max(int(np.max(a)) if np.size(a) else 0 for a in maps)) + 1


@dataclass
class MetricsReport:
    bc: float
    sc: Optional[float]
    scs: Optional[float]
    miou: Optional[float]
    bc_counts: Dict[str, int]
    per_class: Dict[str, Dict[str, List[int]]]
    counted_classes: Dict[str, List[int]]
    sc_vacuous: bool = False
    per_sample_bc: Optional[float] = None
    per_sample_scs: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class MetricCounts:
    """Pooled integer counts; ``update`` once per sample, ``report`` at the end."""

    num_classes: int
    bc_inter: int = 0
    bc_union: int = 0
    sc_inter: np.ndarray = None
    sc_union: np.ndarray = None
    mi_inter: np.ndarray = None
    mi_union: np.ndarray = None
    semantic: Optional[bool] = None
    sample_bc: List[float] = field(default_factory=list)
    sample_scs: List[float] = field(default_factory=list)

    def __post_init__(self):
        z = lambda: np.zeros(self.num_classes, dtype=np.int64)  # noqa: E731
        self.sc_inter, self.sc_union, self.mi_inter, self.mi_union = z(), z(), z(), z()

    def update(self, b, b_hat, m2=None, m2_hat=None) -> None:
        b, b_hat = _labels(b).astype(bool), _labels(b_hat).astype(bool)
        _same_size(b, b_hat)
        inter, union = int(np.count_nonzero(b & b_hat)), int(np.count_nonzero(b | b_hat))
        self.bc_inter += inter
        self.bc_union += union
        bc = 1.0 if union == 0 else inter / union
        self.sample_bc.append(bc)
        has_sem = m2 is not None and m2_hat is not None
        if self.semantic is None:
            self.semantic = has_sem
        elif self.semantic != has_sem:
            raise DataError("semantic predictions present for some samples only")
        if has_sem:
            m2, m2_hat = _labels(m2), _labels(m2_hat)
            _same_size(m2, m2_hat, b)
            si, su = _class_counts(m2, m2_hat, self.num_classes, where=b)
            mi, mu = _class_counts(m2, m2_hat, self.num_classes)
            self.sc_inter += si
            self.sc_union += su
            self.mi_inter += mi
            self.mi_union += mu
            self.sample_scs.append(scs(bc, _mean_iou(si, su)[0]))

    def report(self) -> MetricsReport:
        bc = 1.0 if self.bc_union == 0 else self.bc_inter / self.bc_union
        bc_counts = {"intersection": self.bc_inter, "union": self.bc_union}
        if not self.semantic:
            return MetricsReport(bc, None, None, None, bc_counts, {}, {},
                                 per_sample_bc=_avg(self.sample_bc))
        sc, sc_cls = _mean_iou(self.sc_inter, self.sc_union)
        mi, mi_cls = _mean_iou(self.mi_inter, self.mi_union)
        per_class = {
            "sc": {str(c): [int(self.sc_inter[c]), int(self.sc_union[c])] for c in range(self.num_classes)},
            "miou": {str(c): [int(self.mi_inter[c]), int(self.mi_union[c])] for c in range(self.num_classes)},
        }
        return MetricsReport(bc, sc, scs(bc, sc), mi, bc_counts, per_class,
                             {"sc": sc_cls, "miou": mi_cls}, sc_vacuous=not sc_cls,
                             per_sample_bc=_avg(self.sample_bc), per_sample_scs=_avg(self.sample_scs))


def _avg(xs: Sequence[float]) -> Optional[float]:
    return float(np.mean(xs)) if xs else None


def evaluate_pairs(num_classes: int, pairs) -> MetricsReport:
    """``pairs`` yields ``(b, b_hat, m2, m2_hat)``; the semantic pair may be ``None``."""
    counts = MetricCounts(num_classes)
    for b, b_hat, m2, m2_hat in pairs:
        counts.update(b, b_hat, m2, m2_hat)
    return counts.report()
