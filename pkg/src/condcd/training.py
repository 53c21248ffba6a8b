"""Deterministic training, evaluation and experiment grids."""
from __future__ import annotations

import copy
import csv
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, DataError
from .config import config_hash, format_config, parse_config
from .encoders import EncoderConfig
from .fusion import FUSION_KINDS, REGIMES, FusionConfig
from .heads import HeadConfig, LossReport, total_loss
from .metrics import MetricCounts, MetricsReport
from .model import ModelSpec, forward, init_params, predicted_premap_labels
from .params import Params, decode_table, encode_table
from .raster import (ClassSet, SemanticMap, degrade_resolution, merge_classes, parse_mapping,
                     read_raster)
from .synthetic import stream

log = logging.getLogger(__name__)

SCHEDULES = ("constant", "cosine")
DEGRADATIONS = ("none", "high_level", "low_res", "predicted_premap")
RESULTS_HEADER = ["regime", "fusion", "K", "seed", "bc", "sc", "scs", "miou", "wall_s"]


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "constant"  # or "cosine": decays to 0 at the final step


@dataclass
class DataConfig:
    train_manifest: str = ""
    test_manifest: str = ""


@dataclass
class DegradationConfig:
    kind: str = "none"
    factor: int = 8
    mapping: str = "0:0,1:0,2:0,3:1,4:1"


@dataclass
class ExperimentConfig:
    regime: str = "conditional"
    fusion: FusionConfig = field(default_factory=FusionConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    heads: HeadConfig = field(default_factory=HeadConfig)
    optim: AdamConfig = field(default_factory=AdamConfig)
    data: DataConfig = field(default_factory=DataConfig)
    degradation: DegradationConfig = field(default_factory=DegradationConfig)
    batch_size: int = 4
    steps: int = 2000
    eval_every: int = 0
    seed: int = 0

    def validate(self) -> None:
        if self.regime not in REGIMES:
            raise ConfigurationError(f"ExperimentConfig.regime must be one of {REGIMES}, got {self.regime!r}")
        self.fusion.regime = self.regime
        self.fusion.validate()
        self.encoder.validate()
        self.heads.validate()
        if self.optim.lr <= 0:
            raise ConfigurationError("AdamConfig.lr must be > 0")
        if not (0 <= self.optim.beta1 < 1 and 0 <= self.optim.beta2 < 1) or self.optim.eps <= 0:
            raise ConfigurationError("AdamConfig.beta1/beta2 must lie in [0, 1) and eps > 0")
        if self.optim.schedule not in SCHEDULES:
            raise ConfigurationError(f"AdamConfig.schedule must be one of {SCHEDULES}")
        if self.steps <= 0:
            raise ConfigurationError("ExperimentConfig.steps must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("ExperimentConfig.batch_size must be >= 1")
        if self.eval_every < 0:
            raise ConfigurationError("ExperimentConfig.eval_every must be >= 0")
        d = self.degradation
        if d.kind not in DEGRADATIONS:
            raise ConfigurationError(f"DegradationConfig.kind must be one of {DEGRADATIONS}")
        if d.factor < 1:
            raise ConfigurationError("DegradationConfig.factor must be >= 1")
        if d.kind != "none" and not self.fusion.uses_map:
            raise ConfigurationError("DegradationConfig.kind: map degradations need a regime with a map input")
        if d.kind == "predicted_premap" and (self.heads.scd_placement != "on_post_features"
                                             or self.regime != "conditional"):
            raise ConfigurationError("DegradationConfig.kind predicted_premap needs the conditional regime "
                                     "and heads.scd_placement = on_post_features")
        if d.kind == "high_level":
            try:
                parse_mapping(d.mapping)
            except ValueError as exc:
                raise ConfigurationError(f"DegradationConfig.mapping is malformed: {exc}") from exc


def load_experiment_config(text: str) -> ExperimentConfig:
    return parse_config(ExperimentConfig, text=text)


# ---------------------------------------------------------------- data


@dataclass
class Dataset:
    ids: List[str]
    img_pre: np.ndarray
    img_post: np.ndarray
    map_pre: np.ndarray
    map_post: np.ndarray
    change: np.ndarray
    class_set: ClassSet

    def __len__(self) -> int:
        return len(self.ids)

    def subset(self, idx) -> Dict[str, np.ndarray]:
        return {"img_pre": self.img_pre[idx], "img_post": self.img_post[idx], "map_pre": self.map_pre[idx],
                "map_post": self.map_post[idx], "change": self.change[idx]}


def load_manifest(path) -> Dataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    class_file = root / "classes.txt"
    class_set = ClassSet.load(class_file) if class_file.exists() else None
    n_cls = len(class_set) if class_set else None
    ids, cols = [], [[] for _ in range(5)]
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 7:
            raise DataError(f"{path}:{lineno}: expected 7 tab-separated fields, got {len(parts)}")
        ids.append(parts[0])
        for k, rel in enumerate(parts[1:6]):
            arr = read_raster(root / rel, num_classes=n_cls if k >= 2 else None)
            cols[k].append(arr if k < 2 else arr[0])
    if not ids:
        raise DataError(f"{path}: manifest lists no samples")
    img_pre, img_post, m1, m2, ch = (np.stack(c) for c in cols)
    if class_set is None:
        class_set = ClassSet.numbered(max(int(m1.max()), int(m2.max()), 1) + 1)
    if not np.array_equal(ch, (m1 != m2).astype(np.uint8)):
        raise DataError(f"{path}: change masks disagree with the pre/post maps")
    return Dataset(ids, img_pre, img_post, m1, m2, ch, class_set)


def map_class_count(cfg: ExperimentConfig, num_classes: int) -> int:
    if cfg.degradation.kind == "high_level":
        return max(max(parse_mapping(cfg.degradation.mapping).values()) + 1, 2)
    return num_classes


def degrade_maps(cfg: ExperimentConfig, maps: np.ndarray, class_set: ClassSet) -> np.ndarray:
    """Apply the configured input degradation to a stack of pre-change maps."""
    kind = cfg.degradation.kind
    if kind in ("none", "predicted_premap"):
        return maps
    out = []
    for lab in maps:
        m = SemanticMap(lab, class_set)
        if kind == "high_level":
            m = merge_classes(m, parse_mapping(cfg.degradation.mapping))
        else:
            m = degrade_resolution(m, cfg.degradation.factor)
        out.append(m.labels)
    return np.stack(out)


def model_spec(cfg: ExperimentConfig, num_classes: int) -> ModelSpec:
    return ModelSpec(cfg.encoder, cfg.fusion, cfg.heads, num_classes, map_class_count(cfg, num_classes))


# ---------------------------------------------------------------- optimiser


class Adam:
    """Bias-corrected Adam over parameters visited in sorted-name order."""

    def __init__(self, params: Params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** self.t
        c2 = 1 - b2 ** self.t
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            dt = p.data.dtype
            self.m[name] = (b1 * self.m[name] + (1 - b1) * g).astype(dt)
            self.v[name] = (b2 * self.v[name] + (1 - b2) * g * g).astype(dt)
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            p.data = (p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(dt)


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    config: ExperimentConfig
    num_classes: int
    params: Params
    adam_m: Dict[str, np.ndarray]
    adam_v: Dict[str, np.ndarray]
    step: int

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)

    def to_bytes(self) -> bytes:
        arrays = {f"param/{n}": t.data for n, t in self.params.items()}
        arrays.update({f"adam.m/{n}": a for n, a in self.adam_m.items()})
        arrays.update({f"adam.v/{n}": a for n, a in self.adam_v.items()})
        arrays["meta/num_classes"] = np.array([self.num_classes], dtype=np.float32)
        header = format_config(self.config)
        return encode_table(arrays, self.step, header)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        arrays, step, header = decode_table(buf)
        cfg = load_experiment_config(header)
        params = {n[6:]: ad.Tensor(a, requires_grad=True) for n, a in arrays.items() if n.startswith("param/")}
        m = {n[7:]: a for n, a in arrays.items() if n.startswith("adam.m/")}
        v = {n[7:]: a for n, a in arrays.items() if n.startswith("adam.v/")}
        return cls(cfg, int(arrays["meta/num_classes"][0]), params, m, v, step)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------- training


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, last_report: Optional[LossReport]):
        self.step, self.last_report = step, last_report
        last = last_report.to_json(step - 1) if last_report else "none"
        super().__init__(f"non-finite loss at step {step}; last finite report: {last}")


def learning_rate(optim: AdamConfig, step: int, total: int) -> float:
    """Step size for 0-based ``step``; a function of the step alone so resumed runs match."""
    if optim.schedule == "cosine":
        return optim.lr * 0.5 * (1.0 + math.cos(math.pi * step / total))
    return optim.lr


def batch_indices(seed: int, n: int, batch_size: int, step: int) -> np.ndarray:
    """Indices for 0-based ``step``: consecutive slices of per-epoch seeded permutations."""
    start = step * batch_size
    out = []
    while len(out) < batch_size:
        epoch, offset = divmod(start + len(out), n)
        perm = stream(seed, 0xBA7C, epoch).permutation(n)
        out.extend(perm[offset:offset + batch_size - len(out)].tolist())
    return np.array(out)


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: List[str]


def _prepare(cfg: ExperimentConfig, data: Dataset) -> Dataset:
    maps = degrade_maps(cfg, data.map_pre, data.class_set)
    return Dataset(data.ids, data.img_pre, data.img_post, maps, data.map_post, data.change, data.class_set)


def train_step(spec: ModelSpec, cfg: ExperimentConfig, params: Params, opt: Adam,
               batch: Dict[str, np.ndarray]) -> LossReport:
    opt.zero_grad()
    out = forward(spec, params, batch)
    targets = {"change": batch["change"], "map_post": batch["map_post"]}
    loss, report = total_loss(out, targets, cfg.heads)
    if not np.isfinite(report.total):
        return report
    ad.backward(loss)
    opt.step()
    return report


def train(cfg: ExperimentConfig, data: Optional[Dataset] = None, resume: Optional[Checkpoint] = None,
          steps: Optional[int] = None, log_path=None) -> TrainResult:
    """Train from scratch (or resume) for ``cfg.steps`` total steps.

    ``steps`` caps how many steps run in this call.
    """
    cfg.validate()
    if data is None:
        if not cfg.data.train_manifest:
            raise ConfigurationError("DataConfig.train_manifest is empty")
        data = load_manifest(cfg.data.train_manifest)
    num_classes = len(data.class_set)
    spec = model_spec(cfg, num_classes)
    prepared = _prepare(cfg, data)
    if resume is not None:
        if resume.num_classes != num_classes:
            raise DataError("checkpoint class count differs from the data")
        params, start = resume.params, resume.step
    else:
        params, start = init_params(spec, cfg.seed), 0
    opt = Adam(params, cfg.optim.lr, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    if resume is not None:
        opt.m = {n: a.copy() for n, a in resume.adam_m.items()}
        opt.v = {n: a.copy() for n, a in resume.adam_v.items()}
        opt.t = resume.step
    end = cfg.steps if steps is None else min(cfg.steps, start + steps)
    lines: List[str] = []
    sink = open(log_path, "a" if resume else "w", encoding="utf-8") if log_path else None
    last: Optional[LossReport] = None
    try:
        for step in range(start, end):
            idx = batch_indices(cfg.seed, len(prepared), cfg.batch_size, step)
            opt.lr = learning_rate(cfg.optim, step, cfg.steps)
            report = train_step(spec, cfg, params, opt, prepared.subset(idx))
            if not np.isfinite(report.total):
                raise TrainingAborted(step + 1, last)
            last = report
            line = report.to_json(step + 1)
            lines.append(line)
            if sink:
                sink.write(line + "\n")
            if cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                log.info("step %d total %.5f", step + 1, report.total)
    finally:
        if sink:
            sink.close()
    ckpt = Checkpoint(cfg, num_classes, params, opt.m, opt.v, end)
    return TrainResult(ckpt, lines)


# ---------------------------------------------------------------- evaluation


def predict(ckpt: Checkpoint, data: Dataset, mode: Optional[str] = None, batch_size: int = 10,
            keep_attention: bool = False):
    """Yield ``(index, b_hat, m2_hat or None, attention list)`` per sample."""
    cfg = copy.deepcopy(ckpt.config)
    if mode is not None:
        cfg.degradation.kind = mode
        cfg.validate()
    if len(data.class_set) != ckpt.num_classes:
        raise DataError(f"checkpoint expects {ckpt.num_classes} classes, data has {len(data.class_set)}")
    spec = model_spec(cfg, ckpt.num_classes)
    if spec.map_classes != model_spec(ckpt.config, ckpt.num_classes).map_classes:
        raise ConfigurationError("evaluation mode changes the map class count the model was trained on")
    prepared = _prepare(cfg, data)
    for lo in range(0, len(data), batch_size):
        idx = np.arange(lo, min(lo + batch_size, len(data)))
        batch = prepared.subset(idx)
        batch.pop("change")
        if cfg.degradation.kind == "predicted_premap":
            batch["map_pre"] = predicted_premap_labels(spec, ckpt.params, batch["img_pre"])
        with ad.no_grad():
            out = forward(spec, ckpt.params, batch, keep_attention=keep_attention)
        b_hat = out["binary_logits"].data.argmax(axis=-3).astype(np.uint8)
        sem = out.get("semantic_logits")
        m_hat = sem.data.argmax(axis=-3).astype(np.uint8) if sem is not None else None
        for j, i in enumerate(idx):
            attn = [a.data[j] for a in out["attention"]] if keep_attention else []
            yield int(i), b_hat[j], (m_hat[j] if m_hat is not None else None), attn


def evaluate(ckpt: Checkpoint, data: Dataset, mode: Optional[str] = None) -> MetricsReport:
    counts = MetricCounts(ckpt.num_classes)
    for i, b_hat, m_hat, _ in predict(ckpt, data, mode):
        if m_hat is None:
            counts.update(data.change[i], b_hat)
        else:
            counts.update(data.change[i], b_hat, data.map_post[i], m_hat)
    return counts.report()


# ---------------------------------------------------------------- experiment grids


@dataclass
class MatrixRow:
    config: ExperimentConfig
    report: Optional[MetricsReport]
    wall_s: float
    error: Optional[str] = None

    def key(self):
        c = self.config
        return (c.regime, c.fusion.kind, c.fusion.K, c.seed)

    def csv_fields(self) -> List[str]:
        c = self.config
        r = self.report

        def f(x):
            return "" if x is None else f"{x:.6f}"

        vals = [f(r.bc), f(r.sc), f(r.scs), f(r.miou)] if r else ["", "", "", ""]
        return [c.regime, c.fusion.kind, str(c.fusion.K), str(c.seed), *vals, f"{self.wall_s:.3f}"]


def run_matrix(configs: Iterable[ExperimentConfig], train_data: Optional[Dataset] = None,
               test_data: Optional[Dataset] = None, csv_path=None) -> List[MatrixRow]:
    """Train and evaluate each config; failures are recorded per row and the grid continues."""
    rows = []
    cache: Dict[str, Dataset] = {}

    def get(path, given):
        if given is not None:
            return given
        if path not in cache:
            cache[path] = load_manifest(path)
        return cache[path]

    for cfg in configs:
        t0 = time.process_time()
        try:
            cfg.validate()
            tr = get(cfg.data.train_manifest, train_data)
            te = get(cfg.data.test_manifest, test_data)
            result = train(cfg, tr)
            report = evaluate(result.checkpoint, te)
            rows.append(MatrixRow(cfg, report, time.process_time() - t0))
        except Exception as exc:  # recorded per row by contract
            log.error("config %s failed: %s", config_hash(cfg)[:12], exc)
            rows.append(MatrixRow(cfg, None, time.process_time() - t0, str(exc)))
    rows.sort(key=MatrixRow.key)
    if csv_path is not None:
        Path(csv_path).write_text(results_csv(rows), encoding="utf-8")
    return rows


def results_csv(rows: Sequence[MatrixRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULTS_HEADER)
    for r in rows:
        w.writerow(r.csv_fields())
    return buf.getvalue()
