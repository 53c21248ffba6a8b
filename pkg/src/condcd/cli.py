"""Batch command line: ``condcd <subcommand> [--config FILE] [--set key=value ...] [--out-dir DIR]``.

Exit codes: 0 success, 1 runtime failure, 2 configuration or usage error.
Every run echoes its fully resolved configuration to stdout, then a
structured summary; artifacts go to ``--out-dir``.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from .autodiff import ConfigurationError, DataError
from .config import ConfigError, format_config, parse_config, set_key
from .fusion import export_attention_argmax
from .gradsuite import run_grad_suite
from .metrics import MetricCounts, MetricsReport
from .raster import ClassSet, RasterFormatError, read_raster, write_raster
from .synthetic import WorldConfig, generate_dataset
from .training import (Checkpoint, ExperimentConfig, TrainingAborted, evaluate, load_manifest,
                       predict, results_csv, run_matrix, train)

GRAD_TOLERANCE = 1e-5
LABEL = "# desk-scale defaults: synthetic data and a short training schedule, not a full-scale protocol"


class UsageError(Exception):
    """Bad arguments or missing inputs; maps to exit code 2."""


def _emit(line: str = "") -> None:
    sys.stdout.write(line + "\n")


def _echo(cfg) -> None:
    _emit(LABEL)
    _emit("[config]")
    sys.stdout.write(format_config(cfg))
    _emit("[result]")


def _out_dir(args) -> Optional[Path]:
    if args.out_dir is None:
        return None
    path = Path(args.out_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require_file(path, what: str) -> Path:
    if not path:
        raise UsageError(f"{what} path is empty")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {p}")
    return p


def _experiment(args) -> ExperimentConfig:
    return parse_config(ExperimentConfig, args.config, args.set)


def _report_summary(report: MetricsReport) -> str:
    fields = [("bc", report.bc), ("sc", report.sc), ("scs", report.scs), ("miou", report.miou)]
    return " ".join(f"{k}={v!r}" for k, v in fields if v is not None)


# ---------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    cfg = parse_config(WorldConfig, args.config, args.set)
    _echo(cfg)
    out = _out_dir(args)
    if out is None:
        raise UsageError("gen-data needs --out-dir")
    manifest = generate_dataset(cfg, args.n, out, first_index=args.first_index)
    _emit(json.dumps({"manifest": str(manifest), "samples": args.n, "first_index": args.first_index}))
    return 0


def cmd_train(args) -> int:
    cfg = _experiment(args)
    _echo(cfg)
    data = load_manifest(_require_file(cfg.data.train_manifest, "train manifest"))
    resume = Checkpoint.load(_require_file(args.resume, "checkpoint")) if args.resume else None
    out = _out_dir(args)
    log_path = out / "loss_log.jsonl" if out else None
    result = train(cfg, data, resume=resume, log_path=log_path)
    if out:
        result.checkpoint.save(out / "checkpoint.cdp")
    last = json.loads(result.log[-1]) if result.log else {}
    _emit(json.dumps({"steps": result.checkpoint.step, "config_hash": result.checkpoint.config_hash,
                      "last": last}, sort_keys=True))
    return 0


def _checkpoint_and_data(args):
    ckpt = Checkpoint.load(_require_file(args.checkpoint, "checkpoint"))
    cfg = copy.deepcopy(ckpt.config)
    for i, ov in enumerate(args.set, start=1):
        try:
            set_key(cfg, *[s.strip() for s in ov.split("=", 1)])
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(str(exc).strip("'\""), i, "--set") from exc
    manifest = args.manifest or cfg.data.test_manifest
    data = load_manifest(_require_file(manifest, "manifest"))
    return ckpt, cfg, data


def cmd_eval(args) -> int:
    ckpt, cfg, data = _checkpoint_and_data(args)
    _echo(cfg)
    report = evaluate(ckpt, data, args.mode)
    out = _out_dir(args)
    if out:
        (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    _emit(_report_summary(report))
    _emit(report.to_json())
    return 0


def cmd_predict(args) -> int:
    ckpt, cfg, data = _checkpoint_and_data(args)
    _echo(cfg)
    out = _out_dir(args)
    if out is None:
        raise UsageError("predict needs --out-dir")
    data.class_set.save(out / "classes.txt")
    written = 0
    for i, b_hat, m_hat, _ in predict(ckpt, data, args.mode):
        sid = data.ids[i]
        write_raster(b_hat, out / f"{sid}_change.cdr")
        if m_hat is not None:
            write_raster(m_hat, out / f"{sid}_map_post.cdr")
        written += 1
    _emit(json.dumps({"samples": written, "out_dir": str(out)}))
    return 0


def cmd_export_attention(args) -> int:
    ckpt, cfg, data = _checkpoint_and_data(args)
    _echo(cfg)
    if cfg.fusion.kind != "mapformer":
        raise UsageError("export-attention needs a mapformer checkpoint")
    out = _out_dir(args)
    if out is None:
        raise UsageError("export-attention needs --out-dir")
    try:
        channels = [int(c) for c in args.channels.split(",") if c.strip()]
    except ValueError as exc:
        raise UsageError(f"--channels must be comma-separated integers: {exc}") from exc
    count = 0
    for i, _, _, attn in predict(ckpt, data, args.mode, keep_attention=True):
        if args.limit and count >= args.limit:
            break
        export_attention_argmax(attn, channels, out / data.ids[i])
        count += 1
    _emit(json.dumps({"samples": count, "channels": channels, "scales": len(cfg.encoder.channels)}))
    return 0


def cmd_grad_check(args) -> int:
    _emit(LABEL)
    _emit("[result]")
    results = run_grad_suite(seed=args.seed)
    worst = 0.0
    for name, err in results.items():
        status = "ok" if err < GRAD_TOLERANCE else "FAIL"
        _emit(f"{name} worst_rel_err={err:.3e} {status}")
        worst = max(worst, err)
    _emit(json.dumps({"worst": worst, "tolerance": GRAD_TOLERANCE, "ops": len(results)}))
    return 0 if worst < GRAD_TOLERANCE else 1


def _prediction_ids(directory: Path) -> List[str]:
    return sorted(p.name[:-len("_change.cdr")] for p in directory.glob("*_change.cdr"))


def cmd_metrics(args) -> int:
    pred, gt = Path(args.pred), Path(args.gt)
    for p, what in ((pred, "prediction directory"), (gt, "ground-truth directory")):
        if not p.is_dir():
            raise UsageError(f"{what} not found: {p}")
    _emit(LABEL)
    _emit("[result]")
    ids = _prediction_ids(gt)
    if not ids:
        raise UsageError(f"no *_change.cdr rasters in {gt}")
    class_file = gt / "classes.txt"
    n_cls = len(ClassSet.load(class_file)) if class_file.exists() else None
    stacks = []
    for sid in ids:
        b = read_raster(gt / f"{sid}_change.cdr")[0]
        pred_b = pred / f"{sid}_change.cdr"
        if not pred_b.exists():
            raise DataError(f"prediction missing for sample {sid}")
        b_hat = read_raster(pred_b)[0]
        m2_path, m2_hat_path = gt / f"{sid}_map_post.cdr", pred / f"{sid}_map_post.cdr"
        if m2_path.exists() and m2_hat_path.exists():
            stacks.append((b, b_hat, read_raster(m2_path, n_cls)[0], read_raster(m2_hat_path, n_cls)[0]))
        else:
            stacks.append((b, b_hat, None, None))
    if n_cls is None:
        n_cls = max([int(s[2].max()) + 1 for s in stacks if s[2] is not None] +
                    [int(s[3].max()) + 1 for s in stacks if s[3] is not None] + [2])
    counts = MetricCounts(n_cls)
    for b, b_hat, m2, m2_hat in stacks:
        counts.update(b, b_hat, m2, m2_hat)
    report = counts.report()
    out = _out_dir(args)
    if out:
        (out / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    _emit(_report_summary(report))
    _emit(report.to_json())
    return 0


def cmd_run_matrix(args) -> int:
    base = _experiment(args)
    _echo(base)
    variants = args.variant or [""]
    try:
        seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    except ValueError as exc:
        raise UsageError(f"--seeds must be comma-separated integers: {exc}") from exc
    configs = []
    for v in variants:
        for seed in seeds:
            cfg = copy.deepcopy(base)
            for i, item in enumerate(v.split(), start=1):
                try:
                    set_key(cfg, *[s.strip() for s in item.split("=", 1)])
                except (KeyError, ValueError, TypeError) as exc:
                    raise ConfigError(str(exc).strip("'\""), i, f"--variant {v!r}") from exc
            cfg.seed = seed
            configs.append(cfg)
    for path, what in ((base.data.train_manifest, "train manifest"), (base.data.test_manifest, "test manifest")):
        _require_file(path, what)
    out = _out_dir(args)
    rows = run_matrix(configs, csv_path=out / "results.csv" if out else None)
    sys.stdout.write(results_csv(rows))
    return 1 if any(r.error for r in rows) else 0


# ---------------------------------------------------------------- parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condcd", description="Map-conditioned change detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="key = value configuration file")
            p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                           help="override applied after the file (repeatable)")
        p.add_argument("--out-dir", help="directory for all written artifacts")
        return p

    p = common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    p.add_argument("--n", type=int, default=200, help="number of samples")
    p.add_argument("--first-index", type=int, default=0, help="world index of the first sample")
    p.set_defaults(func=cmd_gen_data)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    for name, func, text in (("eval", cmd_eval, "score a checkpoint on a manifest"),
                             ("predict", cmd_predict, "write change (and semantic) predictions"),
                             ("export-attention", cmd_export_attention, "write attention argmax rasters")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--manifest", help="defaults to the checkpoint's data.test_manifest")
        p.add_argument("--mode", choices=["none", "high_level", "low_res", "predicted_premap"],
                       help="map degradation at inference (defaults to the training setting)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out-dir")
        if name == "export-attention":
            p.add_argument("--channels", default="0", help="comma-separated feature channel ids")
            p.add_argument("--limit", type=int, default=0, help="export at most this many samples")
        p.set_defaults(func=func)

    p = common(sub.add_parser("grad-check", help="finite-difference suite"), config=False)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = common(sub.add_parser("metrics", help="score a prediction directory against ground truth"), config=False)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_metrics)

    p = common(sub.add_parser("run-matrix", help="train and evaluate a grid of configurations"))
    p.add_argument("--variant", action="append", default=[],
                   help="whitespace-separated key=value overrides defining one grid row (repeatable)")
    p.add_argument("--seeds", help="comma-separated seeds applied to every variant")
    p.set_defaults(func=cmd_run_matrix)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ConfigurationError, UsageError, FileNotFoundError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2
    except (DataError, RasterFormatError, TrainingAborted, OSError) as exc:
        sys.stderr.write(f"failed: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
