"""Run the reference ordering, cross-modal and ablation grid and report the claims.

Usage: python scripts/run_experiments.py OUT_DIR [--seeds 0,1,2] [--steps 2000] [--no-ablations]
"""
import argparse
import json
import time
from pathlib import Path

from condcd import protocol
from condcd.training import load_manifest, results_csv, run_matrix


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out_dir")
    ap.add_argument("--seeds", default=",".join(map(str, protocol.SEEDS)))
    ap.add_argument("--steps", type=int, default=protocol.STEPS)
    ap.add_argument("--no-ablations", action="store_true")
    args = ap.parse_args()
    out = Path(args.out_dir)
    manifests = protocol.write_reference_data(out / "data")
    train, test = (load_manifest(m) for m in manifests)
    seeds = [int(s) for s in args.seeds.split(",")]
    t0 = time.process_time()
    results, rows = [], []
    for label, cfg in protocol.grid(manifests, seeds, args.steps, not args.no_ablations):
        row = run_matrix([cfg], train, test)[0]
        rows.append(row)
        results += protocol.from_rows([label], [row])
        bc = "failed" if row.report is None else f"{row.report.bc:.4f}"
        print(f"{label} seed={cfg.seed} bc={bc} cpu_s={row.wall_s:.1f}", flush=True)
    (out / "results.csv").write_text(results_csv(rows), encoding="utf-8")
    medians = protocol.summarize(results)
    claims = protocol.check_claims(medians)
    summary = {"medians": medians, "cpu_s": time.process_time() - t0,
               "claims": {name: {"passed": ok, "detail": detail} for name, ok, detail in claims}}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    for name, ok, detail in claims:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")


if __name__ == "__main__":
    main()
