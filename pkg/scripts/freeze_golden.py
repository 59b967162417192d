"""Freeze a finished desk.json sweep into tests/fixtures/desk_golden.json.

    python scripts/freeze_golden.py RUN.jsonl --cpu-seconds S [--checkpoints DIR]
"""
import argparse
import hashlib
import json
import os
from pathlib import Path

from optbench.cli import checkpoint_dir_for, data_path
from optbench.harness import best_per_pair, grid_tasks, load_config, read_records, results_digest

RANGE_MODELS = ("plain_mlp-d8-w32", "res_mlp-d8-w32")


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("results")
    ap.add_argument("--cpu-seconds", type=float, required=True, help="single-core CPU time of the sweep")
    ap.add_argument("--wall-seconds", type=float, default=None)
    ap.add_argument("--checkpoints", default=None)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "desk_golden.json"))
    args = ap.parse_args()

    config = load_config(data_path("desk.json"))
    records = read_records(args.results)
    tasks = grid_tasks(config)
    if [r.key for r in records] != [t.key for t in tasks]:
        raise SystemExit("results are incomplete or out of grid order")
    whole, per_line = results_digest(args.results)
    matrix = best_per_pair(records)
    best_values, best_cells, ranges = {}, {}, {}
    for m in matrix.models:
        best_values[m] = {o: matrix.value(o, m) for o in matrix.optimizers}
        best_cells[m] = {o: {"value": c.value, "lr": c.lr, "wd": c.wd}
                         for o in matrix.optimizers for c in [matrix.cells[(o, m)]]}
        vals = list(best_values[m].values())
        ranges[m] = max(vals) - min(vals)
    ck_dir = args.checkpoints or checkpoint_dir_for(args.results)
    ck = {name: hashlib.sha256(Path(ck_dir, name).read_bytes()).hexdigest() for name in sorted(os.listdir(ck_dir))}
    doc = {
        "config": config.to_dict(),
        "records": len(records),
        "diverged": sum(r.diverged for r in records),
        "cpu_seconds": args.cpu_seconds,
        "wall_seconds": args.wall_seconds,
        "file_sha256": whole,
        "line_sha256": per_line,
        "models": matrix.models,
        "optimizers": matrix.optimizers,
        "best_values": best_values,
        "best_cells": best_cells,
        "range_models": list(RANGE_MODELS),
        "ranges": ranges,
        "checkpoint_sha256": ck,
    }
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")
    print(f"{len(records)} records, ranges {ranges} -> {args.out}")


if __name__ == "__main__":
    main()
