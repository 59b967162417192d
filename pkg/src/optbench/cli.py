"""``optbench`` command line: bench, analyze, diagnose, rank, export, gradcheck.

Exit codes: 0 success, 2 bad configuration or input, 3 I/O failure, 4 failed check.
"""
import argparse
import json
import os
import sys
from importlib import resources

import numpy as np

from . import bocb
from .checkpoint import CheckpointError, write_checkpoint
from .datasets import ConfigError, DatasetSpec, generate_dataset
from .diagnostics import DEFAULT_BINS, DEFAULT_K_RULE, layer_sweep, parse_k_rule, ridge_csv
from .harness import (
    best_per_pair,
    load_config,
    read_records,
    run_grid,
    run_seed_for,
    run_training,
)
from .models import FAMILIES, ModelSpec, build_model, gradcheck

EXIT_OK, EXIT_INPUT, EXIT_IO, EXIT_CHECK = 0, 2, 3, 4
GRADCHECK_TOL = 1e-6
DEFAULT_GRADCHECK_MODELS = ("linear", "plain_mlp", "res_mlp:depth=4", "patch_mixer", "quad_bowl")


class InputError(Exception):
    pass


class OutputExists(OSError):
    pass


def data_path(name):
    """Path of a bundled fixture (``desk.json``, ``accuracy_matrix.csv``, ``rank_table.csv``)."""
    return str(resources.files("optbench") / "data" / name)


def default_workers():
    env = os.environ.get("OPTBENCH_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise InputError(f"OPTBENCH_WORKERS must be an integer, got {env!r}") from None
        if n < 1:
            raise InputError("OPTBENCH_WORKERS must be >= 1")
        return n
    return os.cpu_count() or 1


def _guard(path, force):
    if os.path.exists(path) and not force:
        raise OutputExists(f"{path} exists; pass --force to overwrite")


def _write(path, data, force):
    _guard(path, force)
    tmp = f"{path}.tmp"
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(tmp, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
        fh.write(data)
    os.replace(tmp, path)


def _sibling(path, suffix):
    root, _ = os.path.splitext(path)
    return root + suffix


def _log(args, msg):
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


# -- bench -------------------------------------------------------------------

def checkpoint_dir_for(out):
    return _sibling(out, "_checkpoints")


def checkpoint_name(model, optimizer):
    return f"{model}__{optimizer}.owb"


def write_best_checkpoints(config, records, directory, overwrite):
    """Retrain each (model, optimizer) best cell with the first seed and save its weights."""
    os.makedirs(directory, exist_ok=True)
    matrix = best_per_pair(records)
    first_seed = config.seeds[0]
    specs = {s.name: s for s in config.models}
    written = []
    for (opt, model_name), cell in matrix.cells.items():
        if cell is None or model_name not in specs:
            continue
        path = os.path.join(directory, checkpoint_name(model_name, opt))
        if os.path.exists(path) and not overwrite:
            continue
        spec = specs[model_name]
        grid = config.family_lr_grid(opt)
        i, j = grid.index(cell.lr), list(config.wd_grid).index(cell.wd)
        ds_spec = config.dataset_for(spec)
        ds = None if ds_spec is None else generate_dataset(ds_spec)
        rs = run_seed_for(config.base_seed, spec.name, opt, i, j, first_seed)
        rec, model = run_training(spec, opt, cell.lr, cell.wd, first_seed, ds, config.schedule, rs, keep_model=True)
        meta = {"model": model_name, "optimizer": opt, "lr": cell.lr, "wd": cell.wd,
                "seed": first_seed, "epoch": len(rec.curve_acc), "diverged": rec.diverged}
        write_checkpoint(path, model.params, meta)
        written.append(path)
    return written


def cmd_bench(args):
    config = load_config(args.config)
    workers = args.workers if args.workers is not None else default_workers()
    if workers < 1:
        raise InputError("--workers must be >= 1")
    if os.path.exists(args.out) and not (args.resume or args.force):
        raise OutputExists(f"{args.out} exists; pass --resume to continue it or --force to overwrite")
    if args.force and not args.resume and os.path.exists(args.out):
        os.remove(args.out)
    total = [0]

    def progress(done, todo, rec):
        total[0] = todo
        if done % args.progress_every == 0 or done == todo:
            _log(args, f"[{done}/{todo}] {rec.model} {rec.optimizer} lr={rec.lr:g} wd={rec.wd:g} seed={rec.seed}")

    records = run_grid(config, args.out, resume=args.resume, workers=workers, progress=progress)
    ckpt_dir = args.checkpoints or checkpoint_dir_for(args.out)
    written = write_best_checkpoints(config, records, ckpt_dir, overwrite=args.force)
    diverged = sum(r.diverged for r in records)
    print(f"{len(records)} records ({total[0]} new, {diverged} diverged) -> {args.out}; "
          f"{len(written)} checkpoints -> {ckpt_dir}")
    return EXIT_OK


# -- analyze -----------------------------------------------------------------

def load_results(path):
    """Return ``(matrix, records)``; records is None for a transcribed CSV table."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"results file not found: {path}")
    if path.endswith(".csv"):
        return bocb.read_matrix_csv(path), None
    try:
        records = read_records(path)
    except (ValueError, KeyError, TypeError) as exc:
        raise InputError(f"{path}: malformed results ({exc})") from exc
    if not records:
        raise InputError(f"{path} holds no results")
    return best_per_pair(records), records


def _variation_from_optima(path, mode):
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
            optima = [(float(lr), float(wd)) for lr, wd in doc["optima"]]
            lr_grid = [float(x) for x in doc["lr_grid"]]
            wd_grid = [float(x) for x in doc["wd_grid"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}: expected {{optima, lr_grid, wd_grid}} ({exc})") from exc
    total, lr_m, wd_m = bocb.hyper_variation(optima, lr_grid, wd_grid, mode)
    return {"mode": mode, "variation": total, "lr_mode": lr_m, "wd_mode": wd_m, "n": len(optima)}


def cmd_analyze(args):
    if args.what == "variation" and args.results.endswith(".json"):
        if not os.path.exists(args.results):
            raise FileNotFoundError(f"results file not found: {args.results}")
        report = _variation_from_optima(args.results, args.mode)
        _write(args.out, bocb.dump_json(report), args.force)
        print(f"variation ({args.mode}) = {report['variation']}")
        return EXIT_OK
    matrix, records = load_results(args.results)
    if args.what == "bocb":
        report = bocb.bocb_report(matrix, args.gamma)
        values_csv, flags_csv = _sibling(args.out, ".values.csv"), _sibling(args.out, ".flags.csv")
        for p in (args.out, values_csv, flags_csv):
            _guard(p, args.force)
        _write(args.out, bocb.dump_json(report.to_dict()), args.force)
        _write(values_csv, bocb.matrix_csv(matrix), args.force)
        _write(flags_csv, bocb.matrix_csv(matrix, report.flag_matrix()), args.force)
        for m in report.per_model:
            print(f"{m.model}: threshold {m.threshold:.4f} flagged {', '.join(m.flagged) or '-'}")
    elif args.what == "stats":
        report = bocb.stats_report(matrix)
        _write(args.out, bocb.dump_json(report), args.force)
        for model, s in report.items():
            print(f"{model}: mean {s['mean']:.4f} std {s['std']:.4f} range {s['range']:.4f}")
    else:
        if records is None:
            raise InputError("variation needs harness JSONL (with optima) or an optima JSON file")
        out = {axis: bocb.variation_report(matrix, records, axis, args.mode).to_dict()
               for axis in ("by-optimizer", "by-backbone")}
        _write(args.out, bocb.dump_json(out), args.force)
        for ent, v in out["by-optimizer"]["variation"].items():
            print(f"{ent}: {v}")
    return EXIT_OK


# -- diagnose / rank / export --------------------------------------------------

def cmd_diagnose(args):
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    try:
        parse_k_rule(args.k_rule)
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    if args.bins < 2:
        raise InputError("--bins must be >= 2")
    records = layer_sweep(args.checkpoint, bins=args.bins, k_rule=args.k_rule)
    _write(args.out, ridge_csv(records), args.force)
    print(f"{len(records)} layers -> {args.out}")
    return EXIT_OK


def _parse_weights(text):
    try:
        w = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise InputError(f"--weights must be four comma-separated numbers, got {text!r}") from None
    if len(w) != 4:
        raise InputError("--weights needs exactly four values")
    return w


def cmd_rank(args):
    if not os.path.exists(args.table):
        raise FileNotFoundError(f"rank table not found: {args.table}")
    table = bocb.rank_optimizers(bocb.read_rank_csv(args.table), _parse_weights(args.weights))
    _write(args.out, bocb.dump_json(table.to_dict()), args.force)
    for r in table.rows:
        print(f"{r.overall:3d}  {r.optimizer:<10s} score {r.score:.4f}")
    return EXIT_OK


def cmd_export(args):
    matrix, _ = load_results(args.results)
    if args.format == "csv":
        text = bocb.matrix_csv(matrix)
    else:
        cells = []
        for (opt, model), c in matrix.cells.items():
            if c is not None:
                cells.append({"optimizer": opt, "model": model, "value": c.value, "lr": c.lr,
                              "wd": c.wd, "n_seeds": c.n_seeds, "all_diverged": c.all_diverged})
        text = bocb.dump_json({"optimizers": matrix.optimizers, "models": matrix.models, "cells": cells})
    _write(args.out, text, args.force)
    print(f"{len(matrix.optimizers)} x {len(matrix.models)} matrix -> {args.out}")
    return EXIT_OK


# -- gradcheck ---------------------------------------------------------------

def parse_model_arg(text):
    """``family[:key=value,...]``, e.g. ``res_mlp:depth=4,width=16``."""
    family, _, rest = text.partition(":")
    if family not in FAMILIES:
        raise InputError(f"unknown model family {family!r} (have {', '.join(FAMILIES)})")
    fields = {"family": family}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq or key not in ModelSpec.__dataclass_fields__ or key == "family":
            raise InputError(f"bad model option {item!r}")
        fields[key] = value if key in ("name", "taxonomy_tag") else (float(value) if key == "cond" else int(value))
    return ModelSpec.from_dict(fields)


def gradcheck_case(spec, seed):
    """Model initialised from ``seed`` plus a 16-row batch from a matching dataset."""
    spec = ModelSpec.from_dict({**spec.to_dict(), "init_seed": seed})
    if spec.family == "quad_bowl":
        return build_model(spec), None
    if spec.family == "patch_mixer":
        ds_spec = DatasetSpec(kind="patchgrid", classes=4, samples_per_class=10, noise=1.0, seed=seed)
    else:
        ds_spec = DatasetSpec(kind="spirals", classes=3, samples_per_class=10, noise=0.2, seed=seed)
    ds = generate_dataset(ds_spec)
    model = build_model(spec, ds.input_dim, ds.classes)
    return model, (ds.x_train[:16], ds.y_train[:16])


def _corrupt(grads):
    out = dict(grads)
    name = next(iter(out))
    g = out[name].copy()
    g.reshape(-1)[:] += 1.0
    out[name] = g
    return out


def cmd_gradcheck(args):
    specs = [parse_model_arg(m) for m in getattr(args, "model", DEFAULT_GRADCHECK_MODELS)]
    worst = 0.0
    for spec in specs:
        model, batch = gradcheck_case(spec, args.seed)
        err = gradcheck(model, batch, seed=args.seed, grad_hook=_corrupt if args.corrupt_grad else None)
        worst = max(worst, err)
        print(f"{spec.name:<24s} max rel err {err:.3e}  {'ok' if err <= GRADCHECK_TOL else 'FAIL'}")
    return EXIT_OK if worst <= GRADCHECK_TOL else EXIT_CHECK


# -- entry ---------------------------------------------------------------------

def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = argparse.ArgumentParser(prog="optbench", description="Optimizer x backbone benchmark toolkit.", formatter_class=fmt)
    sub = p.add_subparsers(dest="verb", required=True)

    b = sub.add_parser("bench", help="run the lr x wd grid and save best-cell checkpoints", formatter_class=fmt)
    b.add_argument("--config", required=True, help="benchmark JSON (bundled: desk.json)")
    b.add_argument("--out", required=True, help="results JSONL")
    b.add_argument("--resume", action="store_true", help="append only cells missing from --out")
    b.add_argument("--workers", type=int, default=None, help="processes (default: OPTBENCH_WORKERS or core count)")
    b.add_argument("--checkpoints", default=None, help="checkpoint directory (default: <out>_checkpoints)")
    b.add_argument("--progress-every", type=int, default=100, help="log every N finished runs")
    b.add_argument("--force", action="store_true", help="overwrite existing outputs")
    b.add_argument("--quiet", action="store_true", help="no progress on stderr")
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("analyze", help="coupling-bias flags, worst-removed stats, optimum variation", formatter_class=fmt)
    a.add_argument("what", choices=("bocb", "stats", "variation"))
    a.add_argument("--results", required=True, help="harness JSONL, accuracy CSV, or optima JSON (variation)")
    a.add_argument("--gamma", type=float, default=bocb.DEFAULT_GAMMA, help="bias threshold cap")
    a.add_argument("--mode", choices=("onehot", "ordinal"), default="onehot", help="variation distance")
    a.add_argument("--out", required=True, help="report JSON (bocb also writes .values.csv and .flags.csv)")
    a.add_argument("--force", action="store_true", help="overwrite existing outputs")
    a.set_defaults(func=cmd_analyze)

    d = sub.add_parser("diagnose", help="per-layer weight indicators from a checkpoint", formatter_class=fmt)
    d.add_argument("--checkpoint", required=True, help="OWB1 file")
    d.add_argument("--bins", type=int, default=DEFAULT_BINS, help="entropy histogram bins")
    d.add_argument("--k-rule", default=DEFAULT_K_RULE, help="top-k rule: frac:F or fixed:K")
    d.add_argument("--out", required=True, help="ridge CSV")
    d.add_argument("--force", action="store_true", help="overwrite existing outputs")
    d.set_defaults(func=cmd_diagnose)

    r = sub.add_parser("rank", help="weighted overall optimizer ranking", formatter_class=fmt)
    r.add_argument("--table", required=True, help="CSV with optimizer,performance,hyperparameter,bocb,computation")
    r.add_argument("--weights", default="0.4,0.2,0.2,0.2", help="performance,hyperparameter,bocb,computation")
    r.add_argument("--out", required=True, help="rank JSON")
    r.add_argument("--force", action="store_true", help="overwrite existing outputs")
    r.set_defaults(func=cmd_rank)

    e = sub.add_parser("export", help="best-cell accuracy matrix from harness results", formatter_class=fmt)
    e.add_argument("--results", required=True, help="harness JSONL")
    e.add_argument("--format", choices=("csv", "json"), default="csv", help="output format")
    e.add_argument("--out", required=True, help="output file")
    e.add_argument("--force", action="store_true", help="overwrite existing outputs")
    e.set_defaults(func=cmd_export)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check", formatter_class=fmt)
    g.add_argument("--model", action="append", default=argparse.SUPPRESS,
                   help="family[:key=value,...]; repeatable (default: " + " ".join(DEFAULT_GRADCHECK_MODELS) + ")")
    g.add_argument("--seed", type=int, default=0, help="init, data and coordinate-sampling seed")
    g.add_argument("--corrupt-grad", action="store_true", help=argparse.SUPPRESS)
    g.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, InputError, CheckpointError, bocb.AnalysisError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
