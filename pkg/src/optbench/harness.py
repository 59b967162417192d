"""Deterministic training loop, lr x wd grid search and result-matrix assembly."""
import hashlib
import json
import math
import os
import time
from collections import OrderedDict, defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .core_math import RandomStream, hash_chain
from .datasets import ConfigError, DatasetSpec, generate_dataset
from .models import DivergedError, ModelSpec, build_model
from .optimizers import (
    ELEMENTWISE,
    FAMILY_NAMES,
    LR_SCALE,
    HyperParams,
    OptimizerError,
    canonical_family,
    cosine_lr,
    create_optimizer,
    gnb_hessian_estimate,
    step,
)

RECORD_KEYS = (
    "model", "optimizer", "lr", "wd", "seed", "epochs",
    "curve_loss", "curve_acc", "final_val_acc", "best_val_acc", "diverged", "wall_ms",
)
DEFAULT_LR_GRID = (1e-4, 3e-4, 1e-3, 3e-3, 1e-2)
DEFAULT_WD_GRID = (0.0, 1e-4, 1e-3, 1e-2, 5e-2)


def _tidy(x):
    # 12 significant digits keep 1e-4 * 10 from printing as 0.0010000000000000002
    return float(f"{x:.12g}")


@dataclass(frozen=True)
class Schedule:
    epochs: int = 50
    batch_size: int = 64
    warmup: int = 5
    quad_steps_per_epoch: int = 100


@dataclass
class BenchConfig:
    models: list
    optimizers: list
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    lr_grid: list = field(default_factory=lambda: list(DEFAULT_LR_GRID))
    wd_grid: list = field(default_factory=lambda: list(DEFAULT_WD_GRID))
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    epochs: int = 50
    batch_size: int = 64
    warmup: int = 5
    base_seed: int = 0
    model_datasets: dict = field(default_factory=dict)
    lr_scale: dict = field(default_factory=dict)
    quad_steps_per_epoch: int = 100

    def __post_init__(self):
        self.optimizers = [canonical_family(o) for o in self.optimizers]
        self.validate()

    def validate(self):
        if not self.models or not self.optimizers:
            raise ConfigError("config needs at least one model and one optimizer")
        for label, grid in (("lr_grid", self.lr_grid), ("wd_grid", self.wd_grid)):
            if not grid:
                raise ConfigError(f"{label} is empty")
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ConfigError(f"{label} must be strictly ascending")
        if any(lr <= 0 for lr in self.lr_grid) or any(wd < 0 for wd in self.wd_grid):
            raise ConfigError("learning rates must be positive and weight decays non-negative")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        if self.epochs < 1 or self.batch_size < 1 or self.warmup < 0:
            raise ConfigError("epochs and batch_size must be >= 1, warmup >= 0")
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate model names in {names}")

    @property
    def schedule(self):
        return Schedule(self.epochs, self.batch_size, self.warmup, self.quad_steps_per_epoch)

    def dataset_for(self, spec):
        if spec.family == "quad_bowl":
            return None
        return self.model_datasets.get(spec.name, self.dataset)

    def family_lr_grid(self, family):
        scale = self.lr_scale.get(family, LR_SCALE[family])
        return [_tidy(lr * scale) for lr in self.lr_grid]

    @classmethod
    def from_dict(cls, d):
        try:
            models, model_datasets = [], {}
            for entry in d["models"]:
                spec = ModelSpec.from_dict(entry)
                models.append(spec)
                if "dataset" in entry:
                    model_datasets[spec.name] = DatasetSpec.from_dict(entry["dataset"])
            kwargs = {k: d[k] for k in (
                "lr_grid", "wd_grid", "seeds", "epochs", "batch_size", "warmup",
                "base_seed", "quad_steps_per_epoch") if k in d}
            lr_scale = {canonical_family(k): float(v) for k, v in d.get("lr_scale", {}).items()}
            return cls(
                models=models,
                optimizers=list(d["optimizers"]),
                dataset=DatasetSpec.from_dict(d.get("dataset", {})),
                model_datasets=model_datasets,
                lr_scale=lr_scale,
                **kwargs,
            )
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        except OptimizerError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self):
        models = []
        for spec in self.models:
            entry = spec.to_dict()
            if spec.name in self.model_datasets:
                entry["dataset"] = self.model_datasets[spec.name].to_dict()
            models.append(entry)
        return {
            "models": models,
            "optimizers": list(self.optimizers),
            "dataset": self.dataset.to_dict(),
            "lr_grid": list(self.lr_grid),
            "wd_grid": list(self.wd_grid),
            "seeds": list(self.seeds),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "warmup": self.warmup,
            "base_seed": self.base_seed,
            "lr_scale": dict(self.lr_scale),
            "quad_steps_per_epoch": self.quad_steps_per_epoch,
        }


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return BenchConfig.from_dict(raw)


@dataclass
class RunRecord:
    model: str
    optimizer: str
    lr: float
    wd: float
    seed: int
    epochs: int
    curve_loss: list
    curve_acc: list
    final_val_acc: float
    best_val_acc: float
    diverged: bool
    wall_ms: float = 0.0

    @property
    def key(self):
        return (self.model, self.optimizer, self.lr, self.wd, self.seed)

    def to_json(self):
        return json.dumps({k: getattr(self, k) for k in RECORD_KEYS}, separators=(", ", ": "))

    @classmethod
    def from_dict(cls, d):
        missing = [k for k in RECORD_KEYS if k not in d]
        if missing:
            raise ValueError(f"record missing keys {missing}")
        return cls(**{k: d[k] for k in RECORD_KEYS})


@lru_cache(maxsize=8)
def _cached_dataset(spec):
    return generate_dataset(spec)


def run_seed_for(base_seed, model_name, family, lr_index, wd_index, seed):
    return hash_chain(base_seed, model_name, family, lr_index, wd_index, seed)


def _concat(tensors):
    return np.concatenate([t.ravel() for t in tensors.values()])


def run_training(model_spec, family, lr, wd, seed, dataset, schedule, run_seed=None, keep_model=False):
    """Train one (model, optimizer, lr, wd, seed) cell; divergence is recorded, not raised.

    ``dataset`` is a ``Dataset`` (or ``None`` for ``quad_bowl``). The model is
    initialised from ``hash_chain(init_seed, seed)`` so every grid cell of a
    trial starts from the same weights; batch order comes from ``run_seed``.
    """
    family = canonical_family(family)
    start = time.perf_counter()
    if run_seed is None:
        run_seed = hash_chain(model_spec.name, family, lr, wd, seed)
    init_spec = ModelSpec.from_dict({**model_spec.to_dict(), "init_seed": hash_chain(model_spec.init_seed, seed)})
    quad = model_spec.family == "quad_bowl"
    if quad:
        if dataset is not None:
            raise ConfigError("quad_bowl takes no dataset")
        model = build_model(init_spec)
    else:
        if dataset is None:
            raise ConfigError(f"{model_spec.family} needs a dataset")
        model = build_model(init_spec, dataset.input_dim, dataset.classes)
    hyper = HyperParams(lr=lr, weight_decay=wd)
    flat = family in ELEMENTWISE
    if flat:
        packed = {"flat": model.pack()}
        state = create_optimizer(family, hyper, {"flat": packed["flat"].shape})
    else:
        state = create_optimizer(family, hyper, {k: v.shape for k, v in model.params.items()})
    stream = RandomStream(run_seed)
    hess_stream = stream.fork("hessian")

    curve_loss, curve_acc = [], []
    diverged = False
    for epoch in range(schedule.epochs):
        lr_t = cosine_lr(lr, epoch, schedule.epochs, schedule.warmup)
        if quad:
            batches = [None] * schedule.quad_steps_per_epoch
        else:
            n = dataset.x_train.shape[0]
            order = stream.permutation(n)
            batches = [
                (dataset.x_train[idx], dataset.y_train[idx])
                for idx in (order[i : i + schedule.batch_size] for i in range(0, n, schedule.batch_size))
            ]
        losses = []
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                for batch in batches:
                    loss, _ = model.forward_loss(batch)
                    if not math.isfinite(loss):
                        raise DivergedError("non-finite loss")
                    grads = model.backward(batch)
                    if state.needs_hessian():
                        h = gnb_hessian_estimate(model, batch, hess_stream)
                        state.merge_hessian({"flat": _concat(h)} if flat else h)
                    losses.append(loss)
                    if flat:
                        bad = step(state, packed, {"flat": _concat(grads)}, lr_t)
                    else:
                        bad = step(state, model.params, grads, lr_t)
                    if bad:
                        raise DivergedError("non-finite parameters")
        except (DivergedError, FloatingPointError):
            diverged = True
            break
        if quad:
            final, _ = model.forward_loss(None)
            model._cache = None
            if not math.isfinite(final):
                diverged = True
                break
            curve_loss.append(final)
            curve_acc.append(0.0)
        else:
            with np.errstate(over="ignore", invalid="ignore"):
                acc = model.accuracy(dataset.x_val, dataset.y_val)
            curve_loss.append(math.fsum(losses) / len(losses))
            curve_acc.append(acc)
    record = RunRecord(
        model=model_spec.name,
        optimizer=family,
        lr=lr,
        wd=wd,
        seed=seed,
        epochs=schedule.epochs,
        curve_loss=curve_loss,
        curve_acc=curve_acc,
        final_val_acc=curve_acc[-1] if curve_acc else 0.0,
        best_val_acc=max(curve_acc) if curve_acc else 0.0,
        diverged=diverged,
        wall_ms=round((time.perf_counter() - start) * 1000.0, 3),
    )
    return (record, model) if keep_model else record


# -- grid ---------------------------------------------------------------------

@dataclass(frozen=True)
class Task:
    model: ModelSpec
    dataset: DatasetSpec
    family: str
    lr: float
    wd: float
    seed: int
    run_seed: int
    schedule: Schedule

    @property
    def key(self):
        return (self.model.name, self.family, self.lr, self.wd, self.seed)


def grid_tasks(config):
    """Cartesian product models x optimizers x lr x wd x seeds, in a fixed order."""
    tasks = []
    for spec in config.models:
        ds = config.dataset_for(spec)
        for family in config.optimizers:
            for i, lr in enumerate(config.family_lr_grid(family)):
                for j, wd in enumerate(config.wd_grid):
                    for seed in config.seeds:
                        rs = run_seed_for(config.base_seed, spec.name, family, i, j, seed)
                        tasks.append(Task(spec, ds, family, lr, wd, seed, rs, config.schedule))
    return tasks


def execute_task(task):
    ds = None if task.dataset is None else _cached_dataset(task.dataset)
    return run_training(task.model, task.family, task.lr, task.wd, task.seed, ds, task.schedule, task.run_seed)


def timing_free(line):
    """A record line with its trailing ``wall_ms`` field removed."""
    line = line.rstrip("\n")
    cut = line.rfind(', "wall_ms": ')
    return line if cut < 0 else line[:cut] + "}"


def results_digest(path):
    """sha256 over the timing-free lines of a results JSONL, plus one digest per line."""
    with open(path, encoding="utf-8") as fh:
        lines = [timing_free(x) for x in fh.read().split("\n") if x.strip()]
    per_line = [hashlib.sha256(x.encode("utf-8")).hexdigest() for x in lines]
    whole = hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()
    return whole, per_line


def read_records(path):
    """Parse a results JSONL; a torn final line (interrupted write) is ignored."""
    records = []
    if not os.path.exists(path):
        return records
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    for n, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(RunRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, ValueError, TypeError):
            if n == len(lines) - 1:
                break
            raise ValueError(f"{path}:{n + 1}: malformed record")
    return records


def _trim_torn_tail(path):
    with open(path, "rb+") as fh:
        data = fh.read()
        if data and not data.endswith(b"\n"):
            fh.truncate(data.rfind(b"\n") + 1)


def run_grid(config, out_path=None, resume=False, workers=1, progress=None):
    """Run every grid cell, streaming records to ``out_path`` as JSONL.

    With ``resume`` only cells whose key is absent from ``out_path`` run;
    existing lines are never rewritten. Returns all records (old and new)
    in grid order.
    """
    tasks = grid_tasks(config)
    existing = {}
    if resume and out_path and os.path.exists(out_path):
        _trim_torn_tail(out_path)
        existing = {r.key: r for r in read_records(out_path)}
    todo = [t for t in tasks if t.key not in existing]
    mode = "a" if resume else "w"
    new = {}
    fh = open(out_path, mode, encoding="utf-8") if out_path else None
    try:
        if workers > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = pool.map(execute_task, todo, chunksize=max(1, min(16, len(todo) // (4 * workers))))
                for i, rec in enumerate(results):
                    new[rec.key] = rec
                    if fh:
                        fh.write(rec.to_json() + "\n")
                        fh.flush()
                    if progress:
                        progress(i + 1, len(todo), rec)
        else:
            for i, task in enumerate(todo):
                rec = execute_task(task)
                new[rec.key] = rec
                if fh:
                    fh.write(rec.to_json() + "\n")
                    fh.flush()
                if progress:
                    progress(i + 1, len(todo), rec)
    finally:
        if fh:
            fh.close()
    merged = {**existing, **new}
    return [merged[t.key] for t in tasks if t.key in merged]


# -- result matrix ------------------------------------------------------------

@dataclass
class Cell:
    value: float
    lr: float
    wd: float
    n_seeds: int
    all_diverged: bool


@dataclass
class ResultMatrix:
    optimizers: list
    models: list
    cells: dict  # (optimizer, model) -> Cell or None

    def value(self, optimizer, model):
        cell = self.cells.get((optimizer, model))
        return None if cell is None else cell.value

    def column(self, model):
        """(optimizer, value) pairs for filled cells of one model."""
        out = []
        for opt in self.optimizers:
            v = self.value(opt, model)
            if v is not None:
                out.append((opt, v))
        return out

    def row(self, optimizer):
        out = []
        for model in self.models:
            v = self.value(optimizer, model)
            if v is not None:
                out.append((model, v))
        return out

    def optimum(self, optimizer, model):
        cell = self.cells.get((optimizer, model))
        return None if cell is None else (cell.lr, cell.wd)

    @classmethod
    def from_values(cls, optimizers, models, values):
        """Matrix without hyper-parameter optima (e.g. a transcribed accuracy table)."""
        cells = {}
        for (opt, model), v in values.items():
            cells[(opt, model)] = None if v is None else Cell(float(v), None, None, 1, False)
        return cls(list(optimizers), list(models), cells)


def _score(rec):
    return 0.0 if rec.diverged else rec.best_val_acc


def best_per_pair(records):
    """Seed-mean best accuracy per (model, optimizer) at its best (lr, wd).

    Diverged runs score 0. Ties go to the smaller lr, then the smaller wd.
    Duplicate records (same key) count once.
    """
    unique = OrderedDict()
    for rec in records:
        unique.setdefault(rec.key, rec)
    by_config = defaultdict(list)
    models, optimizers = [], []
    for rec in unique.values():
        if rec.model not in models:
            models.append(rec.model)
        if rec.optimizer not in optimizers:
            optimizers.append(rec.optimizer)
        by_config[(rec.optimizer, rec.model, rec.lr, rec.wd)].append(rec)
    order = {name: i for i, name in enumerate(FAMILY_NAMES)}
    optimizers.sort(key=lambda o: (order.get(o, len(order)), o))
    best = {}
    for (opt, model, lr, wd), recs in by_config.items():
        recs = sorted(recs, key=lambda r: r.seed)
        mean = math.fsum(_score(r) for r in recs) / len(recs)
        cand = (mean, -lr, -wd)
        cur = best.get((opt, model))
        if cur is None or cand > cur[0]:
            best[(opt, model)] = (cand, Cell(mean, lr, wd, len(recs), all(r.diverged for r in recs)))
    cells = {(opt, model): (best[(opt, model)][1] if (opt, model) in best else None)
             for opt in optimizers for model in models}
    return ResultMatrix(optimizers, models, cells)
