"""Coupling-bias detection, worst-removed statistics, optimum variation and optimizer ranking."""
import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field

from .core_math import quantile
from .harness import ResultMatrix

DEFAULT_GAMMA = 3.0
DEFAULT_WEIGHTS = (0.4, 0.2, 0.2, 0.2)
RANK_COLUMNS = ("performance", "hyperparameter", "bocb", "computation")


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    flags: tuple
    threshold: float
    gamma: float
    iqr: float
    best: float


def detect_bocb(values, gamma=DEFAULT_GAMMA):
    """Flag entries strictly below ``max - min(IQR, gamma)``."""
    vals = [float(v) for v in values]
    if len(vals) < 4:
        raise AnalysisError(f"need at least 4 results to detect coupling bias, got {len(vals)}")
    if not gamma > 0:
        raise AnalysisError("gamma must be positive")
    iqr = quantile(vals, 0.75) - quantile(vals, 0.25)
    best = max(vals)
    threshold = best - min(iqr, gamma)
    return Detection(tuple(v < threshold for v in vals), threshold, float(gamma), iqr, best)


def stability_stats(values):
    """Population mean, std and range after dropping the single worst value."""
    vals = sorted(float(v) for v in values)
    if len(vals) < 2:
        raise AnalysisError("need at least 2 results for worst-removed statistics")
    rest = vals[1:]
    mean = math.fsum(rest) / len(rest)
    var = math.fsum((v - mean) ** 2 for v in rest) / len(rest)
    return mean, math.sqrt(var), rest[-1] - rest[0]


@dataclass
class ModelBOCB:
    model: str
    flagged: list
    threshold: float
    gamma: float
    mean: float
    std: float
    range: float


@dataclass
class BOCBReport:
    gamma: float
    optimizers: list
    models: list
    per_model: list = field(default_factory=list)

    def flag_matrix(self):
        flagged = {m.model: set(m.flagged) for m in self.per_model}
        return {(o, m): o in flagged.get(m, ()) for o in self.optimizers for m in self.models}

    def bocb_column(self):
        """1 for optimizers flagged on at least one model."""
        hit = set()
        for m in self.per_model:
            hit.update(m.flagged)
        return {o: int(o in hit) for o in self.optimizers}

    def to_dict(self):
        return {
            "gamma": self.gamma,
            "optimizers": list(self.optimizers),
            "models": list(self.models),
            "per_model": [asdict(m) for m in self.per_model],
            "bocb": self.bocb_column(),
        }


def bocb_report(matrix, gamma=DEFAULT_GAMMA):
    report = BOCBReport(float(gamma), list(matrix.optimizers), list(matrix.models))
    for model in matrix.models:
        column = matrix.column(model)
        names = [o for o, _ in column]
        vals = [v for _, v in column]
        det = detect_bocb(vals, gamma)
        mean, std, rng = stability_stats(vals)
        flagged = [n for n, f in zip(names, det.flags) if f]
        report.per_model.append(ModelBOCB(model, flagged, det.threshold, det.gamma, mean, std, rng))
    return report


def stats_report(matrix):
    out = {}
    for model in matrix.models:
        mean, std, rng = stability_stats([v for _, v in matrix.column(model)])
        out[model] = {"mean": mean, "std": std, "range": rng}
    return out


# -- hyper-parameter variation -------------------------------------------------

def _grid_index(value, grid, label):
    for i, g in enumerate(grid):
        if math.isclose(value, g, rel_tol=1e-9, abs_tol=1e-15):
            return i
    raise AnalysisError(f"{label} {value!r} is not on the grid {list(grid)}")


def _mode_index(indices):
    counts = Counter(indices)
    top = max(counts.values())
    # ties go to the smaller grid value
    return min(i for i, c in counts.items() if c == top)


def _axis_variation(indices, mode, kind):
    m = _mode_index(indices)
    if kind == "onehot":
        return 2 * sum(1 for i in indices if i != m), m
    return sum(abs(i - m) for i in indices), m


def hyper_variation(optima, lr_grid, wd_grid, mode="onehot"):
    """Summed distance of each (lr, wd) optimum from the per-axis mode.

    ``onehot`` compares one-hot codes (each mismatch costs 2); ``ordinal``
    sums grid-index distances. Returns ``(total, lr_mode, wd_mode)``.
    """
    if mode not in ("onehot", "ordinal"):
        raise AnalysisError(f"unknown variation mode {mode!r}")
    if not optima:
        raise AnalysisError("no optima given")
    lr_idx = [_grid_index(lr, lr_grid, "lr") for lr, _ in optima]
    wd_idx = [_grid_index(wd, wd_grid, "wd") for _, wd in optima]
    lr_var, lr_m = _axis_variation(lr_idx, mode, mode)
    wd_var, wd_m = _axis_variation(wd_idx, mode, mode)
    return lr_var + wd_var, lr_grid[lr_m], wd_grid[wd_m]


@dataclass
class VariationReport:
    axis: str
    mode: str
    variation: dict  # entity -> total distance
    modes: dict  # entity -> {"lr_index": i, "wd_index": j}

    def to_dict(self):
        return asdict(self)


def _observed_grids(records):
    lrs, wds = {}, {}
    for rec in records:
        lrs.setdefault(rec.optimizer, set()).add(rec.lr)
        wds.setdefault(rec.optimizer, set()).add(rec.wd)
    return {k: sorted(v) for k, v in lrs.items()}, {k: sorted(v) for k, v in wds.items()}


def variation_report(matrix, records, axis="by-optimizer", mode="onehot"):
    """Variation per optimizer (across models) or per model (across optimizers).

    Optima are compared by grid index, since each optimizer family searches
    its own rescaled lr grid.
    """
    if axis not in ("by-optimizer", "by-backbone"):
        raise AnalysisError(f"unknown variation axis {axis!r}")
    lr_grids, wd_grids = _observed_grids(records)
    coded = {}
    for (opt, model), cell in matrix.cells.items():
        if cell is None or cell.lr is None:
            continue
        coded[(opt, model)] = (
            _grid_index(cell.lr, lr_grids[opt], "lr"),
            _grid_index(cell.wd, wd_grids[opt], "wd"),
        )
    entities = matrix.optimizers if axis == "by-optimizer" else matrix.models
    variation, modes = {}, {}
    for ent in entities:
        if axis == "by-optimizer":
            pts = [coded[(ent, m)] for m in matrix.models if (ent, m) in coded]
        else:
            pts = [coded[(o, ent)] for o in matrix.optimizers if (o, ent) in coded]
        if not pts:
            continue
        size = 1 + max(max(i for i, _ in pts), max(j for _, j in pts))
        grid = list(range(size))
        total, lr_m, wd_m = hyper_variation(pts, grid, grid, mode)
        variation[ent] = total
        modes[ent] = {"lr_index": lr_m, "wd_index": wd_m}
    return VariationReport(axis, mode, variation, modes)


# -- ranking -------------------------------------------------------------------

@dataclass
class RankRow:
    optimizer: str
    performance: int
    hyperparameter: int
    bocb: int
    computation: int
    score: float = 0.0
    overall: int = 0


@dataclass
class RankTable:
    weights: tuple
    rows: list  # sorted by overall rank

    def overall(self):
        return {r.optimizer: r.overall for r in self.rows}

    def to_dict(self):
        return {"weights": list(self.weights), "rows": [asdict(r) for r in self.rows]}


def _normalise(rank, n):
    return 0.0 if n <= 1 else (rank - 1) / (n - 1)


def rank_optimizers(rows, weights=DEFAULT_WEIGHTS):
    """Weighted score of normalised component ranks; lower is better.

    Rank columns map to [0, 1] via ``(r - 1) / (N - 1)`` with N the number of
    optimizers; the 0/1 bias column is used as is. Ties break by name.
    """
    weights = tuple(float(w) for w in weights)
    if len(weights) != 4 or any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
        raise AnalysisError("need four non-negative weights summing to 1")
    parsed = []
    for row in rows:
        try:
            r = RankRow(
                optimizer=str(row["optimizer"]),
                performance=int(row["performance"]),
                hyperparameter=int(row["hyperparameter"]),
                bocb=int(row["bocb"]),
                computation=int(row["computation"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise AnalysisError(f"malformed rank row {row!r}: {exc}") from exc
        if min(r.performance, r.hyperparameter, r.computation) < 1:
            raise AnalysisError(f"ranks must be >= 1 ({r.optimizer})")
        if r.bocb not in (0, 1):
            raise AnalysisError(f"bias flag must be 0 or 1 ({r.optimizer})")
        parsed.append(r)
    if not parsed:
        raise AnalysisError("empty rank table")
    names = [r.optimizer for r in parsed]
    if len(set(names)) != len(names):
        raise AnalysisError("duplicate optimizer in rank table")
    n = len(parsed)
    wp, wh, wb, wc = weights
    for r in parsed:
        r.score = (
            wp * _normalise(r.performance, n)
            + wh * _normalise(r.hyperparameter, n)
            + wb * r.bocb
            + wc * _normalise(r.computation, n)
        )
    parsed.sort(key=lambda r: (r.score, r.optimizer))
    for i, r in enumerate(parsed, 1):
        r.overall = i
    return RankTable(weights, parsed)


# -- I/O -----------------------------------------------------------------------

def read_rank_csv(path):
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    missing = [c for c in ("optimizer",) + RANK_COLUMNS if rows and c not in rows[0]]
    if not rows or missing:
        raise AnalysisError(f"rank table {path} lacks columns {missing or list(RANK_COLUMNS)}")
    return rows


def read_matrix_csv(path):
    """Accuracy matrix with an ``optimizer`` column followed by one column per model."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise AnalysisError(f"{path} is empty") from None
        if not header or header[0] != "optimizer" or len(header) < 2:
            raise AnalysisError(f"{path}: first column must be 'optimizer'")
        models = header[1:]
        optimizers, values = [], {}
        for line in reader:
            if not line:
                continue
            if len(line) != len(header):
                raise AnalysisError(f"{path}: row {line[0]!r} has {len(line)} fields, expected {len(header)}")
            optimizers.append(line[0])
            for model, cell in zip(models, line[1:]):
                try:
                    values[(line[0], model)] = float(cell) if cell.strip() else None
                except ValueError as exc:
                    raise AnalysisError(f"{path}: bad value {cell!r}") from exc
    return ResultMatrix.from_values(optimizers, models, values)


def matrix_csv(matrix, flags=None):
    """Optimizers x models CSV; with ``flags`` the cells hold 0/1 instead of values."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["optimizer"] + list(matrix.models))
    for opt in matrix.optimizers:
        row = [opt]
        for model in matrix.models:
            if flags is not None:
                row.append(int(flags.get((opt, model), False)))
            else:
                v = matrix.value(opt, model)
                row.append("" if v is None else repr(v))
        w.writerow(row)
    return buf.getvalue()


def dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
