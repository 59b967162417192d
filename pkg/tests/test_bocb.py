import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from optbench.bocb import (
    AnalysisError,
    bocb_report,
    detect_bocb,
    hyper_variation,
    matrix_csv,
    rank_optimizers,
    read_matrix_csv,
    read_rank_csv,
    stability_stats,
    stats_report,
    variation_report,
)
from optbench.cli import data_path
from optbench.harness import ResultMatrix, RunRecord, best_per_pair

SIX = [50, 80, 81, 82, 83, 84]

values = st.lists(st.floats(0, 100, allow_nan=False), min_size=4, max_size=25)


def accuracy_matrix():
    return read_matrix_csv(data_path("accuracy_matrix.csv"))


def rank_table():
    return read_rank_csv(data_path("rank_table.csv"))


# -- detection -------------------------------------------------------------------

def test_six_value_example():
    det = detect_bocb(SIX, 3.0)
    assert det.iqr == 2.5
    assert det.threshold == 81.5
    assert [v for v, f in zip(SIX, det.flags) if f] == [50, 80, 81]


def test_constant_column_has_no_flags():
    det = detect_bocb([70.0] * 6)
    assert det.threshold == 70.0 and not any(det.flags)


def test_detect_errors():
    with pytest.raises(AnalysisError):
        detect_bocb([1, 2, 3])
    with pytest.raises(AnalysisError):
        detect_bocb(SIX, 0.0)


@pytest.mark.parametrize("gamma", [1.0, 1.5, 2.0, 2.5, 3.0])
def test_bundled_matrix_required_flags(gamma):
    flags = bocb_report(accuracy_matrix(), gamma).flag_matrix()
    for cell in [("LARS", "Moga-S"), ("LARS", "URLK-T"), ("AdaGrad", "MobV2"), ("AdaGrad", "CAF-12")]:
        assert flags[cell], cell


def test_bundled_matrix_cell_values():
    m = accuracy_matrix()
    assert m.value("LARS", "Moga-S") == 33.26
    assert m.value("LARS", "URLK-T") == 41.03
    assert m.value("AdaGrad", "MobV2") == 33.87
    assert m.value("AdaGrad", "CAF-12") == 38.09
    assert len(m.optimizers) == 20 and len(m.models) == 20


@settings(max_examples=200)
@given(values, st.floats(0.1, 5.0))
def test_never_flags_maximum(vals, gamma):
    det = detect_bocb(vals, gamma)
    top = max(vals)
    assert not any(f for v, f in zip(vals, det.flags) if v == top)


@settings(max_examples=200)
@given(st.lists(st.integers(0, 1000), min_size=4, max_size=20), st.integers(-500, 500))
def test_translation_invariance(ints, c):
    # integer-valued data keeps the shift exact in floating point
    vals = [v / 4 for v in ints]
    assert detect_bocb(vals).flags == detect_bocb([v + c for v in vals]).flags


@settings(max_examples=200)
@given(values, st.floats(0.1, 5.0), st.floats(0.1, 5.0))
def test_monotone_in_gamma(vals, g1, g2):
    lo, hi = sorted((g1, g2))
    a, b = detect_bocb(vals, lo).flags, detect_bocb(vals, hi).flags
    assert all(fb <= fa for fa, fb in zip(a, b))


@settings(max_examples=100)
@given(values)
def test_constant_beyond_iqr(vals):
    iqr = detect_bocb(vals).iqr
    assert detect_bocb(vals, iqr + 1.0).flags == detect_bocb(vals, iqr + 50.0).flags


# -- stability statistics ---------------------------------------------------------

def test_stats_examples():
    mean, std, rng = stability_stats(SIX)
    assert mean == 82 and std == pytest.approx(math.sqrt(2), abs=1e-15) and rng == 4
    assert stability_stats([7, 7]) == (7, 0, 0)
    assert stability_stats([1, 2]) == (2, 0, 0)
    with pytest.raises(AnalysisError):
        stability_stats([1])


@given(st.lists(st.floats(-1e4, 1e4, allow_nan=False), min_size=2, max_size=30))
def test_range_is_max_minus_second_smallest(vals):
    s = sorted(vals)
    assert stability_stats(vals)[2] == s[-1] - s[1]


def test_stats_report_per_model():
    m = ResultMatrix.from_values(
        [f"o{i}" for i in range(6)], ["a"], {(f"o{i}", "a"): v for i, v in enumerate(SIX)}
    )
    assert stats_report(m)["a"]["mean"] == 82


# -- variation -------------------------------------------------------------------

GRID = [1e-4, 1e-3, 1e-2]
EXAMPLE = [(lr, 0.0) for lr in [1e-3, 1e-3, 1e-3, 1e-2, 1e-4]]


def test_variation_examples():
    assert hyper_variation(EXAMPLE, GRID, [0.0]) == (4, 1e-3, 0.0)
    assert hyper_variation(EXAMPLE, GRID, [0.0], mode="ordinal")[0] == 2
    assert hyper_variation([(1e-3, 0.0)] * 4, GRID, [0.0])[0] == 0


def test_variation_mode_tie_goes_to_smaller():
    _, lr_mode, _ = hyper_variation([(1e-2, 0.0), (1e-4, 0.0)], GRID, [0.0])
    assert lr_mode == 1e-4


def test_variation_errors():
    with pytest.raises(AnalysisError, match="not on the grid"):
        hyper_variation([(5e-3, 0.0)], GRID, [0.0])
    with pytest.raises(AnalysisError):
        hyper_variation(EXAMPLE, GRID, [0.0], mode="cosine")


optima = st.lists(st.tuples(st.sampled_from(GRID), st.sampled_from([0.0, 1e-3])), min_size=1, max_size=12)


@given(optima, st.randoms())
def test_variation_permutation_invariant(opts, rnd):
    shuffled = list(opts)
    rnd.shuffle(shuffled)
    for mode in ("onehot", "ordinal"):
        assert hyper_variation(opts, GRID, [0.0, 1e-3], mode) == hyper_variation(shuffled, GRID, [0.0, 1e-3], mode)


@given(optima)
def test_variation_zero_iff_unanimous(opts):
    total, _, _ = hyper_variation(opts, GRID, [0.0, 1e-3])
    assert (total == 0) == (len(set(opts)) == 1)
    assert total % 2 == 0


def test_variation_report_uses_grid_indices():
    recs = []
    # SGD-M searches a 10x-scaled grid; its index pattern matches Adam's
    for opt, scale in (("Adam", 1.0), ("SGD-M", 10.0)):
        for model, best in (("a", 1), ("b", 1), ("c", 2)):
            for i, lr in enumerate(GRID):
                acc = 0.9 if i == best else 0.5
                recs.append(RunRecord(model, opt, lr * scale, 0.0, 0, 1, [0.0], [acc], acc, acc, False))
    matrix = best_per_pair(recs)
    rep = variation_report(matrix, recs, "by-optimizer")
    assert rep.variation == {"SGD-M": 2, "Adam": 2}
    by_model = variation_report(matrix, recs, "by-backbone")
    assert by_model.variation == {"a": 0, "b": 0, "c": 0}


# -- ranking -------------------------------------------------------------------

EXPECTED_TOP = {"LAMB": 1, "AdamW": 2, "Adan": 3}


def test_bundled_ranks_top_three():
    overall = rank_optimizers(rank_table()).overall()
    assert {k: overall[k] for k in EXPECTED_TOP} == EXPECTED_TOP


def test_bundled_ranks_kendall_tau():
    from scipy.stats import kendalltau

    rows = rank_table()
    ours = rank_optimizers(rows).overall()
    names = [r["optimizer"] for r in rows]
    tau = kendalltau([ours[n] for n in names], [int(r["overall"]) for r in rows]).statistic
    assert tau >= 0.75


def test_performance_only_weights():
    rows = rank_table()
    overall = rank_optimizers(rows, (1, 0, 0, 0)).overall()
    assert all(overall[r["optimizer"]] == int(r["performance"]) for r in rows)


def test_lamb_scores_below_adamw():
    rows = [
        {"optimizer": "LAMB", "performance": 2, "hyperparameter": 1, "bocb": 0, "computation": 5},
        {"optimizer": "AdamW", "performance": 5, "hyperparameter": 1, "bocb": 0, "computation": 5},
        {"optimizer": "X", "performance": 9, "hyperparameter": 9, "bocb": 1, "computation": 9},
    ]
    t = rank_optimizers(rows)
    assert [r.optimizer for r in t.rows] == ["LAMB", "AdamW", "X"]


def test_equal_rows_tie_by_name():
    row = {"performance": 3, "hyperparameter": 2, "bocb": 0, "computation": 1}
    t = rank_optimizers([dict(row, optimizer="b"), dict(row, optimizer="a")])
    assert t.rows[0].score == t.rows[1].score
    assert t.overall() == {"a": 1, "b": 2}


def test_rank_errors():
    good = {"optimizer": "a", "performance": 1, "hyperparameter": 1, "bocb": 0, "computation": 1}
    with pytest.raises(AnalysisError):
        rank_optimizers([good], (0.5, 0.5, 0.5, 0.5))
    with pytest.raises(AnalysisError):
        rank_optimizers([dict(good, bocb=2)])
    with pytest.raises(AnalysisError):
        rank_optimizers([dict(good, performance=0)])
    with pytest.raises(AnalysisError):
        rank_optimizers([good, good])
    with pytest.raises(AnalysisError):
        rank_optimizers([{"optimizer": "a"}])


@settings(max_examples=50)
@given(st.permutations(list(range(1, 9))), st.permutations(list(range(1, 9))), st.lists(st.integers(0, 1), min_size=8, max_size=8))
def test_overall_is_a_permutation(perf, hyp, flags):
    rows = [
        {"optimizer": f"o{i}", "performance": perf[i], "hyperparameter": hyp[i], "bocb": flags[i], "computation": 1}
        for i in range(8)
    ]
    t = rank_optimizers(rows)
    assert sorted(t.overall().values()) == list(range(1, 9))


# -- CSV I/O ---------------------------------------------------------------------

def test_matrix_csv_round_trip(tmp_path):
    m = accuracy_matrix()
    p = tmp_path / "m.csv"
    p.write_text(matrix_csv(m), encoding="utf-8")
    back = read_matrix_csv(str(p))
    assert back.optimizers == m.optimizers and back.models == m.models
    assert all(back.value(o, c) == m.value(o, c) for o in m.optimizers for c in m.models)


def test_flag_csv_layout():
    m = accuracy_matrix()
    text = matrix_csv(m, bocb_report(m).flag_matrix())
    lines = text.splitlines()
    assert lines[0].startswith("optimizer,AlexNet")
    assert set("".join(line.split(",", 1)[1] for line in lines[1:]).replace(",", "")) <= {"0", "1"}


def test_read_matrix_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("model,a\nx,1\n", encoding="utf-8")
    with pytest.raises(AnalysisError):
        read_matrix_csv(str(p))
    p.write_text("optimizer,a\nx,abc\n", encoding="utf-8")
    with pytest.raises(AnalysisError):
        read_matrix_csv(str(p))
    p.write_text("optimizer,a,b\nx,1\n", encoding="utf-8")
    with pytest.raises(AnalysisError):
        read_matrix_csv(str(p))
    p.write_text("", encoding="utf-8")
    with pytest.raises(AnalysisError):
        read_matrix_csv(str(p))


def test_read_rank_csv_requires_columns(tmp_path):
    p = tmp_path / "r.csv"
    p.write_text("optimizer,performance\na,1\n", encoding="utf-8")
    with pytest.raises(AnalysisError):
        read_rank_csv(str(p))
