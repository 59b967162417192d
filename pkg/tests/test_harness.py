import json
import os

import numpy as np
import pytest

from optbench.checkpoint import CheckpointError, decode, encode, read_checkpoint, write_checkpoint
from optbench.datasets import ConfigError, DatasetSpec, generate_dataset
from optbench.harness import (
    RECORD_KEYS,
    BenchConfig,
    RunRecord,
    Schedule,
    best_per_pair,
    grid_tasks,
    load_config,
    read_records,
    run_grid,
    run_training,
)
from optbench.models import ModelSpec

TINY_DS = {"kind": "spirals", "classes": 3, "samples_per_class": 20, "noise": 0.2, "seed": 0}


def tiny_config(**over):
    d = {
        "models": [{"family": "linear"}, {"family": "plain_mlp", "depth": 1, "width": 4}],
        "optimizers": ["SGD-M", "adam", "LION"],
        "dataset": TINY_DS,
        "lr_grid": [1e-3, 1e-2, 1e-1],
        "wd_grid": [0.0, 1e-3],
        "seeds": [0, 1],
        "epochs": 2,
        "batch_size": 16,
        "warmup": 0,
    }
    d.update(over)
    return BenchConfig.from_dict(d)


def strip(line):
    d = json.loads(line)
    d.pop("wall_ms")
    return json.dumps(d)


def test_grid_cardinality():
    assert len(grid_tasks(tiny_config())) == 2 * 3 * 3 * 2 * 2


def test_cardinality_independent_of_base_seed():
    assert len(grid_tasks(tiny_config(base_seed=9))) == len(grid_tasks(tiny_config()))


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(lr_grid=[1e-2, 1e-3])
    with pytest.raises(ConfigError):
        tiny_config(seeds=[])
    with pytest.raises(ConfigError):
        tiny_config(optimizers=["Shampoo"])
    with pytest.raises(ConfigError):
        BenchConfig.from_dict({"optimizers": ["Adam"]})


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="nope.json"):
        load_config(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        load_config(str(bad))


def test_config_round_trip():
    c = tiny_config()
    assert BenchConfig.from_dict(c.to_dict()).to_dict() == c.to_dict()


def test_run_record_shape_and_determinism():
    ds = generate_dataset(DatasetSpec(**TINY_DS))
    spec = ModelSpec("plain_mlp", depth=2, width=8)
    a = run_training(spec, "Adam", 1e-2, 1e-4, 0, ds, Schedule(3, 16, 1))
    b = run_training(spec, "Adam", 1e-2, 1e-4, 0, ds, Schedule(3, 16, 1))
    assert len(a.curve_acc) == len(a.curve_loss) == 3
    assert a.best_val_acc == max(a.curve_acc)
    assert strip(a.to_json()) == strip(b.to_json())
    assert list(json.loads(a.to_json())) == list(RECORD_KEYS)


def test_quad_bowl_sgdm_converges():
    rec = run_training(ModelSpec("quad_bowl"), "SGD-M", 1e-2, 0.0, 0, None, Schedule(20, 1, 0, 100))
    assert rec.curve_loss[-1] < 1e-3 and not rec.diverged


def test_blow_up_is_recorded():
    ds = generate_dataset(DatasetSpec(**TINY_DS))
    rec = run_training(ModelSpec("plain_mlp", depth=8, width=32), "SGD-M", 1e6, 0.0, 0, ds, Schedule(5, 16, 0))
    assert rec.diverged
    assert len(rec.curve_acc) < 5
    assert rec.best_val_acc == (max(rec.curve_acc) if rec.curve_acc else 0.0)


def test_adam_huge_lr_stays_finite():
    # per-coordinate steps are bounded by lr, so weights grow only linearly
    ds = generate_dataset(DatasetSpec(**TINY_DS))
    rec = run_training(ModelSpec("plain_mlp", depth=2, width=8), "Adam", 1e6, 0.0, 0, ds, Schedule(5, 16, 0))
    assert not rec.diverged
    assert rec.curve_loss[-1] > 100 * rec.curve_loss[0] or rec.curve_loss[-1] > 10


def test_run_grid_stream_and_rerun_identical(tmp_path):
    cfg = tiny_config()
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    recs = run_grid(cfg, str(p1))
    run_grid(cfg, str(p2))
    assert len(recs) == 72
    l1 = p1.read_text(encoding="utf-8").splitlines()
    l2 = p2.read_text(encoding="utf-8").splitlines()
    assert [strip(x) for x in l1] == [strip(x) for x in l2]


def test_parallel_matches_serial(tmp_path):
    cfg = tiny_config(models=[{"family": "linear"}])
    serial = run_grid(cfg, str(tmp_path / "s.jsonl"), workers=1)
    parallel = run_grid(cfg, str(tmp_path / "p.jsonl"), workers=2)
    assert [strip(r.to_json()) for r in serial] == [strip(r.to_json()) for r in parallel]


def test_resume_fills_only_missing(tmp_path):
    cfg = tiny_config()
    path = tmp_path / "r.jsonl"
    run_grid(cfg, str(path))
    lines = path.read_text(encoding="utf-8").splitlines(keepends=True)
    # keep 30 records plus half of the 31st, as if the run were killed mid-write
    path.write_text("".join(lines[:30]) + lines[30][:40], encoding="utf-8")
    seen = []
    run_grid(cfg, str(path), resume=True, progress=lambda d, t, r: seen.append(r.key))
    assert len(seen) == 72 - 30
    after = path.read_text(encoding="utf-8").splitlines()
    assert after[:30] == [x.rstrip("\n") for x in lines[:30]]
    assert len(after) == 72
    assert len({tuple(json.loads(x)[k] for k in ("model", "optimizer", "lr", "wd", "seed")) for x in after}) == 72
    seen.clear()
    run_grid(cfg, str(path), resume=True, progress=lambda d, t, r: seen.append(r.key))
    assert seen == []


def test_read_records_ignores_torn_tail(tmp_path):
    rec = RunRecord("m", "Adam", 0.1, 0.0, 0, 1, [1.0], [0.5], 0.5, 0.5, False, 1.0)
    p = tmp_path / "t.jsonl"
    p.write_text(rec.to_json() + "\n" + rec.to_json()[:20], encoding="utf-8")
    assert len(read_records(str(p))) == 1


def _rec(opt, lr, wd, seed, acc, diverged=False, model="m"):
    return RunRecord(model, opt, lr, wd, seed, 1, [0.0], [acc], acc, acc, diverged)


def test_best_per_pair_argmax_and_ties():
    recs = [
        _rec("Adam", 1e-3, 0.0, 0, 0.80), _rec("Adam", 1e-3, 0.0, 1, 0.80),
        _rec("Adam", 1e-2, 0.0, 0, 0.85), _rec("Adam", 1e-2, 0.0, 1, 0.85),
        _rec("SGD-M", 1e-2, 0.0, 0, 0.7), _rec("SGD-M", 1e-3, 0.0, 0, 0.7),
    ]
    m = best_per_pair(recs)
    assert m.value("Adam", "m") == pytest.approx(0.85)
    assert m.optimum("Adam", "m") == (1e-2, 0.0)
    assert m.optimum("SGD-M", "m") == (1e-3, 0.0)
    assert m.optimizers == ["SGD-M", "Adam"]


def test_best_per_pair_singleton_divergence_and_duplicates():
    recs = [_rec("Adam", 1e-3, 0.0, 0, 0.9, diverged=True), _rec("Adam", 1e-2, 0.0, 0, 0.4)]
    m = best_per_pair(recs)
    assert m.value("Adam", "m") == 0.4
    assert best_per_pair(recs + recs).cells == m.cells
    all_div = best_per_pair([_rec("LION", 1e-3, 0.0, 0, 0.9, diverged=True)])
    cell = all_div.cells[("LION", "m")]
    assert cell.value == 0.0 and cell.all_diverged


def test_missing_cell_marked():
    m = best_per_pair([_rec("Adam", 1e-3, 0.0, 0, 0.5, model="a"), _rec("LION", 1e-3, 0.0, 0, 0.5, model="b")])
    assert m.cells[("Adam", "b")] is None


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_bit_exact_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.standard_normal((3, 4)), "a.bias": np.array([np.pi, -0.0, 1e-310]),
               "scalar": np.array(2.5)}
    meta = {"model": "m", "optimizer": "Adam", "lr": 1e-3, "wd": 0.0, "seed": 0, "epoch": 3}
    path = tmp_path / "x.owb"
    write_checkpoint(str(path), tensors, meta)
    back, meta2 = read_checkpoint(str(path))
    assert meta2 == meta
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].tobytes() == np.ascontiguousarray(tensors[k]).tobytes()
    assert encode(back, meta2) == path.read_bytes()


def test_checkpoint_layout():
    blob = encode({"w": np.array([1.0, 2.0])}, {"epoch": 1})
    assert blob[:4] == b"OWB1"
    hlen = int.from_bytes(blob[4:8], "little")
    header = json.loads(blob[8 : 8 + hlen])
    assert header["tensors"] == [{"name": "w", "shape": [2], "dtype": "f64", "offset": 0}]
    assert np.frombuffer(blob[8 + hlen :], "<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("blob", [b"", b"XXXX\x00\x00\x00\x00", b"OWB1\xff\x00\x00\x00{}"])
def test_checkpoint_rejects_garbage(blob):
    with pytest.raises(CheckpointError):
        decode(blob)


def test_checkpoint_rejects_overrun():
    blob = encode({"w": np.ones(4)}, {})
    with pytest.raises(CheckpointError):
        decode(blob[:-8])


def test_run_training_keep_model(tmp_path):
    ds = generate_dataset(DatasetSpec(**TINY_DS))
    rec, model = run_training(ModelSpec("linear"), "Adam", 1e-2, 0.0, 0, ds, Schedule(2, 16, 0), keep_model=True)
    path = tmp_path / "m.owb"
    write_checkpoint(str(path), model.params, {"epoch": 2})
    back, _ = read_checkpoint(str(path))
    assert all(np.array_equal(back[k], model.params[k]) for k in back)
    assert os.path.getsize(path) > 0
