import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from hwgq.cli import EXIT_CODES, RUN_ROOT_ENV, main
from hwgq.quantizer import QuantizerSpec
from hwgq.trainer import Checkpoint, read_metrics

MNIST10K = Path(__file__).parent / "data" / "mnist10k"
SMALL = ["--samples", "20000"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def assert_one_error_line(err, category):
    lines = err.splitlines()
    assert len(lines) == 1, err
    assert lines[0].startswith(f"hwgq: error[{category}]: ")


# design-quantizer -------------------------------------------------------------


def test_design_m1_half_normal(capsys):
    code, out, _ = run(capsys, "design-quantizer", "--levels", "1", "--samples", "1000000", "--seed", "7")
    assert code == 0
    assert "levels     [0.79" in out
    level = float(out.split("levels     [")[1].split("]")[0])
    assert abs(level - 0.79788) < 1e-2


def test_design_out_byte_identical(capsys, tmp_path):
    for name in ("a.json", "b.json"):
        assert run(capsys, "design-quantizer", "--levels", "3", *SMALL, "--out", str(tmp_path / name))[0] == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    spec = QuantizerSpec.load(tmp_path / "a.json")
    assert spec.m == 3 and not spec.uniform and spec.sample_count > 0


@pytest.mark.parametrize("m", ["2", "3"])
def test_design_uniform_mse_not_below_nonuniform(capsys, tmp_path, m):
    run(capsys, "design-quantizer", "--levels", m, "--uniform", *SMALL, "--out", str(tmp_path / "u.json"))
    run(capsys, "design-quantizer", "--levels", m, "--nonuniform", *SMALL, "--out", str(tmp_path / "n.json"))
    u = QuantizerSpec.load(tmp_path / "u.json")
    n = QuantizerSpec.load(tmp_path / "n.json")
    assert u.uniform and u.mse >= n.mse


@pytest.mark.parametrize(
    "argv",
    [
        ["design-quantizer", "--levels", "0"],
        ["design-quantizer", "--levels", "16"],
        ["design-quantizer", "--levels", "2", "--samples", "9999"],
        ["design-quantizer", "--levels", "2", "--uniform", "--nonuniform"],
        ["design-quantizer", "--levels", "2", "--bogus"],
        ["design-quantizer"],
        ["frobnicate"],
        [],
    ],
)
def test_usage_errors(capsys, argv):
    code, out, err = run(capsys, *argv)
    assert code == EXIT_CODES["usage"]
    assert_one_error_line(err, "usage")


def test_unwritable_output_is_io_error(capsys, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code, _, err = run(capsys, "design-quantizer", "--levels", "1", *SMALL, "--out", str(blocker / "q.json"))
    assert code == EXIT_CODES["io"]
    assert_one_error_line(err, "io")


# train / eval ---------------------------------------------------------------


def toy_config(tmp_path, **over):
    doc = {
        "network": {
            "name": "toy",
            "input_shape": [1, 28, 28],
            "num_classes": 10,
            "weights": "binary",
            "activations": "hwgq",
            "layers": [
                {"type": "conv", "out": 4, "kernel": 5, "stride": 2, "pool": 2},
                {"type": "conv", "out": 8, "padding": 1, "pool": 2},
                {"type": "fc", "out": 10},
            ],
        },
        "train": {"total_iters": 8, "batch_size": 25, "base_lr": 0.05, "log_every": 2, "eval_every": 4},
        "dataset": {"path": str(MNIST10K), "train_limit": 400, "test_limit": 200},
        "quantizer": {"levels": 3, "uniform": True, "samples": 20000},
        "run_dir": str(tmp_path / "run"),
    }
    doc.update(over)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(doc))
    return path


def test_train_then_eval_matches_csv(capsys, tmp_path):
    cfg = toy_config(tmp_path)
    code, out, err = run(capsys, "train", "--config", str(cfg), "--deterministic")
    assert code == 0, err
    run_dir = tmp_path / "run"
    rows = read_metrics(run_dir / "metrics.csv")
    assert rows and (run_dir / "ckpt_final").exists() and (run_dir / "config.json").exists()
    last = [r for r in rows if r["split"] == "test"][-1]
    assert f"top1={last['top1']:.4f}" in out
    for extra in ([], ["--dataset", str(MNIST10K)]):
        code, out, err = run(capsys, "eval", "--checkpoint", str(run_dir / "ckpt_final"), "--split", "test", *extra)
        assert code == 0, err
        if not extra:  # the recorded dataset keeps its test_limit
            assert f"loss={last['loss']:.6f} top1={last['top1']:.4f} top5={last['top5']:.4f}" in out
        else:
            assert "n=2000" in out
    code, out, _ = run(capsys, "eval", "--checkpoint", str(run_dir / "ckpt_final"), "--packed")
    assert code == 0 and f"top1={last['top1']:.4f}" in out


def test_train_resume_matches_uninterrupted(capsys, tmp_path):
    from hwgq.cli import load_run_config
    from hwgq.data import load_dataset
    from hwgq.trainer import train

    full_dir = tmp_path / "full"
    full_dir.mkdir()
    assert run(capsys, "train", "--config", str(toy_config(full_dir)))[0] == 0
    # interrupt a second run after 4 iterations, then resume it through the CLI
    part_dir = tmp_path / "part"
    part_dir.mkdir()
    cfg_path = toy_config(part_dir)
    cfg = load_run_config(cfg_path)
    tr, te = load_dataset(cfg["dataset"])
    train(cfg["network"], cfg["quantizer"], tr, te, cfg["train"], cfg["run_dir"], meta={"dataset": cfg["dataset"]}, stop_at=4)
    code, _, err = run(capsys, "train", "--config", str(cfg_path), "--resume", str(part_dir / "run" / "ckpt_last"))
    assert code == 0, err
    assert (part_dir / "run" / "metrics.csv").read_bytes() == (full_dir / "run" / "metrics.csv").read_bytes()
    assert (part_dir / "run" / "ckpt_final").read_bytes() == (full_dir / "run" / "ckpt_final").read_bytes()


def test_run_root_env(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path / "root"))
    cfg = toy_config(tmp_path, run_dir="nested/r1", train={"total_iters": 2, "batch_size": 25})
    assert run(capsys, "train", "--config", str(cfg))[0] == 0
    assert (tmp_path / "root" / "nested" / "r1" / "ckpt_final").exists()


@pytest.mark.parametrize(
    "over, category, fragment",
    [
        ({"train": {"total_iters": 0}}, "config", "config.train.total_iters"),
        ({"train": {"total_iters": 2, "lr": 1}}, "config", "config.train.lr"),
        ({"extra": 1}, "config", "config.extra"),
        ({"quantizer": {"levels": 40}}, "config", "config.quantizer.levels"),
        ({"dataset": {"path": "nowhere"}}, "data", "config.dataset.path"),
        ({"train": {"total_iters": 2, "base_lr": 1e30, "momentum": 0.0}}, "diverged", "iteration"),
    ],
)
def test_train_config_errors(capsys, tmp_path, over, category, fragment):
    code, _, err = run(capsys, "train", "--config", str(toy_config(tmp_path, **over)))
    assert code == EXIT_CODES[category]
    assert_one_error_line(err, category)
    assert fragment in err


def test_train_bad_json_and_missing_file(capsys, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{\n  nope")
    code, _, err = run(capsys, "train", "--config", str(bad))
    assert code == EXIT_CODES["config"] and "line 2" in err
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "missing.json"))
    assert code == EXIT_CODES["io"]
    assert_one_error_line(err, "io")


def test_eval_checkpoint_errors(capsys, tmp_path):
    junk = tmp_path / "junk"
    junk.write_bytes(b"not a checkpoint")
    code, _, err = run(capsys, "eval", "--checkpoint", str(junk))
    assert code == EXIT_CODES["checkpoint"]
    assert_one_error_line(err, "checkpoint")
    newer = tmp_path / "newer"
    newer.write_bytes(Checkpoint({}, {"iteration": 0}, "x").to_bytes().replace(b"version: 1", b"version: 9"))
    code, _, err = run(capsys, "eval", "--checkpoint", str(newer))
    assert code == EXIT_CODES["checkpoint"] and "version 9" in err


def _synthetic_config(tmp_path, classes=4, n_train=20, iters=60):
    return toy_config(
        tmp_path,
        network={
            "input_shape": [1, 8, 8],
            "num_classes": classes,
            "layers": [{"type": "conv", "out": 8, "padding": 1, "pool": 2}, {"type": "fc", "out": classes}],
        },
        train={"total_iters": iters, "batch_size": 10, "base_lr": 0.1, "weight_decay": 0.0, "log_every": 20},
        dataset={"kind": "synthetic", "n_train": n_train, "n_test": 20, "classes": classes, "shape": [1, 8, 8]},
        quantizer=None,
    )


def test_eval_memorized_train_split(capsys, tmp_path):
    assert run(capsys, "train", "--config", str(_synthetic_config(tmp_path)))[0] == 0
    code, out, _ = run(capsys, "eval", "--checkpoint", str(tmp_path / "run" / "ckpt_final"), "--split", "train")
    assert code == 0 and "n=20" in out and "top1=1.0000" in out


def test_eval_wrong_class_count(capsys, tmp_path):
    assert run(capsys, "train", "--config", str(_synthetic_config(tmp_path, iters=2)))[0] == 0
    other = tmp_path / "three.json"
    other.write_text(json.dumps({"kind": "synthetic", "n_train": 9, "n_test": 9, "classes": 3, "shape": [1, 8, 8]}))
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "run" / "ckpt_final"), "--dataset", str(other))
    assert code == EXIT_CODES["data"]
    assert_one_error_line(err, "data")
    assert "classes" in err


@pytest.mark.parametrize("mode", ["vanilla", "clipped"])
def test_deep_toy_configs_run(capsys, tmp_path, monkeypatch, mode):
    shipped = Path(__file__).parent.parent / "configs" / f"deep_toy_{mode}.json"
    doc = json.loads(shipped.read_text())
    assert doc["train"]["backward_mode"] == mode
    doc["train"].update(total_iters=4, log_every=2, eval_every=4)
    doc["quantizer"] = str(shipped.parent / doc["quantizer"])
    cfg = tmp_path / "deep.json"
    cfg.write_text(json.dumps(doc))
    monkeypatch.setenv(RUN_ROOT_ENV, str(tmp_path))
    code, _, err = run(capsys, "train", "--config", str(cfg))
    assert code == 0, err
    rows = read_metrics(tmp_path / doc["run_dir"] / "metrics.csv")
    assert [r["iter"] for r in rows if r["split"] == "train"] == [2, 4]


# bench / export-tables ------------------------------------------------------


def test_bench(capsys, tmp_path):
    out = tmp_path / "b.csv"
    code, _, err = run(capsys, "bench", "--min-size", "64", "--max-size", "300", "--min-time", "0.001", "--out", str(out))
    assert code == 0, err
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert sorted({int(r["size"]) for r in rows}) == [64, 128, 256, 300]
    for size in {r["size"] for r in rows}:
        pair = [r for r in rows if r["size"] == size]
        assert {r["path"] for r in pair} == {"float", "packed"}
        assert len({r["checksum"] for r in pair}) == 1
    code, _, err = run(capsys, "bench", "--min-size", "10", "--max-size", "5", "--out", str(out))
    assert code == EXIT_CODES["usage"]


def test_export_tables(capsys, tmp_path):
    code, out, _ = run(capsys, "export-tables", "--levels", "1", "3", *SMALL, "--out", str(tmp_path))
    assert code == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["hwgq_m1_nonuniform.json", "hwgq_m1_uniform.json", "hwgq_m3_nonuniform.json", "hwgq_m3_uniform.json", "tables.csv"]
    with open(tmp_path / "tables.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [(r["m"], r["uniform"]) for r in rows] == [("1", "0"), ("1", "1"), ("3", "0"), ("3", "1")]
    mse = {(r["m"], r["uniform"]): float(r["mse"]) for r in rows}
    assert mse[("3", "1")] >= mse[("3", "0")]
    spec = QuantizerSpec.load(tmp_path / "hwgq_m3_uniform.json")
    assert float(rows[3]["delta"]) == spec.delta


def test_console_entry_point():
    res = subprocess.run([sys.executable, "-m", "hwgq", "design-quantizer", "--levels", "99"], capture_output=True, text=True)
    assert res.returncode == EXIT_CODES["usage"]
    assert res.stderr.count("\n") == 1 and res.stderr.startswith("hwgq: error[usage]:")
    res = subprocess.run([sys.executable, "-m", "hwgq", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "design-quantizer" in res.stdout
