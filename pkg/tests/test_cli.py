"""Command line behavior: exit codes, artifacts, reruns."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import pytest

from wsnaslab.bench import load_table
from wsnaslab.cli import main
from wsnaslab.config import ExperimentConfig


def tiny_config_dict(root: Path) -> dict:
    return {
        "space": {"n_nodes": 1, "ops": ["conv3x3", "conv1x1"]},
        "macro": {"init_channels": 4, "num_layers": 1, "num_classes": 3, "in_channels": 1},
        "protocol": {"epochs": 1, "batch_size": 8},
        "dataset": {"samples_per_class": 12, "image_size": 6},
        "metrics": {"num_eval_archs": 2, "eval_warning_floor": 1, "top_k": 1},
        "eval": {"supernet_seeds": [0, 1], "bn_mode": "batch"},
        "benchmark": {"path": str(root / "bench.jsonl"), "base_seed": 0, "run_seeds": [0, 1]},
        "output": {"directory": str(root / "runs")},
    }


@pytest.fixture(scope="module")
def workdir(tmp_path_factory) -> Path:
    """A config plus a built ground-truth table, shared by the module."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(tiny_config_dict(root), indent=2))
    assert main(["build-benchmark", "--config", str(cfg)]) == 0
    return root


def config_path(root: Path) -> str:
    return str(root / "config.json")


def read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


# ----------------------------------------------------------- exit codes

def test_missing_config_exits_4(tmp_path, capsys):
    assert main(["enumerate", "--config", str(tmp_path / "absent.json")]) == 4
    assert "error" in capsys.readouterr().err


def test_invalid_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"protocol": {"epochs": 0}}))
    assert main(["enumerate", "--config", str(bad)]) == 2
    bad.write_text("{broken")
    assert main(["enumerate", "--config", str(bad)]) == 2


def test_run_without_table_exits_4(tmp_path, capsys):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(tiny_config_dict(tmp_path)))
    assert main(["run", "--config", str(cfg)]) == 4


# ------------------------------------------------------------ enumerate

def test_enumerate_counts_and_listing(workdir, capsys):
    out = workdir / "space.json"
    assert main(["enumerate", "--config", config_path(workdir), "--out", str(out)]) == 0
    stdout = capsys.readouterr().out
    assert "raw encodings: 2" in stdout
    assert "unique architectures: 2" in stdout
    payload = json.loads(out.read_text())
    assert payload["unique_count"] == 2
    assert len(payload["architectures"]) == 2
    for h, info in payload["architectures"].items():
        assert info["multiplicity"] == 1
        assert info["encoding"]["nodes"] == 1


# ------------------------------------------------------ build-benchmark

def test_benchmark_table_written_by_fixture(workdir):
    table = load_table(workdir / "bench.jsonl")
    assert len(table.entries) == 4  # two architectures x two run seeds
    assert table.meta["run_seeds"] == [0, 1]
    assert set(table.meta["multiplicity"].values()) == {1}


# ------------------------------------------------------------------ run

def test_run_writes_report_and_reruns_byte_identical(workdir, capsys):
    out_a = workdir / "run_a"
    out_b = workdir / "run_b"
    assert main(["run", "--config", config_path(workdir), "--out", str(out_a)]) == 0
    stdout = capsys.readouterr().out
    assert "s_kdt:" in stdout and "p_surpass_random:" in stdout
    for name in (
        "metrics.csv", "ranks.csv", "config.json",
        "supernet_seed0.ckpt", "supernet_seed1.ckpt",
        "trainlog_seed0.csv", "trainlog_seed1.csv",
    ):
        assert (out_a / name).exists(), name

    assert main(["run", "--config", config_path(workdir), "--out", str(out_b)]) == 0
    for name in ("metrics.csv", "ranks.csv", "config.json", "supernet_seed0.ckpt"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes(), name

    rows = read_csv(out_a / "metrics.csv")
    assert len(rows) == 1
    assert rows[0]["p_surpass_random"] != "NA"
    float(rows[0]["supernet_accuracy"])

    ranks = read_csv(out_a / "ranks.csv")
    assert len(ranks) == 2
    assert {r["gt_rank"] for r in ranks} == {"1", "2"}
    assert {r["supernet_rank"] for r in ranks} == {"1", "2"}


def test_run_seed_changes_artifacts(workdir):
    out_c = workdir / "run_c"
    assert main(["run", "--config", config_path(workdir), "--out", str(out_c), "--seed", "9"]) == 0
    a = (workdir / "run_a" / "supernet_seed0.ckpt").read_bytes()
    c = (out_c / "supernet_seed0.ckpt").read_bytes()
    assert a != c


def test_run_with_mismatched_table_exits_3(workdir, tmp_path, capsys):
    d = tiny_config_dict(workdir)
    d["macro"]["init_channels"] = 8
    other = tmp_path / "other.json"
    other.write_text(json.dumps(d))
    assert main(["run", "--config", str(other), "--out", str(tmp_path / "x")]) == 3


def test_run_tracked_eval_without_tracking_exits_2(workdir, tmp_path, capsys):
    d = tiny_config_dict(workdir)
    d["eval"]["bn_mode"] = "tracked"
    cfg = tmp_path / "tracked.json"
    cfg.write_text(json.dumps(d))
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "y")]) == 2


# ---------------------------------------------------------------- sweep

def test_sweep_writes_variant_grid(workdir, capsys):
    out = workdir / "sweep"
    assert main(["sweep", "--config", config_path(workdir), "--out", str(out)]) == 0
    rows = read_csv(out / "sweep.csv")
    assert [r["variant"] for r in rows] == ["YY", "YN", "NN"]
    for name in ("YY", "YN", "NN"):
        assert (out / name / "metrics.csv").exists()
        assert (out / name / "ranks.csv").exists()


def test_sweep_requires_dynamic_space(workdir, tmp_path, capsys):
    d = tiny_config_dict(workdir)
    d["space"] = {
        "n_nodes": 1, "ops": ["conv3x3", "conv1x1"], "op_placement": "edge",
        "merge_rule": "sum", "channel_mode": "fixed",
    }
    cfg = tmp_path / "fixed.json"
    cfg.write_text(json.dumps(d))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2


def test_sweep_rejects_disabled_strategy(workdir, tmp_path, capsys):
    d = tiny_config_dict(workdir)
    d["supernet"] = {
        "channel_strategy": "disabled", "fixed_k": 1,
        "dynamic_channel_train": False, "dynamic_channel_test": False,
    }
    cfg = tmp_path / "disabled.json"
    cfg.write_text(json.dumps(d))
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "s")]) == 2


# ------------------------------------------------------------ histogram

def test_histogram_csv_contents(workdir, capsys):
    out = workdir / "hist.csv"
    assert main([
        "histogram", "--config", config_path(workdir),
        "--draws", "30", "--out", str(out),
        "--bench", str(workdir / "bench.jsonl"),
    ]) == 0
    rows = read_csv(out)
    assert len(rows) == 2
    assert sum(int(r["count"]) for r in rows) == 30
    assert {r["gt_rank"] for r in rows} == {"1", "2"}

    no_bench = workdir / "hist_nb.csv"
    assert main([
        "histogram", "--config", config_path(workdir),
        "--draws", "5", "--out", str(no_bench),
    ]) == 0
    assert {r["gt_rank"] for r in read_csv(no_bench)} == {"NA"}


# ------------------------------------------------------------ landscape

def test_landscape_grid_csv(workdir, capsys):
    out = workdir / "grid.csv"
    assert main([
        "landscape", "--config", config_path(workdir), "--out", str(out),
        "--half-points", "2", "--num-paths", "2", "--batch", "8",
    ]) == 0
    with open(out, newline="") as f:
        rows = list(csv.reader(f))
    assert len(rows) == 5 and all(len(r) == 5 for r in rows)
    for row in rows:
        for cell in row:
            assert cell == "nan" or isinstance(float(cell), float)


def test_landscape_single_arch_and_checkpoint_reuse(workdir, capsys):
    listing = json.loads((workdir / "space.json").read_text())
    arch = sorted(listing["architectures"])[0]
    out = workdir / "grid_arch.csv"
    ckpt = workdir / "run_a" / "supernet_seed0.ckpt"
    assert main([
        "landscape", "--config", config_path(workdir), "--out", str(out),
        "--arch", arch, "--ckpt", str(ckpt),
        "--half-points", "1", "--batch", "8",
    ]) == 0
    assert out.exists()

    assert main([
        "landscape", "--config", config_path(workdir), "--out", str(out),
        "--arch", "0000000000000000", "--half-points", "1", "--batch", "8",
    ]) == 3


def test_landscape_checkpoint_errors(workdir, tmp_path, capsys):
    assert main([
        "landscape", "--config", config_path(workdir),
        "--out", str(tmp_path / "g.csv"), "--ckpt", str(tmp_path / "absent.ckpt"),
        "--half-points", "1", "--batch", "8",
    ]) == 4

    d = tiny_config_dict(workdir)
    d["macro"]["init_channels"] = 8
    cfg = tmp_path / "wide.json"
    cfg.write_text(json.dumps(d))
    assert main([
        "landscape", "--config", str(cfg),
        "--out", str(tmp_path / "g.csv"),
        "--ckpt", str(workdir / "run_a" / "supernet_seed0.ckpt"),
        "--half-points", "1", "--batch", "8",
    ]) == 3


# ------------------------------------------------------------- gradcheck

def test_gradcheck_passes_at_default_tolerance(capsys):
    assert main(["gradcheck", "--max-elements", "4"]) == 0
    stdout = capsys.readouterr().out
    assert "max relative error" in stdout
    assert "ok (tolerance" in stdout


def test_gradcheck_fails_at_impossible_tolerance(capsys):
    assert main(["gradcheck", "--max-elements", "2", "--tolerance", "1e-15"]) == 1
    assert "FAIL" in capsys.readouterr().out


# --------------------------------------------------------------- presets

def test_presets_list_and_emit(tmp_path, capsys):
    assert main(["presets"]) == 0
    names = capsys.readouterr().out.split()
    assert len(names) >= 3
    for name in names:
        out = tmp_path / f"{name}.json"
        assert main(["presets", "--name", name, "--out", str(out)]) == 0
        config = ExperimentConfig.from_dict(json.loads(out.read_text()))
        assert config.protocol.epochs >= 1

    assert main(["presets", "--name", "not-a-preset"]) == 2
