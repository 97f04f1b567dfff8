from __future__ import annotations

import csv
import json

import numpy as np
import pytest

from iron.cli import main
from iron.landscape import argmax_tensor, load_tensor
from iron.synth import SuiteConfig, scene_suite, scene_tensor
from iron.landscape import GridSpec
from iron.trainer import load_dataset

SMALL = ["--suite.n_points", "60"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--scenes", "2", "--centers", "5", "--seed", "7", "--output-dir", str(d), *SMALL]) == 0
    return d / "dataset.irnd"


def test_gen_data_counts_and_is_byte_identical(capsys, tmp_path, small_dataset):
    code, out, _ = run(capsys, "gen-data", "--scenes", 2, "--centers", 5, "--seed", 7, "--output-dir", tmp_path,
                       *SMALL)
    assert code == 0 and "samples: 10" in out
    x, y = load_dataset(tmp_path / "dataset.irnd")
    assert x.shape == (10, 9, 9, 9) and y.shape == (10, 3)
    assert (tmp_path / "dataset.irnd").read_bytes() == small_dataset.read_bytes()
    manifest = small_dataset.with_suffix(".manifest.json")
    assert (tmp_path / "dataset.manifest.json").read_bytes() == manifest.read_bytes()
    doc = json.loads(manifest.read_text())
    assert doc["sample_count"] == 10 and len(doc["scenes"]) == 2


def test_invalid_config_exits_2_and_writes_nothing(capsys, tmp_path):
    code, _, err = run(capsys, "gen-data", "--scenes", 0, "--output-dir", tmp_path)
    assert code == 2 and "scenes" in err
    code, _, err = run(capsys, "gen-data", "--grid.bogus", 3, "--output-dir", tmp_path)
    assert code == 2 and "bogus" in err
    code, _, _ = run(capsys, "gen-data", "--kernel.sigma", -1, "--output-dir", tmp_path)
    assert code == 2
    assert list(tmp_path.iterdir()) == []


def test_config_file_and_overrides(capsys, tmp_path):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"seed": 7, "suite": {"scenes": 2, "n_points": 60},
                               "dataset": {"centers_per_scene": 5}}))
    out_dir = tmp_path / "o"
    code, out, _ = run(capsys, "gen-data", "--config", cfg, "--output-dir", out_dir, "--dataset.centers_per_scene", 3)
    assert code == 0 and "samples: 6" in out
    cfg.write_text("{not json")
    code, _, _ = run(capsys, "gen-data", "--config", cfg)
    assert code == 2


def test_train_writes_epoch_rows(capsys, tmp_path, small_dataset):
    code, out, _ = run(capsys, "train", "--dataset", small_dataset, "--epochs", 1, "--train.batch_size", 4,
                       "--output-dir", tmp_path)
    assert code == 0 and "validation ParamAcc" in out
    rows = list(csv.reader((tmp_path / "model.loss.csv").open()))
    assert rows[0] == ["epoch", "mean_loss"] and len(rows) == 2
    assert (tmp_path / "model.irnw").read_bytes()[:4] == b"IRNW"


def test_train_default_epochs_gives_40_rows(capsys, tmp_path, small_dataset):
    code, _, _ = run(capsys, "train", "--dataset", small_dataset, "--train.batch_size", 4,
                     "--train.val_fraction", 0.5, "--output-dir", tmp_path)
    assert code == 0
    assert len(list(csv.reader((tmp_path / "model.loss.csv").open()))) == 41


def test_train_rejects_corrupt_dataset(capsys, tmp_path, small_dataset):
    bad = tmp_path / "bad.irnd"
    bad.write_bytes(b"JUNK" + small_dataset.read_bytes()[4:])
    code, _, err = run(capsys, "train", "--dataset", bad, "--output-dir", tmp_path)
    assert code == 3 and "magic" in err.lower()
    code, _, _ = run(capsys, "train", "--dataset", tmp_path / "missing.irnd")
    assert code == 2


@pytest.fixture(scope="module")
def landscape(tmp_path_factory):
    d = tmp_path_factory.mktemp("land")
    assert main(["export-landscape", "--seed", "3", "--output-dir", str(d), *SMALL]) == 0
    return d / "landscape.irnt"


def test_export_landscape_size_and_round_trip(capsys, tmp_path, landscape):
    tensor = load_tensor(landscape)
    data = landscape.read_bytes()
    assert len(data) - 31**3 * 4 == len(data) - tensor.values.size * 4
    assert data[:4] == b"IRNT"
    (spec,) = scene_suite(SuiteConfig(scenes=1, seed=3, n_points=60), GridSpec())
    _, fresh = scene_tensor(spec)
    np.testing.assert_array_equal(tensor.values, fresh.values.astype(np.float32))
    code, _, _ = run(capsys, "export-landscape", "--seed", 3, "--output-dir", tmp_path, *SMALL)
    assert code == 0 and (tmp_path / "landscape.irnt").read_bytes() == data


def test_predict_stub_hits_argmax_with_one_evaluation(capsys, landscape):
    tensor = load_tensor(landscape)
    peak = argmax_tensor(tensor)
    code, out, _ = run(capsys, "predict", "--tensor", landscape, "--center", "10,12,14", "--stub-perfect")
    assert code == 0
    assert "evaluations: 1" in out
    assert f"estimated optimum index: {list(peak)}" in out


def test_predict_with_model_and_errors(capsys, tmp_path, landscape, small_dataset):
    assert main(["train", "--dataset", str(small_dataset), "--epochs", "1", "--train.batch_size", "4",
                 "--output-dir", str(tmp_path)]) == 0
    code, out, _ = run(capsys, "predict", "--tensor", landscape, "--center", "4,4,26", "--model",
                       tmp_path / "model.irnw")
    assert code == 0 and "evaluations: 1" in out
    for bad in ("3,10,10", "10,27,10", "1,2"):
        code, _, _ = run(capsys, "predict", "--tensor", landscape, "--center", bad, "--stub-perfect")
        assert code == 2
    code, _, _ = run(capsys, "predict", "--tensor", landscape, "--center", "10,10,10")
    assert code == 2
    code, _, _ = run(capsys, "predict", "--tensor", tmp_path / "none.irnt", "--center", "10,10,10",
                     "--stub-perfect")
    assert code == 2


NOISELESS = ["--bench_suite.scenes", 2, "--bench_suite.noise_sigma", 0, "--bench_suite.outlier_fraction", 0,
             "--bench_suite.n_points", 60, "--benchmark.trials_per_scene", 2]


def test_benchmark_stub_noiseless(capsys, tmp_path):
    code, out, _ = run(capsys, "benchmark", "--methods", "iron", "--stub-perfect", "--output-dir", tmp_path,
                       *NOISELESS)
    assert code == 0
    row = next(line for line in out.splitlines() if line.startswith("ParamAcc"))
    assert row.split()[1] == "1"
    doc = json.loads((tmp_path / "benchmark.json").read_text())
    assert doc["methods"]["iron"]["ParamAcc"]["mean"] == 1.0
    assert doc["methods"]["iron"]["OptiStep"] == {"mean": 1.0, "std": 0.0}


def test_benchmark_table_shape_and_missing_model(capsys, tmp_path):
    code, _, _ = run(capsys, "benchmark", "--methods", "anneal,ga,ps,pso,iron", "--stub-perfect",
                     "--output-dir", tmp_path, "--bench_suite.scenes", 1, "--benchmark.trials_per_scene", 1,
                     "--bench_suite.n_points", 40, "--anneal.max_iterations", 200, "--ga.generations", 3,
                     "--pso.max_iterations", 3)
    assert code == 0
    rows = list(csv.reader((tmp_path / "benchmark.csv").open()))
    assert len(rows) == 7 and all(len(r) == 6 for r in rows)
    assert rows[0][1:] == ["anneal", "ga", "ps", "pso", "iron"]
    code, _, err = run(capsys, "benchmark", "--methods", "iron", "--output-dir", tmp_path)
    assert code == 2 and "model" in err
    code, _, _ = run(capsys, "benchmark", "--methods", "newton", "--output-dir", tmp_path)
    assert code == 2


def test_iron_seed_environment_fallback(capsys, tmp_path, monkeypatch, small_dataset):
    monkeypatch.setenv("IRON_SEED", "7")
    code, _, _ = run(capsys, "gen-data", "--scenes", 2, "--centers", 5, "--output-dir", tmp_path, *SMALL)
    assert code == 0
    assert (tmp_path / "dataset.irnd").read_bytes() == small_dataset.read_bytes()
