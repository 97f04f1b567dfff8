from __future__ import annotations

import json

import numpy as np
import pytest

from iron.errors import ConfigError, ShapeError
from iron.evaluation import (
    METRICS,
    BenchmarkConfig,
    EvalConfig,
    PerfectStub,
    normalized_params,
    param_accuracy,
    param_rmse,
    point_accuracy,
    point_residuals,
    point_rmse,
    run_benchmark,
    summary_rows,
    write_summary_csv,
)
from iron.geometry import CameraModel, PoseParams, pose_to_homography, transform_points
from iron.landscape import GridSpec
from iron.synth import SceneSpec, SuiteConfig, generate_scene, scene_suite

CAM = CameraModel()
GRID = GridSpec()


# -- brute-force references ----------------------------------------------------------

def brute_param_accuracy(est, tru, t):
    hits = 0
    for e, r in zip(est, tru):
        if all(abs(a - b) < t for a, b in zip(e, r)):
            hits += 1
    return hits / len(est)


def brute_param_rmse(est, tru):
    total = 0.0
    for e, r in zip(est, tru):
        total += sum((a - b) ** 2 for a, b in zip(e, r))
    return (total / len(est)) ** 0.5


def brute_residuals(u, v, pairs, pose):
    h = pose_to_homography(pose, CAM).h
    out = []
    for i, j in pairs:
        p = h @ np.array([u[i][0], u[i][1], 1.0])
        out.append(((p[0] / p[2] - v[j][0]) ** 2 + (p[1] / p[2] - v[j][1]) ** 2) ** 0.5)
    return out


# -- parameter metrics --------------------------------------------------------------

def test_param_metric_hand_cases():
    t = np.zeros((4, 3))
    assert param_accuracy(t, t) == 1.0
    est = t.copy()
    est[3, 1] = 0.5
    assert param_accuracy(est, t) == 0.75
    assert param_accuracy([[1 / 22, 0, 0]], [[0, 0, 0]]) == 0.0
    assert param_rmse(t, t) == 0.0
    assert param_rmse([[2, 0, 0]], [[0, 0, 0]]) == 2.0
    with pytest.raises(ShapeError):
        param_accuracy(np.zeros((2, 3)), np.zeros((3, 3)))
    with pytest.raises(ShapeError):
        param_rmse(np.zeros((0, 3)), np.zeros((0, 3)))


def test_param_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(1, 20))
        tru = rng.uniform(-1, 1, (n, 3))
        est = tru + rng.normal(0, 0.05, (n, 3))
        assert abs(param_accuracy(est, tru) - brute_param_accuracy(est, tru, 1 / 22)) < 1e-9
        assert abs(param_rmse(est, tru) - brute_param_rmse(est, tru)) < 1e-9


# -- point metrics --------------------------------------------------------------------

def _noiseless_scene(seed=0):
    spec = SceneSpec(PoseParams(1.0, 2.0, -1.5, 0.3, 0.0, 0.0), n_points=50, noise_sigma=0.0,
                     outlier_fraction=0.0, seed=seed)
    return spec, generate_scene(spec, CAM)


def test_point_metrics_at_true_pose():
    spec, scene = _noiseless_scene()
    assert point_accuracy(scene.u, scene.v, scene.correspondences, spec.true_pose, CAM) == 1.0
    assert point_rmse(scene.u, scene.v, scene.correspondences, spec.true_pose, CAM) < 1e-9


def test_point_metric_shift_cases():
    u = np.array([[10.0, 10.0], [20.0, 5.0], [30.0, 40.0], [0.0, 0.0]])
    pairs = [(i, i) for i in range(4)]
    pose = PoseParams()
    moved = transform_points(u, pose_to_homography(pose, CAM))
    v10 = moved + [10.0, 0.0]
    assert point_accuracy(u, v10, pairs, pose, CAM) == 0.0
    v3 = moved + [0.0, 3.0]
    assert point_rmse(u, v3, pairs, pose, CAM) == pytest.approx(3.0, abs=1e-12)
    half = moved.copy()
    half[:2] += [5.0, 0.0]
    assert point_accuracy(u, half, pairs, pose, CAM) == 0.5
    with pytest.raises(ShapeError):
        point_rmse(u, v3, [], pose, CAM)


def test_point_metrics_match_brute_force():
    rng = np.random.default_rng(1)
    for k in range(100):
        n = int(rng.integers(1, 15))
        u = rng.uniform(0, 512, (n, 2))
        v = rng.uniform(0, 512, (n, 2))
        pairs = [(int(i), int(j)) for i, j in zip(rng.permutation(n), rng.permutation(n))]
        pose = PoseParams(*rng.uniform(-5, 5, 3), rng.uniform(-np.pi, np.pi), 0.0, 0.0)
        ref = brute_residuals(u, v, pairs, pose)
        np.testing.assert_allclose(point_residuals(u, v, pairs, pose, CAM), ref, atol=1e-9)
        assert abs(point_rmse(u, v, pairs, pose, CAM) - float(np.sqrt(np.mean(np.square(ref))))) < 1e-9
        want = sum(r < 2.0 for r in ref) / n
        assert abs(point_accuracy(u, v, pairs, pose, CAM, 2.0) - want) < 1e-9


def test_normalized_params_is_grid_steps_over_22():
    lower = np.array([GRID.x_range[0], GRID.y_range[0], GRID.z_range[0]])
    np.testing.assert_allclose(normalized_params(lower + 22 * GRID.spacing, GRID), [1, 1, 1])


def test_eval_config_rejects_nonpositive():
    with pytest.raises(ConfigError):
        EvalConfig(t_pm=0)
    with pytest.raises(ConfigError):
        EvalConfig(t_pt=-1)


# -- benchmark ------------------------------------------------------------------------

NOISELESS = SuiteConfig(scenes=2, seed=11, noise_sigma=0.0, outlier_fraction=0.0, n_points=60)


def test_perfect_stub_benchmark_on_noiseless_scenes():
    specs = scene_suite(NOISELESS, GRID)
    report = run_benchmark(specs, BenchmarkConfig(("iron",), trials_per_scene=3), PerfectStub(), GRID, CAM)
    row = report.methods["iron"]
    assert row["trials"] == 6 and row["failures"] == 0
    assert row["ParamAcc"] == {"mean": 1.0, "std": 0.0}
    assert row["ParamRMSE"]["mean"] < 1e-12
    assert row["PointAcc"]["mean"] == 1.0
    assert row["OptiStep"] == {"mean": 1.0, "std": 0.0}
    assert all(t["OptiStep"] == 1 for t in report.trials)


def test_benchmark_requires_model_and_scenes():
    specs = scene_suite(NOISELESS, GRID)
    with pytest.raises(ConfigError):
        run_benchmark(specs, BenchmarkConfig(("iron",)), None, GRID, CAM)
    with pytest.raises(ConfigError):
        run_benchmark([], BenchmarkConfig(("ps",)), None, GRID, CAM)
    with pytest.raises(ConfigError):
        BenchmarkConfig(("newton",))


def _strip_timing(report):
    doc = json.loads(report.to_json())
    for t in doc["trials"]:
        t.pop("Runtime", None)
    for s in doc["scenes"]:
        s.pop("tensor_seconds", None)
    for row in doc["methods"].values():
        row.pop("Runtime")
    return doc


@pytest.fixture(scope="module")
def ps_report():
    (spec,) = scene_suite(SuiteConfig(scenes=1, seed=5, n_points=60), GRID)
    return spec, run_benchmark([spec], BenchmarkConfig(("ps", "iron"), trials_per_scene=4, seed=2),
                               PerfectStub(), GRID, CAM)


def test_benchmark_determinism(ps_report):
    spec, first = ps_report
    again = run_benchmark([spec], BenchmarkConfig(("ps", "iron"), trials_per_scene=4, seed=2),
                          PerfectStub(), GRID, CAM, threads=2)
    assert _strip_timing(first) == _strip_timing(again)


def test_report_aggregation_matches_raw_records(ps_report):
    _, report = ps_report
    for method, row in report.methods.items():
        recs = [t for t in report.trials if t["method"] == method and t["ok"]]
        assert row["trials"] == len(recs)
        for m in METRICS:
            vals = np.array([t[m] for t in recs])
            assert abs(row[m]["mean"] - vals.mean()) < 1e-12
            assert abs(row[m]["std"] - vals.std()) < 1e-12
            assert row[m]["std"] >= 0
        for m in ("ParamAcc", "PointAcc"):
            assert 0 <= row[m]["mean"] <= 1
    assert report.methods["ps"]["OptiStep"]["mean"] > 100
    assert [(t["scene"], t["trial"], t["method"]) for t in report.trials] == sorted(
        [(t["scene"], t["trial"], t["method"]) for t in report.trials],
        key=lambda k: (k[0], k[1], ["ps", "iron"].index(k[2])))


def test_summary_table_layout(ps_report, tmp_path):
    _, report = ps_report
    rows = summary_rows(report)
    assert rows[0] == ["metric", "ps", "iron"]
    assert [r[0] for r in rows[1:]] == list(METRICS)
    write_summary_csv(report, tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[0] == "metric,ps,iron"


def test_runtime_grows_with_evaluations():
    (spec,) = scene_suite(SuiteConfig(scenes=1, seed=8, n_points=60), GRID)
    from iron.baselines import AnnealConfig

    runs = []
    for iters in (200, 400, 800, 1600):
        report = run_benchmark([spec], BenchmarkConfig(("anneal",), trials_per_scene=1), None, GRID, CAM,
                               heuristic_cfgs={"anneal": AnnealConfig(max_iterations=iters)})
        t = report.trials[0]
        assert t["Runtime"] >= 0
        runs.append((t["OptiStep"], t["Runtime"]))
    steps, times = np.array(runs).T
    rank = lambda a: np.argsort(np.argsort(a))  # noqa: E731
    assert np.corrcoef(rank(steps), rank(times))[0, 1] > 0
