"""Registration metrics and the multi-method benchmark.

Parameter metrics compare translations in normalized grid units (offset in
grid steps divided by 22), so the default threshold 1/22 means "within one
grid step". Point metrics compare pixels.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass, replace

import numpy as np

from .baselines import METHODS, SearchBox
from .errors import ConfigError, IronError, ShapeError
from .geometry import CameraModel, PoseParams, as_points, pose_to_homography, transform_points
from .landscape import (
    LABEL_SCALE,
    WINDOW,
    GridSpec,
    SimilarityTensor,
    admissible_range,
    argmax_tensor,
    make_label,
)
from .network import predict_optimum
from .similarity import KernelConfig, ObjectiveConfig, objective
from .synth import SceneSpec, generate_scene, true_node

log = logging.getLogger(__name__)

METRICS = ("ParamAcc", "ParamRMSE", "PointAcc", "PointRMSE", "Runtime", "OptiStep")
ALL_METHODS = ("anneal", "ga", "ps", "pso", "iron")


@dataclass(frozen=True)
class EvalConfig:
    t_pm: float = 1.0 / LABEL_SCALE
    t_pt: float = 2.0

    def __post_init__(self):
        if not (self.t_pm > 0 and self.t_pt > 0):
            raise ConfigError(f"thresholds must be > 0, got t_pm={self.t_pm}, t_pt={self.t_pt}")


def _paired(estimates, truths) -> tuple[np.ndarray, np.ndarray]:
    est = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    tru = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if est.shape != tru.shape:
        raise ShapeError(f"estimates {est.shape} and truths {tru.shape} differ")
    if est.shape[0] < 1:
        raise ShapeError("need at least one trial")
    return est, tru


def param_accuracy(estimates, truths, t_pm: float = 1.0 / LABEL_SCALE) -> float:
    """Fraction of trials whose every component deviates strictly less than ``t_pm``."""
    est, tru = _paired(estimates, truths)
    return float(np.mean(np.all(np.abs(est - tru) < t_pm, axis=1)))


def param_rmse(estimates, truths) -> float:
    """Root mean squared Euclidean deviation over trials."""
    est, tru = _paired(estimates, truths)
    return float(np.sqrt(np.mean(np.sum((est - tru) ** 2, axis=1))))


def point_residuals(u, v, correspondences, pose: PoseParams, cam: CameraModel = CameraModel()) -> np.ndarray:
    """Pixel distances between transformed sensed points and their references."""
    pairs = np.asarray(correspondences, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        raise ShapeError("correspondences must be nonempty")
    u = as_points(u)
    v = as_points(v)
    moved = transform_points(u[pairs[:, 0]], pose_to_homography(pose, cam))
    return np.linalg.norm(moved - v[pairs[:, 1]], axis=1)


def point_accuracy(u, v, correspondences, pose: PoseParams, cam: CameraModel = CameraModel(),
                   t_pt: float = 2.0) -> float:
    return float(np.mean(point_residuals(u, v, correspondences, pose, cam) < t_pt))


def point_rmse(u, v, correspondences, pose: PoseParams, cam: CameraModel = CameraModel()) -> float:
    r = point_residuals(u, v, correspondences, pose, cam)
    return float(np.sqrt(np.mean(r**2)))


def normalized_params(params, grid: GridSpec, scale: float = LABEL_SCALE) -> np.ndarray:
    """Translation in meters -> grid-step coordinates divided by ``scale``."""
    return (np.asarray(params, dtype=np.float64) - grid.lower) / (grid.spacing * scale)


class PerfectStub:
    """Test hook in place of a trained network.

    ``bind(tensor, center)`` returns a model whose single output is the exact
    label of that window, i.e. the offset to the tensor argmax.
    """

    def bind(self, tensor: SimilarityTensor, center):
        label = make_label(center, argmax_tensor(tensor))

        def model(x):
            out = np.zeros((len(x), 6))
            out[:, :3] = label
            return out

        return model


def _bound(model, tensor, center):
    return model.bind(tensor, center) if hasattr(model, "bind") else model


# -- benchmark --------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkConfig:
    methods: tuple[str, ...] = ALL_METHODS
    trials_per_scene: int = 3
    seed: int = 0

    def __post_init__(self):
        methods = tuple(self.methods)
        if not methods:
            raise ConfigError("at least one method is required")
        unknown = [m for m in methods if m not in ALL_METHODS]
        if unknown:
            raise ConfigError(f"unknown methods {unknown}; choose from {list(ALL_METHODS)}")
        if len(set(methods)) != len(methods):
            raise ConfigError(f"duplicate methods in {list(methods)}")
        object.__setattr__(self, "methods", methods)
        if int(self.trials_per_scene) != self.trials_per_scene or self.trials_per_scene < 1:
            raise ConfigError(f"trials_per_scene must be an integer >= 1, got {self.trials_per_scene}")


@dataclass
class BenchmarkReport:
    methods: dict = field(default_factory=dict)
    trials: list = field(default_factory=list)
    scenes: list = field(default_factory=list)
    fingerprints: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def fingerprint(obj) -> str:
    """SHA-256 of a canonical JSON rendering."""
    if is_dataclass(obj):
        obj = asdict(obj)
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def _trial_centers(grid: GridSpec, seed: int, scene_index: int, trials: int):
    lo, hi = admissible_range(grid.nodes, WINDOW)
    rng = np.random.default_rng((seed, scene_index, 2))
    return [tuple(int(c) for c in rng.integers(lo, hi + 1, size=3)) for _ in range(trials)]


def _metrics(est_params, spec: SceneSpec, scene, grid, cam, eval_cfg) -> dict:
    truth = normalized_params(spec.true_pose.translation, grid)
    est = normalized_params(est_params, grid)
    pose = PoseParams.from_translation(est_params, spec.true_pose.angles)
    return {
        "ParamAcc": param_accuracy(est, truth, eval_cfg.t_pm),
        "ParamRMSE": param_rmse(est, truth),
        "PointAcc": point_accuracy(scene.u, scene.v, scene.correspondences, pose, cam, eval_cfg.t_pt),
        "PointRMSE": point_rmse(scene.u, scene.v, scene.correspondences, pose, cam),
    }


def _run_scene(index, spec, bench, model, grid, cam, kcfg, ocfg, heuristic_cfgs, eval_cfg):
    from .landscape import build_similarity_tensor

    scene = generate_scene(spec, cam)
    tensor = None
    setup_seconds = 0.0
    if "iron" in bench.methods:
        t0 = time.perf_counter()
        tensor = build_similarity_tensor(scene.u, scene.v, spec.true_pose.angles, grid, cam, kcfg, ocfg)
        setup_seconds = time.perf_counter() - t0
    angles = spec.true_pose.angles
    box = SearchBox.from_grid(grid)

    def score(p):
        return objective(scene.u, scene.v, PoseParams.from_translation(p, angles), cam, kcfg, ocfg)

    records = []
    for trial, center in enumerate(_trial_centers(grid, bench.seed, index, bench.trials_per_scene)):
        x0 = grid.node_params(center)
        trial_seed = int(np.random.default_rng((bench.seed, index, trial, 3)).integers(2**31))
        for method in bench.methods:
            rec = {"scene": index, "scene_seed": spec.seed, "trial": trial, "method": method,
                   "init_index": list(center), "ok": True, "error": None}
            try:
                if method == "iron":
                    t0 = time.perf_counter()
                    params, _, count = predict_optimum(_bound(model, tensor, center), tensor, center)
                    runtime = time.perf_counter() - t0
                else:
                    fn, _ = METHODS[method]
                    cfg = replace(heuristic_cfgs[method], seed=trial_seed)
                    res = fn(score, box, cfg, x0=x0)
                    params, count, runtime = res.best_params, res.evaluation_count, res.runtime_seconds
                rec["estimate"] = [float(p) for p in params]
                rec.update(_metrics(params, spec, scene, grid, cam, eval_cfg))
                rec["Runtime"] = float(runtime)
                rec["OptiStep"] = int(count)
            except IronError as exc:
                rec.update(ok=False, error=f"{type(exc).__name__}: {exc}")
            records.append(rec)
    summary = {"scene": index, "seed": spec.seed, "true_index": list(true_node(spec, grid)),
               "tensor_seconds": setup_seconds}
    if tensor is not None:
        summary["argmax_index"] = list(argmax_tensor(tensor))
    return records, summary


def aggregate(trials: list[dict], methods) -> dict:
    """Per-method mean/std of every metric over successful trials."""
    table = {}
    for method in methods:
        ok = [t for t in trials if t["method"] == method and t["ok"]]
        failed = sum(1 for t in trials if t["method"] == method and not t["ok"])
        row = {"trials": len(ok), "failures": failed}
        for m in METRICS:
            vals = np.array([t[m] for t in ok], dtype=np.float64)
            row[m] = ({"mean": float(vals.mean()), "std": float(vals.std())} if len(vals)
                      else {"mean": None, "std": None})
        table[method] = row
    return table


def run_benchmark(
    scenes: list[SceneSpec],
    bench: BenchmarkConfig = BenchmarkConfig(),
    model=None,
    grid: GridSpec = GridSpec(),
    cam: CameraModel = CameraModel(),
    kcfg: KernelConfig = KernelConfig(),
    ocfg: ObjectiveConfig = ObjectiveConfig(),
    heuristic_cfgs: dict | None = None,
    eval_cfg: EvalConfig = EvalConfig(),
    threads: int = 1,
    progress=None,
) -> BenchmarkReport:
    """Run every requested method from shared random initializations.

    Each trial draws an admissible initialization node; heuristics start from
    its parameters in the continuous box, IRON reads the window around it.
    Failed trials are kept with their error and left out of the means.
    """
    if not scenes:
        raise ConfigError("scene suite is empty")
    if "iron" in bench.methods and model is None:
        raise ConfigError("method 'iron' requires a model")
    cfgs = {name: cls() for name, (_, cls) in METHODS.items()}
    cfgs.update(heuristic_cfgs or {})

    def work(item):
        index, spec = item
        out = _run_scene(index, spec, bench, model, grid, cam, kcfg, ocfg, cfgs, eval_cfg)
        if progress is not None:
            progress(index, len(scenes))
        return out

    items = list(enumerate(scenes))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(work, items))
    else:
        results = [work(item) for item in items]
    order = {m: i for i, m in enumerate(bench.methods)}
    trials = sorted((r for recs, _ in results for r in recs),
                    key=lambda r: (r["scene"], r["trial"], order[r["method"]]))
    fingerprints = {
        "bench": fingerprint(bench), "grid": fingerprint(grid.to_dict()), "camera": fingerprint(cam),
        "kernel": fingerprint(kcfg), "objective": fingerprint(ocfg), "eval": fingerprint(eval_cfg),
        "scenes": fingerprint([s.to_dict() for s in scenes]),
        "heuristics": fingerprint({k: asdict(v) for k, v in sorted(cfgs.items())}),
    }
    return BenchmarkReport(aggregate(trials, bench.methods), trials, [s for _, s in results], fingerprints)


def summary_rows(report: BenchmarkReport) -> list[list[str]]:
    """Metric rows x method columns, cells formatted ``mean (std)``."""
    methods = list(report.methods)
    rows = [["metric", *methods]]
    for m in METRICS:
        row = [m]
        for name in methods:
            cell = report.methods[name][m]
            row.append("n/a" if cell["mean"] is None else f"{cell['mean']:.6g} ({cell['std']:.6g})")
        rows.append(row)
    return rows


def write_summary_csv(report: BenchmarkReport, path) -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh).writerows(summary_rows(report))


def format_summary(report: BenchmarkReport) -> str:
    rows = summary_rows(report)
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows)
