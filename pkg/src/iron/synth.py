"""Synthetic registration scenes with known ground truth, and dataset assembly."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, GenerationError
from .geometry import CameraModel, PoseParams, invert_homography, pose_to_homography, transform_points
from .landscape import (
    LABEL_SCALE,
    WINDOW,
    GridSpec,
    SimilarityTensor,
    TrainingSample,
    admissible_range,
    argmax_tensor,
    build_similarity_tensor,
    make_sample,
)
from .similarity import KernelConfig, ObjectiveConfig


@dataclass(frozen=True)
class SceneSpec:
    true_pose: PoseParams
    seed: int
    n_points: int = 200
    noise_sigma: float = 1.0
    outlier_fraction: float = 0.1
    field_extent: float = 512.0

    def __post_init__(self):
        if int(self.n_points) != self.n_points or self.n_points < 4:
            raise ConfigError(f"n_points must be an integer >= 4, got {self.n_points}")
        if not self.noise_sigma >= 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if not 0 <= self.outlier_fraction < 1:
            raise ConfigError(f"outlier_fraction must lie in [0, 1), got {self.outlier_fraction}")
        if not self.field_extent > 0:
            raise ConfigError(f"field_extent must be > 0, got {self.field_extent}")

    @property
    def n_inliers(self) -> int:
        return int(round(self.n_points * (1.0 - self.outlier_fraction)))

    @property
    def noiseless(self) -> bool:
        return self.noise_sigma == 0 and self.outlier_fraction == 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["true_pose"] = asdict(self.true_pose)
        return d


@dataclass(frozen=True)
class SyntheticScene:
    u: np.ndarray  # sensed points
    v: np.ndarray  # reference points
    true_pose: PoseParams
    correspondences: np.ndarray  # (N_c, 2) index pairs into (u, v)


def generate_scene(spec: SceneSpec, cam: CameraModel = CameraModel()) -> SyntheticScene:
    """Sample a reference set and derive the sensed set through the true pose.

    Inliers are mapped through the inverse true-pose homography and perturbed
    by isotropic Gaussian noise; outliers are replaced by uniform points.
    """
    rng = np.random.default_rng(spec.seed)
    h_inv = invert_homography(pose_to_homography(spec.true_pose, cam))
    n = spec.n_points
    v = rng.uniform(0.0, spec.field_extent, size=(n, 2))
    u = transform_points(v, h_inv)
    if spec.noise_sigma > 0:
        u = u + rng.normal(0.0, spec.noise_sigma, size=u.shape)
    n_out = n - spec.n_inliers
    outliers = np.sort(rng.choice(n, size=n_out, replace=False)) if n_out else np.empty(0, dtype=int)
    u[outliers] = rng.uniform(0.0, spec.field_extent, size=(n_out, 2))
    inliers = np.setdiff1d(np.arange(n), outliers)
    pairs = np.column_stack([inliers, inliers]).astype(np.int64)
    return SyntheticScene(u, v, spec.true_pose, pairs)


def orbit_cluster(base_pose: PoseParams, step_degrees: float = 30.0) -> list[PoseParams]:
    """Copies of ``base_pose`` with yaw advanced by multiples of ``step_degrees``."""
    if not step_degrees > 0:
        raise ConfigError(f"orbit step must be > 0 degrees, got {step_degrees}")
    count = 360.0 / step_degrees
    if abs(count - round(count)) > 1e-9:
        raise ConfigError(f"orbit step {step_degrees} deg does not divide 360")
    step = math.radians(step_degrees)
    return [
        PoseParams(base_pose.theta_x, base_pose.theta_y, base_pose.theta_z,
                   base_pose.alpha + k * step, base_pose.beta, base_pose.gamma)
        for k in range(int(round(count)))
    ]


@dataclass(frozen=True)
class SuiteConfig:
    """Recipe for a list of scenes: grid-node truths, orbit-cluster yaws, and
    per-scene seeds ``seed + index``."""

    scenes: int = 40
    seed: int = 0
    n_points: int = 200
    noise_sigma: float = 1.0
    outlier_fraction: float = 0.1
    field_extent: float = 512.0
    orbit_step_degrees: float = 30.0
    base_yaw: float = 0.0

    def __post_init__(self):
        if int(self.scenes) != self.scenes or self.scenes < 1:
            raise ConfigError(f"scenes must be an integer >= 1, got {self.scenes}")
        # validates the point/noise knobs and the orbit step up front
        SceneSpec(PoseParams(0, 0, 0, 0, 0, 0), 0, self.n_points, self.noise_sigma,
                  self.outlier_fraction, self.field_extent)
        orbit_cluster(PoseParams(0, 0, 0, 0, 0, 0), self.orbit_step_degrees)


def scene_suite(cfg: SuiteConfig, grid: GridSpec = GridSpec()) -> list[SceneSpec]:
    """Scenes whose true translations are uniform random grid nodes and whose
    yaws cycle through the orbit cluster of ``base_yaw``."""
    yaws = [p.alpha for p in orbit_cluster(PoseParams(0, 0, 0, cfg.base_yaw, 0, 0), cfg.orbit_step_degrees)]
    specs = []
    for index in range(cfg.scenes):
        seed = cfg.seed + index
        node = np.random.default_rng((seed, 0)).integers(0, grid.nodes, size=3)
        pose = PoseParams.from_translation(grid.node_params(node), (yaws[index % len(yaws)], 0.0, 0.0))
        specs.append(SceneSpec(pose, seed, cfg.n_points, cfg.noise_sigma, cfg.outlier_fraction, cfg.field_extent))
    return specs


@dataclass
class DatasetManifest:
    scenes: list[dict] = field(default_factory=list)
    centers_per_scene: int = 0
    sample_count: int = 0
    label_stats: dict = field(default_factory=dict)
    configs: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def true_node(spec: SceneSpec, grid: GridSpec) -> tuple[int, int, int]:
    node = grid.nearest_node(spec.true_pose.translation)
    if not np.allclose(grid.node_params(node), spec.true_pose.translation, rtol=0, atol=1e-9):
        raise GenerationError(f"scene seed {spec.seed}: true translation {spec.true_pose.translation} is off-grid")
    return node


def scene_tensor(spec: SceneSpec, grid: GridSpec = GridSpec(), cam: CameraModel = CameraModel(),
                 kcfg: KernelConfig = KernelConfig(), ocfg: ObjectiveConfig = ObjectiveConfig(),
                 threads: int = 1) -> tuple[SyntheticScene, SimilarityTensor]:
    scene = generate_scene(spec, cam)
    tensor = build_similarity_tensor(scene.u, scene.v, spec.true_pose.angles, grid, cam, kcfg, ocfg,
                                     threads=threads, provenance={"scene_seed": spec.seed})
    return scene, tensor


def sample_centers(count: int, grid: GridSpec, seed, b: int = WINDOW) -> list[tuple[int, int, int]]:
    """``count`` distinct admissible centers, uniform without replacement."""
    lo, hi = admissible_range(grid.nodes, b)
    n = hi - lo + 1
    if n < 1:
        raise ConfigError(f"grid with {grid.nodes} nodes admits no window of size {b + 1}")
    if count > n**3:
        raise ConfigError(f"cannot draw {count} distinct centers from {n**3} admissible ones")
    flat = np.random.default_rng(seed).choice(n**3, size=count, replace=False)
    return [tuple(int(i) + lo for i in np.unravel_index(f, (n, n, n))) for f in flat]


def _label_stats(labels: np.ndarray) -> dict:
    return {
        "count": int(len(labels)),
        "mean": labels.mean(axis=0).tolist(),
        "std": labels.std(axis=0).tolist(),
        "min": labels.min(axis=0).tolist(),
        "max": labels.max(axis=0).tolist(),
        "fraction_beyond_unit": float(np.mean(np.any(np.abs(labels) > 1, axis=1))),
    }


def build_dataset(
    scenes: list[SceneSpec],
    centers_per_scene: int,
    grid: GridSpec = GridSpec(),
    cam: CameraModel = CameraModel(),
    kcfg: KernelConfig = KernelConfig(),
    ocfg: ObjectiveConfig = ObjectiveConfig(),
    threads: int = 1,
    centers=None,
    progress=None,
) -> tuple[list[TrainingSample], DatasetManifest]:
    """Cut ``centers_per_scene`` labelled windows from each scene's tensor.

    Labels point at the tensor argmax. Centers are drawn per scene from a
    generator seeded with ``(scene seed, 1)``, unless ``centers`` supplies an
    explicit list of center lists, one per scene. Noiseless scenes must peak at
    their true node; anything else raises :class:`GenerationError`.
    """
    if int(centers_per_scene) != centers_per_scene or centers_per_scene < 1:
        raise ConfigError(f"centers_per_scene must be an integer >= 1, got {centers_per_scene}")
    if not scenes:
        raise ConfigError("at least one scene is required")
    if centers is not None and len(centers) != len(scenes):
        raise ConfigError("explicit centers must give one list per scene")
    samples = []
    manifest = DatasetManifest(centers_per_scene=int(centers_per_scene), configs={
        "grid": grid.to_dict(), "camera": asdict(cam), "kernel": asdict(kcfg), "objective": asdict(ocfg)})
    for index, spec in enumerate(scenes):
        truth = true_node(spec, grid)
        _, tensor = scene_tensor(spec, grid, cam, kcfg, ocfg, threads)
        peak = argmax_tensor(tensor)
        if spec.noiseless and peak != truth:
            raise GenerationError(f"scene seed {spec.seed}: noiseless tensor peaks at {peak}, true node is {truth}")
        chosen = (sample_centers(centers_per_scene, grid, (spec.seed, 1)) if centers is None
                  else [tuple(int(i) for i in c) for c in centers[index]])
        samples.extend(make_sample(tensor, c, peak) for c in chosen)
        manifest.scenes.append({"spec": spec.to_dict(), "seed": spec.seed, "true_index": list(truth),
                                "argmax_index": list(peak), "centers": [list(c) for c in chosen]})
        if progress is not None:
            progress(index, len(scenes))
    manifest.sample_count = len(samples)
    manifest.label_stats = _label_stats(np.array([s.label for s in samples]))
    return samples, manifest
