"""Whole-search-space similarity tensors, sub-tensor windows and offset labels.

Grid indices are 0-based throughout: node ``(i, j, k)`` sits at
``(x_min + i*dx, y_min + j*dy, z_min + k*dz)``.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .binio import Reader, header
from .errors import BoundaryError, ConfigError, DegenerateGeometryError, FormatError, IronError
from .geometry import CameraModel, Homography, PoseParams, as_points, pose_to_homography, transform_points
from .similarity import _EXP_FLOOR, KernelConfig, ObjectiveConfig, kernel_correlation_batch

LABEL_SCALE = 22
WINDOW = 8
TENSOR_MAGIC = b"IRNT"
TENSOR_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    # a horizontal step moves features about 0.5 px, so the sigma = 8 px
    # correlation bowl spans the grid and a window sees the slope toward the
    # peak; finer altitude steps let the kernel's bias toward contraction move
    # the noiseless argmax off the true node
    x_range: tuple[float, float] = (-7.5, 7.5)
    y_range: tuple[float, float] = (-75.0, 75.0)
    z_range: tuple[float, float] = (-7.5, 7.5)
    nodes: int = 31

    def __post_init__(self):
        for name in ("x_range", "y_range", "z_range"):
            lo, hi = (float(v) for v in getattr(self, name))
            if not (np.isfinite(lo) and np.isfinite(hi) and hi > lo):
                raise ConfigError(f"grid {name} must satisfy max > min, got ({lo}, {hi})")
            object.__setattr__(self, name, (lo, hi))
        if int(self.nodes) != self.nodes or self.nodes < 2:
            raise ConfigError(f"grid nodes must be an integer >= 2, got {self.nodes}")
        object.__setattr__(self, "nodes", int(self.nodes))

    @property
    def ranges(self) -> tuple[tuple[float, float], ...]:
        return (self.x_range, self.y_range, self.z_range)

    @property
    def spacing(self) -> np.ndarray:
        return np.array([(hi - lo) / (self.nodes - 1) for lo, hi in self.ranges])

    @property
    def lower(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.ranges])

    @property
    def upper(self) -> np.ndarray:
        return np.array([hi for _, hi in self.ranges])

    def axis_values(self, axis: int) -> np.ndarray:
        lo, hi = self.ranges[axis]
        return np.linspace(lo, hi, self.nodes)

    def node_params(self, index) -> np.ndarray:
        """Translation (meters) at grid node ``index``."""
        idx = np.asarray(index, dtype=np.float64)
        return self.lower + idx * self.spacing

    def nearest_node(self, params) -> tuple[int, int, int]:
        idx = np.rint((np.asarray(params, dtype=np.float64) - self.lower) / self.spacing)
        idx = np.clip(idx, 0, self.nodes - 1).astype(int)
        return tuple(int(i) for i in idx)

    def to_dict(self) -> dict:
        return {"x_range": list(self.x_range), "y_range": list(self.y_range),
                "z_range": list(self.z_range), "nodes": self.nodes}


@dataclass
class SimilarityTensor:
    grid: GridSpec
    values: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        s = self.grid.nodes
        if self.values.shape != (s, s, s):
            raise ConfigError(f"tensor shape {self.values.shape} does not match grid ({s},{s},{s})")
        if not np.all(np.isfinite(self.values)):
            raise ConfigError("tensor values must be finite")


@dataclass(frozen=True)
class SubTensor:
    values: np.ndarray
    center_index: tuple[int, int, int]


@dataclass(frozen=True)
class TrainingSample:
    input: np.ndarray  # (b+1)^3 window
    label: np.ndarray  # 3 normalized offsets


def _slice_lattice(u, cam, xs, y, zs, angles):
    """Return (base, step_x, step_z) if the (x, z) slice at altitude ``y`` is a
    pure translation lattice of the transformed set, else None.

    Holds whenever the homography is affine (no pitch/roll): horizontal camera
    motion then translates the image along two orthogonal directions.
    """
    corners = [PoseParams(xs[0], y, zs[0], *angles), PoseParams(xs[1], y, zs[0], *angles),
               PoseParams(xs[0], y, zs[1], *angles)]
    hs = [pose_to_homography(p, cam).h for p in corners]
    if any(np.abs(h[2, :2]).max() > 1e-15 for h in hs):
        return None
    base = transform_points(u, Homography(hs[0]))
    step_x = hs[1][:2, 2] - hs[0][:2, 2]
    step_z = hs[2][:2, 2] - hs[0][:2, 2]
    nx, nz = np.linalg.norm(step_x), np.linalg.norm(step_z)
    if abs(step_x @ step_z) > 1e-9 * nx * nz:
        return None
    return base, step_x, step_z


def _lattice_correlation(base, step_x, step_z, v, nodes, kcfg):
    """Kernel correlation of ``base + i*step_x + k*step_z`` against ``v`` for all i, k.

    The Gaussian factorizes along the two orthogonal lattice directions, so the
    whole slice is one matrix product of per-axis kernel tables.
    """
    c = -0.25 / kcfg.sigma**2
    nx, nz = np.linalg.norm(step_x), np.linalg.norm(step_z)
    diff = (base[:, None, :] - v[None, :, :]).reshape(-1, 2)
    px = diff @ (step_x / nx)
    pz = diff @ (step_z / nz)
    steps = np.arange(nodes, dtype=np.float64)
    ex = np.exp(np.maximum(c * (steps[:, None] * nx + px) ** 2, _EXP_FLOOR))
    ez = np.exp(np.maximum(c * (steps[:, None] * nz + pz) ** 2, _EXP_FLOOR))
    return (ex @ ez.T) / diff.shape[0]


def build_similarity_tensor(
    u,
    v,
    fixed_angles=(0.0, 0.0, 0.0),
    grid: GridSpec = GridSpec(),
    cam: CameraModel = CameraModel(),
    kcfg: KernelConfig = KernelConfig(),
    ocfg: ObjectiveConfig = ObjectiveConfig(),
    threads: int = 1,
    provenance: dict | None = None,
) -> SimilarityTensor:
    """Evaluate the registration score at every node of ``grid``.

    Altitude slices ``values[:, j, :]`` are independent and may be spread over
    ``threads`` workers; each worker writes only its own slice, so the result
    does not depend on the thread count.
    """
    u = as_points(u)
    v = as_points(v)
    s = grid.nodes
    xs, ys, zs = (grid.axis_values(a) for a in range(3))
    angles = tuple(float(a) for a in fixed_angles)
    values = np.empty((s, s, s))
    penalty = np.array([[[ocfg.penalty((x, y, z)) for z in zs] for y in ys] for x in xs])

    def fill_generic(j):
        for i in range(s):
            moved = np.empty((s, u.shape[0], 2))
            for k in range(s):
                pose = PoseParams(xs[i], ys[j], zs[k], *angles)
                moved[k] = transform_points(u, pose_to_homography(pose, cam))
            values[i, j, :] = kernel_correlation_batch(moved, v, kcfg)

    def fill_slice(j):
        try:
            lattice = _slice_lattice(u, cam, xs, ys[j], zs, angles)
            if lattice is None:
                fill_generic(j)
            else:
                values[:, j, :] = _lattice_correlation(*lattice, v, s, kcfg)
        except IronError as exc:
            raise DegenerateGeometryError(f"grid slice j={j} (y={ys[j]:g} m): {exc}") from exc

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(fill_slice, range(s)))
    else:
        for j in range(s):
            fill_slice(j)
    values -= penalty
    return SimilarityTensor(grid, values, dict(provenance or {}))


def argmax_tensor(t: SimilarityTensor) -> tuple[int, int, int]:
    """Lexicographically smallest index of the global maximum."""
    # np.argmax returns the first hit in C order, i.e. the lexicographic minimum
    flat = int(np.argmax(t.values))
    return tuple(int(i) for i in np.unravel_index(flat, t.values.shape))


def admissible_range(nodes: int, b: int = WINDOW) -> tuple[int, int]:
    """Inclusive 0-based range of centers whose window fits in the grid."""
    return b // 2, nodes - 1 - b // 2


def check_center(center, nodes: int, b: int = WINDOW) -> tuple[int, int, int]:
    lo, hi = admissible_range(nodes, b)
    center = tuple(int(c) for c in center)
    if len(center) != 3:
        raise ValueError(f"center must have three indices, got {center}")
    for axis, c in zip("xyz", center):
        if not lo <= c <= hi:
            raise BoundaryError(axis, c, lo, hi)
    return center


def extract_subtensor(t: SimilarityTensor, center, b: int = WINDOW) -> SubTensor:
    if b % 2 or b < 0:
        raise ConfigError(f"window parameter b must be even and >= 0, got {b}")
    i, j, k = check_center(center, t.grid.nodes, b)
    h = b // 2
    window = t.values[i - h:i + h + 1, j - h:j + h + 1, k - h:k + h + 1].copy()
    return SubTensor(window, (i, j, k))


def make_label(center, optimum, scale: int = LABEL_SCALE) -> np.ndarray:
    """Normalized index offset from ``center`` to ``optimum``; not clipped."""
    return np.array([float(Fraction(int(o) - int(c), int(scale))) for c, o in zip(center, optimum)])


def denormalize_offset(prediction, scale: float = LABEL_SCALE, grid: GridSpec = GridSpec()) -> np.ndarray:
    """Metric offset (meters) of a normalized prediction."""
    return np.asarray(prediction, dtype=np.float64)[:3] * scale * grid.spacing


def make_sample(t: SimilarityTensor, center, optimum=None, b: int = WINDOW,
                scale: int = LABEL_SCALE) -> TrainingSample:
    if optimum is None:
        optimum = argmax_tensor(t)
    sub = extract_subtensor(t, center, b)
    return TrainingSample(sub.values, make_label(sub.center_index, optimum, scale))


def save_tensor(t: SimilarityTensor, path) -> None:
    """Write ``t`` as an IRNT file; values are stored as float32."""
    g = t.grid
    parts = [header(TENSOR_MAGIC, TENSOR_VERSION), struct.pack("<I", g.nodes)]
    parts.append(struct.pack("<6d", *g.x_range, *g.y_range, *g.z_range))
    parts.append(np.ascontiguousarray(t.values, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensor(path) -> SimilarityTensor:
    r = Reader(Path(path).read_bytes(), f"tensor file {path}")
    r.expect_magic(TENSOR_MAGIC, TENSOR_VERSION)
    (s,) = r.unpack("I")
    xmin, xmax, ymin, ymax, zmin, zmax = r.unpack("6d")
    values = np.frombuffer(r.take(4 * s**3), dtype="<f4").reshape(s, s, s)
    r.finish()
    try:
        grid = GridSpec((xmin, xmax), (ymin, ymax), (zmin, zmax), s)
        return SimilarityTensor(grid, values.astype(np.float64), {"source": str(path)})
    except ConfigError as exc:
        raise FormatError(f"tensor file {path}: {exc}") from exc
