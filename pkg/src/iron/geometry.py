"""Point sets, camera pose and the ground-plane homography.

Coordinate conventions
----------------------
World frame: x = east, y = north, z = up, ground plane z = 0.

Reference image: an orthophoto with ``reference_gsd`` meters per pixel whose
pixel ``principal_point`` sits over the world origin. Pixel x grows east,
pixel y grows south.

Camera: pinhole with intrinsics ``K``; nominal attitude looks straight down
with its x axis east and y axis south, so the nominal view of the orthophoto
is a pure scale about the principal point. Attitude offsets are applied as
intrinsic yaw (about the optical axis), pitch, roll in Z-Y-X order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    DegenerateGeometryError,
    ProjectiveDegeneracyError,
    SingularMatrixError,
)

W_EPS = 1e-12
COND_LIMIT = 1e12

# world-from-camera rotation of the nominal nadir view
_NADIR = np.array([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]])


def as_points(points) -> np.ndarray:
    """Validate and return an (M, 2) float64 array of finite points."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected an (M, 2) point array, got shape {arr.shape}")
    if arr.shape[0] < 1:
        raise ValueError("point set must contain at least one point")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    return arr


@dataclass(frozen=True)
class PoseParams:
    """Camera pose offsets: translations in meters, angles in radians."""

    theta_x: float = 0.0  # north
    theta_y: float = 0.0  # altitude
    theta_z: float = 0.0  # east
    alpha: float = 0.0  # yaw
    beta: float = 0.0  # pitch
    gamma: float = 0.0  # roll

    def __post_init__(self):
        if not all(np.isfinite(v) for v in self.as_array()):
            raise ConfigError(f"pose values must be finite: {self}")

    @property
    def translation(self) -> np.ndarray:
        return np.array([self.theta_x, self.theta_y, self.theta_z])

    @property
    def angles(self) -> tuple[float, float, float]:
        return (self.alpha, self.beta, self.gamma)

    def as_array(self) -> np.ndarray:
        return np.array([self.theta_x, self.theta_y, self.theta_z, self.alpha, self.beta, self.gamma])

    def with_translation(self, translation) -> PoseParams:
        tx, ty, tz = (float(t) for t in translation)
        return replace(self, theta_x=tx, theta_y=ty, theta_z=tz)

    @classmethod
    def from_translation(cls, translation, angles=(0.0, 0.0, 0.0)) -> PoseParams:
        tx, ty, tz = (float(t) for t in translation)
        a, b, g = (float(v) for v in angles)
        return cls(tx, ty, tz, a, b, g)


@dataclass(frozen=True)
class CameraModel:
    focal_px: float = 1000.0
    principal_point: tuple[float, float] = (256.0, 256.0)
    nominal_height: float = 1000.0
    reference_gsd: float = 1.0

    def __post_init__(self):
        if not self.focal_px > 0:
            raise ConfigError(f"focal_px must be > 0, got {self.focal_px}")
        if not self.nominal_height > 0:
            raise ConfigError(f"nominal_height must be > 0, got {self.nominal_height}")
        if not self.reference_gsd > 0:
            raise ConfigError(f"reference_gsd must be > 0, got {self.reference_gsd}")
        object.__setattr__(self, "principal_point", tuple(float(c) for c in self.principal_point))

    @property
    def K(self) -> np.ndarray:
        cx, cy = self.principal_point
        return np.array([[self.focal_px, 0.0, cx], [0.0, self.focal_px, cy], [0.0, 0.0, 1.0]])

    @property
    def pixel_to_ground(self) -> np.ndarray:
        """Affine map from reference-image pixels to ground (east, north, 1)."""
        g = self.reference_gsd
        cx, cy = self.principal_point
        return np.array([[g, 0.0, -g * cx], [0.0, -g, g * cy], [0.0, 0.0, 1.0]])

    @property
    def nominal_scale(self) -> float:
        """Pixels of image motion per meter of horizontal camera motion, times gsd."""
        return self.focal_px * self.reference_gsd / self.nominal_height


def _normalize(h: np.ndarray) -> np.ndarray:
    if abs(h[2, 2]) > 1e-9:
        return h / h[2, 2]
    return h / np.linalg.norm(h)


@dataclass(frozen=True)
class Homography:
    """A normalized 3x3 projective map."""

    h: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64)
        if h.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {h.shape}")
        if not np.all(np.isfinite(h)):
            raise ValueError("homography entries must be finite")
        if np.linalg.det(h) == 0.0:
            raise SingularMatrixError("homography determinant is zero")
        h = _normalize(h)
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    def __matmul__(self, other: Homography) -> Homography:
        return Homography(self.h @ other.h)

    @classmethod
    def translation(cls, tx: float, ty: float) -> Homography:
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    @classmethod
    def scale(cls, s: float) -> Homography:
        return cls(np.diag([s, s, 1.0]))


def rotation_zyx(yaw: float, pitch: float, roll: float) -> np.ndarray:
    """Intrinsic Z-Y-X rotation matrix Rz(yaw) @ Ry(pitch) @ Rx(roll)."""
    ca, sa = np.cos(yaw), np.sin(yaw)
    cb, sb = np.cos(pitch), np.sin(pitch)
    cg, sg = np.cos(roll), np.sin(roll)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cg, -sg], [0.0, sg, cg]])
    return rz @ ry @ rx


def camera_center(pose: PoseParams, cam: CameraModel) -> np.ndarray:
    """World position (east, north, up) of the camera for ``pose``."""
    return np.array([pose.theta_z, pose.theta_x, cam.nominal_height + pose.theta_y])


def camera_rotation(pose: PoseParams) -> np.ndarray:
    """World-from-camera rotation for ``pose``."""
    return _NADIR @ rotation_zyx(pose.alpha, pose.beta, pose.gamma)


def pose_to_homography(pose: PoseParams, cam: CameraModel) -> Homography:
    """Plane-induced homography from reference pixels to sensed pixels.

    Raises
    ------
    DegenerateGeometryError
        If the camera is at or below the ground, or the ground plane is not
        in front of the camera.
    """
    center = camera_center(pose, cam)
    if not center[2] > 0:
        raise DegenerateGeometryError(f"camera height {center[2]} m is not above the ground plane")
    r_wc = camera_rotation(pose)
    # optical axis must have a downward component or the ground is behind the camera
    if not r_wc[2, 2] < -1e-9:
        raise DegenerateGeometryError("ground plane is not in front of the camera")
    r_cw = r_wc.T
    # ground point (e, n, 0) in camera coordinates: r1*e + r2*n - R*C
    extrinsic = np.column_stack([r_cw[:, 0], r_cw[:, 1], -r_cw @ center])
    return Homography(cam.K @ extrinsic @ cam.pixel_to_ground)


def transform_points(points, h: Homography) -> np.ndarray:
    """Apply ``h`` to an (M, 2) point array, preserving order."""
    pts = as_points(points)
    hom = pts @ h.h[:, :2].T + h.h[:, 2]
    w = hom[:, 2]
    bad = np.flatnonzero(np.abs(w) <= W_EPS)
    if bad.size:
        raise ProjectiveDegeneracyError(int(bad[0]), float(w[bad[0]]))
    return hom[:, :2] / w[:, None]


def invert_homography(h: Homography) -> Homography:
    cond = np.linalg.cond(h.h)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMatrixError(f"homography condition number {cond:.3e} exceeds {COND_LIMIT:.0e}")
    return Homography(np.linalg.inv(h.h))
