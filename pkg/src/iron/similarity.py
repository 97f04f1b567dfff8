"""Gaussian kernel correlation between point sets and the registration score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EmptyInputError
from .geometry import CameraModel, PoseParams, pose_to_homography, transform_points

REGULARIZERS = ("none", "squared-translation-norm")

# exp() of arguments below this only walks the slow subnormal path; each
# clamped term changes by less than 1e-304
_EXP_FLOOR = -700.0


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 8.0  # reference pixels

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"kernel sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True)
class ObjectiveConfig:
    """Regularization of the score.

    ``scale_norm`` holds the per-axis half extent of the search range (meters)
    used to make the squared translation norm dimensionless.
    """

    lam: float = 0.0
    regularizer: str = "none"
    scale_norm: tuple[float, float, float] = (7.5, 75.0, 7.5)

    def __post_init__(self):
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ConfigError(f"lambda must be a finite value >= 0, got {self.lam}")
        if self.regularizer not in REGULARIZERS:
            raise ConfigError(f"regularizer must be one of {REGULARIZERS}, got {self.regularizer!r}")
        if len(self.scale_norm) != 3 or not all(s > 0 for s in self.scale_norm):
            raise ConfigError(f"scale_norm must be three positive values, got {self.scale_norm}")
        object.__setattr__(self, "scale_norm", tuple(float(s) for s in self.scale_norm))

    def penalty(self, translation) -> float:
        if self.regularizer == "none" or self.lam == 0.0:
            return 0.0
        t = np.asarray(translation, dtype=np.float64) / np.asarray(self.scale_norm)
        return self.lam * float(t @ t)


def _check_nonempty(a, name):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[-1] != 2:
        raise ValueError(f"{name} must be an (M, 2) array, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise EmptyInputError(f"{name} is empty")
    return arr


def kernel_correlation(a, b, cfg: KernelConfig = KernelConfig()) -> float:
    """Mean Gaussian overlap ``exp(-|a_m - b_n|^2 / (4 sigma^2))`` over all pairs."""
    a = _check_nonempty(a, "a")
    b = _check_nonempty(b, "b")
    d2 = (a[:, None, 0] - b[None, :, 0]) ** 2 + (a[:, None, 1] - b[None, :, 1]) ** 2
    expo = np.maximum(d2 * (-0.25 / cfg.sigma**2), _EXP_FLOOR)
    return float(np.exp(expo).sum() / (a.shape[0] * b.shape[0]))


def kernel_correlation_batch(a_batch: np.ndarray, b, cfg: KernelConfig = KernelConfig()) -> np.ndarray:
    """Kernel correlation of each set in a (B, M, 2) stack against ``b``."""
    a_batch = np.asarray(a_batch, dtype=np.float64)
    b = _check_nonempty(b, "b")
    if a_batch.ndim != 3 or a_batch.shape[1] == 0:
        raise EmptyInputError("a_batch must be a nonempty (B, M, 2) stack")
    bx = np.ascontiguousarray(b[:, 0])
    by = np.ascontiguousarray(b[:, 1])
    d2 = np.ascontiguousarray(a_batch[:, :, 0])[:, :, None] - bx
    d2 *= d2
    dy = np.ascontiguousarray(a_batch[:, :, 1])[:, :, None] - by
    dy *= dy
    d2 += dy
    d2 *= -0.25 / cfg.sigma**2
    np.maximum(d2, _EXP_FLOOR, out=d2)
    np.exp(d2, out=d2)
    return d2.sum(axis=(1, 2)) / (a_batch.shape[1] * b.shape[0])


def objective(
    u,
    v,
    pose: PoseParams,
    cam: CameraModel = CameraModel(),
    kcfg: KernelConfig = KernelConfig(),
    ocfg: ObjectiveConfig = ObjectiveConfig(),
) -> float:
    """Registration score to maximize: correlation of ``T(u, pose)`` with ``v`` minus the penalty."""
    moved = transform_points(u, pose_to_homography(pose, cam))
    return kernel_correlation(moved, v, kcfg) - ocfg.penalty(pose.translation)
