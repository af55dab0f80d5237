"""Shared domain types for the Gaussian-mixture occupancy map.

Spatial Gaussians live in 3-D metric space; the occupancy coordinate is
carried symbolically through :class:`GaussianKind` (occupied components
regress to 1, free components to 0, with zero occupancy covariance), so
only the 3-D spatial moments are ever stored.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

# Covariance eigenvalues more negative than this (relative to trace) indicate
# a real bug rather than floating-point drift.
PSD_REPAIR_REL_TOL = 1e-6
# Degenerate axis floor used when sizing bounding boxes of flat Gaussians.
DEGENERATE_VARIANCE_FLOOR = 1e-12


class GaussianKind(enum.IntEnum):
    """Which side of the occupancy field a Gaussian models."""

    FREE = 0
    OCCUPIED = 1

    @property
    def occupancy_mean(self) -> float:
        return 1.0 if self is GaussianKind.OCCUPIED else 0.0


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.array(arr, dtype=np.float64, copy=True)
    out.flags.writeable = False
    return out


def symmetrize(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    return 0.5 * (m + m.T)


def check_psd(sigma: np.ndarray, rel_tol: float = 1e-9) -> None:
    """Raise if ``sigma`` has an eigenvalue below ``-rel_tol * trace``."""
    w = np.linalg.eigvalsh(sigma)
    floor = -rel_tol * max(float(np.trace(sigma)), DEGENERATE_VARIANCE_FLOOR)
    if w[0] < floor:
        raise ValueError(f"covariance is not PSD: min eigenvalue {w[0]:.3e}")


def repair_psd(sigma: np.ndarray, rel_tol: float = PSD_REPAIR_REL_TOL) -> np.ndarray:
    """Clamp slightly negative eigenvalues (fusion round-off) to zero.

    Eigenvalues below ``-rel_tol * trace`` are treated as corruption and
    raise instead of being silently absorbed.
    """
    sigma = symmetrize(sigma)
    w, v = np.linalg.eigh(sigma)
    if w[0] >= 0.0:
        return sigma
    floor = -rel_tol * max(float(np.trace(sigma)), DEGENERATE_VARIANCE_FLOOR)
    if w[0] < floor:
        raise ValueError(f"covariance too indefinite to repair: {w[0]:.3e}")
    w = np.clip(w, 0.0, None)
    return symmetrize((v * w) @ v.T)


@dataclass(frozen=True)
class MomentGaussian:
    """Gaussian in unnormalized-moment form.

    ``m1`` and ``m2`` are the unnormalized first/second spatial moments,
    ``xi`` the normalization constant (point count for occupied Gaussians,
    total ray length in meters for free ones) and ``pi`` the regression
    weight (always in meters of ray length).
    """

    m1: np.ndarray
    m2: np.ndarray
    xi: float
    pi: float
    kind: GaussianKind
    support_count: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "m1", _freeze(np.reshape(self.m1, 3)))
        object.__setattr__(self, "m2", _freeze(symmetrize(np.reshape(self.m2, (3, 3)))))
        object.__setattr__(self, "xi", float(self.xi))
        object.__setattr__(self, "pi", float(self.pi))
        if self.xi < 0 or self.pi < 0:
            raise ValueError("xi and pi must be non-negative")

    @classmethod
    def empty(cls, kind: GaussianKind) -> "MomentGaussian":
        return cls(np.zeros(3), np.zeros((3, 3)), 0.0, 0.0, kind, 0)

    @property
    def is_empty(self) -> bool:
        return self.xi == 0.0


@dataclass(frozen=True)
class DistGaussian:
    """Gaussian in distribution form (mean / covariance / weight).

    ``xi`` is retained so the Gaussian can be converted back to moment form
    without information loss; ``support_count`` is the number of source
    depth pixels and drives pruning.
    """

    mu: np.ndarray
    sigma: np.ndarray
    pi: float
    kind: GaussianKind
    xi: float
    support_count: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "mu", _freeze(np.reshape(self.mu, 3)))
        object.__setattr__(self, "sigma", _freeze(symmetrize(np.reshape(self.sigma, (3, 3)))))
        object.__setattr__(self, "pi", float(self.pi))
        object.__setattr__(self, "xi", float(self.xi))
        check_psd(self.sigma)


@dataclass(frozen=True)
class Aabb:
    """Closed axis-aligned box; touching boxes count as intersecting."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "lo", _freeze(np.reshape(self.lo, 3)))
        object.__setattr__(self, "hi", _freeze(np.reshape(self.hi, 3)))
        if np.any(self.lo > self.hi):
            raise ValueError("box min exceeds max")

    def intersects(self, other: "Aabb") -> bool:
        return bool(np.all(self.lo <= other.hi) and np.all(other.lo <= self.hi))

    def contains_point(self, x: np.ndarray) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(np.all(self.lo <= x) and np.all(x <= self.hi))

    def union(self, other: "Aabb") -> "Aabb":
        return Aabb(np.minimum(self.lo, other.lo), np.maximum(self.hi, other.hi))

    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))


@dataclass(frozen=True)
class Pose:
    """Rigid body transform: world point = rotation @ local + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        r = np.reshape(np.asarray(self.rotation, dtype=np.float64), (3, 3))
        t = np.reshape(np.asarray(self.translation, dtype=np.float64), 3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_quaternion(cls, qx: float, qy: float, qz: float, qw: float,
                        translation: np.ndarray) -> "Pose":
        n = math.sqrt(qx * qx + qy * qy + qz * qz + qw * qw)
        if n == 0.0:
            raise ValueError("zero quaternion")
        qx, qy, qz, qw = qx / n, qy / n, qz / n, qw / n
        r = np.array([
            [1 - 2 * (qy * qy + qz * qz), 2 * (qx * qy - qz * qw), 2 * (qx * qz + qy * qw)],
            [2 * (qx * qy + qz * qw), 1 - 2 * (qx * qx + qz * qz), 2 * (qy * qz - qx * qw)],
            [2 * (qx * qz - qy * qw), 2 * (qy * qz + qx * qw), 1 - 2 * (qx * qx + qy * qy)],
        ])
        return cls(r, translation)

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.rotation @ np.asarray(x, dtype=np.float64) + self.translation


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole model plus depth decoding and range gating."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 1.0
    min_range: float = 0.1
    max_range: float = 10.0

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.min_range < self.max_range):
            raise ValueError("require 0 < min_range < max_range")


@dataclass(frozen=True)
class UnexploredPrior:
    """Constant pseudo-component modelling never-observed space."""

    pi0: float
    mu0: float = 0.5
    sigma0_sq: float = 0.25

    def __post_init__(self) -> None:
        if self.pi0 <= 0:
            raise ValueError("prior weight must be positive")
        if self.mu0 != 0.5 or self.sigma0_sq != 0.25:
            raise ValueError("unexplored prior is fixed at mean 0.5, variance 0.25")


SQRT2 = math.sqrt(2.0)


@dataclass(frozen=True)
class MapParams:
    """All construction and query hyperparameters.

    Defaults follow 640x480 indoor operation; fixtures at other image sizes
    scale ``pi0`` and ``prune_min_support`` by the pixel-count ratio.
    """

    alpha_m: float = 2.0              # Mahalanobis bound for boxes and query gating
    alpha_d: float = 0.5              # free-space slab growth scaling
    d0: float = 0.5                   # first slab thickness, meters
    alpha_h_free: float = 0.26        # Hellinger acceptance, free Gaussians
    alpha_h_occ: float = 0.70         # Hellinger acceptance, occupied Gaussians
    pi0: float = 500_000.0            # unexplored prior weight
    prune_min_support: int = 200      # min pixels for an occupied Gaussian to survive
    noise_floor: float = 0.02         # depth sensor noise floor, meters
    k_slope: float = 4.0              # slope allowance in adjacency threshold
    min_segment_pixels: int = 4       # shorter scanline runs are sensor speckle
    normal_dot_min: float = 0.95      # cross-scanline parallelism gate
    plane_dist_factor: float = 3.0    # point-to-plane gate, multiples of noise_floor
    occ_thresh: float = 0.9
    free_thresh: float = 0.1

    def __post_init__(self) -> None:
        for name in ("alpha_m", "alpha_d", "d0", "alpha_h_free", "alpha_h_occ",
                     "pi0", "noise_floor", "k_slope", "normal_dot_min",
                     "plane_dist_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")
        if not (0 < self.alpha_h_free < SQRT2 and 0 < self.alpha_h_occ < SQRT2):
            raise ValueError("Hellinger thresholds must lie in (0, sqrt(2))")
        if self.prune_min_support < 0 or self.min_segment_pixels < 1:
            raise ValueError("bad pruning/segment thresholds")

    def prior(self) -> UnexploredPrior:
        return UnexploredPrior(pi0=self.pi0)


def aabb_of_gaussian(g: DistGaussian, alpha_m: float) -> Aabb:
    """Tightest axis-aligned box around the Mahalanobis-``alpha_m`` ellipsoid.

    The extremal coordinate of the ellipsoid along axis k is
    ``mu_k +- alpha_m * sqrt(sigma_kk)``; degenerate axes get a floor so flat
    Gaussians still produce a valid box.
    """
    diag = np.clip(np.diag(g.sigma), DEGENERATE_VARIANCE_FLOOR, None)
    half = alpha_m * np.sqrt(diag)
    return Aabb(g.mu - half, g.mu + half)
