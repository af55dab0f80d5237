"""Method-of-moments arithmetic for Gaussian construction and fusion.

Every Gaussian is built by accumulating unnormalized first/second spatial
moments, so fusing measurements or whole Gaussians is pure addition:

* a surface point ``x`` adds ``(x, x x^T, 1)`` to an occupied Gaussian,
* a sensor ray to endpoint ``p`` adds the closed-form line moments
  ``(|p|/2 p, |p|/3 p p^T, |p|)`` to a free Gaussian,
* two same-kind Gaussians fuse by summing all fields.

Regression weights accumulate ray length in both cases so occupied and free
evidence stay commensurable. Accumulation runs in double precision; maps
quantize to 32-bit on storage.
"""

from __future__ import annotations

import math

import numpy as np

from .core import DistGaussian, GaussianKind, MomentGaussian, Pose, repair_psd


class MomentAccumulator:
    """Streaming scalar kernel behind the pure fusion functions.

    Keeps the running sums as plain floats so per-pixel updates avoid any
    array allocation; the scanline compressor holds one of these per open
    segment.
    """

    __slots__ = ("sx", "sy", "sz", "mxx", "mxy", "mxz", "myy", "myz", "mzz",
                 "xi", "pi", "count")

    def __init__(self) -> None:
        self.sx = self.sy = self.sz = 0.0
        self.mxx = self.mxy = self.mxz = 0.0
        self.myy = self.myz = self.mzz = 0.0
        self.xi = 0.0
        self.pi = 0.0
        self.count = 0

    def add_point(self, x: float, y: float, z: float) -> None:
        # Occupied update: weight gains the sensor-frame ray length.
        self.sx += x
        self.sy += y
        self.sz += z
        self.mxx += x * x
        self.mxy += x * y
        self.mxz += x * z
        self.myy += y * y
        self.myz += y * z
        self.mzz += z * z
        self.xi += 1.0
        self.pi += math.sqrt(x * x + y * y + z * z)
        self.count += 1

    def add_line(self, px: float, py: float, pz: float) -> None:
        # Free update: closed-form moments of the segment from the origin.
        length = math.sqrt(px * px + py * py + pz * pz)
        if length == 0.0:
            return
        h = 0.5 * length
        t = length / 3.0
        self.sx += h * px
        self.sy += h * py
        self.sz += h * pz
        self.mxx += t * px * px
        self.mxy += t * px * py
        self.mxz += t * px * pz
        self.myy += t * py * py
        self.myz += t * py * pz
        self.mzz += t * pz * pz
        self.xi += length
        self.pi += length
        self.count += 1

    def merge(self, other: "MomentAccumulator") -> None:
        self.sx += other.sx
        self.sy += other.sy
        self.sz += other.sz
        self.mxx += other.mxx
        self.mxy += other.mxy
        self.mxz += other.mxz
        self.myy += other.myy
        self.myz += other.myz
        self.mzz += other.mzz
        self.xi += other.xi
        self.pi += other.pi
        self.count += other.count

    def mean(self) -> tuple[float, float, float]:
        inv = 1.0 / self.xi
        return self.sx * inv, self.sy * inv, self.sz * inv

    def to_gaussian(self, kind: GaussianKind) -> MomentGaussian:
        m1 = np.array([self.sx, self.sy, self.sz])
        m2 = np.array([
            [self.mxx, self.mxy, self.mxz],
            [self.mxy, self.myy, self.myz],
            [self.mxz, self.myz, self.mzz],
        ])
        return MomentGaussian(m1, m2, self.xi, self.pi, kind, self.count)

    @classmethod
    def from_gaussian(cls, g: MomentGaussian) -> "MomentAccumulator":
        acc = cls()
        acc.sx, acc.sy, acc.sz = (float(v) for v in g.m1)
        acc.mxx, acc.mxy, acc.mxz = float(g.m2[0, 0]), float(g.m2[0, 1]), float(g.m2[0, 2])
        acc.myy, acc.myz, acc.mzz = float(g.m2[1, 1]), float(g.m2[1, 2]), float(g.m2[2, 2])
        acc.xi = g.xi
        acc.pi = g.pi
        acc.count = g.support_count
        return acc


def fuse_point(g: MomentGaussian, x: np.ndarray) -> MomentGaussian:
    """Fold a sensor-frame surface point into an occupied Gaussian."""
    if g.kind is not GaussianKind.OCCUPIED:
        raise ValueError("points fuse into occupied Gaussians only")
    acc = MomentAccumulator.from_gaussian(g)
    px, py, pz = (float(v) for v in np.reshape(x, 3))
    acc.add_point(px, py, pz)
    return acc.to_gaussian(g.kind)


def fuse_line(g: MomentGaussian, p: np.ndarray, min_len: float = 0.0) -> MomentGaussian:
    """Fold the ray from the sensor origin to endpoint ``p`` into a free Gaussian.

    Rays shorter than ``min_len`` are degenerate and leave ``g`` unchanged.
    """
    if g.kind is not GaussianKind.FREE:
        raise ValueError("lines fuse into free Gaussians only")
    px, py, pz = (float(v) for v in np.reshape(p, 3))
    if math.sqrt(px * px + py * py + pz * pz) < max(min_len, 1e-300):
        return g
    acc = MomentAccumulator.from_gaussian(g)
    acc.add_line(px, py, pz)
    return acc.to_gaussian(g.kind)


def fuse_gaussians(a: MomentGaussian, b: MomentGaussian) -> MomentGaussian:
    """Additive fusion of two same-kind Gaussians in moment form."""
    if a.kind is not b.kind:
        raise ValueError("cannot fuse Gaussians of different kinds")
    return MomentGaussian(a.m1 + b.m1, a.m2 + b.m2, a.xi + b.xi, a.pi + b.pi,
                          a.kind, a.support_count + b.support_count)


def to_distribution(g: MomentGaussian) -> DistGaussian:
    """Recover (mean, covariance) in place from the unnormalized moments."""
    if g.xi <= 0.0:
        raise ValueError("cannot normalize an empty Gaussian")
    mu = g.m1 / g.xi
    sigma = repair_psd(g.m2 / g.xi - np.outer(mu, mu))
    return DistGaussian(mu, sigma, g.pi, g.kind, g.xi, g.support_count)


def to_moments(d: DistGaussian) -> MomentGaussian:
    """Exact algebraic inverse of :func:`to_distribution`."""
    m1 = d.xi * d.mu
    m2 = d.xi * (d.sigma + np.outer(d.mu, d.mu))
    return MomentGaussian(m1, m2, d.xi, d.pi, d.kind, d.support_count)


def transform(d: DistGaussian, pose: Pose) -> DistGaussian:
    """Rigid-body transform of a Gaussian; weights and kind are frame-free."""
    r = pose.rotation
    mu = r @ d.mu + pose.translation
    sigma = r @ d.sigma @ r.T
    return DistGaussian(mu, sigma, d.pi, d.kind, d.xi, d.support_count)
