"""Free-space GMM construction from per-surface ray bases.

Each surface patch found during depth compression carries two free-Gaussian
bases accumulated from its sensor rays: ``phi`` (full rays) and ``beta``
(the same rays with endpoints normalized to depth z = 1). The camera
frustum is cut into slabs along z whose thickness grows geometrically with
distance; inside any slab the free Gaussian of a basis is recovered in
closed form from (phi, beta) alone, then neighboring Gaussians are merged
by region growing with the merge decision propagated to nearer slabs.
"""

from __future__ import annotations

import math
from bisect import bisect_left
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import Aabb, CameraIntrinsics, DistGaussian, GaussianKind, MapParams, \
    MomentGaussian, aabb_of_gaussian
from .moments import fuse_gaussians, to_distribution
from .similarity import unscented_hellinger, z_extent_iou


@dataclass(frozen=True)
class FreeBasis:
    """Ray-moment pair from which slab free Gaussians are recovered.

    ``subregion`` is the minimum slab index over the endpoints of the rays
    that built the basis.
    """

    phi: MomentGaussian
    beta: MomentGaussian
    subregion: int

    def __post_init__(self) -> None:
        if self.subregion < 0:
            raise ValueError("subregion index must be >= 0")
        if self.phi.kind is not GaussianKind.FREE or self.beta.kind is not GaussianKind.FREE:
            raise ValueError("basis components must be free Gaussians")


def frustum_slope(cam: CameraIntrinsics) -> float:
    """Max lateral slope of the viewing frustum per unit depth."""
    slopes = []
    for u in (0.0, cam.width - 1.0):
        for v in (0.0, cam.height - 1.0):
            x = (u - cam.cx) / cam.fx
            y = (v - cam.cy) / cam.fy
            slopes.append(math.hypot(x, y))
    return max(slopes)


def partition_planes(i: int, d0: float, alpha_d: float, gamma_frum: float) -> tuple[float, float]:
    """Depths (d_min, d_max) of the planes bounding slab ``i``.

    Slab thickness grows geometrically: d_max(i) is the partial sum of
    d0 * (1 + alpha_d * gamma)^k for k = 0..i.
    """
    if i < 0:
        raise ValueError("slab index must be >= 0")
    growth = alpha_d * gamma_frum
    d_max = d0 * ((1.0 + growth) ** (i + 1) - 1.0) / growth
    if i == 0:
        return 0.0, d_max
    d_min = d0 * ((1.0 + growth) ** i - 1.0) / growth
    return d_min, d_max


class SubregionIndexer:
    """Maps a camera-frame depth to its slab index (closed upper bound)."""

    def __init__(self, params: MapParams, cam: CameraIntrinsics) -> None:
        self.gamma = frustum_slope(cam)
        self._bounds: list[float] = []
        i = 0
        while True:
            _, d_max = partition_planes(i, params.d0, params.alpha_d, self.gamma)
            self._bounds.append(d_max)
            if d_max >= cam.max_range:
                break
            i += 1
        self.max_index = len(self._bounds) - 1

    def index_of(self, depth_z: float) -> int:
        # Depths beyond the sensor range clamp to the outermost slab.
        return min(bisect_left(self._bounds, depth_z), self.max_index)

    def planes(self, i: int) -> tuple[float, float]:
        d_min = self._bounds[i - 1] if i > 0 else 0.0
        return d_min, self._bounds[i]


def subregion_index(depth_z: float, params: MapParams, cam: CameraIntrinsics) -> int:
    """Smallest slab index whose far plane reaches ``depth_z``."""
    return SubregionIndexer(params, cam).index_of(depth_z)


def recover_free_gaussian(basis: FreeBasis, i: int, d_min: float,
                          d_max: float) -> MomentGaussian | None:
    """Closed-form free Gaussian of ``basis`` restricted to slab ``i``.

    In the endpoint slab the result is phi minus the beta extrapolation up
    to d_min; in nearer slabs it is pure beta scaling between the two
    planes. Returns None when the recovered mass collapses to zero.
    """
    if not 0 <= i <= basis.subregion:
        raise ValueError("slab index outside the basis support")
    phi, beta = basis.phi, basis.beta
    if i == basis.subregion:
        m1 = phi.m1 - d_min * d_min * beta.m1
        m2 = phi.m2 - d_min ** 3 * beta.m2
        xi = phi.xi - d_min * beta.xi
        if xi < -1e-6 * max(phi.xi, 1.0):
            raise ValueError("inconsistent free basis: negative recovered mass")
    else:
        m1 = beta.m1 * (d_max * d_max - d_min * d_min)
        m2 = beta.m2 * (d_max ** 3 - d_min ** 3)
        xi = beta.xi * (d_max - d_min)
    if xi <= 0.0:
        return None
    return MomentGaussian(m1, m2, xi, xi, GaussianKind.FREE, phi.support_count)


class _Entry:
    __slots__ = ("moment", "dist", "box", "basis")

    def __init__(self, moment: MomentGaussian, basis: FreeBasis, alpha_m: float) -> None:
        self.moment = moment
        self.dist = to_distribution(moment)
        self.box = aabb_of_gaussian(self.dist, alpha_m)
        self.basis = basis


def _fuse_entry(a: _Entry, b: _Entry, alpha_m: float) -> _Entry:
    merged = fuse_gaussians(a.moment, b.moment)
    basis = FreeBasis(
        fuse_gaussians(a.basis.phi, b.basis.phi),
        fuse_gaussians(a.basis.beta, b.basis.beta),
        min(a.basis.subregion, b.basis.subregion),
    )
    return _Entry(merged, basis, alpha_m)


def construct_free_gmm(bases: list[FreeBasis], params: MapParams,
                       cam: CameraIntrinsics) -> list[DistGaussian]:
    """Recover and merge slab free Gaussians for all bases.

    Slabs are processed far to near. Within a slab, Gaussians grow by
    fusing box-intersecting neighbors whenever the scaled Hellinger test
    accepts; the (merged) basis of every emitted Gaussian propagates to the
    next slab so one decision covers all nearer slabs.
    """
    if not bases:
        return []
    indexer = SubregionIndexer(params, cam)
    buckets: dict[int, list[FreeBasis]] = {}
    i_max = 0
    for basis in bases:
        buckets.setdefault(basis.subregion, []).append(basis)
        i_max = max(i_max, basis.subregion)

    out: list[DistGaussian] = []
    for i in range(i_max, -1, -1):
        d_min, d_max = indexer.planes(i)
        queue: deque[_Entry] = deque()
        for basis in buckets.pop(i, []):
            g = recover_free_gaussian(basis, i, d_min, d_max)
            if g is not None:
                queue.append(_Entry(g, basis, params.alpha_m))

        while queue:
            head = queue[0]
            neighbors = [e for e in list(queue)[1:] if e.box.intersects(head.box)]
            fused_any = False
            for cand in neighbors:
                merged = _fuse_entry(head, cand, params.alpha_m)
                d_h = unscented_hellinger(merged.dist, cand.dist, head.dist)
                s_r = z_extent_iou(cand.box, head.box)
                if d_h <= s_r * params.alpha_h_free:
                    queue.remove(cand)
                    queue[0] = merged
                    head = merged
                    fused_any = True
            if not fused_any:
                queue.popleft()
                out.append(head.dist)
                if i > 0:
                    buckets.setdefault(i - 1, []).append(head.basis)
    return out
