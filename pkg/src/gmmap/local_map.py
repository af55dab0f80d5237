"""Per-image local map: compress, build free space, move to world frame, index.

Map storage is 32-bit: every Gaussian entering a map is rounded through
float32 (accumulation stays double), which keeps serialized maps bit-exact
round trips of the in-memory state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Aabb, CameraIntrinsics, DistGaussian, MapParams, MomentGaussian, \
    Pose, aabb_of_gaussian
from .free_space import construct_free_gmm
from .memtrack import NULL_TRACKER, TransientTracker
from .moments import to_moments, transform
from .rtree import bulk_build
from .scanline import CompressStats, compress_depth_image

# Serialized footprint of one stored Gaussian; used by the overhead counters.
RECORD_BYTES = 88


def _quantize32(x: np.ndarray | float):
    return np.asarray(np.asarray(x, dtype=np.float32), dtype=np.float64)


def quantize_dist(d: DistGaussian) -> DistGaussian:
    return DistGaussian(_quantize32(d.mu), _quantize32(d.sigma),
                        float(_quantize32(d.pi)), d.kind,
                        float(_quantize32(d.xi)), d.support_count)


def quantize_moment(g: MomentGaussian) -> MomentGaussian:
    return MomentGaussian(_quantize32(g.m1), _quantize32(g.m2),
                          float(_quantize32(g.xi)), float(_quantize32(g.pi)),
                          g.kind, g.support_count)


@dataclass
class MapGaussian:
    """One stored map component: both forms plus its search box."""

    moment: MomentGaussian
    dist: DistGaussian
    box: Aabb

    @classmethod
    def from_dist(cls, d: DistGaussian, alpha_m: float) -> "MapGaussian":
        stored = quantize_dist(d)
        moment = quantize_moment(to_moments(d))
        return cls(moment, stored, aabb_of_gaussian(stored, alpha_m))

    @classmethod
    def from_moment(cls, g: MomentGaussian, dist: DistGaussian,
                    alpha_m: float) -> "MapGaussian":
        stored = quantize_dist(dist)
        return cls(quantize_moment(g), stored, aabb_of_gaussian(stored, alpha_m))


@dataclass
class LocalMap:
    """World-frame GMM of a single depth image, indexed by an R-tree."""

    gaussians: dict[int, MapGaussian] = field(default_factory=dict)
    stats: CompressStats = field(default_factory=CompressStats)

    def __post_init__(self) -> None:
        self.tree = bulk_build((g.box, key) for key, g in self.gaussians.items())

    def __len__(self) -> int:
        return len(self.gaussians)

    def root_box(self) -> Aabb | None:
        return self.tree.root_box()


def construct_local_map(
    image_or_rows,
    pose: Pose,
    cam: CameraIntrinsics,
    params: MapParams,
    threads: int = 1,
    tracker: TransientTracker = NULL_TRACKER,
) -> LocalMap:
    """Run the whole per-image pipeline and return the indexed local map."""
    compressed = compress_depth_image(image_or_rows, cam, params,
                                      threads=threads, tracker=tracker)
    free = construct_free_gmm(compressed.free_bases, params, cam)

    gaussians: dict[int, MapGaussian] = {}
    for key, g in enumerate(compressed.occupied + free):
        world = transform(g, pose)
        gaussians[key] = MapGaussian.from_dist(world, params.alpha_m)
        tracker.alloc("local_map", RECORD_BYTES)

    lmap = LocalMap(gaussians, compressed.stats)
    return lmap
