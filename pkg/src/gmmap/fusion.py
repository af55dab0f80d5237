"""Globally consistent fusion of local maps into the global map.

The global map is updated in place and without ray casting: the local
map's root bounding box selects the previously observed Gaussians in one
R-tree traversal; each of those is then merged with intersecting same-kind
local Gaussians whenever the scaled unscented-Hellinger test accepts, and
everything is appended back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .core import DistGaussian, GaussianKind, MapParams, UnexploredPrior
from .local_map import RECORD_BYTES, LocalMap, MapGaussian
from .memtrack import NULL_TRACKER, TransientTracker
from .moments import fuse_gaussians, to_distribution
from .rtree import RTree
from .similarity import geometric_similarity, unscented_hellinger


@dataclass
class GlobalMap:
    """R-tree indexed global GMM plus the unexplored prior."""

    params: MapParams
    gaussians: dict[int, MapGaussian] = field(default_factory=dict)
    next_id: int = 0
    version: int = 0

    def __post_init__(self) -> None:
        self.tree = RTree()
        for key, g in self.gaussians.items():
            self.tree.insert(g.box, key)
            self.next_id = max(self.next_id, key + 1)

    @property
    def prior(self) -> UnexploredPrior:
        return self.params.prior()

    def __len__(self) -> int:
        return len(self.gaussians)

    def add(self, g: MapGaussian) -> int:
        key = self.next_id
        self.next_id += 1
        self.gaussians[key] = g
        self.tree.insert(g.box, key)
        self.version += 1
        return key

    def pop(self, key: int) -> MapGaussian:
        self.tree.remove(key)
        self.version += 1
        return self.gaussians.pop(key)

    def components(self) -> list[DistGaussian]:
        return [g.dist for g in self.gaussians.values()]

    def total_weight(self, kind: GaussianKind) -> float:
        return sum(g.dist.pi for g in self.gaussians.values() if g.dist.kind is kind)

    def total_xi(self, kind: GaussianKind) -> float:
        return sum(g.dist.xi for g in self.gaussians.values() if g.dist.kind is kind)


def _fuse_pair(a: MapGaussian, b: MapGaussian, alpha_m: float) -> MapGaussian:
    merged = fuse_gaussians(a.moment, b.moment)
    return MapGaussian.from_moment(merged, to_distribution(merged), alpha_m)


def fuse_local_into_global(
    gmap: GlobalMap,
    lmap: LocalMap,
    params: MapParams | None = None,
    tracker: TransientTracker = NULL_TRACKER,
) -> GlobalMap:
    """Fuse ``lmap`` (world frame) into ``gmap`` in place.

    Previously observed global Gaussians are extracted, greedily merged
    with acceptable intersecting local Gaussians (each acceptance updates
    the candidate before the next test), and either migrate into the local
    set (if anything merged) or return untouched. The grown local set is
    then appended to the global map.
    """
    params = params or gmap.params
    bounds = lmap.root_box()
    local_tree = lmap.tree
    local_gaussians = dict(lmap.gaussians)

    # Extract the observed region in one traversal of the global tree.
    observed: list[MapGaussian] = []
    if bounds is not None and len(gmap) > 0:
        for key in gmap.tree.search_intersecting(bounds):
            observed.append(key)
        observed = [gmap.pop(key) for key in observed]
        for _ in observed:
            tracker.alloc("observed_region", RECORD_BYTES)

    untouched: list[MapGaussian] = []
    for cand in observed:
        alpha_h = params.alpha_h_free if cand.dist.kind is GaussianKind.FREE \
            else params.alpha_h_occ
        hits = [k for k in local_tree.search_intersecting(cand.box)
                if local_gaussians[k].dist.kind is cand.dist.kind]
        merged_any = False
        for k in hits:
            if k not in local_gaussians:
                continue
            neighbor = local_gaussians[k]
            fused = _fuse_pair(cand, neighbor, params.alpha_m)
            d_h = unscented_hellinger(fused.dist, cand.dist, neighbor.dist)
            s_r = geometric_similarity(cand.dist, neighbor.dist, params.alpha_m)
            if d_h <= s_r * alpha_h:
                cand = fused
                local_tree.remove(k)
                del local_gaussians[k]
                merged_any = True
        tracker.free("observed_region", RECORD_BYTES)
        if merged_any:
            key = max(local_gaussians, default=-1) + 1
            local_gaussians[key] = cand
            local_tree.insert(cand.box, key)
        else:
            untouched.append(cand)

    consumed = len(lmap.gaussians)
    for g in untouched:
        gmap.add(g)
    for key in sorted(local_gaussians):
        gmap.add(local_gaussians[key])
    for _ in range(consumed):
        tracker.free("local_map", RECORD_BYTES)
    return gmap
