"""Incremental Gaussian-mixture occupancy mapping.

Depth image streams compress, one scanline at a time, into compact
Gaussian mixtures for occupied surfaces and free space, fused across
frames into a single R-tree indexed map that answers continuous occupancy
queries with an unexplored prior.
"""

from .core import Aabb, CameraIntrinsics, DistGaussian, GaussianKind, MapParams, \
    MomentGaussian, Pose, UnexploredPrior, aabb_of_gaussian
from .free_space import FreeBasis, construct_free_gmm, frustum_slope, \
    partition_planes, recover_free_gaussian, subregion_index
from .fusion import GlobalMap, fuse_local_into_global
from .local_map import LocalMap, MapGaussian, construct_local_map
from .memtrack import TransientTracker
from .moments import fuse_gaussians, fuse_line, fuse_point, to_distribution, \
    to_moments, transform
from .query import Occupancy, classify, classify_batch, query_batch, query_occupancy
from .rtree import RTree
from .scanline import compress_depth_image, scanline_segmentation, segment_fusion, \
    unproject
from .similarity import geometric_similarity, hellinger_gaussian, unscented_hellinger

__all__ = [
    "Aabb", "CameraIntrinsics", "DistGaussian", "GaussianKind", "MapParams",
    "MomentGaussian", "Pose", "UnexploredPrior", "aabb_of_gaussian",
    "FreeBasis", "construct_free_gmm", "frustum_slope", "partition_planes",
    "recover_free_gaussian", "subregion_index",
    "GlobalMap", "fuse_local_into_global",
    "LocalMap", "MapGaussian", "construct_local_map",
    "TransientTracker",
    "fuse_gaussians", "fuse_line", "fuse_point", "to_distribution",
    "to_moments", "transform",
    "Occupancy", "classify", "classify_batch", "query_batch", "query_occupancy",
    "RTree",
    "compress_depth_image", "scanline_segmentation", "segment_fusion", "unproject",
    "geometric_similarity", "hellinger_gaussian", "unscented_hellinger",
]

__version__ = "0.1.0"
