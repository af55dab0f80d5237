"""Occupancy regression over the global map.

The occupancy at a query point is the mixture-weighted blend of the
constant component means (1 for occupied, 0 for free, 0.5 for the
unexplored prior whose weight joins every denominator). With the zero
occupancy covariances of this representation the regression reduces to

    m(x) = 0.5 * w_0(x) + sum_{occupied} w_i(x),      v(x) = m (1 - m),

where w_i are the spatial-pdf responsibilities. Candidate components come
from an R-tree lookup of boxes containing x, refined by the Mahalanobis
bound; the full (ungated) sum is also available for validation.

Batch queries share R-tree traversals by spatial bucketing but evaluate
every point over exactly its own candidate sequence, so batched and
one-at-a-time results are bit-identical.
"""

from __future__ import annotations

import enum
import math

import numpy as np

from .core import Aabb, GaussianKind
from .fusion import GlobalMap

_LOG_2PI = math.log(2.0 * math.pi)
_BUCKET = 0.5          # meters; only affects traversal sharing, not results
_CHUNK = 8192          # points per vectorized slab


class Occupancy(enum.Enum):
    FREE = "free"
    UNEXPLORED = "unexplored"
    OCCUPIED = "occupied"


class _Snapshot:
    """Read-only packed arrays for one version of the global map."""

    def __init__(self, gmap: GlobalMap) -> None:
        keys = sorted(gmap.gaussians)
        self.count = len(keys)
        self.log_pi0 = math.log(gmap.params.pi0)
        self.alpha_sq = gmap.params.alpha_m ** 2
        self.tree = gmap.tree
        self.key_index = {k: i for i, k in enumerate(keys)}
        if self.count == 0:
            return
        mus = np.array([gmap.gaussians[k].dist.mu for k in keys])
        sigmas = np.array([gmap.gaussians[k].dist.sigma for k in keys])
        pis = np.array([gmap.gaussians[k].dist.pi for k in keys])
        occ = np.array([gmap.gaussians[k].dist.kind is GaussianKind.OCCUPIED
                        for k in keys], dtype=np.float64)
        boxes_lo = np.array([gmap.gaussians[k].box.lo for k in keys])
        boxes_hi = np.array([gmap.gaussians[k].box.hi for k in keys])

        trace = np.einsum("kii->k", sigmas)
        reg = 1e-9 * np.maximum(trace, 1e-12)
        sigmas = sigmas + reg[:, None, None] * np.eye(3)
        self.inv = np.linalg.inv(sigmas)
        sign, logdet = np.linalg.slogdet(sigmas)
        if np.any(sign <= 0):
            raise ValueError("non-positive-definite covariance in map")
        self.mu = mus
        self.log_norm = -0.5 * (3.0 * _LOG_2PI + logdet)
        with np.errstate(divide="ignore"):
            self.log_pi = np.where(pis > 0, np.log(np.maximum(pis, 1e-300)), -np.inf)
        self.occ = occ
        self.lo = boxes_lo
        self.hi = boxes_hi


def _snapshot(gmap: GlobalMap) -> _Snapshot:
    cached = getattr(gmap, "_query_snapshot", None)
    if cached is not None and getattr(gmap, "_query_snapshot_version", -1) == gmap.version:
        return cached
    snap = _Snapshot(gmap)
    gmap._query_snapshot = snap
    gmap._query_snapshot_version = gmap.version
    return snap


def _eval_points(snap: _Snapshot, pts: np.ndarray, cand: np.ndarray,
                 gate: bool, m_out: np.ndarray, v_out: np.ndarray,
                 out_idx: np.ndarray) -> None:
    """Evaluate GMR for ``pts`` against id-sorted candidate indices ``cand``."""
    if cand.size == 0:
        return
    mu = snap.mu[cand]
    inv = snap.inv[cand]
    base = snap.log_pi[cand] + snap.log_norm[cand]
    occf = snap.occ[cand]
    lo = snap.lo[cand]
    hi = snap.hi[cand]

    for s in range(0, pts.shape[0], _CHUNK):
        x = pts[s:s + _CHUNK]
        rows = out_idx[s:s + _CHUNK]
        d0 = x[:, 0:1] - mu[None, :, 0]
        d1 = x[:, 1:2] - mu[None, :, 1]
        d2 = x[:, 2:3] - mu[None, :, 2]
        maha = (inv[None, :, 0, 0] * d0 * d0
                + inv[None, :, 1, 1] * d1 * d1
                + inv[None, :, 2, 2] * d2 * d2
                + 2.0 * (inv[None, :, 0, 1] * d0 * d1
                         + inv[None, :, 0, 2] * d0 * d2
                         + inv[None, :, 1, 2] * d1 * d2))
        if gate:
            sel = ((x[:, None, :] >= lo[None, :, :]).all(axis=2)
                   & (x[:, None, :] <= hi[None, :, :]).all(axis=2)
                   & (maha <= snap.alpha_sq))
        else:
            sel = np.ones(maha.shape, dtype=bool)
        counts = sel.sum(axis=1)
        nz = counts > 0
        if not np.any(nz):
            continue
        logp = (base[None, :] - 0.5 * maha)[sel]
        occ_pair = np.broadcast_to(occf, sel.shape)[sel]
        counts_nz = counts[nz]
        starts = np.zeros(counts_nz.shape[0], dtype=np.intp)
        np.cumsum(counts_nz[:-1], out=starts[1:])
        peak = np.maximum(np.maximum.reduceat(logp, starts), snap.log_pi0)
        expw = np.exp(logp - np.repeat(peak, counts_nz))
        denom_log = peak + np.log(np.add.reduceat(expw, starts)
                                  + np.exp(snap.log_pi0 - peak))
        w = np.exp(logp - np.repeat(denom_log, counts_nz))
        w_occ = np.add.reduceat(w * occ_pair, starts)
        w0 = np.exp(snap.log_pi0 - denom_log)
        m = 0.5 * w0 + w_occ
        m_out[rows[nz]] = m
        v_out[rows[nz]] = m - m * m


def query_batch(gmap: GlobalMap, points, pruned: bool = True
                ) -> tuple[np.ndarray, np.ndarray]:
    """Occupancy mean and variance for many points.

    ``pruned=False`` bypasses the box/Mahalanobis candidate gate and sums
    over every component (validation reference).
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = pts.shape[0]
    m_out = np.full(n, 0.5)
    v_out = np.full(n, 0.25)
    snap = _snapshot(gmap)
    if snap.count == 0 or n == 0:
        return m_out, v_out

    if not pruned:
        all_cand = np.arange(snap.count, dtype=np.intp)
        _eval_points(snap, pts, all_cand, False, m_out, v_out,
                     np.arange(n, dtype=np.intp))
        return m_out, v_out

    cells = np.floor(pts / _BUCKET).astype(np.int64)
    off = np.int64(1) << 20
    key = ((cells[:, 0] + off) << 42) + ((cells[:, 1] + off) << 21) + (cells[:, 2] + off)
    uniq, inverse = np.unique(key, return_inverse=True)
    order = np.argsort(inverse, kind="stable")
    bounds = np.searchsorted(inverse[order], np.arange(uniq.shape[0] + 1))

    for b in range(uniq.shape[0]):
        rows = order[bounds[b]:bounds[b + 1]]
        cell = cells[rows[0]]
        cell_box = Aabb(cell * _BUCKET, (cell + 1) * _BUCKET)
        hits = snap.tree.search_intersecting(cell_box)
        if not hits:
            continue
        cand = np.array(sorted(snap.key_index[k] for k in hits), dtype=np.intp)
        _eval_points(snap, pts[rows], cand, True, m_out, v_out, rows)
    return m_out, v_out


def query_occupancy(gmap: GlobalMap, x, pruned: bool = True) -> tuple[float, float]:
    """Occupancy mean and variance at one point."""
    m, v = query_batch(gmap, np.reshape(np.asarray(x, dtype=np.float64), (1, 3)),
                       pruned=pruned)
    return float(m[0]), float(v[0])


def classify(m: float, occ_thresh: float = 0.9, free_thresh: float = 0.1) -> Occupancy:
    """Threshold an occupancy mean into occupied / free / unexplored."""
    if m >= occ_thresh:
        return Occupancy.OCCUPIED
    if m <= free_thresh:
        return Occupancy.FREE
    return Occupancy.UNEXPLORED


def classify_batch(m: np.ndarray, occ_thresh: float = 0.9,
                   free_thresh: float = 0.1) -> np.ndarray:
    """Vectorized classify: 1 = occupied, 0 = free, 2 = unexplored."""
    out = np.full(np.shape(m), 2, dtype=np.int8)
    m = np.asarray(m)
    out[m >= occ_thresh] = 1
    out[m <= free_thresh] = 0
    return out
