"""Merge-gating measures between Gaussians.

Whether two Gaussians may fuse is decided by the Hellinger distance between
the two-component mixture {c, q} and the single fused Gaussian r, evaluated
with sigma-point quadrature (unscented transform, kappa = 0), and scaled by
a geometric similarity in [0, 1] so dissimilar shapes need to be closer in
distribution before they merge.

Convention: d_h^2 = 1 - integral sqrt(f g), so d_h lies in [0, 1] with 0
for identical distributions.
"""

from __future__ import annotations

import math

import numpy as np

from .core import Aabb, DistGaussian, GaussianKind, aabb_of_gaussian

_LOG_2PI = math.log(2.0 * math.pi)
_DIM = 3


def _factor(g: DistGaussian) -> tuple[np.ndarray, np.ndarray, float]:
    """Mean, Cholesky factor, log-det of the regularized covariance."""
    sigma = np.asarray(g.sigma)
    reg = 1e-9 * max(float(np.trace(sigma)), 1e-12)
    chol = np.linalg.cholesky(sigma + reg * np.eye(_DIM))
    logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return np.asarray(g.mu), chol, logdet


def _log_pdf(x: np.ndarray, mu: np.ndarray, chol: np.ndarray, logdet: float) -> np.ndarray:
    diff = x - mu
    z = np.linalg.solve(chol, diff.T).T
    maha = np.sum(z * z, axis=-1)
    return -0.5 * (_DIM * _LOG_2PI + logdet + maha)


def _sigma_points(mu: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """2n points at mu +- sqrt(n) * L_i (kappa = 0 drops the center point)."""
    spread = math.sqrt(float(_DIM)) * chol.T  # rows are sqrt(n) * L columns
    return np.concatenate([mu + spread, mu - spread], axis=0)


def unscented_bhattacharyya(
    f_gaussians: list[DistGaussian], f_weights: list[float],
    g_gaussians: list[DistGaussian], g_weights: list[float],
) -> float:
    """Sigma-point estimate of integral sqrt(f g) between two mixtures."""
    f_parts = [_factor(g) for g in f_gaussians]
    g_parts = [_factor(g) for g in g_gaussians]
    f_logw = [math.log(w) for w in f_weights]
    g_logw = [math.log(w) for w in g_weights]

    def log_mix(x: np.ndarray, parts, logw) -> np.ndarray:
        terms = np.stack([lw + _log_pdf(x, mu, ch, ld)
                          for lw, (mu, ch, ld) in zip(logw, parts)], axis=0)
        peak = np.max(terms, axis=0)
        return peak + np.log(np.sum(np.exp(terms - peak), axis=0))

    bc = 0.0
    point_weight = 1.0 / (2.0 * _DIM)
    for w, (mu, chol, _) in zip(f_weights, f_parts):
        pts = _sigma_points(mu, chol)
        log_f = log_mix(pts, f_parts, f_logw)
        log_g = log_mix(pts, g_parts, g_logw)
        bc += w * point_weight * float(np.sum(np.exp(0.5 * (log_g - log_f))))
    return bc


def unscented_hellinger(r: DistGaussian, c: DistGaussian, q: DistGaussian) -> float:
    """Hellinger distance between the mixture {c, q} and its fused candidate r."""
    total = c.pi + q.pi
    if total <= 0.0:
        return 0.0
    wc, wq = c.pi / total, q.pi / total
    bc = unscented_bhattacharyya([c, q], [wc, wq], [r], [1.0])
    return math.sqrt(max(0.0, 1.0 - min(bc, 1.0)))


def hellinger_gaussian(a: DistGaussian, b: DistGaussian) -> float:
    """Closed-form Hellinger distance between two single Gaussians."""
    mean_sigma = 0.5 * (a.sigma + b.sigma)
    diff = a.mu - b.mu
    sld_a = np.linalg.slogdet(a.sigma)[1]
    sld_b = np.linalg.slogdet(b.sigma)[1]
    sld_m = np.linalg.slogdet(mean_sigma)[1]
    maha = float(diff @ np.linalg.solve(mean_sigma, diff))
    log_bc = 0.25 * (sld_a + sld_b) - 0.5 * sld_m - 0.125 * maha
    return math.sqrt(max(0.0, 1.0 - math.exp(log_bc)))


def box_iou(a: Aabb, b: Aabb) -> float:
    """Volume intersection-over-union of two boxes."""
    lo = np.maximum(a.lo, b.lo)
    hi = np.minimum(a.hi, b.hi)
    if np.any(hi < lo):
        return 0.0
    inter = float(np.prod(hi - lo))
    union = a.volume() + b.volume() - inter
    if union <= 0.0:
        # Two degenerate (flat) boxes: identical supports count as equal.
        return 1.0 if np.allclose(a.lo, b.lo) and np.allclose(a.hi, b.hi) else 0.0
    return inter / union


def z_extent_iou(a: Aabb, b: Aabb) -> float:
    """1-D IoU of the z extents; gates free-Gaussian fusion within a slab."""
    inter = min(a.hi[2], b.hi[2]) - max(a.lo[2], b.lo[2])
    if inter < 0.0:
        return 0.0
    union = (a.hi[2] - a.lo[2]) + (b.hi[2] - b.lo[2]) - inter
    if union <= 0.0:
        return 1.0
    return float(inter / union)


def surface_normal(g: DistGaussian) -> np.ndarray:
    """Unit normal of a surface Gaussian: eigenvector of the smallest eigenvalue."""
    _, vecs = np.linalg.eigh(g.sigma)
    return vecs[:, 0]


def _plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(normal)))] = 1.0
    e1 = np.cross(normal, axis)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    return e1, e2


def _box_corners(box: Aabb) -> np.ndarray:
    lo, hi = box.lo, box.hi
    return np.array([[x, y, z] for x in (lo[0], hi[0])
                     for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


def geometric_similarity(c: DistGaussian, q: DistGaussian, alpha_m: float) -> float:
    """Shape agreement in [0, 1] used to scale the Hellinger threshold.

    Free Gaussians represent volumes: 3-D box IoU. Occupied Gaussians
    represent surfaces: IoU of the box footprints projected on the shared
    surface plane, times the alignment of their normals.
    """
    if c.kind is not q.kind:
        raise ValueError("similarity requires Gaussians of the same kind")
    box_c = aabb_of_gaussian(c, alpha_m)
    box_q = aabb_of_gaussian(q, alpha_m)
    if c.kind is GaussianKind.FREE:
        return box_iou(box_c, box_q)

    n_c = surface_normal(c)
    n_q = surface_normal(q)
    align = float(abs(n_c @ n_q))
    if n_c @ n_q < 0.0:
        n_q = -n_q
    mean_n = n_c + n_q
    norm = np.linalg.norm(mean_n)
    if norm < 1e-12:
        return 0.0
    e1, e2 = _plane_basis(mean_n / norm)

    def footprint(box: Aabb) -> tuple[float, float, float, float]:
        pts = _box_corners(box)
        u = pts @ e1
        v = pts @ e2
        return float(u.min()), float(v.min()), float(u.max()), float(v.max())

    au0, av0, au1, av1 = footprint(box_c)
    bu0, bv0, bu1, bv1 = footprint(box_q)
    iw = min(au1, bu1) - max(au0, bu0)
    ih = min(av1, bv1) - max(av0, bv0)
    if iw < 0.0 or ih < 0.0:
        return 0.0
    inter = iw * ih
    union = (au1 - au0) * (av1 - av0) + (bu1 - bu0) * (bv1 - bv0) - inter
    if union <= 0.0:
        return align
    return align * inter / union
