"""Single-pass compression of a depth image into surface Gaussians.

The image is consumed one scanline at a time, one pixel resident at once.
Within a row, pixels whose depths follow the running line fit of the
current segment (inverse depth is linear in column for a planar surface)
are absorbed into that segment; each segment accumulates one occupied
moment Gaussian from the ray endpoints plus the two free-Gaussian bases
(full rays and z-normalized rays). Across rows, segments fuse into surface
tracks when their spans overlap and they are close and parallel; tracks no
row extends are complete. Tracks with too few supporting pixels are pruned
entirely, free bases included, so speckle never turns into map evidence.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .core import CameraIntrinsics, DistGaussian, GaussianKind, MapParams
from .free_space import FreeBasis, SubregionIndexer
from .memtrack import NULL_TRACKER, TransientTracker
from .moments import MomentAccumulator, to_distribution

# Nominal per-object footprints for the instrumented overhead counters
# (three moment accumulators plus fit state / plane state).
SEGMENT_BYTES = 384
TRACK_BYTES = 448


def unproject(u: float, v: float, z: float, cam: CameraIntrinsics) -> np.ndarray:
    """Pinhole back-projection of pixel (u, v) at depth z, camera frame."""
    return np.array([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])


class ScanSegment:
    """One maximal planar run of valid pixels within a scanline."""

    __slots__ = ("row", "col_start", "col_end", "occ", "phi", "beta",
                 "min_subregion", "n_fit", "su", "sw", "suu", "suw",
                 "first_pt", "last_pt", "last_z", "normal", "mean_depth")

    def __init__(self, row: int, col: int) -> None:
        self.row = row
        self.col_start = col
        self.col_end = col  # exclusive
        self.occ = MomentAccumulator()
        self.phi = MomentAccumulator()
        self.beta = MomentAccumulator()
        self.min_subregion = -1
        # Least-squares fit of inverse depth against column index.
        self.n_fit = 0
        self.su = self.sw = self.suu = self.suw = 0.0
        self.first_pt: tuple[float, float, float] | None = None
        self.last_pt: tuple[float, float, float] = (0.0, 0.0, 0.0)
        self.last_z = 0.0
        self.normal: np.ndarray | None = None
        self.mean_depth = 0.0

    @property
    def count(self) -> int:
        return self.occ.count

    def predicted_depth(self, col: int) -> float:
        if self.n_fit == 1:
            return self.last_z
        denom = self.n_fit * self.suu - self.su * self.su
        if denom == 0.0:
            return self.last_z
        slope = (self.n_fit * self.suw - self.su * self.sw) / denom
        intercept = (self.sw - slope * self.su) / self.n_fit
        w = intercept + slope * col
        if w <= 1e-9:
            return self.last_z
        return 1.0 / w

    def absorb(self, col: int, x: float, y: float, z: float, subregion: int) -> None:
        self.col_end = col + 1
        self.occ.add_point(x, y, z)
        self.phi.add_line(x, y, z)
        self.beta.add_line(x / z, y / z, 1.0)
        if self.min_subregion < 0 or subregion < self.min_subregion:
            self.min_subregion = subregion
        w = 1.0 / z
        self.n_fit += 1
        self.su += col
        self.sw += w
        self.suu += col * col
        self.suw += col * w
        if self.first_pt is None:
            self.first_pt = (x, y, z)
        self.last_pt = (x, y, z)
        self.last_z = z

    def finalize(self) -> None:
        """Fix the mean depth and the extruded surface-normal proxy.

        A single row constrains the surface only up to rotation about the
        segment chord, so the normal is taken as the viewing direction
        deflected to be orthogonal to the chord.
        """
        mx, my, mz = self.occ.mean()
        self.mean_depth = mz
        fx, fy, fz = self.first_pt
        lx, ly, lz = self.last_pt
        chord = np.array([lx - fx, ly - fy, lz - fz])
        norm = np.linalg.norm(chord)
        view = np.array([mx, my, mz])
        view /= np.linalg.norm(view)
        if norm < 1e-12:
            self.normal = view
            return
        chord /= norm
        n = view - (view @ chord) * chord
        nn = np.linalg.norm(n)
        if nn < 1e-9:
            # Surface seen edge-on; any perpendicular of the chord works.
            axis = np.zeros(3)
            axis[int(np.argmin(np.abs(chord)))] = 1.0
            n = np.cross(chord, axis)
            nn = np.linalg.norm(n)
        self.normal = n / nn


class SurfaceTrack:
    """A surface hypothesis built from segments across successive rows."""

    __slots__ = ("occ", "phi", "beta", "col_start", "col_end", "rows",
                 "min_subregion", "seg_normal", "_plane_normal",
                 "_plane_point", "_plane_stale", "mean_depth",
                 "_pending_start", "_pending_end")

    def __init__(self, seg: ScanSegment) -> None:
        self.occ = seg.occ
        self.phi = seg.phi
        self.beta = seg.beta
        self.col_start = seg.col_start
        self.col_end = seg.col_end
        self.rows = 1
        self.min_subregion = seg.min_subregion
        self.seg_normal = seg.normal
        self.mean_depth = seg.mean_depth
        self._plane_normal: np.ndarray | None = None
        self._plane_point: np.ndarray | None = None
        self._plane_stale = True
        self._pending_start = 0
        self._pending_end = 0

    @property
    def support(self) -> int:
        return self.occ.count

    def plane(self) -> tuple[np.ndarray, np.ndarray]:
        if self._plane_stale:
            xi = self.occ.xi
            mu = np.array(self.occ.mean())
            m2 = np.array([
                [self.occ.mxx, self.occ.mxy, self.occ.mxz],
                [self.occ.mxy, self.occ.myy, self.occ.myz],
                [self.occ.mxz, self.occ.myz, self.occ.mzz],
            ])
            cov = m2 / xi - np.outer(mu, mu)
            _, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
            self._plane_normal = vecs[:, 0]
            self._plane_point = mu
            self._plane_stale = False
        return self._plane_normal, self._plane_point

    def absorb(self, seg: ScanSegment, first_in_row: bool) -> None:
        """Merge a segment; the span update is staged until commit_row().

        Spans stay at the previous row's footprint while the rest of the
        row is matched, so match order cannot change which tracks overlap.
        """
        self.occ.merge(seg.occ)
        self.phi.merge(seg.phi)
        self.beta.merge(seg.beta)
        if seg.min_subregion >= 0:
            if self.min_subregion < 0 or seg.min_subregion < self.min_subregion:
                self.min_subregion = seg.min_subregion
        if first_in_row:
            self._pending_start = seg.col_start
            self._pending_end = seg.col_end
            self.rows += 1
        else:
            self._pending_start = min(self._pending_start, seg.col_start)
            self._pending_end = max(self._pending_end, seg.col_end)
        self._plane_stale = True

    def commit_row(self) -> None:
        self.col_start = self._pending_start
        self.col_end = self._pending_end


@dataclass
class CompressStats:
    """Pixel accounting across segmentation, pruning and emission."""

    valid_pixels: int = 0
    discarded_run_pixels: int = 0
    emitted_support: int = 0
    pruned_support: int = 0
    emitted_tracks: int = 0
    pruned_tracks: int = 0


@dataclass
class CompressResult:
    occupied: list[DistGaussian] = field(default_factory=list)
    free_bases: list[FreeBasis] = field(default_factory=list)
    stats: CompressStats = field(default_factory=CompressStats)


def scanline_segmentation(
    row_index: int,
    depths: np.ndarray,
    cam: CameraIntrinsics,
    params: MapParams,
    indexer: SubregionIndexer,
    tracker: TransientTracker = NULL_TRACKER,
) -> tuple[list[ScanSegment], int, int]:
    """Partition one scanline into planar segments.

    Returns (segments, valid_pixel_count, discarded_short_run_pixels).
    Consecutive pixels extend the open segment while the measured depth
    stays within an adaptive band around the segment's line-fit prediction;
    invalid pixels and prediction breaks close it.
    """
    v = row_index
    inv_fx = 1.0 / cam.fx
    inv_fy = 1.0 / cam.fy
    y_scale = (v - cam.cy) * inv_fy
    min_r, max_r = cam.min_range, cam.max_range
    noise_floor = params.noise_floor
    k_slope = params.k_slope
    min_pixels = params.min_segment_pixels
    index_of = indexer.index_of

    segments: list[ScanSegment] = []
    current: ScanSegment | None = None
    valid = 0
    discarded = 0

    def close(seg: ScanSegment | None) -> int:
        if seg is None:
            return 0
        if seg.count >= min_pixels:
            seg.finalize()
            segments.append(seg)
            return 0
        tracker.free("segments", SEGMENT_BYTES)
        return seg.count

    for u in range(depths.shape[0]):
        z = float(depths[u])
        if not (min_r <= z <= max_r) or math.isnan(z):
            discarded += close(current)
            current = None
            continue
        valid += 1
        x = (u - cam.cx) * z * inv_fx
        y = y_scale * z
        if current is not None:
            gap = abs(z - current.predicted_depth(u))
            if gap > max(noise_floor, k_slope * current.last_z * inv_fx):
                discarded += close(current)
                current = None
        if current is None:
            current = ScanSegment(v, u)
            tracker.alloc("segments", SEGMENT_BYTES)
        current.absorb(u, x, y, z, index_of(z))
    discarded += close(current)
    return segments, valid, discarded


def _track_accepts(track: SurfaceTrack, seg: ScanSegment, params: MapParams,
                   cam: CameraIntrinsics) -> bool:
    overlap = min(track.col_end, seg.col_end) - max(track.col_start, seg.col_start)
    if overlap < 1:
        return False
    plane_tol = params.plane_dist_factor * params.noise_floor
    if track.rows == 1:
        if abs(float(track.seg_normal @ seg.normal)) < params.normal_dot_min:
            return False
        row_gap = max(plane_tol, params.k_slope * seg.mean_depth / cam.fy)
        return abs(track.mean_depth - seg.mean_depth) <= row_gap
    normal, point = track.plane()
    mean = np.array(seg.occ.mean())
    if abs(float((mean - point) @ normal)) > plane_tol:
        return False
    # Coplanarity: the segment chord must lie in the track plane.
    fx_, fy_, fz_ = seg.first_pt
    lx_, ly_, lz_ = seg.last_pt
    chord = np.array([lx_ - fx_, ly_ - fy_, lz_ - fz_])
    norm = np.linalg.norm(chord)
    if norm < 1e-12:
        return True
    max_sin = math.sqrt(max(0.0, 1.0 - params.normal_dot_min ** 2))
    return abs(float(chord @ normal)) / norm <= max_sin


def segment_fusion(
    tracks: list[SurfaceTrack],
    segments: list[ScanSegment],
    params: MapParams,
    cam: CameraIntrinsics,
    tracker: TransientTracker = NULL_TRACKER,
) -> tuple[list[SurfaceTrack], list[SurfaceTrack]]:
    """Fuse one row of segments into the open tracks from the previous row.

    Each segment joins the overlapping, coplanar track with the largest
    column overlap or opens a new track; tracks that absorbed nothing this
    row are complete.
    """
    absorbed: dict[int, bool] = {}
    survivors: list[SurfaceTrack] = []
    for seg in segments:
        best = -1
        best_overlap = 0
        for idx, track in enumerate(tracks):
            overlap = min(track.col_end, seg.col_end) - max(track.col_start, seg.col_start)
            if overlap > best_overlap and _track_accepts(track, seg, params, cam):
                best, best_overlap = idx, overlap
        if best >= 0:
            first = best not in absorbed
            tracks[best].absorb(seg, first_in_row=first)
            absorbed[best] = True
            tracker.free("segments", SEGMENT_BYTES)
        else:
            survivors.append(SurfaceTrack(seg))
            tracker.alloc("tracks", TRACK_BYTES)
            tracker.free("segments", SEGMENT_BYTES)
    completed = [t for i, t in enumerate(tracks) if i not in absorbed]
    carried = [t for i, t in enumerate(tracks) if i in absorbed]
    for track in carried:
        track.commit_row()
    return carried + survivors, completed


def _iter_rows(image_or_rows, tracker: TransientTracker) -> Iterator[np.ndarray]:
    if isinstance(image_or_rows, np.ndarray):
        for v in range(image_or_rows.shape[0]):
            yield image_or_rows[v]
    else:
        for row in image_or_rows:
            yield np.asarray(row, dtype=np.float64)


def compress_depth_image(
    image_or_rows,
    cam: CameraIntrinsics,
    params: MapParams,
    threads: int = 1,
    tracker: TransientTracker = NULL_TRACKER,
) -> CompressResult:
    """Single-pass compression of a depth image (meters) into Gaussians.

    ``image_or_rows`` is a (V, U) array or an iterable streaming one row at
    a time. With ``threads`` > 1, scanline segmentation runs concurrently
    over a bounded window of rows; segment fusion always joins rows in
    order, so results are identical for any thread count.
    """
    indexer = SubregionIndexer(params, cam)
    result = CompressResult()
    stats = result.stats
    tracks: list[SurfaceTrack] = []
    row_bytes = cam.width * 8

    def handle_completed(completed: list[SurfaceTrack]) -> None:
        for track in completed:
            tracker.free("tracks", TRACK_BYTES)
            if track.support >= params.prune_min_support:
                occ = track.occ.to_gaussian(GaussianKind.OCCUPIED)
                result.occupied.append(to_distribution(occ))
                result.free_bases.append(FreeBasis(
                    track.phi.to_gaussian(GaussianKind.FREE),
                    track.beta.to_gaussian(GaussianKind.FREE),
                    max(track.min_subregion, 0),
                ))
                stats.emitted_support += track.support
                stats.emitted_tracks += 1
            else:
                stats.pruned_support += track.support
                stats.pruned_tracks += 1

    def ingest(v: int, seg_out: tuple[list[ScanSegment], int, int]) -> None:
        nonlocal tracks
        segments, valid, dropped = seg_out
        stats.valid_pixels += valid
        stats.discarded_run_pixels += dropped
        if v == 0:
            for seg in segments:
                tracks.append(SurfaceTrack(seg))
                tracker.alloc("tracks", TRACK_BYTES)
                tracker.free("segments", SEGMENT_BYTES)
        else:
            tracks, completed = segment_fusion(tracks, segments, params, cam, tracker)
            handle_completed(completed)

    rows = _iter_rows(image_or_rows, tracker)
    if threads <= 1:
        for v, row in enumerate(rows):
            tracker.alloc("rows", row_bytes)
            ingest(v, scanline_segmentation(v, row, cam, params, indexer, tracker))
            tracker.free("rows", row_bytes)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            pending: list = []
            v_submit = 0
            v_done = 0
            for row in rows:
                tracker.alloc("rows", row_bytes)
                pending.append(pool.submit(scanline_segmentation, v_submit, row,
                                           cam, params, indexer, tracker))
                v_submit += 1
                if len(pending) >= threads:
                    ingest(v_done, pending.pop(0).result())
                    tracker.free("rows", row_bytes)
                    v_done += 1
            while pending:
                ingest(v_done, pending.pop(0).result())
                tracker.free("rows", row_bytes)
                v_done += 1

    handle_completed(tracks)
    tracks = []
    return result
