"""Accuracy and memory evaluation of constructed maps.

Occupied regions are validated at the end of every sensor ray, free
regions along every ray at a fixed spacing (stopping one spacing short of
the endpoint). Accuracy is summarized as an ROC curve (threshold sweep
over queried occupancy probabilities) and a precision-recall curve for the
obstacle surface; memory as the serialized map size plus the instrumented
peak transient overhead.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import FrameStream
from .fusion import GlobalMap
from .local_map import RECORD_BYTES
from .memtrack import TransientTracker

HEADER_BYTES = 16 + 14 * 8
TREE_NODE_BYTES = 16       # per node bookkeeping
TREE_ENTRY_BYTES = 32      # float32 box + child reference


def sample_eval_points(stream: FrameStream, spacing: float = 0.1
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Labeled evaluation points from a sensor stream.

    Returns (points (N, 3) world frame, labels (N,) bool) with True for
    occupied samples (ray endpoints) and False for free samples taken
    every ``spacing`` meters along each ray, excluding the final
    ``spacing`` before the endpoint.
    """
    cam = stream.cam
    u_grid, v_grid = np.meshgrid(np.arange(cam.width, dtype=np.float64),
                                 np.arange(cam.height, dtype=np.float64))
    x_factor = (u_grid - cam.cx) / cam.fx
    y_factor = (v_grid - cam.cy) / cam.fy

    points: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for frame in stream:
        depth = frame.depth()
        valid = (depth >= cam.min_range) & (depth <= cam.max_range)
        if not np.any(valid):
            continue
        z = depth[valid]
        rays = np.stack([x_factor[valid] * z, y_factor[valid] * z, z], axis=1)
        ranges = np.linalg.norm(rays, axis=1)
        endpoints = rays @ frame.pose.rotation.T + frame.pose.translation
        points.append(endpoints)
        labels.append(np.ones(endpoints.shape[0], dtype=bool))

        n_free = np.floor((ranges - spacing) / spacing).astype(np.int64)
        n_free = np.clip(n_free, 0, None)
        total = int(n_free.sum())
        if total == 0:
            continue
        ray_idx = np.repeat(np.arange(rays.shape[0]), n_free)
        step = np.concatenate([np.arange(1, k + 1) for k in n_free if k > 0])
        units = rays[ray_idx] / ranges[ray_idx][:, None]
        free_pts = units * (step[:, None] * spacing)
        free_pts = free_pts @ frame.pose.rotation.T + frame.pose.translation
        points.append(free_pts)
        labels.append(np.zeros(free_pts.shape[0], dtype=bool))
    if not points:
        return np.zeros((0, 3)), np.zeros(0, dtype=bool)
    return np.concatenate(points), np.concatenate(labels)


def roc_curve(scores: np.ndarray, labels: np.ndarray
              ) -> tuple[np.ndarray, float]:
    """Threshold sweep: rows (threshold, tpr, fpr); AUC by trapezoid.

    Equal scores collapse to one operating point, which makes the
    trapezoidal AUC equal to the tie-corrected rank statistic.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = labels[order].astype(np.float64)
    tp = np.cumsum(sorted_pos)
    fp = np.cumsum(1.0 - sorted_pos)
    # Last index of each tied block defines the operating point.
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([distinct, [scores.size - 1]])
    thresholds = sorted_scores[idx]
    tpr = tp[idx] / n_pos
    fpr = fp[idx] / n_neg
    tpr_full = np.concatenate([[0.0], tpr])
    fpr_full = np.concatenate([[0.0], fpr])
    auc = float(np.trapz(tpr_full, fpr_full))
    points = np.column_stack([thresholds, tpr, fpr])
    return points, auc


def pr_curve(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Precision-recall sweep: rows (threshold, precision, recall).

    Thresholds at or above the maximum score predict nothing (or only
    ties at the top) and are omitted, matching the validity rule that
    precision is undefined there.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.size == 0:
        return np.zeros((0, 3))
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_pos = labels[order].astype(np.float64)
    tp = np.cumsum(sorted_pos)
    predicted = np.arange(1, scores.size + 1, dtype=np.float64)
    n_pos = labels.sum()
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([distinct, [scores.size - 1]])
    thresholds = sorted_scores[idx]
    keep = thresholds < sorted_scores[0]
    idx = idx[keep]
    if idx.size == 0 or n_pos == 0:
        return np.zeros((0, 3))
    precision = tp[idx] / predicted[idx]
    recall = tp[idx] / n_pos
    return np.column_stack([thresholds[keep], precision, recall])


def precision_at_recall(curve: np.ndarray, recall: float) -> float:
    """Best precision among operating points with recall >= the target."""
    if curve.shape[0] == 0:
        return 0.0
    mask = curve[:, 2] >= recall
    if not np.any(mask):
        return 0.0
    return float(curve[mask, 1].max())


def map_size_bytes(gmap: GlobalMap) -> int:
    """Serialized size: header + records + R-tree nodes."""
    nodes = 0
    entries = 0
    stack = [gmap.tree._root]
    while stack:
        node = stack.pop()
        nodes += 1
        entries += len(node.children)
        if not node.leaf:
            stack.extend(node.children)
    return (HEADER_BYTES + RECORD_BYTES * len(gmap.gaussians)
            + nodes * TREE_NODE_BYTES + entries * TREE_ENTRY_BYTES)


@dataclass
class MemoryReport:
    map_bytes: int
    peak_overhead_bytes: int
    max_single_alloc: int
    by_tag: dict[str, int]


def memory_report(gmap: GlobalMap, tracker: TransientTracker) -> MemoryReport:
    return MemoryReport(map_size_bytes(gmap), tracker.peak,
                        tracker.max_single, tracker.current_by_tag())


def write_roc_csv(path: str | Path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "tpr", "fpr"])
        writer.writerows(points.tolist())


def write_pr_csv(path: str | Path, points: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["threshold", "precision", "recall"])
        writer.writerows(points.tolist())
