"""Command line interface: build, query, eval, export, synth.

Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
Set GMMAP_LOG=debug|info|warning to control logging.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .core import CameraIntrinsics, MapParams
from .dataset import ConfigError, FrameStream, load_config, load_map, \
    load_scene_file, load_tum_sequence, save_map, scene_stream, write_config, \
    write_tum_dataset, export_ply
from .evaluation import map_size_bytes, pr_curve, roc_curve, sample_eval_points, \
    write_pr_csv, write_roc_csv
from .fusion import GlobalMap, fuse_local_into_global
from .local_map import construct_local_map
from .memtrack import TransientTracker
from .query import classify, query_batch, query_occupancy

log = logging.getLogger("gmmap")


def _setup_logging() -> None:
    level = os.environ.get("GMMAP_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _open_stream(args) -> tuple[FrameStream, CameraIntrinsics, MapParams]:
    """Resolve the input stream plus camera/params from CLI flags."""
    if args.synth:
        scene, poses, cam, noise, seed = load_scene_file(args.synth)
        params = MapParams()
        if args.config:
            cfg_cam, params = load_config(args.config)
            cam = cfg_cam
        return scene_stream(scene, poses, cam, noise, seed), cam, params
    if not args.config:
        raise ConfigError("--config is required with --input")
    cam, params = load_config(args.config)
    return load_tum_sequence(args.input, cam), cam, params


def cmd_build(args) -> int:
    stream, cam, params = _open_stream(args)
    frames = stream.frames
    if args.limit is not None:
        frames = frames[:args.limit]
    tracker = TransientTracker()
    gmap = GlobalMap(params)
    timing: list[tuple[int, float]] = []
    total = 0.0
    for i, frame in enumerate(frames):
        start = time.perf_counter()
        lmap = construct_local_map(frame.rows(), frame.pose, cam, params,
                                   threads=args.threads, tracker=tracker)
        fuse_local_into_global(gmap, lmap, params, tracker=tracker)
        elapsed = time.perf_counter() - start
        timing.append((i, elapsed))
        total += elapsed
        log.info("frame %d: %.1f ms, %d Gaussians", i, elapsed * 1e3, len(gmap))
    nbytes = save_map(gmap, args.out)
    timing_path = Path(args.out).with_suffix(".timing.csv")
    with open(timing_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "seconds"])
        writer.writerows(timing)
    rate = len(frames) / total if total > 0 else 0.0
    print(f"built {len(gmap)} Gaussians from {len(frames)} frames "
          f"({rate:.2f} images/s), map {nbytes} bytes "
          f"(accounted {map_size_bytes(gmap)}), peak overhead {tracker.peak} bytes")
    return 0


def _parse_point(text: str) -> np.ndarray:
    parts = [float(p) for p in text.split(",")]
    if len(parts) != 3:
        raise ValueError("expected x,y,z")
    return np.array(parts)


def cmd_query(args) -> int:
    gmap = load_map(args.map)
    params = gmap.params
    if args.point:
        pts = np.array([_parse_point(args.point)])
    else:
        vals = [float(p) for p in args.grid.split(",")]
        if len(vals) != 7:
            raise ValueError("--grid expects x0,y0,z0,x1,y1,z1,step")
        x0, y0, z0, x1, y1, z1, step = vals
        axes = [np.arange(a, b + step / 2, step) for a, b in
                ((x0, x1), (y0, y1), (z0, z1))]
        grid = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in grid], axis=1)
    m, v = query_batch(gmap, pts)
    rows = [(p[0], p[1], p[2], mi, vi,
             classify(mi, params.occ_thresh, params.free_thresh).value)
            for p, mi, vi in zip(pts, m, v)]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x", "y", "z", "m", "v", "class"])
            writer.writerows(rows)
    else:
        for row in rows:
            print(",".join(str(c) for c in row))
    return 0


def cmd_eval(args) -> int:
    gmap = load_map(args.map)
    stream, _cam, _params = _open_stream(args)
    points, labels = sample_eval_points(stream, spacing=args.spacing)
    if points.shape[0] == 0:
        log.warning("no evaluation points; nothing to do")
        return 0
    scores, _ = query_batch(gmap, points)
    roc_points, auc = roc_curve(scores, labels)
    pr_points = pr_curve(scores, labels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_roc_csv(out / "roc.csv", roc_points)
    write_pr_csv(out / "pr.csv", pr_points)
    print(f"auc {auc:.6f}")
    return 0


def cmd_export(args) -> int:
    gmap = load_map(args.map)
    count = export_ply(gmap, args.ply, which=args.kind)
    print(f"wrote {count} ellipsoids to {args.ply}")
    return 0


def cmd_synth(args) -> int:
    scene, poses, cam, noise, seed = load_scene_file(args.scene)
    out = Path(args.out)
    write_tum_dataset(scene, poses, cam, out, noise, seed)
    write_config(out / "config.txt", cam, MapParams())
    print(f"wrote {len(poses)} frames to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gmmap",
                                     description="Gaussian-mixture occupancy mapping")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build", help="compress a stream into a map")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="TUM-layout dataset directory")
    src.add_argument("--synth", help="JSON scene file, ray-cast on the fly")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out", required=True, help="output map path")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--limit", type=int, default=None, help="max frames")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("query", help="query occupancy from a map")
    p.add_argument("--map", required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--point", help="x,y,z")
    which.add_argument("--grid", help="x0,y0,z0,x1,y1,z1,step")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="ROC/PR accuracy evaluation")
    p.add_argument("--map", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input")
    src.add_argument("--synth")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--spacing", type=float, default=0.1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="export Gaussians as PLY ellipsoids")
    p.add_argument("--map", required=True)
    p.add_argument("--ply", required=True)
    p.add_argument("--kind", choices=["occ", "free", "all"], default="all")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", help="materialize a scene as a TUM dataset")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("unhandled failure")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
