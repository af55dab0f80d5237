"""Dataset ingestion, synthetic scenes, map serialization and export.

Supported inputs: TUM RGB-D directory layout (depth.txt index, 16-bit PNG
depth, groundtruth.txt poses) and JSON scene files that are ray-cast on
the fly. Maps serialize to the versioned little-endian "GMM1" format with
fixed 88-byte Gaussian records carrying both moment and distribution form;
the R-tree is rebuilt on load.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from PIL import Image

from .core import Aabb, CameraIntrinsics, DistGaussian, GaussianKind, MapParams, \
    MomentGaussian, Pose
from .fusion import GlobalMap
from .local_map import MapGaussian, quantize_dist, quantize_moment
from .core import aabb_of_gaussian

log = logging.getLogger("gmmap")

POSE_ASSOCIATION_WINDOW = 0.02  # seconds; nearest-pose matching for TUM

MAGIC = b"GMM1"
FORMAT_VERSION = 1

_RECORD_DTYPE = np.dtype([
    ("kind", "u1"),
    ("pad", "u1", (3,)),
    ("support", "<u4"),
    ("data", "<f4", (20,)),
])
assert _RECORD_DTYPE.itemsize == 88

_PARAM_FIELDS = ("alpha_m", "alpha_d", "d0", "alpha_h_free", "alpha_h_occ",
                 "pi0", "prune_min_support", "noise_floor", "k_slope",
                 "min_segment_pixels", "normal_dot_min", "plane_dist_factor",
                 "occ_thresh", "free_thresh")
_INT_PARAMS = {"prune_min_support", "min_segment_pixels"}


# ---------------------------------------------------------------------------
# frame streams

@dataclass
class Frame:
    """One depth measurement: timestamp, pose and a lazy image handle."""

    timestamp: float
    pose: Pose
    _load: Callable[[], np.ndarray]
    _load_row: Callable[[int], np.ndarray] | None = None
    height: int = 0

    def depth(self) -> np.ndarray:
        """Full depth image in meters, invalid pixels = 0."""
        return self._load()

    def rows(self) -> Iterator[np.ndarray]:
        """Stream scanlines without materializing the image when possible."""
        if self._load_row is not None:
            for v in range(self.height):
                yield self._load_row(v)
        else:
            img = self._load()
            for v in range(img.shape[0]):
                yield img[v]


@dataclass
class FrameStream:
    frames: list[Frame]
    cam: CameraIntrinsics

    def __len__(self) -> int:
        return len(self.frames)

    def __iter__(self) -> Iterator[Frame]:
        return iter(self.frames)


def _read_tum_index(path: Path) -> list[tuple[float, str]]:
    entries: list[tuple[float, str]] = []
    skipped = 0
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            entries.append((float(parts[0]), parts[1]))
        except (ValueError, IndexError):
            skipped += 1
    if skipped:
        log.warning("%s: skipped %d unparseable lines", path.name, skipped)
    return entries


def _read_tum_poses(path: Path) -> list[tuple[float, Pose]]:
    poses: list[tuple[float, Pose]] = []
    skipped = 0
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            t = float(parts[0])
            tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts[1:8])
            poses.append((t, Pose.from_quaternion(qx, qy, qz, qw, np.array([tx, ty, tz]))))
        except (ValueError, IndexError):
            skipped += 1
    if skipped:
        log.warning("%s: skipped %d unparseable lines", path.name, skipped)
    return poses


def load_tum_sequence(directory: str | Path, cam: CameraIntrinsics) -> FrameStream:
    """Load a TUM RGB-D style sequence of 16-bit depth PNGs with poses.

    Raw depth units scale by ``cam.depth_scale`` (TUM: 1/5000 m per unit);
    zero depth means invalid. Frames without a ground-truth pose within
    20 ms are dropped.
    """
    directory = Path(directory)
    index_file = directory / "depth.txt"
    pose_file = directory / "groundtruth.txt"
    if not index_file.exists() or not pose_file.exists():
        raise FileNotFoundError(f"{directory} lacks depth.txt / groundtruth.txt")

    poses = _read_tum_poses(pose_file)
    pose_times = [t for t, _ in poses]

    def nearest_pose(t: float) -> Pose | None:
        i = bisect_left(pose_times, t)
        best: tuple[float, Pose] | None = None
        for j in (i - 1, i):
            if 0 <= j < len(poses):
                dt = abs(poses[j][0] - t)
                if best is None or dt < best[0]:
                    best = (dt, poses[j][1])
        if best is None or best[0] > POSE_ASSOCIATION_WINDOW:
            return None
        return best[1]

    def make_loader(png: Path, scale: float) -> Callable[[], np.ndarray]:
        def loader() -> np.ndarray:
            raw = np.asarray(Image.open(png), dtype=np.float64)
            return raw * scale
        return loader

    frames: list[Frame] = []
    dropped = 0
    for t, rel in _read_tum_index(index_file):
        pose = nearest_pose(t)
        if pose is None:
            dropped += 1
            continue
        frames.append(Frame(t, pose, make_loader(directory / rel, cam.depth_scale),
                            height=cam.height))
    if dropped:
        log.warning("dropped %d frames without poses within %.0f ms",
                    dropped, POSE_ASSOCIATION_WINDOW * 1e3)
    frames.sort(key=lambda f: f.timestamp)
    for a, b in zip(frames, frames[1:]):
        if b.timestamp <= a.timestamp:
            raise ValueError("timestamps are not strictly increasing")
    return FrameStream(frames, cam)


# ---------------------------------------------------------------------------
# synthetic scenes

@dataclass(frozen=True)
class SceneBox:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))


@dataclass
class SyntheticScene:
    """Axis-aligned box geometry with an exact first-hit ray caster."""

    boxes: list[SceneBox] = field(default_factory=list)

    def raycast_row(self, pose: Pose, cam: CameraIntrinsics, v: int) -> np.ndarray:
        """Depths (meters) for scanline ``v``; 0 where nothing is hit in range."""
        u = np.arange(cam.width, dtype=np.float64)
        dirs_cam = np.stack([(u - cam.cx) / cam.fx,
                             np.full_like(u, (v - cam.cy) / cam.fy),
                             np.ones_like(u)], axis=1)
        dirs = dirs_cam @ pose.rotation.T
        origin = pose.translation
        t_best = np.full(cam.width, np.inf)
        for box in self.boxes:
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (box.lo - origin) / dirs
                t1 = (box.hi - origin) / dirs
            t_near = np.nanmax(np.minimum(t0, t1), axis=1)
            t_far = np.nanmin(np.maximum(t0, t1), axis=1)
            hit = (t_near <= t_far) & (t_near > 1e-9)
            t_best = np.where(hit & (t_near < t_best), t_near, t_best)
        depth = np.where(np.isfinite(t_best)
                         & (t_best >= cam.min_range)
                         & (t_best <= cam.max_range), t_best, 0.0)
        return depth

    def raycast(self, pose: Pose, cam: CameraIntrinsics) -> np.ndarray:
        return np.stack([self.raycast_row(pose, cam, v) for v in range(cam.height)])

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Ground-truth occupancy: True where a point lies inside geometry."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        inside = np.zeros(pts.shape[0], dtype=bool)
        for box in self.boxes:
            inside |= np.all((pts >= box.lo) & (pts <= box.hi), axis=1)
        return inside


def raycast_scene(scene: SyntheticScene, pose: Pose, cam: CameraIntrinsics) -> np.ndarray:
    return scene.raycast(pose, cam)


def orbit_poses(center: Sequence[float], radius: float, n_frames: int,
                height: float = 0.0, start_angle: float = 0.0,
                sweep: float = 2.0 * math.pi) -> list[Pose]:
    """Poses on a horizontal circle, camera looking radially outward."""
    center = np.asarray(center, dtype=np.float64)
    poses = []
    for k in range(n_frames):
        ang = start_angle + sweep * k / max(n_frames, 1)
        forward = np.array([math.cos(ang), math.sin(ang), 0.0])
        position = center + radius * forward + np.array([0.0, 0.0, height])
        up = np.array([0.0, 0.0, 1.0])
        x_cam = np.cross(forward, up)
        x_cam /= np.linalg.norm(x_cam)
        y_cam = np.cross(forward, x_cam)
        poses.append(Pose(np.column_stack([x_cam, y_cam, forward]), position))
    return poses


def scene_stream(scene: SyntheticScene, poses: Sequence[Pose],
                 cam: CameraIntrinsics, noise_sigma: float = 0.0,
                 seed: int = 0, fps: float = 30.0) -> FrameStream:
    """Frame stream ray-cast on demand, row by row, with seeded depth noise."""

    def make_row_loader(pose: Pose, frame_idx: int) -> Callable[[int], np.ndarray]:
        def load_row(v: int) -> np.ndarray:
            depth = scene.raycast_row(pose, cam, v)
            if noise_sigma > 0.0:
                rng = np.random.default_rng((seed, frame_idx, v))
                noise = rng.normal(0.0, noise_sigma, depth.shape)
                depth = np.where(depth > 0.0, np.clip(depth + noise, 1e-6, None), 0.0)
            return depth
        return load_row

    frames = []
    for k, pose in enumerate(poses):
        row_loader = make_row_loader(pose, k)

        def full_load(loader=row_loader, h=cam.height) -> np.ndarray:
            return np.stack([loader(v) for v in range(h)])

        frames.append(Frame(k / fps, pose, full_load, row_loader, cam.height))
    return FrameStream(frames, cam)


# ---------------------------------------------------------------------------
# scene files

DEFAULT_SCENE_CAMERA = dict(fx=48.0, fy=48.0, cx=31.5, cy=31.5, width=64,
                            height=64, depth_scale=1.0 / 5000.0,
                            min_range=0.1, max_range=10.0)


def load_scene_file(path: str | Path) -> tuple[SyntheticScene, list[Pose],
                                               CameraIntrinsics, float, int]:
    """Parse a JSON scene: boxes, trajectory, camera, noise and seed."""
    spec = json.loads(Path(path).read_text())
    boxes = [SceneBox(np.array(b[:3]), np.array(b[3:])) for b in spec["boxes"]]
    cam_spec = dict(DEFAULT_SCENE_CAMERA)
    cam_spec.update(spec.get("camera", {}))
    cam_spec["width"] = int(cam_spec["width"])
    cam_spec["height"] = int(cam_spec["height"])
    cam = CameraIntrinsics(**cam_spec)
    traj = spec.get("trajectory", {"type": "orbit", "center": [0, 0, 0],
                                   "radius": 1.0, "frames": 8})
    if traj["type"] == "orbit":
        poses = orbit_poses(traj.get("center", [0, 0, 0]), traj.get("radius", 1.0),
                            int(traj.get("frames", 8)), traj.get("height", 0.0),
                            traj.get("start_angle", 0.0),
                            traj.get("sweep", 2.0 * math.pi))
    elif traj["type"] == "poses":
        poses = [Pose.from_quaternion(qx, qy, qz, qw, np.array([tx, ty, tz]))
                 for tx, ty, tz, qx, qy, qz, qw in traj["poses"]]
    else:
        raise ValueError(f"unknown trajectory type {traj['type']!r}")
    return (SyntheticScene(boxes), poses, cam,
            float(spec.get("noise_sigma", 0.0)), int(spec.get("seed", 1)))


def write_tum_dataset(scene: SyntheticScene, poses: Sequence[Pose],
                      cam: CameraIntrinsics, out_dir: str | Path,
                      noise_sigma: float = 0.0, seed: int = 1) -> None:
    """Materialize a scene as a TUM-layout dataset (PNG depth + pose files)."""
    out = Path(out_dir)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    stream = scene_stream(scene, poses, cam, noise_sigma, seed)
    index_lines = ["# timestamp filename"]
    pose_lines = ["# timestamp tx ty tz qx qy qz qw"]
    for frame in stream:
        t = frame.timestamp
        raw = np.round(frame.depth() / cam.depth_scale)
        raw = np.clip(raw, 0, np.iinfo(np.uint16).max).astype(np.uint16)
        name = f"depth/{t:.6f}.png"
        Image.fromarray(raw, mode="I;16").save(out / name)
        index_lines.append(f"{t:.6f} {name}")
        qx, qy, qz, qw = _quaternion_of(frame.pose.rotation)
        tx, ty, tz = frame.pose.translation
        pose_lines.append(f"{t:.6f} {tx:.9f} {ty:.9f} {tz:.9f} "
                          f"{qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}")
    (out / "depth.txt").write_text("\n".join(index_lines) + "\n")
    (out / "groundtruth.txt").write_text("\n".join(pose_lines) + "\n")


def _quaternion_of(r: np.ndarray) -> tuple[float, float, float, float]:
    tr = float(np.trace(r))
    if tr > 0:
        s = math.sqrt(tr + 1.0) * 2
        qw = 0.25 * s
        qx = (r[2, 1] - r[1, 2]) / s
        qy = (r[0, 2] - r[2, 0]) / s
        qz = (r[1, 0] - r[0, 1]) / s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = math.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2]) * 2
        qw = (r[2, 1] - r[1, 2]) / s
        qx = 0.25 * s
        qy = (r[0, 1] + r[1, 0]) / s
        qz = (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = math.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2]) * 2
        qw = (r[0, 2] - r[2, 0]) / s
        qx = (r[0, 1] + r[1, 0]) / s
        qy = 0.25 * s
        qz = (r[1, 2] + r[2, 1]) / s
    else:
        s = math.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1]) * 2
        qw = (r[1, 0] - r[0, 1]) / s
        qx = (r[0, 2] + r[2, 0]) / s
        qy = (r[1, 2] + r[2, 1]) / s
        qz = 0.25 * s
    return qx, qy, qz, qw


# ---------------------------------------------------------------------------
# map serialization

def _sym_to_six(m: np.ndarray) -> list[float]:
    return [m[0, 0], m[0, 1], m[0, 2], m[1, 1], m[1, 2], m[2, 2]]


def _six_to_sym(v: np.ndarray) -> np.ndarray:
    return np.array([[v[0], v[1], v[2]],
                     [v[1], v[3], v[4]],
                     [v[2], v[4], v[5]]], dtype=np.float64)


def save_map(gmap: GlobalMap, path: str | Path) -> int:
    """Write the map in GMM1 format; returns bytes written."""
    params = gmap.params
    header = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(gmap.gaussians))
    header += struct.pack("<14d", *(float(getattr(params, f)) for f in _PARAM_FIELDS))

    records = np.zeros(len(gmap.gaussians), dtype=_RECORD_DTYPE)
    for i, key in enumerate(sorted(gmap.gaussians)):
        g = gmap.gaussians[key]
        records[i]["kind"] = int(g.dist.kind)
        records[i]["support"] = g.dist.support_count
        data = (list(g.moment.m1) + _sym_to_six(g.moment.m2)
                + [g.moment.xi, g.moment.pi]
                + list(g.dist.mu) + _sym_to_six(g.dist.sigma))
        records[i]["data"] = np.array(data, dtype=np.float32)
    payload = header + records.tobytes()
    Path(path).write_bytes(payload)
    return len(payload)


def load_map(path: str | Path) -> GlobalMap:
    """Read a GMM1 map; the R-tree is rebuilt from the stored boxes."""
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError("not a GMM1 map file")
    version, count = struct.unpack_from("<IQ", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported map format version {version}")
    values = struct.unpack_from("<14d", blob, 16)
    kwargs = {}
    for name, value in zip(_PARAM_FIELDS, values):
        kwargs[name] = int(value) if name in _INT_PARAMS else value
    params = MapParams(**kwargs)

    offset = 16 + 14 * 8
    records = np.frombuffer(blob, dtype=_RECORD_DTYPE, count=count, offset=offset)
    gmap = GlobalMap(params)
    for rec in records:
        kind = GaussianKind(int(rec["kind"]))
        data = np.asarray(rec["data"], dtype=np.float64)
        moment = MomentGaussian(data[0:3], _six_to_sym(data[3:9]),
                                float(data[9]), float(data[10]), kind,
                                int(rec["support"]))
        dist = DistGaussian(data[11:14], _six_to_sym(data[14:20]),
                            float(data[10]), kind, float(data[9]),
                            int(rec["support"]))
        box = aabb_of_gaussian(dist, params.alpha_m)
        gmap.add(MapGaussian(moment, dist, box))
    return gmap


# ---------------------------------------------------------------------------
# PLY export

def _icosphere(subdivisions: int = 2) -> tuple[np.ndarray, np.ndarray]:
    phi = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
        [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
        [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [tuple(v) for v in verts]
    cache: dict[tuple, int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key in cache:
            return cache[key]
        mid = np.array(verts[a]) + np.array(verts[b])
        mid /= np.linalg.norm(mid)
        verts.append(tuple(mid))
        cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


_KIND_COLOR = {GaussianKind.OCCUPIED: (220, 50, 47), GaussianKind.FREE: (38, 139, 210)}


def export_ply(gmap: GlobalMap, path: str | Path, which: str = "all",
               ellipsoid_scale: float = 2.0) -> int:
    """Write one ellipsoid mesh per Gaussian as ASCII PLY; returns mesh count."""
    kinds = {"all": set(GaussianKind), "occ": {GaussianKind.OCCUPIED},
             "free": {GaussianKind.FREE}}[which]
    unit_verts, unit_faces = _icosphere()
    chunks_v: list[str] = []
    chunks_f: list[str] = []
    base = 0
    count = 0
    for key in sorted(gmap.gaussians):
        g = gmap.gaussians[key].dist
        if g.kind not in kinds:
            continue
        w, vec = np.linalg.eigh(g.sigma)
        sqrt_sigma = (vec * np.sqrt(np.clip(w, 0.0, None))) @ vec.T
        pts = g.mu + unit_verts @ (ellipsoid_scale * sqrt_sigma).T
        r, gr, b = _KIND_COLOR[g.kind]
        for p in pts:
            chunks_v.append(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {r} {gr} {b}")
        for f in unit_faces + base:
            chunks_f.append(f"3 {f[0]} {f[1]} {f[2]}")
        base += unit_verts.shape[0]
        count += 1
    header = "\n".join([
        "ply", "format ascii 1.0",
        f"element vertex {base}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue",
        f"element face {len(chunks_f)}",
        "property list uchar int vertex_indices", "end_header",
    ])
    body = "\n".join(chunks_v + chunks_f)
    Path(path).write_text(header + "\n" + (body + "\n" if body else ""))
    return count


# ---------------------------------------------------------------------------
# config files

class ConfigError(ValueError):
    pass


_CAMERA_KEYS = {"fx", "fy", "cx", "cy", "width", "height", "depth_scale",
                "min_range", "max_range"}
_INT_KEYS = {"width", "height", "prune_min_support", "min_segment_pixels"}


def parse_config(text: str) -> dict[str, float]:
    """Flat 'key = value' pairs; '#' starts a comment."""
    out: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in _CAMERA_KEYS or key in _PARAM_FIELDS:
            out[key] = float(value)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return out


def load_config(path: str | Path) -> tuple[CameraIntrinsics, MapParams]:
    values = parse_config(Path(path).read_text())
    cam_kwargs = {}
    param_kwargs = {}
    for key, value in values.items():
        target = cam_kwargs if key in _CAMERA_KEYS else param_kwargs
        target[key] = int(value) if key in _INT_KEYS else value
    missing = {"fx", "fy", "cx", "cy", "width", "height"} - set(cam_kwargs)
    if missing:
        raise ConfigError(f"config lacks camera keys: {sorted(missing)}")
    return CameraIntrinsics(**cam_kwargs), MapParams(**param_kwargs)


def write_config(path: str | Path, cam: CameraIntrinsics, params: MapParams) -> None:
    lines = ["# camera"]
    for key in sorted(_CAMERA_KEYS):
        lines.append(f"{key} = {getattr(cam, key)}")
    lines.append("# map parameters")
    for key in _PARAM_FIELDS:
        lines.append(f"{key} = {getattr(params, key)}")
    Path(path).write_text("\n".join(lines) + "\n")
