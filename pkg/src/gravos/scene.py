"""Point-cloud scenes: binary/CSV ingestion and deterministic synthetic scenes."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .geometry import intersection_area, normalize_yaw, rect_corners

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist")

# Mean (length, width, height) per class, KITTI statistics.
CLASS_MEAN_DIMS = {
    "Car": (3.9, 1.6, 1.56),
    "Pedestrian": (0.8, 0.6, 1.73),
    "Cyclist": (1.76, 0.6, 1.73),
}

MAX_PLACEMENT_ATTEMPTS = 1000


class MalformedFileError(ValueError):
    pass


class LabelParseError(ValueError):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


class CapacityError(RuntimeError):
    """Raised when objects cannot be placed without BEV overlap."""


class Point(NamedTuple):
    x: float
    y: float
    z: float
    intensity: float


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    length: float
    width: float
    height: float
    yaw: float
    class_id: str

    def __post_init__(self):
        dims = (self.length, self.width, self.height)
        if not all(math.isfinite(v) and v > 0.0 for v in dims):
            raise ValueError(f"box dimensions must be positive, got {dims}")
        if not all(math.isfinite(v) for v in (self.cx, self.cy, self.cz, self.yaw)):
            raise ValueError("box center and yaw must be finite")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    def bev_corners(self):
        return rect_corners(self.cx, self.cy, self.length, self.width, self.yaw)

    @property
    def volume(self):
        return self.length * self.width * self.height


@dataclass(frozen=True, eq=False)
class Scene:
    """A point cloud (N x 4 array of x, y, z, intensity) with its boxes.

    Row order of ``points`` is the point identity used downstream.
    """

    scene_id: str
    points: np.ndarray
    gt_boxes: tuple = ()

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 4))
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))

    def __len__(self):
        return len(self.points)

    def point(self, idx):
        return Point(*map(float, self.points[idx]))


@dataclass(frozen=True)
class SynthConfig:
    class_counts: dict = field(default_factory=lambda: {"Car": 10, "Pedestrian": 3, "Cyclist": 1})
    background_point_count: int = 2000
    points_per_object_range: tuple = (60, 160)
    scene_extent: tuple = ((0.0, 40.0), (-20.0, 20.0), (-3.0, 1.0))
    noise_sigma: float = 0.02
    seed: int = 0
    ground_z: float = -1.7
    clutter_fraction: float = 0.3
    dims_jitter: float = 0.05
    yaw_sigma: float = 0.03

    def __post_init__(self):
        counts = dict(self.class_counts)
        for name, n in counts.items():
            if name not in CLASS_NAMES:
                raise ValueError(f"unknown class {name!r}")
            if int(n) < 0:
                raise ValueError(f"class count for {name} must be non-negative")
        object.__setattr__(self, "class_counts", {k: int(v) for k, v in counts.items()})
        if self.background_point_count < 0:
            raise ValueError("background_point_count must be non-negative")
        lo, hi = self.points_per_object_range
        if not 0 <= lo <= hi:
            raise ValueError("points_per_object_range must satisfy 0 <= lo <= hi")
        object.__setattr__(self, "points_per_object_range", (int(lo), int(hi)))
        ext = tuple((float(a), float(b)) for a, b in self.scene_extent)
        if len(ext) != 3 or any(b <= a for a, b in ext):
            raise ValueError("scene_extent must be three non-degenerate (min, max) pairs")
        object.__setattr__(self, "scene_extent", ext)
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0.0 <= self.clutter_fraction <= 1.0:
            raise ValueError("clutter_fraction must lie in [0, 1]")


def load_point_bin(path, scene_id=None):
    """Decode a KITTI-style ``.bin`` file of little-endian float32 records."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) % 16:
        raise MalformedFileError(f"{path}: length {len(raw)} is not a multiple of 16")
    pts = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    if not np.isfinite(pts).all():
        raise MalformedFileError(f"{path}: non-finite point values")
    return Scene(scene_id or path.stem, pts, ())


def save_point_bin(scene, path):
    Path(path).write_bytes(np.asarray(scene.points, dtype="<f4").tobytes())


def load_labels(path):
    """Parse ``class,cx,cy,cz,length,width,height,yaw`` lines into boxes."""
    boxes = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 8:
                raise LabelParseError(path, lineno, f"expected 8 fields, got {len(parts)}")
            name = parts[0]
            if name not in CLASS_NAMES:
                raise LabelParseError(path, lineno, f"unknown class {name!r}")
            try:
                vals = [float(v) for v in parts[1:]]
            except ValueError as exc:
                raise LabelParseError(path, lineno, str(exc)) from None
            try:
                boxes.append(Box3D(*vals, class_id=name))
            except ValueError as exc:
                raise LabelParseError(path, lineno, str(exc)) from None
    return boxes


def save_labels(boxes, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for b in boxes:
            writer.writerow([b.class_id] + [repr(float(v)) for v in
                             (b.cx, b.cy, b.cz, b.length, b.width, b.height, b.yaw)])


def _inside_mask(points, box):
    d = np.asarray(points, dtype=np.float64)[:, :3] - (box.cx, box.cy, box.cz)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    lx = d[:, 0] * c + d[:, 1] * s
    ly = -d[:, 0] * s + d[:, 1] * c
    return ((np.abs(lx) < 0.5 * box.length)
            & (np.abs(ly) < 0.5 * box.width)
            & (np.abs(d[:, 2]) < 0.5 * box.height))


def points_in_box(scene, box):
    """Indices of points strictly inside ``box`` (open set)."""
    if len(scene.points) == 0:
        return []
    return np.flatnonzero(_inside_mask(scene.points, box)).tolist()


def _place_boxes(cfg, rng):
    (x0, x1), (y0, y1), _ = cfg.scene_extent
    placed = []
    for name in CLASS_NAMES:
        for _ in range(cfg.class_counts.get(name, 0)):
            ml, mw, mh = CLASS_MEAN_DIMS[name]
            jit = 1.0 + cfg.dims_jitter * rng.uniform(-1.0, 1.0, size=3)
            length, width, height = ml * jit[0], mw * jit[1], mh * jit[2]
            radius = 0.5 * math.hypot(length, width)
            if x1 - x0 <= 2 * radius or y1 - y0 <= 2 * radius:
                raise CapacityError(f"scene extent too small for a {name}")
            for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
                cx = rng.uniform(x0 + radius, x1 - radius)
                cy = rng.uniform(y0 + radius, y1 - radius)
                yaw = rng.choice((0.0, math.pi)) + rng.normal(0.0, cfg.yaw_sigma)
                box = Box3D(cx, cy, cfg.ground_z + 0.5 * height, length, width, height, yaw, name)
                corners = box.bev_corners()
                if all(
                    math.hypot(cx - o.cx, cy - o.cy) > radius + 0.5 * math.hypot(o.length, o.width)
                    or intersection_area(corners, o.bev_corners()) == 0.0
                    for o in placed
                ):
                    placed.append(box)
                    break
            else:
                raise CapacityError(
                    f"could not place {name} #{len(placed)} after {MAX_PLACEMENT_ATTEMPTS} attempts")
    return placed


def _object_points(box, n, sigma, rng):
    l, w, h = box.length, box.width, box.height
    # four sides plus the roof; the underside is never observed
    areas = np.array([l * h, l * h, w * h, w * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=n)
    v = rng.uniform(-0.5, 0.5, size=n)
    local = np.empty((n, 3))
    for f, (ax, sign) in enumerate(((1, 1), (1, -1), (0, 1), (0, -1), (2, 1))):
        sel = face == f
        dims = np.array([l, w, h])
        other = [a for a in range(3) if a != ax]
        local[sel, ax] = sign * 0.5 * dims[ax]
        local[sel, other[0]] = u[sel] * dims[other[0]]
        local[sel, other[1]] = v[sel] * dims[other[1]]
    local += rng.normal(0.0, sigma, size=local.shape)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    xyz = np.column_stack([
        box.cx + local[:, 0] * c - local[:, 1] * s,
        box.cy + local[:, 0] * s + local[:, 1] * c,
        box.cz + local[:, 2],
    ])
    intensity = rng.uniform(0.2, 1.0, size=(n, 1))
    return np.hstack([xyz, intensity])


def _background_points(cfg, boxes, rng):
    (x0, x1), (y0, y1), (z0, z1) = cfg.scene_extent
    total = cfg.background_point_count
    n_clutter = int(round(cfg.clutter_fraction * total))
    n_clusters = max(1, n_clutter // 40) if n_clutter else 0
    clusters = []
    for _ in range(n_clusters):
        sx, sy = rng.uniform(0.2, 1.2, size=2)
        cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
        # a cluster centred inside an object could never be filled by rejection
        for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
            probe = np.array([[cx, cy, b.cz, 0.0] for b in boxes])
            if not any(_inside_mask(probe[i:i + 1], b)[0] for i, b in enumerate(boxes)):
                break
            cx, cy = rng.uniform(x0, x1), rng.uniform(y0, y1)
        else:
            raise CapacityError("could not place a clutter cluster outside the boxes")
        clusters.append((cx, cy, sx, sy, rng.uniform(0.3, 2.0)))

    def draw(n, clutter):
        if clutter:
            pick = rng.integers(0, n_clusters, size=n)
            c = np.array(clusters)[pick]
            x = c[:, 0] + rng.uniform(-0.5, 0.5, size=n) * c[:, 2]
            y = c[:, 1] + rng.uniform(-0.5, 0.5, size=n) * c[:, 3]
            z = cfg.ground_z + rng.uniform(0.0, 1.0, size=n) * c[:, 4]
            inten = rng.uniform(0.0, 1.0, size=n)
        else:
            x = rng.uniform(x0, x1, size=n)
            y = rng.uniform(y0, y1, size=n)
            z = cfg.ground_z + rng.normal(0.0, cfg.noise_sigma, size=n)
            inten = rng.uniform(0.0, 0.4, size=n)
        pts = np.column_stack([x, y, np.clip(z, z0, z1), inten])
        keep = np.ones(n, dtype=bool)
        for b in boxes:
            keep &= ~_inside_mask(pts, b)
        return pts[keep]

    chunks = []
    for n_want, clutter in ((total - n_clutter, False), (n_clutter, True)):
        got = []
        have = 0
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            if have >= n_want:
                break
            pts = draw(n_want - have, clutter)
            got.append(pts)
            have += len(pts)
        if have < n_want:
            raise CapacityError("could not place background points outside the boxes")
        if got:
            chunks.append(np.vstack(got)[:n_want])
    return np.vstack(chunks) if chunks else np.zeros((0, 4))


def generate_scene(config, scene_id="synth"):
    """Build a synthetic scene that depends only on ``config`` (seed included)."""
    rng = np.random.Generator(np.random.PCG64(config.seed))
    boxes = _place_boxes(config, rng)
    background = _background_points(config, boxes, rng)
    lo, hi = config.points_per_object_range
    objects = [_object_points(b, int(rng.integers(lo, hi + 1)), config.noise_sigma, rng) for b in boxes]
    pts = np.vstack([background] + objects) if objects else background
    return Scene(scene_id, pts, tuple(boxes))
