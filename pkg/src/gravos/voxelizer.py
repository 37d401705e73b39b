"""Sparse voxelization with capped, seed-stable per-voxel point sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .scene import _inside_mask

BACKGROUND = "Background"
_INDEX_OFFSET = 1 << 31


@dataclass(frozen=True)
class GridSpec:
    origin: tuple = (0.0, -20.0, -3.0)
    cell: tuple = (0.2, 0.2, 0.2)
    extent: tuple = ((0.0, 40.0), (-20.0, 20.0), (-3.0, 1.0))

    def __post_init__(self):
        origin = tuple(float(v) for v in self.origin)
        cell = tuple(float(v) for v in self.cell)
        extent = tuple((float(a), float(b)) for a, b in self.extent)
        if len(origin) != 3 or len(cell) != 3 or len(extent) != 3:
            raise ValueError("origin, cell and extent must be 3-dimensional")
        if any(c <= 0.0 for c in cell):
            raise ValueError(f"cell dimensions must be positive, got {cell}")
        if any(not lo <= o <= hi for o, (lo, hi) in zip(origin, extent)):
            raise ValueError("extent must contain the origin")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "cell", cell)
        object.__setattr__(self, "extent", extent)

    def centers(self, coords):
        """Metric centers of integer cell indices, shape (n, 3)."""
        coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
        return np.asarray(self.origin) + (coords + 0.5) * np.asarray(self.cell)

    def translated(self, offset):
        off = np.asarray(offset, dtype=np.float64)
        return GridSpec(
            tuple(np.asarray(self.origin) + off),
            self.cell,
            tuple((lo + d, hi + d) for (lo, hi), d in zip(self.extent, off)),
        )


# Default for KITTI-format inputs.
KITTI_GRID = GridSpec(origin=(0.0, -40.0, -3.0), cell=(0.05, 0.05, 0.1),
                      extent=((0.0, 70.4), (-40.0, 40.0), (-3.0, 1.0)))


class Voxel(NamedTuple):
    index: tuple
    point_indices: tuple
    n_points: int


class VoxelLabel(NamedTuple):
    index: tuple
    label: str


@dataclass(frozen=True, eq=False)
class VoxelSet:
    """Occupied voxels in canonical (i, j, k) order.

    ``point_index`` is padded with -1 beyond ``n_points`` in each row.
    """

    spec: GridSpec
    coords: np.ndarray
    point_index: np.ndarray
    n_points: np.ndarray
    scene_id: str = ""

    def __post_init__(self):
        for name in ("coords", "point_index", "n_points"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def max_points(self):
        return self.point_index.shape[1]

    def __len__(self):
        return len(self.coords)

    @property
    def voxels(self):
        return [
            Voxel(tuple(map(int, c)), tuple(map(int, p[:n])), int(n))
            for c, p, n in zip(self.coords, self.point_index, self.n_points)
        ]

    def index_tuples(self):
        return [tuple(map(int, c)) for c in self.coords]

    def centers(self):
        return self.spec.centers(self.coords)

    def same_as(self, other):
        return (
            self.spec == other.spec
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.point_index, other.point_index)
            and np.array_equal(self.n_points, other.n_points)
        )


def _voxel_rng(seed, idx):
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [int(v) + _INDEX_OFFSET for v in idx]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def cell_indices(points, spec):
    """Floor-convention cell index per point and the in-extent mask."""
    xyz = np.asarray(points, dtype=np.float64).reshape(-1, 4)[:, :3]
    lo = np.array([e[0] for e in spec.extent])
    hi = np.array([e[1] for e in spec.extent])
    inside = np.all((xyz >= lo) & (xyz < hi), axis=1)
    idx = np.floor((xyz - np.asarray(spec.origin)) / np.asarray(spec.cell)).astype(np.int64)
    return idx, inside


def voxelize(scene, spec, max_points=5, seed=0):
    if max_points < 1:
        raise ValueError("max_points must be positive")
    idx, inside = cell_indices(scene.points, spec)
    members = np.flatnonzero(inside)
    if len(members) == 0:
        return VoxelSet(spec, np.zeros((0, 3)), np.zeros((0, max_points)), np.zeros(0), scene.scene_id)
    cells = idx[members]
    order = np.lexsort((members, cells[:, 2], cells[:, 1], cells[:, 0]))
    cells, members = cells[order], members[order]
    brk = np.flatnonzero(np.any(np.diff(cells, axis=0) != 0, axis=1)) + 1
    starts = np.concatenate([[0], brk])
    ends = np.concatenate([brk, [len(members)]])

    n = len(starts)
    coords = cells[starts]
    point_index = np.full((n, max_points), -1, dtype=np.int64)
    n_points = np.minimum(ends - starts, max_points)
    for row, (s, e) in enumerate(zip(starts, ends)):
        group = members[s:e]
        if len(group) > max_points:
            rng = _voxel_rng(seed, coords[row])
            group = np.sort(rng.choice(group, size=max_points, replace=False))
        point_index[row, : len(group)] = group
    return VoxelSet(spec, coords, point_index, n_points, scene.scene_id)


def restrict(voxel_set, keep):
    """Sub-VoxelSet holding exactly the voxels whose index triples are in ``keep``."""
    keep = {tuple(map(int, k)) for k in keep}
    present = voxel_set.index_tuples()
    missing = keep.difference(present)
    if missing:
        raise KeyError(f"voxel indices not in voxel set: {sorted(missing)[:5]}")
    mask = np.array([t in keep for t in present], dtype=bool)
    return restrict_mask(voxel_set, mask)


def restrict_mask(voxel_set, mask):
    mask = np.asarray(mask, dtype=bool)
    return VoxelSet(voxel_set.spec, voxel_set.coords[mask], voxel_set.point_index[mask],
                    voxel_set.n_points[mask], voxel_set.scene_id)


def voxel_label_array(voxel_set, scene):
    """Per-voxel label strings: first gt box containing any voxel point, else Background."""
    labels = np.full(len(voxel_set), BACKGROUND, dtype=object)
    if len(voxel_set) == 0 or not scene.gt_boxes:
        return labels
    unresolved = np.ones(len(voxel_set), dtype=bool)
    pidx = voxel_set.point_index
    valid = pidx >= 0
    flat = pidx[valid]
    for box in scene.gt_boxes:
        inside_pt = _inside_mask(scene.points[flat], box)
        hit = np.zeros(pidx.shape, dtype=bool)
        hit[valid] = inside_pt
        vox_hit = hit.any(axis=1) & unresolved
        labels[vox_hit] = box.class_id
        unresolved &= ~vox_hit
    return labels


def label_voxels(voxel_set, scene):
    labels = voxel_label_array(voxel_set, scene)
    return [VoxelLabel(t, str(lab)) for t, lab in zip(voxel_set.index_tuples(), labels)]


def export_voxel_set(voxel_set, path, members_path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["i", "j", "k", "n_points"])
        for c, n in zip(voxel_set.coords, voxel_set.n_points):
            w.writerow([int(c[0]), int(c[1]), int(c[2]), int(n)])
    with open(members_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voxel_row", "point_index"])
        for row, (p, n) in enumerate(zip(voxel_set.point_index, voxel_set.n_points)):
            for q in p[:n]:
                w.writerow([row, int(q)])
