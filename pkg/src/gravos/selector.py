"""Gradient-magnitude voxel selection and the baseline selectors.

Mechanisms work on per-voxel values in canonical voxel order.  The public
``select_*`` functions take a mapping from voxel index triple to value and
return a set of index triples; the ``*_mask`` helpers are the array forms
used internally.

Thresholds are decided in exact rational arithmetic over the given floats,
so "value >= mean" never flips because of summation rounding.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .detector.model import location_input_gradients, prepare_batch
from .voxelizer import BACKGROUND

log = logging.getLogger(__name__)

MECHANISMS = ("mean", "median", "topk")
CSV_HEADER = ("i", "j", "k", "G_early", "G_late", "in_Se", "in_Sl", "in_Smf")


class DegenerateSelectionWarning(UserWarning):
    """Both location losses are identically zero; selection falls back to a prefix."""


def round_half_up(x):
    return int(math.floor(x + 0.5))


# -- per-voxel gradient magnitude ------------------------------------------------

def voxel_gradient_magnitude(point_grads, n_points):
    """Mean over each voxel's sampled points of the L2 norm of the point gradient.

    ``point_grads`` has shape (n, max_points, channels); slots at or beyond
    ``n_points[v]`` are padding and ignored.
    """
    g = np.asarray(point_grads, dtype=np.float64)
    n_points = np.asarray(n_points, dtype=np.int64)
    if g.ndim != 3 or len(g) != len(n_points):
        raise ValueError("point_grads must be (n, max_points, channels) aligned with n_points")
    if len(g) == 0:
        return np.zeros(0)
    if np.any(n_points < 1):
        raise ValueError("every voxel must hold at least one point")
    valid = np.arange(g.shape[1])[None, :] < n_points[:, None]
    norms = np.where(valid, np.sqrt((g * g).sum(axis=2)), 0.0)
    return norms.sum(axis=1) / n_points


def graph_gradient_magnitude(gradients, voxel_set):
    """Per-voxel magnitudes from a scalar-graph ``backward()`` dict.

    Keys are (voxel index triple, slot, channel).  Every sampled point of
    every voxel must have all four channel entries.
    """
    n, m = len(voxel_set), voxel_set.max_points
    grads = np.zeros((n, m, 4))
    for row, (idx, count) in enumerate(zip(voxel_set.index_tuples(), voxel_set.n_points)):
        for slot in range(int(count)):
            for ch in range(4):
                key = (idx, slot, ch)
                if key not in gradients:
                    raise KeyError(f"no gradient for point input {key!r}")
                grads[row, slot, ch] = gradients[key]
    return voxel_gradient_magnitude(grads, voxel_set.n_points)


# -- mechanisms (array forms, canonical order) ------------------------------------

def _require_values(values):
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if len(v) == 0:
        raise ValueError("mechanism needs a non-empty value map")
    if not np.isfinite(v).all():
        raise ValueError("values must be finite")
    return v


def mean_mask(values):
    v = _require_values(values)
    total = sum(Fraction(x) for x in v.tolist())
    n = len(v)
    return np.array([Fraction(x) * n >= total for x in v.tolist()], dtype=bool)


def lower_median(values):
    v = np.sort(_require_values(values))
    return float(v[(len(v) - 1) // 2])


def median_mask(values):
    v = _require_values(values)
    return v >= lower_median(v)


def topk_order(values):
    """Row order by descending value, ties to the earlier (canonically smaller) row."""
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    return np.lexsort((np.arange(len(v)), -v))


def topk_mask(values, k):
    v = np.asarray(values, dtype=np.float64).reshape(-1)
    if k < 0:
        raise ValueError("k must be non-negative")
    mask = np.zeros(len(v), dtype=bool)
    mask[topk_order(v)[: min(int(k), len(v))]] = True
    return mask


# -- mechanisms (mapping forms) ----------------------------------------------------

def _canonical_items(values):
    keys = sorted(values)
    return keys, np.array([values[k] for k in keys], dtype=np.float64)


def select_mean(values):
    keys, v = _canonical_items(values)
    return {k for k, hit in zip(keys, mean_mask(v)) if hit}


def select_median(values):
    keys, v = _canonical_items(values)
    return {k for k, hit in zip(keys, median_mask(v)) if hit}


def select_topk(values, k):
    keys, v = _canonical_items(values)
    if not keys:
        return set()
    return {key for key, hit in zip(keys, topk_mask(v, k)) if hit}


# -- GraVoS selection -----------------------------------------------------------------

@dataclass(frozen=True)
class SelectionConfig:
    nu_vs: float = 0.8
    nu_idr: float = 50 / 80
    early_mechanism: str = "mean"
    late_mechanism: str = "topk"
    # share of the budget for an early top-k; None means 1 - nu_idr
    nu_early: float | None = None
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.nu_vs <= 1.0:
            raise ValueError(f"nu_vs must lie in (0, 1], got {self.nu_vs}")
        if not 0.0 <= self.nu_idr <= 1.0:
            raise ValueError(f"nu_idr must lie in [0, 1], got {self.nu_idr}")
        if self.nu_early is not None and not 0.0 <= self.nu_early <= 1.0:
            raise ValueError(f"nu_early must lie in [0, 1], got {self.nu_early}")
        for name in ("early_mechanism", "late_mechanism"):
            if getattr(self, name) not in MECHANISMS:
                raise ValueError(f"{name} must be one of {MECHANISMS}, got {getattr(self, name)!r}")

    @property
    def early_share(self):
        return 1.0 - self.nu_idr if self.nu_early is None else self.nu_early

    def budget(self, n_voxels):
        """(n_vs, k_late, k_early) for a scene with ``n_voxels`` voxels."""
        n_vs = round_half_up(self.nu_vs * n_voxels)
        return n_vs, round_half_up(self.nu_idr * n_vs), round_half_up(self.early_share * n_vs)


@dataclass(frozen=True, eq=False)
class SelectionResult:
    """Selection over one voxel set; all arrays are in canonical voxel order.

    ``in_early`` is the early set after eviction, so ``in_merged`` is
    exactly ``in_early | in_late``; ``evicted`` holds what eviction removed.
    """

    coords: np.ndarray
    g_early: np.ndarray
    g_late: np.ndarray
    in_early: np.ndarray
    in_late: np.ndarray
    in_merged: np.ndarray
    evicted: np.ndarray
    n_vs: int
    k: int
    loss_early: float
    loss_late: float
    config: SelectionConfig
    degenerate: bool = False
    scene_id: str = ""

    def __post_init__(self):
        for name in ("coords", "g_early", "g_late", "in_early", "in_late", "in_merged", "evicted"):
            arr = np.array(getattr(self, name), copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def _as_set(self, mask):
        return frozenset(tuple(map(int, c)) for c in self.coords[mask])

    @property
    def early_set(self):
        return self._as_set(self.in_early)

    @property
    def late_set(self):
        return self._as_set(self.in_late)

    @property
    def merged_set(self):
        return self._as_set(self.in_merged)

    @property
    def evicted_set(self):
        return self._as_set(self.evicted)

    @property
    def n_voxels(self):
        return len(self.coords)

    def checksum(self):
        h = hashlib.sha256()
        for arr in (self.coords, self.g_early, self.g_late, self.in_early, self.in_late,
                    self.in_merged, self.evicted):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def _mechanism_mask(mechanism, values, k):
    if mechanism == "mean":
        return mean_mask(values)
    if mechanism == "median":
        return median_mask(values)
    return topk_mask(values, k)


def select_from_magnitudes(coords, g_early, g_late, config, loss_early=1.0, loss_late=1.0, scene_id=""):
    """The selection rule on precomputed magnitudes (rows in canonical order)."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    g_early = np.asarray(g_early, dtype=np.float64)
    g_late = np.asarray(g_late, dtype=np.float64)
    n = len(coords)
    if not (len(g_early) == len(g_late) == n):
        raise ValueError("magnitudes must align with coords")
    if np.any(g_early < 0) or np.any(g_late < 0):
        raise ValueError("gradient magnitudes must be non-negative")
    n_vs, k, k_early = config.budget(n)
    empty = np.zeros(n, dtype=bool)

    def result(early, late, evicted, degenerate=False):
        return SelectionResult(coords, g_early, g_late, early, late, early | late, evicted,
                               n_vs, k, float(loss_early), float(loss_late), config, degenerate, scene_id)

    if n == 0:
        return result(empty, empty, empty)
    if loss_early == 0.0 and loss_late == 0.0:
        warnings.warn(
            f"scene {scene_id!r}: location loss is zero in both stages; keeping the top {n_vs} voxels by late magnitude",
            DegenerateSelectionWarning, stacklevel=2)
        return result(empty, topk_mask(g_late, n_vs), empty, degenerate=True)
    if n_vs == n:
        # full budget: k = n_v, so the late set is everything and nothing is evicted
        return result(_mechanism_mask(config.early_mechanism, g_early, k_early), np.ones(n, dtype=bool), empty)

    late = _mechanism_mask(config.late_mechanism, g_late, k)
    early = _mechanism_mask(config.early_mechanism, g_early, k_early)
    merged = early | late
    evicted = np.zeros(n, dtype=bool)
    excess = int(merged.sum()) - n_vs
    if excess > 0:
        candidates = np.flatnonzero(merged & ~late)
        # lowest early magnitude first; among equals the canonically larger row goes first
        order = np.lexsort((-candidates, g_early[candidates]))
        evicted[candidates[order[:excess]]] = True
    return result(early & ~evicted, late, evicted)


def gravos_select(voxel_set, scene, early, late, config, gt_boxes=None, batch=None):
    """Select voxels of one training scene from the frozen early and late snapshots.

    ``batch`` may pass an already prepared detector batch for ``voxel_set``.
    """
    if early.params.arch != late.params.arch:
        raise ValueError("early and late snapshots have different architectures")
    if len(voxel_set) == 0:
        return select_from_magnitudes(np.zeros((0, 3)), [], [], config, 0.0, 0.0, voxel_set.scene_id)
    if batch is None:
        batch = prepare_batch(voxel_set, scene, early.params.arch, gt_boxes)
    loss_e, grads_e = location_input_gradients(batch, early.params)
    loss_l, grads_l = location_input_gradients(batch, late.params)
    counts = batch.mask.sum(axis=1)
    return select_from_magnitudes(
        batch.coords,
        voxel_gradient_magnitude(grads_e, counts),
        voxel_gradient_magnitude(grads_l, counts),
        config, loss_e, loss_l, voxel_set.scene_id)


# -- baselines --------------------------------------------------------------------------

def _uniform_keys(n, seed):
    return np.random.Generator(np.random.PCG64(seed)).random(n)


def _top_rows(keys, count):
    order = np.lexsort((np.arange(len(keys)), -keys))
    mask = np.zeros(len(keys), dtype=bool)
    mask[order[:count]] = True
    return mask


def _check_ratio(ratio):
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must lie in (0, 1], got {ratio}")


def dropout_mask(n, ratio, seed):
    """Uniform sample of round(ratio * n) rows: the rows with the largest uniform keys."""
    _check_ratio(ratio)
    return _top_rows(_uniform_keys(n, seed), round_half_up(ratio * n))


def _label_strings(labels, n):
    out = [lab.label if hasattr(lab, "label") else str(lab) for lab in labels]
    if len(out) != n:
        raise ValueError(f"labels cover {len(out)} voxels, voxel set has {n}")
    return np.array(out, dtype=object)


def bg_sampling_mask(labels, ratio, seed):
    """Keep every foreground row; fill the rest of the budget with uniform background rows."""
    _check_ratio(ratio)
    labels = np.asarray(labels, dtype=object)
    n = len(labels)
    budget = round_half_up(ratio * n)
    fg = labels != BACKGROUND
    keep = fg.copy()
    room = budget - int(fg.sum())
    bg_rows = np.flatnonzero(~fg)
    if room > 0 and len(bg_rows):
        keep[bg_rows[_top_rows(_uniform_keys(len(bg_rows), seed), room)]] = True
    return keep


def inv_freq_weights(labels):
    labels = np.asarray(labels, dtype=object)
    _, inverse, counts = np.unique(labels.astype(str), return_inverse=True, return_counts=True)
    return 1.0 / counts[inverse.reshape(-1)]


def inv_freq_mask(labels, ratio, seed):
    """Weighted sampling without replacement (reservoir keys u ** (1 / w)).

    Keys are compared as log(u) / w.  With a single label every weight is
    equal and the result is the dropout sample for the same seed.
    """
    _check_ratio(ratio)
    w = inv_freq_weights(labels)
    u = _uniform_keys(len(w), seed)
    keys = np.log(u) / w if len(w) else u
    return _top_rows(keys, round_half_up(ratio * len(w)))


def _rows_to_set(voxel_set, mask):
    return {tuple(map(int, c)) for c in voxel_set.coords[mask]}


def dropout_select(voxel_set, ratio, seed):
    return _rows_to_set(voxel_set, dropout_mask(len(voxel_set), ratio, seed))


def bg_sampling_select(voxel_set, labels, ratio, seed):
    return _rows_to_set(voxel_set, bg_sampling_mask(_label_strings(labels, len(voxel_set)), ratio, seed))


def inv_freq_sampling_select(voxel_set, labels, ratio, seed):
    return _rows_to_set(voxel_set, inv_freq_mask(_label_strings(labels, len(voxel_set)), ratio, seed))


# -- export ---------------------------------------------------------------------------

def export_selection(result, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for row in range(result.n_voxels):
            i, j, k = map(int, result.coords[row])
            w.writerow([i, j, k, repr(float(result.g_early[row])), repr(float(result.g_late[row])),
                        int(result.in_early[row]), int(result.in_late[row]), int(result.in_merged[row])])


def export_kept(coords, keep, path):
    """Selection CSV for a selector without gradients (magnitude columns empty)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for c, hit in zip(np.asarray(coords).reshape(-1, 3), keep):
            w.writerow([int(c[0]), int(c[1]), int(c[2]), "", "", 0, 0, int(hit)])


@dataclass
class KeptVoxels:
    """Index triples of a scene's voxels and which were kept."""

    indices: list
    kept: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


def read_selection(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}")
        indices, kept = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_HEADER)} fields")
            indices.append((int(row[0]), int(row[1]), int(row[2])))
            kept.append(row[7] == "1")
    return KeptVoxels(indices, np.array(kept, dtype=bool))
