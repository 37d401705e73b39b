"""Toy single-stage voxel detector with a hand-written tensor backward pass.

Pipeline per scene:
  point MLP (tanh, tanh) -> max over the voxel's points -> voxel feature
  voxel features projected, averaged into coarse BEV columns -> one sparse BEV conv (tanh)
  head MLP on [voxel feature, BEV context, normalized center, sub-column offset]
  -> class logits (background first) and an 8-vector box residual.

The residual is (dx, dy, dz, dl, dw, dh, sin 2yaw, cos 2yaw) against the voxel
center and the class mean dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from ..scene import CLASS_MEAN_DIMS, CLASS_NAMES, Box3D, _inside_mask

RESIDUAL_DIM = 8
POINT_CHANNELS = 4


@dataclass(frozen=True)
class ArchConfig:
    point_hidden: int = 16
    feature: int = 16
    context: int = 16
    head_hidden: int = 32
    n_classes: int = len(CLASS_NAMES)
    ctx_stride: int = 2
    ctx_radius: int = 3
    ctx_in: int = 8

    @property
    def kernel_cells(self):
        return (2 * self.ctx_radius + 1) ** 2

    @property
    def head_in(self):
        return self.feature + self.context + 5

    @property
    def n_out(self):
        return self.n_classes + 1 + RESIDUAL_DIM

    def shapes(self):
        return (
            ("enc1_w", (POINT_CHANNELS, self.point_hidden)),
            ("enc1_b", (self.point_hidden,)),
            ("enc2_w", (self.point_hidden, self.feature)),
            ("enc2_b", (self.feature,)),
            ("proj_w", (self.feature, self.ctx_in)),
            ("ctx_w", (self.kernel_cells * self.ctx_in, self.context)),
            ("ctx_b", (self.context,)),
            ("head1_w", (self.head_in, self.head_hidden)),
            ("head1_b", (self.head_hidden,)),
            ("head2_w", (self.head_hidden, self.n_out)),
            ("head2_b", (self.n_out,)),
        )

    def n_params(self):
        return sum(int(np.prod(s)) for _, s in self.shapes())


@dataclass(eq=False)
class DetectorParams:
    arch: ArchConfig
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.theta.shape != (self.arch.n_params(),):
            raise ValueError(f"theta has {self.theta.size} entries, architecture needs {self.arch.n_params()}")

    def views(self, vec=None):
        vec = self.theta if vec is None else vec
        out, off = {}, 0
        for name, shape in self.arch.shapes():
            size = int(np.prod(shape))
            out[name] = vec[off:off + size].reshape(shape)
            off += size
        return out

    def copy(self):
        return DetectorParams(self.arch, self.theta.copy())


@dataclass(eq=False)
class DetectorSnapshot:
    params: DetectorParams
    stage: str
    epoch: int

    def __post_init__(self):
        if self.stage not in ("early", "late"):
            raise ValueError(f"unknown stage {self.stage!r}")


def init_params(arch, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    parts = []
    for name, shape in arch.shapes():
        if name.endswith("_w"):
            fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            parts.append(rng.uniform(-limit, limit, size=shape).ravel())
        else:
            parts.append(np.zeros(shape).ravel())
    return DetectorParams(arch, np.concatenate(parts))


def anchor_dims(class_id):
    return CLASS_MEAN_DIMS[class_id]


def encode_target(box, center):
    la, wa, ha = anchor_dims(box.class_id)
    da = math.hypot(la, wa)
    return np.array([
        (box.cx - center[0]) / da,
        (box.cy - center[1]) / da,
        (box.cz - center[2]) / ha,
        math.log(box.length / la),
        math.log(box.width / wa),
        math.log(box.height / ha),
        math.sin(2.0 * box.yaw),
        math.cos(2.0 * box.yaw),
    ])


def decode_box(residual, center, class_id):
    la, wa, ha = anchor_dims(class_id)
    da = math.hypot(la, wa)
    r = np.clip(np.asarray(residual, dtype=np.float64), -5.0, 5.0)
    yaw = 0.5 * math.atan2(r[6], r[7])
    return Box3D(
        center[0] + r[0] * da,
        center[1] + r[1] * da,
        center[2] + r[2] * ha,
        la * math.exp(r[3]),
        wa * math.exp(r[4]),
        ha * math.exp(r[5]),
        yaw,
        class_id,
    )


def positive_assignment(centers, gt_boxes):
    """Index of the first gt box containing each voxel center, or -1."""
    owner = np.full(len(centers), -1, dtype=np.int64)
    if len(centers) == 0:
        return owner
    for b, box in enumerate(gt_boxes):
        hit = _inside_mask(centers, box) & (owner < 0)
        owner[hit] = b
    return owner


@dataclass(eq=False)
class Batch:
    """Everything about one voxel set that stays fixed across training steps."""

    coords: np.ndarray
    feats: np.ndarray
    mask: np.ndarray
    inv_cell: np.ndarray
    center_norm: np.ndarray
    subcell: np.ndarray
    cell_of: np.ndarray
    n_cells: int
    gather: sparse.csr_matrix
    scatter: sparse.csr_matrix
    owner: np.ndarray
    labels: np.ndarray
    targets: np.ndarray
    centers: np.ndarray
    raw: np.ndarray
    packed: np.ndarray
    seg_of: np.ndarray
    slot_of: np.ndarray
    seg_start: np.ndarray
    scene_id: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def n(self):
        return len(self.coords)

    @property
    def n_positive(self):
        return int((self.owner >= 0).sum())


def _context_structure(coords, arch):
    s, r = arch.ctx_stride, arch.ctx_radius
    cols = np.floor_divide(coords[:, :2], s)
    sub = (np.mod(coords[:, :2], s) + 0.5) / s - 0.5
    cells, cell_of = np.unique(cols, axis=0, return_inverse=True)
    cell_of = cell_of.reshape(-1)
    n_cells = len(cells)
    counts = np.bincount(cell_of, minlength=n_cells).astype(np.float64)

    # cell -> row lookup via sorted integer keys
    span = np.int64(1 << 20)

    def key(ij):
        return (ij[:, 0] + span) * (2 * span) + (ij[:, 1] + span)

    cell_keys = key(cells)
    offsets = [(di, dj) for di in range(-r, r + 1) for dj in range(-r, r + 1)]
    rows, colv, vals = [], [], []
    n = len(coords)
    for d, (di, dj) in enumerate(offsets):
        # voxel v in cell u feeds slot d of cell c when c + (di, dj) == u
        target = cells[cell_of] - (di, dj)
        pos = np.searchsorted(cell_keys, key(target))
        pos = np.minimum(pos, n_cells - 1)
        ok = cell_keys[pos] == key(target)
        v = np.flatnonzero(ok)
        rows.append(pos[ok] * len(offsets) + d)
        colv.append(v)
        vals.append(1.0 / counts[cell_of[v]])
    gather = sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(colv))),
        shape=(n_cells * len(offsets), n),
    )
    gather.sort_indices()
    scatter = sparse.csr_matrix(
        (np.ones(n), (cell_of, np.arange(n))), shape=(n_cells, n))
    scatter.sort_indices()
    return sub, cell_of, n_cells, gather, scatter


def prepare_batch(voxel_set, scene, arch, gt_boxes=None):
    """Precompute point features, context wiring and training targets.

    Rows are taken in canonical voxel order regardless of the input order.
    """
    gt_boxes = scene.gt_boxes if gt_boxes is None else gt_boxes
    spec = voxel_set.spec
    coords = np.asarray(voxel_set.coords, dtype=np.int64)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0])) if len(coords) else np.zeros(0, dtype=np.int64)
    coords = coords[order]
    pidx = np.asarray(voxel_set.point_index)[order]
    n, m = pidx.shape if len(pidx) else (0, voxel_set.max_points)
    centers = spec.centers(coords)
    cell = np.asarray(spec.cell)
    inv_cell = 1.0 / cell
    mask = pidx >= 0
    feats = np.zeros((n, m, POINT_CHANNELS))
    raw = np.zeros((n, m, POINT_CHANNELS))
    if n:
        pts = scene.points[np.where(mask, pidx, 0)]
        raw[mask] = pts[mask]
        feats[..., :3] = (pts[..., :3] - centers[:, None, :]) * inv_cell
        feats[..., 3] = pts[..., 3]
        feats[~mask] = 0.0
    lo = np.array([e[0] for e in spec.extent])
    hi = np.array([e[1] for e in spec.extent])
    center_norm = 2.0 * (centers - lo) / (hi - lo) - 1.0
    if n:
        sub, cell_of, n_cells, gather, scatter = _context_structure(coords, arch)
    else:
        sub = np.zeros((0, 2))
        cell_of = np.zeros(0, dtype=np.int64)
        n_cells = 0
        gather = sparse.csr_matrix((0, 0))
        scatter = sparse.csr_matrix((0, 0))
    owner = positive_assignment(centers, gt_boxes)
    class_index = {name: i + 1 for i, name in enumerate(CLASS_NAMES)}
    labels = np.zeros(n, dtype=np.int64)
    targets = np.zeros((n, RESIDUAL_DIM))
    for v in np.flatnonzero(owner >= 0):
        box = gt_boxes[owner[v]]
        labels[v] = class_index[box.class_id]
        targets[v] = encode_target(box, centers[v])
    seg_of, slot_of = np.nonzero(mask)
    seg_start = np.concatenate([[0], np.cumsum(mask.sum(axis=1))[:-1]]).astype(np.int64) if n else np.zeros(0, np.int64)
    return Batch(coords, feats, mask, inv_cell, center_norm, sub, cell_of, n_cells,
                 gather, scatter, owner, labels, targets, centers, raw,
                 np.ascontiguousarray(feats[seg_of, slot_of]), seg_of, slot_of, seg_start,
                 voxel_set.scene_id)


@dataclass(eq=False)
class Prediction:
    coords: np.ndarray
    logits: np.ndarray
    residuals: np.ndarray

    def probabilities(self):
        z = self.logits - self.logits.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


def forward_pass(batch, params):
    """Run the network; returns (Prediction, cache for backward_pass)."""
    w = params.views()
    a = params.arch
    x0 = batch.packed
    h1 = np.tanh(x0 @ w["enc1_w"] + w["enc1_b"])
    h2 = np.tanh(h1 @ w["enc2_w"] + w["enc2_b"])
    if batch.n:
        feat = np.maximum.reduceat(h2, batch.seg_start, axis=0)
        # first point attaining the max, per voxel and channel
        hit = h2 == feat[batch.seg_of]
        rows = np.where(hit, np.arange(len(h2))[:, None], len(h2))
        # NaN activations match nothing; clamp so the divergence guard sees NaN instead of an IndexError
        arg = np.minimum(np.minimum.reduceat(rows, batch.seg_start, axis=0), len(h2) - 1)
    else:
        feat = np.zeros((0, a.feature))
        arg = np.zeros((0, a.feature), dtype=np.int64)
    q = feat @ w["proj_w"]
    xc = (batch.gather @ q).reshape(batch.n_cells, a.kernel_cells * a.ctx_in)
    ctx_cells = np.tanh(xc @ w["ctx_w"] + w["ctx_b"])
    ctx = ctx_cells[batch.cell_of]
    z = np.hstack([feat, ctx, batch.center_norm, batch.subcell])
    hh = np.tanh(z @ w["head1_w"] + w["head1_b"])
    out = hh @ w["head2_w"] + w["head2_b"]
    k = a.n_classes + 1
    pred = Prediction(batch.coords, out[:, :k], out[:, k:])
    cache = dict(h1=h1, h2=h2, arg=arg, feat=feat, xc=xc, ctx_cells=ctx_cells, z=z, hh=hh)
    return pred, cache


def backward_pass(batch, params, cache, d_logits, d_residuals, need_inputs=True):
    """Gradients w.r.t. theta and (optionally) raw point channels (n, m, 4)."""
    w = params.views()
    a = params.arch
    grad = np.zeros_like(params.theta)
    gw = params.views(grad)
    d_out = np.hstack([d_logits, d_residuals])
    hh, z = cache["hh"], cache["z"]
    gw["head2_w"][...] = hh.T @ d_out
    gw["head2_b"][...] = d_out.sum(axis=0)
    d_hpre = (d_out @ w["head2_w"].T) * (1.0 - hh * hh)
    gw["head1_w"][...] = z.T @ d_hpre
    gw["head1_b"][...] = d_hpre.sum(axis=0)
    dz = d_hpre @ w["head1_w"].T
    d_feat = dz[:, : a.feature].copy()
    d_ctx = dz[:, a.feature: a.feature + a.context]
    d_cells = batch.scatter @ d_ctx
    ctx_cells = cache["ctx_cells"]
    d_cpre = d_cells * (1.0 - ctx_cells * ctx_cells)
    gw["ctx_w"][...] = cache["xc"].T @ d_cpre
    gw["ctx_b"][...] = d_cpre.sum(axis=0)
    d_xc = (d_cpre @ w["ctx_w"].T).reshape(batch.n_cells * a.kernel_cells, a.ctx_in)
    d_q = batch.gather.T @ d_xc
    gw["proj_w"][...] = cache["feat"].T @ d_q
    d_feat += d_q @ w["proj_w"].T
    h1, h2 = cache["h1"], cache["h2"]
    d_h2 = np.zeros_like(h2)
    d_h2[cache["arg"], np.arange(a.feature)[None, :]] = d_feat
    d_a2 = d_h2 * (1.0 - h2 * h2)
    gw["enc2_w"][...] = h1.T @ d_a2
    gw["enc2_b"][...] = d_a2.sum(axis=0)
    d_a1 = (d_a2 @ w["enc2_w"].T) * (1.0 - h1 * h1)
    gw["enc1_w"][...] = batch.packed.T @ d_a1
    gw["enc1_b"][...] = d_a1.sum(axis=0)
    d_points = None
    if need_inputs:
        d_x0 = d_a1 @ w["enc1_w"].T
        d_x0[:, :3] *= batch.inv_cell
        d_points = np.zeros(batch.feats.shape)
        d_points[batch.seg_of, batch.slot_of] = d_x0
    return grad, d_points


def smooth_l1(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def smooth_l1_grad(x):
    return np.clip(x, -1.0, 1.0)


def location_loss(pred, batch):
    """Mean smooth-L1 residual error over positive voxels; (value, d_residuals)."""
    d = np.zeros_like(pred.residuals)
    pos = batch.owner >= 0
    n_pos = int(pos.sum())
    if n_pos == 0:
        return 0.0, d
    err = pred.residuals[pos] - batch.targets[pos]
    scale = 1.0 / (RESIDUAL_DIM * n_pos)
    d[pos] = smooth_l1_grad(err) * scale
    return float(smooth_l1(err).sum() * scale), d


def classification_loss(pred, batch, background_weight=0.1):
    """Weighted-mean cross-entropy; (value, d_logits)."""
    n = len(pred.logits)
    if n == 0:
        return 0.0, np.zeros_like(pred.logits)
    z = pred.logits - pred.logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    ce = lse - z[np.arange(n), batch.labels]
    wts = np.where(batch.labels > 0, 1.0, background_weight)
    total_w = wts.sum()
    p = np.exp(z - lse[:, None])
    p[np.arange(n), batch.labels] -= 1.0
    d = p * (wts / total_w)[:, None]
    return float((wts * ce).sum() / total_w), d


def loss_and_grads(batch, params, loc_weight=2.0, background_weight=0.1, need_inputs=False):
    """Total loss = classification + loc_weight * location, with gradients."""
    pred, cache = forward_pass(batch, params)
    cls, d_logits = classification_loss(pred, batch, background_weight)
    loc, d_res = location_loss(pred, batch)
    grad, d_pts = backward_pass(batch, params, cache, d_logits, loc_weight * d_res, need_inputs)
    return {"cls": cls, "loc": loc, "total": cls + loc_weight * loc}, grad, d_pts


def location_input_gradients(batch, params):
    """d(location loss)/d(point channels) with frozen params, shape (n, m, 4)."""
    pred, cache = forward_pass(batch, params)
    loc, d_res = location_loss(pred, batch)
    _, d_pts = backward_pass(batch, params, cache, np.zeros_like(pred.logits), d_res, True)
    return loc, d_pts


def encode_voxel(points, params):
    """Feature vector of one voxel from its center-relative (x, y, z, intensity) rows.

    Coordinates are expected already divided by the cell size, as the
    detector feeds them.
    """
    w = params.views()
    x = np.asarray(points, dtype=np.float64).reshape(-1, POINT_CHANNELS)
    # one point at a time, so a point's embedding does not depend on its companions
    h = [np.tanh(np.tanh(row @ w["enc1_w"] + w["enc1_b"]) @ w["enc2_w"] + w["enc2_b"]) for row in x]
    return np.max(h, axis=0)
