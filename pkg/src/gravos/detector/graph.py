"""The detector and its losses rebuilt node-by-node on the scalar engine.

This path is slow and meant for small scenes: it is the reference the tensor
implementation in ``model`` is checked against, and it exposes every raw point
channel as a graph input keyed by ``(voxel index, point slot, channel)``.
"""

from __future__ import annotations

import numpy as np

from ..autodiff import DiffGraph
from .model import RESIDUAL_DIM


def _linear(g, xs, weight, bias):
    return [g.dot(xs, weight[:, o], bias[o]) for o in range(weight.shape[1])]


def _smooth_l1(g, e):
    a = e.abs()
    m = g.min2(a, g.constant(1.0))
    return m * (a - m * 0.5)


def build_graph(batch, params, loss="location", loc_weight=2.0, background_weight=0.1):
    """Return (graph, outputs) where outputs[v] = (logit nodes, residual nodes)."""
    if loss not in ("location", "classification", "total"):
        raise ValueError(f"unknown loss {loss!r}")
    w = params.views()
    a = params.arch
    g = DiffGraph()
    n, m = batch.feats.shape[:2]
    feats = []
    for v in range(n):
        key_v = tuple(int(c) for c in batch.coords[v])
        slots = []
        for j in range(m):
            if not batch.mask[v, j]:
                continue
            raw = [g.input((key_v, j, ch), batch.raw[v, j, ch]) for ch in range(4)]
            x = [(raw[c] - batch.centers[v, c]) * batch.inv_cell[c] for c in range(3)] + [raw[3]]
            h1 = [t.tanh() for t in _linear(g, x, w["enc1_w"], w["enc1_b"])]
            slots.append([t.tanh() for t in _linear(g, h1, w["enc2_w"], w["enc2_b"])])
        feat = slots[0]
        for other in slots[1:]:
            feat = [g.max2(p, q) for p, q in zip(feat, other)]
        feats.append(feat)

    # projected feature averaged per coarse column, then the BEV conv at occupied columns
    proj = [[g.dot(f, w["proj_w"][:, o]) for o in range(a.ctx_in)] for f in feats]
    members = [[] for _ in range(batch.n_cells)]
    for v in range(n):
        members[batch.cell_of[v]].append(v)
    col_mean = []
    for c in range(batch.n_cells):
        inv = 1.0 / len(members[c])
        col_mean.append([g.sum(proj[v][f] for v in members[c]) * inv for f in range(a.ctx_in)])
    gather = batch.gather.tocsr()
    ctx_cells = []
    for c in range(batch.n_cells):
        xs, ws = [], []
        for d in range(a.kernel_cells):
            row = gather.getrow(c * a.kernel_cells + d)
            if row.nnz == 0:
                continue
            src = batch.cell_of[row.indices[0]]
            for f in range(a.ctx_in):
                xs.append(col_mean[src][f])
                ws.append(w["ctx_w"][d * a.ctx_in + f])
        pre = []
        for o in range(a.context):
            pre.append(g.dot(xs, [row_w[o] for row_w in ws], w["ctx_b"][o]))
        ctx_cells.append([t.tanh() for t in pre])

    outputs = []
    for v in range(n):
        z = list(feats[v]) + list(ctx_cells[batch.cell_of[v]])
        z += [g.constant(c) for c in batch.center_norm[v]] + [g.constant(c) for c in batch.subcell[v]]
        hh = [t.tanh() for t in _linear(g, z, w["head1_w"], w["head1_b"])]
        out = _linear(g, hh, w["head2_w"], w["head2_b"])
        outputs.append((out[: a.n_classes + 1], out[a.n_classes + 1:]))

    terms = []
    if loss in ("location", "total"):
        pos = np.flatnonzero(batch.owner >= 0)
        if len(pos):
            errs = []
            for v in pos:
                for c in range(RESIDUAL_DIM):
                    errs.append(_smooth_l1(g, outputs[v][1][c] - batch.targets[v, c]))
            loc = g.sum(errs) * (1.0 / (RESIDUAL_DIM * len(pos)))
        else:
            loc = g.constant(0.0)
        terms.append(loc if loss == "location" else loc * loc_weight)
    if loss in ("classification", "total") and n:
        wts = np.where(batch.labels > 0, 1.0, background_weight)
        ces = []
        for v in range(n):
            logits = outputs[v][0]
            lse = g.sum(t.exp() for t in logits).log()
            ces.append((lse - logits[batch.labels[v]]) * wts[v])
        terms.append(g.sum(ces) * (1.0 / wts.sum()))
    g.set_output(g.sum(terms) if terms else g.constant(0.0))
    return g, outputs


def graph_point_gradients(batch, graph):
    """Arrange a backward() result into the (n, m, 4) layout of the tensor path."""
    grads = graph.backward()
    out = np.zeros(batch.feats.shape)
    index = {tuple(int(c) for c in batch.coords[v]): v for v in range(batch.n)}
    for (key_v, j, ch), val in grads.items():
        out[index[key_v], j, ch] = val
    return out
