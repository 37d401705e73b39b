"""Optimizers, the training loop and inference for the toy detector."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from ..metrics import Detection, nms_bev
from ..scene import CLASS_NAMES
from ..seeding import derive_seed
from ..voxelizer import voxelize
from .model import (ArchConfig, DetectorSnapshot, decode_box, forward_pass, init_params,
                    loss_and_grads, prepare_batch)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    early_epoch: int = 1
    optimizer: str = "adam"
    lr: float = 1e-2
    step_size: int = 10
    gamma: float = 0.1
    momentum: float = 0.9
    grad_clip: float = 5.0
    loc_weight: float = 2.0
    background_weight: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.early_epoch < self.epochs:
            raise ValueError(
                f"need 1 <= early_epoch < epochs, got early_epoch={self.early_epoch}, epochs={self.epochs}")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, theta, grad, epoch):
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        theta -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


class StepDecaySGD:
    def __init__(self, lr, momentum=0.9, step_size=10, gamma=0.1):
        self.lr, self.momentum, self.step_size, self.gamma = lr, momentum, step_size, gamma
        self.buf = None

    def rate(self, epoch):
        return self.lr * self.gamma ** (epoch // self.step_size)

    def step(self, theta, grad, epoch):
        if self.buf is None:
            self.buf = np.zeros_like(theta)
        self.buf = self.momentum * self.buf + grad
        theta -= self.rate(epoch) * self.buf


def make_optimizer(kind, lr, momentum=0.9, step_size=10, gamma=0.1):
    if kind == "adam":
        return Adam(lr)
    if kind == "sgd":
        return StepDecaySGD(lr, momentum, step_size, gamma)
    raise ValueError(f"unknown optimizer {kind!r}")


def fit(batches, params, optimizer, epochs, seed, loc_weight=2.0, background_weight=0.1,
        grad_clip=5.0, epoch_offset=0, on_epoch=None):
    """Train ``params`` in place, one scene per step; returns the loss curve.

    Curve rows are (epoch, cls, loc, total) averaged over non-empty scenes.
    ``on_epoch(epoch, params)`` runs after each epoch (1-based, offset applied).
    """
    curve = []
    usable = [b for b in batches if b.n > 0]
    for e in range(epochs):
        epoch = epoch_offset + e + 1
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))
        sums = np.zeros(3)
        for i in rng.permutation(len(usable)):
            losses, grad, _ = loss_and_grads(usable[i], params, loc_weight, background_weight)
            if not (math.isfinite(losses["total"]) and np.isfinite(grad).all()):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch} on scene {usable[i].scene_id!r}: {losses}")
            norm = float(np.sqrt(grad @ grad))
            if grad_clip and norm > grad_clip:
                grad *= grad_clip / norm
            optimizer.step(params.theta, grad, e)
            sums += (losses["cls"], losses["loc"], losses["total"])
        if not np.isfinite(params.theta).all():
            raise DivergenceError(f"non-finite parameters after epoch {epoch}")
        mean = sums / max(1, len(usable))
        curve.append((epoch, *map(float, mean)))
        log.debug("epoch %d cls %.4f loc %.4f total %.4f", epoch, *mean)
        if on_epoch is not None:
            on_epoch(epoch, params)
    return curve


def pretrain(batches, config, arch, snapshot_epochs=()):
    """Train from scratch; returns (early, late, curve, extra early snapshots by epoch)."""
    params = init_params(arch, derive_seed(config.seed, "detector-init"))
    wanted = set(snapshot_epochs) | {config.early_epoch}
    snaps = {}

    def keep(epoch, p):
        if epoch in wanted and epoch < config.epochs:
            snaps[epoch] = DetectorSnapshot(p.copy(), "early", epoch)

    opt = make_optimizer(config.optimizer, config.lr, config.momentum, config.step_size, config.gamma)
    curve = fit(batches, params, opt, config.epochs, derive_seed(config.seed, "pretrain-order"),
                config.loc_weight, config.background_weight, config.grad_clip, on_epoch=keep)
    late = DetectorSnapshot(params.copy(), "late", config.epochs)
    return snaps[config.early_epoch], late, curve, snaps


def train(scenes, grid, config, arch=None, max_points=5):
    """Voxelize ``scenes`` and pretrain; returns (early, late, loss curve)."""
    if not scenes:
        raise ValueError("training set is empty")
    arch = arch or ArchConfig()
    batches = [
        prepare_batch(voxelize(s, grid, max_points, derive_seed(config.seed, "voxelize", s.scene_id)), s, arch)
        for s in scenes
    ]
    early, late, curve, _ = pretrain(batches, config, arch)
    return early, late, curve


def detect(batch, params, score_threshold=0.3, nms_iou=0.5, pre_nms_top=256):
    """Decoded, per-class BEV-suppressed detections for a prepared voxel set."""
    if batch.n == 0:
        return []
    pred, _ = forward_pass(batch, params)
    prob = pred.probabilities()
    fg = prob[:, 1:]
    best = fg.argmax(axis=1)
    score = fg[np.arange(batch.n), best]
    out = []
    for c, name in enumerate(CLASS_NAMES):
        rows = np.flatnonzero((best == c) & (score >= score_threshold))
        if len(rows) == 0:
            continue
        # stable: equal scores stay in canonical voxel order
        rows = rows[np.argsort(-score[rows], kind="stable")][:pre_nms_top]
        boxes = [decode_box(pred.residuals[r], batch.centers[r], name) for r in rows]
        scores = [float(score[r]) for r in rows]
        for k in nms_bev(boxes, scores, nms_iou):
            out.append(Detection(boxes[k], name, scores[k]))
    return out


def infer(scene, grid, params, score_threshold=0.3, nms_iou=0.5, max_points=5, seed=0):
    vs = voxelize(scene, grid, max_points, seed)
    return detect(prepare_batch(vs, scene, params.arch, gt_boxes=()), params, score_threshold, nms_iou)
