"""End-to-end experiments: pretrain, select once per scene, fine-tune, evaluate.

``run_pipeline`` runs one configuration; ``sweep`` varies one axis and shares
whatever the axis does not touch (datasets, pretrained snapshots, the
full-voxel control run) through a ``PipelineCache``.
"""

from __future__ import annotations

import csv
import logging
import os
import time
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .config import SELECTORS, ExperimentConfig, dump_config
from .detector.io import save_snapshot, write_loss_curve
from .detector.model import DetectorSnapshot, prepare_batch
from .detector.train import StepDecaySGD, detect, fit, make_optimizer, pretrain
from .metrics import UndefinedAPError, average_precision_frames, export_pr_curve, map_over_classes
from .scene import CLASS_NAMES, generate_scene, load_labels, load_point_bin, save_labels, save_point_bin
from .seeding import derive_seed
from .selector import (MECHANISMS, bg_sampling_mask, dropout_mask, export_kept, export_selection,
                       gravos_select, inv_freq_mask)
from .voxelizer import BACKGROUND, VoxelLabel, restrict_mask, voxel_label_array, voxelize

log = logging.getLogger(__name__)

BALANCE_CLASSES = (BACKGROUND,) + CLASS_NAMES
MODES = ("3D", "BEV")
MODELS = ("selected", "control", "pretrained")
SWEEP_AXES = ("nu_vs", "nu_idr", "early_epoch", "mechanisms", "selector")
MANIFEST = "manifest.csv"

# Early/late mechanism rows of the mechanism ablation, in table order.
# "topk@r" gives that stage a top-k of r * n_vs voxels.
MECHANISM_GRID = (
    "mean:mean",
    "mean:median",
    "mean:topk@50/80",
    "median:mean",
    "median:median",
    "median:topk@50/80",
    "topk@50/80:mean",
    "topk@50/80:median",
    "topk@50/80:topk@30/80",
    "topk@30/80:topk@50/80",
)


class DatasetError(ValueError):
    pass


# -- data ------------------------------------------------------------------------------

@dataclass(eq=False)
class SceneData:
    scene: object
    voxels: object
    batch: object
    labels: np.ndarray | None = None


def synth_scenes(config, split, count):
    base = config.dataset.synth
    out = []
    for i in range(count):
        cfg = replace(base, seed=derive_seed(config.seed, "scene", split, i))
        out.append(generate_scene(cfg, f"{split}-{i:04d}"))
    return out


def write_dataset(config, out_dir):
    """Write the synthetic train and eval splits as point binaries, label CSVs and a manifest."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for split, count in (("train", config.dataset.n_train), ("eval", config.dataset.n_eval)):
        for scene in synth_scenes(config, split, count):
            points_file = f"{scene.scene_id}.bin"
            labels_file = f"{scene.scene_id}.csv"
            save_point_bin(scene, os.path.join(out_dir, points_file))
            save_labels(scene.gt_boxes, os.path.join(out_dir, labels_file))
            rows.append((scene.scene_id, split, points_file, labels_file))
    with open(os.path.join(out_dir, MANIFEST), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scene_id", "split", "points", "labels"])
        w.writerows(rows)
    return rows


def read_dataset(path):
    """(train scenes, eval scenes) from a directory written by ``write_dataset``."""
    manifest = os.path.join(path, MANIFEST)
    if not os.path.isdir(path):
        raise DatasetError(f"dataset directory not found: {path}")
    if not os.path.isfile(manifest):
        raise DatasetError(f"dataset manifest not found: {manifest}")
    splits = {"train": [], "eval": []}
    with open(manifest, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["scene_id", "split", "points", "labels"]:
            raise DatasetError(f"{manifest}: unexpected header {reader.fieldnames}")
        for row in reader:
            if row["split"] not in splits:
                raise DatasetError(f"{manifest}: unknown split {row['split']!r}")
            scene = load_point_bin(os.path.join(path, row["points"]), row["scene_id"])
            boxes = load_labels(os.path.join(path, row["labels"]))
            splits[row["split"]].append(replace(scene, gt_boxes=tuple(boxes)))
    return splits["train"], splits["eval"]


def _scene_data(config, scenes, train):
    items = []
    for s in scenes:
        vs = voxelize(s, config.grid, config.max_points, derive_seed(config.seed, "voxelize", s.scene_id))
        if train:
            items.append(SceneData(s, vs, prepare_batch(vs, s, config.detector), voxel_label_array(vs, s)))
        else:
            items.append(SceneData(s, vs, prepare_batch(vs, s, config.detector, gt_boxes=())))
    return items


# -- caching -----------------------------------------------------------------------------

def _data_key(config):
    return repr((config.dataset, config.grid, config.detector, config.max_points, config.seed))


def _pretrain_key(config):
    return _data_key(config) + repr(replace(config.pretrain, early_epoch=1))


@dataclass
class Pretrained:
    snaps: dict
    late: DetectorSnapshot
    curve: list
    seconds: float


class PipelineCache:
    """Results that several pipeline runs can share."""

    def __init__(self):
        self.data = {}
        self.pretrained = {}
        self.evaluations = {}
        self.controls = {}

    def dataset(self, config):
        key = _data_key(config)
        if key not in self.data:
            t = time.perf_counter()
            if config.dataset.source == "files":
                train_scenes, eval_scenes = read_dataset(config.dataset.path)
            else:
                train_scenes = synth_scenes(config, "train", config.dataset.n_train)
                eval_scenes = synth_scenes(config, "eval", config.dataset.n_eval)
            self.data[key] = (_scene_data(config, train_scenes, True),
                              _scene_data(config, eval_scenes, False),
                              time.perf_counter() - t)
        return self.data[key]

    def pretrain(self, config, extra_epochs=()):
        key = _pretrain_key(config)
        wanted = {config.pretrain.early_epoch, *extra_epochs}
        cached = self.pretrained.get(key)
        if cached is None or not wanted <= set(cached.snaps):
            if cached is not None:
                wanted |= set(cached.snaps)
            train_items, _, _ = self.dataset(config)
            t = time.perf_counter()
            _, late, curve, snaps = pretrain([it.batch for it in train_items], config.pretrain,
                                             config.detector, sorted(wanted))
            self.pretrained[key] = Pretrained(snaps, late, curve, time.perf_counter() - t)
        return self.pretrained[key]

    def evaluate(self, key, eval_items, params, eval_cfg):
        if key not in self.evaluations:
            self.evaluations[key] = evaluate(eval_items, params, eval_cfg)
        return self.evaluations[key]


# -- stages ------------------------------------------------------------------------------

def select_scene(item, config, early, late):
    """(keep mask in canonical row order, SelectionResult or None)."""
    n = len(item.voxels)
    ratio = config.selection.nu_vs
    seed = derive_seed(config.seed, config.selector, item.scene.scene_id)
    if config.selector == "gravos":
        result = gravos_select(item.voxels, item.scene, early, late, config.selection, batch=item.batch)
        return np.array(result.in_merged), result
    if n == 0:
        return np.zeros(0, dtype=bool), None
    if config.selector == "dropout":
        return dropout_mask(n, ratio, seed), None
    if config.selector == "bg_sampling":
        return bg_sampling_mask(item.labels, ratio, seed), None
    return inv_freq_mask(item.labels, ratio, seed), None


def finetune(batches, start, config):
    """Continue from ``start``: phase 1 with the pretraining optimizer, phase 2 step-decay SGD."""
    pre, ft = config.pretrain, config.finetune
    params = start.copy()
    seed = derive_seed(config.seed, "finetune-order")
    curve = []
    if ft.phase1_epochs:
        opt = make_optimizer(pre.optimizer, ft.phase1_lr or pre.lr, pre.momentum, pre.step_size, pre.gamma)
        curve += fit(batches, params, opt, ft.phase1_epochs, seed, pre.loc_weight, pre.background_weight,
                     pre.grad_clip, epoch_offset=0)
    if ft.phase2_epochs:
        opt = StepDecaySGD(ft.phase2_lr, ft.momentum, ft.phase2_step_size, ft.phase2_gamma)
        curve += fit(batches, params, opt, ft.phase2_epochs, seed, pre.loc_weight, pre.background_weight,
                     pre.grad_clip, epoch_offset=ft.phase1_epochs)
    return params, curve


@dataclass
class Evaluation:
    ap: dict
    mean_ap: dict
    frames: list


def evaluate(eval_items, params, eval_cfg):
    frames = [
        (detect(it.batch, params, eval_cfg.score_threshold, eval_cfg.nms_iou, eval_cfg.pre_nms_top),
         it.scene.gt_boxes)
        for it in eval_items
    ]
    ap, mean_ap = {}, {}
    for mode in MODES:
        match = eval_cfg.match(mode)
        per_class = {}
        for name in CLASS_NAMES:
            if name not in eval_cfg.thresholds:
                continue
            try:
                per_class[name] = average_precision_frames(frames, match, name)
            except UndefinedAPError:
                per_class[name] = None
        ap[mode] = per_class
        try:
            mean_ap[mode] = map_over_classes(per_class)
        except UndefinedAPError:
            mean_ap[mode] = None
    return Evaluation(ap, mean_ap, frames)


# -- balance -----------------------------------------------------------------------------

@dataclass(frozen=True)
class BalanceRow:
    label: str
    scenes: int
    mean_total: float | None
    mean_kept: float | None
    reduction: float | None


@dataclass(frozen=True)
class BalanceTable:
    rows: tuple
    dropout_reference: float | None = None

    def reduction(self, label):
        for row in self.rows:
            if row.label == label:
                return row.reduction
        raise KeyError(label)

    def as_dict(self):
        return {row.label: row.reduction for row in self.rows}


def _kept_lookup(selection):
    """Map voxel index -> kept flag for the accepted selection forms."""
    if hasattr(selection, "in_merged"):
        return {tuple(map(int, c)): bool(k) for c, k in zip(selection.coords, selection.in_merged)}
    if hasattr(selection, "indices"):
        return {tuple(i): bool(k) for i, k in zip(selection.indices, selection.kept)}
    return None


def balance_report(selections, labels, nu_vs=None):
    """Per-class voxel reduction, averaged over the scenes containing the class.

    ``selections`` items are SelectionResults, ``selector.KeptVoxels`` or plain
    sets of kept voxel indices; ``labels`` items are lists of VoxelLabel.
    """
    if len(selections) != len(labels):
        raise ValueError(f"{len(selections)} selections but {len(labels)} label lists")
    per_class = {name: [] for name in BALANCE_CLASSES}
    for s, (selection, scene_labels) in enumerate(zip(selections, labels)):
        lookup = _kept_lookup(selection)
        if lookup is None:
            kept_set = {tuple(map(int, k)) for k in selection}
            lookup = {tuple(lab.index): lab.index in kept_set for lab in scene_labels}
            stray = kept_set.difference(lookup)
            if stray:
                raise ValueError(f"scene {s}: kept voxels without labels: {sorted(stray)[:5]}")
        label_index = {tuple(lab.index) for lab in scene_labels}
        if label_index != set(lookup):
            raise ValueError(f"scene {s}: selection and labels cover different voxels")
        counts = {}
        for lab in scene_labels:
            total, kept = counts.get(lab.label, (0, 0))
            counts[lab.label] = (total + 1, kept + lookup[tuple(lab.index)])
        for name, (total, kept) in counts.items():
            per_class.setdefault(name, []).append((total, kept))
    rows = []
    for name, entries in per_class.items():
        if not entries:
            rows.append(BalanceRow(name, 0, None, None, None))
            continue
        totals = np.array([t for t, _ in entries], dtype=np.float64)
        kepts = np.array([k for _, k in entries], dtype=np.float64)
        rows.append(BalanceRow(name, len(entries), float(totals.mean()), float(kepts.mean()),
                               float(np.mean(1.0 - kepts / totals))))
    return BalanceTable(tuple(rows), None if nu_vs is None else 1.0 - nu_vs)


def write_balance(table, target):
    """Write the balance table to a path or an open text handle."""
    if hasattr(target, "write"):
        _write_balance_rows(table, target)
        return
    with open(target, "w", newline="") as fh:
        _write_balance_rows(table, fh)


def _write_balance_rows(table, fh):
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["class", "scenes", "mean_total", "mean_kept", "reduction", "dropout_reference"])
    ref = "" if table.dropout_reference is None else _fmt(table.dropout_reference)
    for row in table.rows:
        w.writerow([row.label, row.scenes, _fmt(row.mean_total), _fmt(row.mean_kept),
                    _fmt(row.reduction), ref])


# -- report ------------------------------------------------------------------------------

def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(eq=False)
class ExperimentReport:
    config: ExperimentConfig
    evaluations: dict
    balance: BalanceTable
    selection_stats: dict
    timings: dict = field(default_factory=dict)
    snapshots: dict = field(default_factory=dict)
    curves: dict = field(default_factory=dict)
    selections: list = field(default_factory=list)
    checksums: tuple = ()

    @property
    def seed(self):
        return self.config.seed

    def ap(self, model, mode, label):
        return self.evaluations[model].ap[mode][label]

    def mean_ap(self, model="selected", mode="3D"):
        return self.evaluations[model].mean_ap[mode]

    def metrics(self):
        """Ordered (name, value) pairs; every value is a pure function of (config, seed)."""
        sel = self.config.selection
        out = [
            ("seed", self.config.seed),
            ("selector", self.config.selector),
            ("nu_vs", sel.nu_vs),
            ("nu_idr", sel.nu_idr),
            ("early_mechanism", sel.early_mechanism),
            ("late_mechanism", sel.late_mechanism),
            ("early_share", sel.early_share),
            ("early_epoch", self.config.pretrain.early_epoch),
        ]
        for model in MODELS:
            ev = self.evaluations[model]
            for mode in MODES:
                for label, value in ev.ap[mode].items():
                    out.append((f"ap_{mode}_{model}_{label}", value))
                out.append((f"map_{mode}_{model}", ev.mean_ap[mode]))
        for row in self.balance.rows:
            out.append((f"reduction_{row.label}", row.reduction))
        out.append(("dropout_reference", self.balance.dropout_reference))
        out.extend(self.selection_stats.items())
        return out


def write_report(report, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in report.metrics():
            w.writerow([name, _fmt(value)])
    write_balance(report.balance, os.path.join(out_dir, "balance.csv"))
    with open(os.path.join(out_dir, "config.echo"), "w", encoding="utf-8") as fh:
        fh.write(dump_config(report.config))
    with open(os.path.join(out_dir, "timings.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "seconds"])
        for stage, seconds in report.timings.items():
            w.writerow([stage, f"{seconds:.3f}"])

    snap_dir = os.path.join(out_dir, "snapshots")
    os.makedirs(snap_dir, exist_ok=True)
    for name, snap in report.snapshots.items():
        save_snapshot(snap, os.path.join(snap_dir, f"{name}.bin"))
    for name, curve in report.curves.items():
        write_loss_curve(curve, os.path.join(out_dir, f"loss_{name}.csv"))

    sel_dir = os.path.join(out_dir, "selection")
    lab_dir = os.path.join(out_dir, "labels")
    os.makedirs(sel_dir, exist_ok=True)
    os.makedirs(lab_dir, exist_ok=True)
    for entry in report.selections:
        sid = entry.scene_id
        if entry.result is not None:
            export_selection(entry.result, os.path.join(sel_dir, f"{sid}.csv"))
        else:
            export_kept(entry.coords, entry.keep, os.path.join(sel_dir, f"{sid}.csv"))
        with open(os.path.join(lab_dir, f"{sid}.csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["i", "j", "k", "label"])
            for c, lab in zip(entry.coords, entry.labels):
                w.writerow([int(c[0]), int(c[1]), int(c[2]), lab])

    pr_dir = os.path.join(out_dir, "pr")
    os.makedirs(pr_dir, exist_ok=True)
    for model, ev in report.evaluations.items():
        for mode in MODES:
            for label in ev.ap[mode]:
                export_pr_curve(ev.frames, report.config.eval.match(mode), label,
                                os.path.join(pr_dir, f"{model}_{mode}_{label}.csv"))


@dataclass(eq=False)
class SceneSelection:
    scene_id: str
    coords: np.ndarray
    labels: np.ndarray
    keep: np.ndarray
    result: object = None


def _selection_stats(entries, n_vs_total):
    n_total = sum(len(e.keep) for e in entries)
    n_kept = sum(int(e.keep.sum()) for e in entries)
    results = [e.result for e in entries if e.result is not None]
    stats = {
        "scenes": len(entries),
        "voxels_total": n_total,
        "voxels_kept": n_kept,
        "kept_fraction": n_kept / n_total if n_total else None,
        "budget_total": n_vs_total,
    }
    if results:
        stats.update({
            "early_set_total": sum(int(r.in_early.sum()) for r in results),
            "late_set_total": sum(int(r.in_late.sum()) for r in results),
            "evicted_total": sum(int(r.evicted.sum()) for r in results),
            "degenerate_scenes": sum(int(r.degenerate) for r in results),
        })
    return stats


def run_pipeline(config, out_dir=None, cache=None):
    """Pretrain, select, fine-tune and evaluate one configuration."""
    cache = cache or PipelineCache()
    timings = {}
    t0 = time.perf_counter()
    train_items, eval_items, data_seconds = cache.dataset(config)
    timings["data"] = data_seconds
    if not train_items:
        raise DatasetError("training set is empty")
    pre = cache.pretrain(config)
    timings["pretrain"] = pre.seconds
    early = pre.snaps[config.pretrain.early_epoch]
    late = pre.late

    t = time.perf_counter()
    entries = []
    n_vs_total = 0
    for item in train_items:
        keep, result = select_scene(item, config, early, late)
        n_vs_total += config.selection.budget(len(item.voxels))[0]
        entries.append(SceneSelection(item.scene.scene_id, np.array(item.voxels.coords), item.labels, keep, result))
    checksums = tuple(e.result.checksum() for e in entries if e.result is not None)
    timings["selection"] = time.perf_counter() - t

    t = time.perf_counter()
    ft_batches = []
    for item, entry in zip(train_items, entries):
        if entry.keep.all():
            ft_batches.append(item.batch)
        else:
            ft_batches.append(prepare_batch(restrict_mask(item.voxels, entry.keep), item.scene, config.detector))
    selected_params, ft_curve = finetune(ft_batches, late.params, config)
    del ft_batches
    timings["finetune"] = time.perf_counter() - t

    control_key = _pretrain_key(config) + repr(config.finetune)
    if control_key not in cache.controls:
        t = time.perf_counter()
        params, curve = finetune([it.batch for it in train_items], late.params, config)
        cache.controls[control_key] = (params, curve, time.perf_counter() - t)
    control_params, control_curve, timings["control"] = cache.controls[control_key]

    if checksums != tuple(e.result.checksum() for e in entries if e.result is not None):
        raise RuntimeError("selection results changed during fine-tuning")

    t = time.perf_counter()
    evaluations = {
        "selected": evaluate(eval_items, selected_params, config.eval),
        "control": cache.evaluate(("control", control_key, repr(config.eval)), eval_items,
                                  control_params, config.eval),
        "pretrained": cache.evaluate(("pretrained", _pretrain_key(config), repr(config.eval)), eval_items,
                                     late.params, config.eval),
    }
    timings["evaluate"] = time.perf_counter() - t

    label_lists = [[VoxelLabel(tuple(map(int, c)), str(lab)) for c, lab in zip(e.coords, e.labels)]
                   for e in entries]
    kept_sets = [{tuple(map(int, c)) for c in e.coords[e.keep]} for e in entries]
    balance = balance_report(kept_sets, label_lists, config.selection.nu_vs)
    timings["total"] = time.perf_counter() - t0

    report = ExperimentReport(
        config=config,
        evaluations=evaluations,
        balance=balance,
        selection_stats=_selection_stats(entries, n_vs_total),
        timings=timings,
        snapshots={
            "early": early,
            "late": late,
            "selected": DetectorSnapshot(selected_params, "late", late.epoch + config.finetune.epochs),
            "control": DetectorSnapshot(control_params, "late", late.epoch + config.finetune.epochs),
        },
        curves={"pretrain": pre.curve, "finetune": ft_curve, "control": control_curve},
        selections=entries,
        checksums=checksums,
    )
    if out_dir is not None:
        write_report(report, out_dir)
    log.info("run seed=%d selector=%s nu_vs=%s mAP3D selected=%s control=%s (%.1fs)",
             config.seed, config.selector, config.selection.nu_vs, report.mean_ap("selected"),
             report.mean_ap("control"), timings["total"])
    return report


# -- sweeps ------------------------------------------------------------------------------

def _ratio(text):
    text = text.strip()
    value = float(Fraction(text)) if "/" in text else float(text)
    return value


def parse_mechanism_pair(text):
    """'early:late' with tokens mean | median | topk | topk@ratio -> (mech, ratio, mech, ratio)."""
    parts = text.strip().split(":")
    if len(parts) != 2:
        raise ValueError(f"mechanism pair must look like 'early:late', got {text!r}")
    out = []
    for token in parts:
        name, _, ratio = token.strip().partition("@")
        if name not in MECHANISMS:
            raise ValueError(f"unknown mechanism {name!r} in {text!r}")
        if ratio and name != "topk":
            raise ValueError(f"only topk takes a ratio, got {token!r}")
        out.extend([name, _ratio(ratio) if ratio else None])
    return tuple(out)


def parse_axis_values(axis, text):
    """Split a comma-separated value list for ``axis``; 'grid' expands the mechanism grid."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ValueError("empty value list")
    if axis == "mechanisms":
        if items == ["grid"]:
            return list(MECHANISM_GRID)
        for item in items:
            parse_mechanism_pair(item)
        return items
    if axis == "early_epoch":
        return [int(v) for v in items]
    if axis == "selector":
        for v in items:
            if v not in SELECTORS:
                raise ValueError(f"unknown selector {v!r}")
        return items
    return [_ratio(v) for v in items]


def apply_axis(config, axis, value):
    sel = config.selection
    if axis == "nu_vs":
        return replace(config, selection=replace(sel, nu_vs=float(value)))
    if axis == "nu_idr":
        return replace(config, selection=replace(sel, nu_idr=float(value)))
    if axis == "early_epoch":
        return replace(config, pretrain=replace(config.pretrain, early_epoch=int(value)))
    if axis == "selector":
        return replace(config, selector=str(value))
    if axis == "mechanisms":
        early, early_ratio, late, late_ratio = parse_mechanism_pair(value)
        return replace(config, selection=replace(
            sel, early_mechanism=early, late_mechanism=late,
            nu_idr=sel.nu_idr if late_ratio is None else late_ratio,
            nu_early=early_ratio))
    raise ValueError(f"unknown sweep axis {axis!r}")


@dataclass
class SweepEntry:
    value: object
    report: ExperimentReport | None
    error: str | None = None

    @property
    def ok(self):
        return self.error is None


def _slug(value):
    return str(value).replace("/", "-").replace(":", "_").replace("@", "at")


def sweep(config, axis, values, out_dir=None, cache=None):
    """One pipeline run per value; a failing run is recorded and the sweep continues."""
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    cache = cache or PipelineCache()
    configs = [apply_axis(config, axis, v) for v in values]
    if axis == "early_epoch":
        # one pretraining run serves every early snapshot
        try:
            cache.pretrain(configs[0], extra_epochs=[int(v) for v in values])
        except Exception:
            log.exception("shared pretraining failed")
    entries = []
    for value, cfg in zip(values, configs):
        run_dir = None if out_dir is None else os.path.join(out_dir, f"{axis}={_slug(value)}")
        try:
            entries.append(SweepEntry(value, run_pipeline(cfg, run_dir, cache)))
        except Exception as exc:  # recorded per run, the sweep continues
            log.error("sweep %s=%s failed: %s", axis, value, exc)
            entries.append(SweepEntry(value, None, f"{type(exc).__name__}: {exc}"))
    if out_dir is not None:
        write_sweep(entries, axis, os.path.join(out_dir, "sweep.csv"))
    return entries


def write_sweep(entries, axis, path):
    names = []
    for e in entries:
        if e.report is not None:
            names = [n for n, _ in e.report.metrics()]
            break
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis", "value", "status", "error"] + names)
        for e in entries:
            if e.report is None:
                w.writerow([axis, e.value, "failed", e.error] + [""] * len(names))
            else:
                vals = dict(e.report.metrics())
                w.writerow([axis, e.value, "ok", ""] + [_fmt(vals.get(n)) for n in names])
