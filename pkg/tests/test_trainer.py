import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_experiment
from gravos import trainer
from gravos.config import DatasetConfig
from gravos.selector import KeptVoxels, SelectionConfig, dropout_mask
from gravos.trainer import (MECHANISM_GRID, DatasetError, PipelineCache, apply_axis, balance_report,
                            parse_axis_values, parse_mechanism_pair, read_dataset, run_pipeline, sweep,
                            write_balance, write_dataset)
from gravos.voxelizer import VoxelLabel


def _labels(spec):
    """[(label, count), ...] -> VoxelLabels on consecutive indices."""
    out = []
    for label, count in spec:
        for _ in range(count):
            out.append(VoxelLabel((len(out), 0, 0), label))
    return out


# -- balance ---------------------------------------------------------------------------

def test_balance_keep_everything():
    labels = _labels([("Background", 5), ("Car", 3)])
    table = balance_report([{lab.index for lab in labels}], [labels], nu_vs=1.0)
    assert table.reduction("Background") == 0.0 and table.reduction("Car") == 0.0
    assert table.reduction("Pedestrian") is None
    assert table.dropout_reference == 0.0


def test_balance_two_scene_fixture():
    a = _labels([("Background", 4), ("Car", 2)])
    b = _labels([("Background", 2), ("Pedestrian", 1)])
    kept_a = {(0, 0, 0), (1, 0, 0), (4, 0, 0), (5, 0, 0)}  # 2 of 4 background, both cars
    kept_b = set()
    table = balance_report([kept_a, kept_b], [a, b], nu_vs=0.8)
    assert table.as_dict() == {"Background": 0.75, "Car": 0.0, "Pedestrian": 1.0, "Cyclist": None}
    row = table.rows[0]
    assert (row.label, row.scenes, row.mean_total, row.mean_kept) == ("Background", 2, 3.0, 1.0)
    assert table.dropout_reference == pytest.approx(0.2)


def test_balance_accepts_kept_voxels_form():
    labels = _labels([("Background", 2), ("Cyclist", 2)])
    kept = KeptVoxels([lab.index for lab in labels], np.array([True, False, True, True]))
    assert balance_report([kept], [labels]).as_dict()["Background"] == 0.5


def test_balance_errors():
    labels = _labels([("Background", 2)])
    with pytest.raises(ValueError, match="2 selections"):
        balance_report([set(), set()], [labels])
    with pytest.raises(ValueError, match="without labels"):
        balance_report([{(9, 9, 9)}], [labels])
    kept = KeptVoxels([(0, 0, 0)], np.array([True]))
    with pytest.raises(ValueError, match="different voxels"):
        balance_report([kept], [labels])


def test_dropout_reduction_is_uniform_across_classes():
    counts = [("Background", 100), ("Car", 30), ("Pedestrian", 8), ("Cyclist", 2)]
    labels = _labels(counts)
    n = len(labels)
    ratio, seeds = 0.8, 400
    kept_n = round(ratio * n)
    sums = {label: 0.0 for label, _ in counts}
    for seed in range(seeds):
        mask = dropout_mask(n, ratio, seed)
        kept = {lab.index for lab, hit in zip(labels, mask) if hit}
        for label, value in balance_report([kept], [labels]).as_dict().items():
            sums[label] += value
    for label, size in counts:
        # hypergeometric variance of the kept count for this class
        var = size * (kept_n / n) * (1 - kept_n / n) * (n - size) / (n - 1)
        sigma = math.sqrt(var) / size / math.sqrt(seeds)
        assert abs(sums[label] / seeds - (1 - ratio)) <= 3 * sigma, label


def test_write_balance_csv():
    labels = _labels([("Background", 4)])
    table = balance_report([{(0, 0, 0)}], [labels], nu_vs=0.5)
    buf = io.StringIO()
    write_balance(table, buf)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert rows[0] == ["class", "scenes", "mean_total", "mean_kept", "reduction", "dropout_reference"]
    assert rows[1] == ["Background", "1", "4.0", "1.0", "0.75", "0.5"]
    assert rows[2] == ["Car", "0", "", "", "", "0.5"]


# -- parsing -----------------------------------------------------------------------------

def test_mechanism_pairs():
    assert parse_mechanism_pair("mean:topk@50/80") == ("mean", None, "topk", 0.625)
    assert parse_mechanism_pair("median:mean") == ("median", None, "mean", None)
    for bad in ("mean", "mean:max", "mean@0.5:topk", "a:b:c"):
        with pytest.raises(ValueError):
            parse_mechanism_pair(bad)


def test_axis_values():
    assert parse_axis_values("nu_vs", "0.4, 0.6,1") == [0.4, 0.6, 1.0]
    assert parse_axis_values("nu_idr", "50/80") == [0.625]
    assert parse_axis_values("early_epoch", "1,2") == [1, 2]
    assert parse_axis_values("mechanisms", "grid") == list(MECHANISM_GRID)
    assert len(MECHANISM_GRID) == 10
    for axis, text in (("speed", "1"), ("nu_vs", " , "), ("selector", "random"), ("mechanisms", "x:y")):
        with pytest.raises(ValueError):
            parse_axis_values(axis, text)


def test_apply_axis_mechanisms():
    cfg = apply_axis(tiny_experiment(), "mechanisms", "topk@30/80:topk@50/80")
    sel = cfg.selection
    assert (sel.early_mechanism, sel.late_mechanism) == ("topk", "topk")
    assert sel.nu_idr == 0.625 and sel.nu_early == 0.375
    assert apply_axis(cfg, "early_epoch", 2).pretrain.early_epoch == 2


# -- datasets ----------------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    cfg = tiny_experiment()
    rows = write_dataset(cfg, tmp_path)
    assert len(rows) == 7
    train, evals = read_dataset(tmp_path)
    assert [s.scene_id for s in train] == [f"train-{i:04d}" for i in range(4)]
    original = trainer.synth_scenes(cfg, "eval", 3)
    for got, want in zip(evals, original):
        assert np.array_equal(got.points, want.points.astype(np.float32))
        assert len(got.gt_boxes) == len(want.gt_boxes)


def test_read_dataset_errors(tmp_path):
    with pytest.raises(DatasetError, match="not found"):
        read_dataset(tmp_path / "nope")
    with pytest.raises(DatasetError, match="manifest"):
        read_dataset(tmp_path)
    (tmp_path / "manifest.csv").write_text("id,split\n")
    with pytest.raises(DatasetError, match="unexpected header"):
        read_dataset(tmp_path)


def test_pipeline_from_files_matches_synth_layout(tmp_path):
    cfg = tiny_experiment()
    write_dataset(cfg, tmp_path)
    files_cfg = replace(cfg, dataset=DatasetConfig(source="files", path=str(tmp_path)))
    report = run_pipeline(files_cfg)
    assert report.selection_stats["scenes"] == 4


# -- pipeline ----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def shared_cache():
    return PipelineCache()


def test_run_pipeline_report(shared_cache, tmp_path):
    cfg = tiny_experiment()
    report = run_pipeline(cfg, tmp_path, shared_cache)
    stats = report.selection_stats
    assert stats["voxels_kept"] <= stats["budget_total"] <= stats["voxels_total"]
    assert stats["late_set_total"] <= stats["voxels_kept"] <= stats["early_set_total"] + stats["late_set_total"]
    assert len(report.checksums) == 4
    for entry in report.selections:
        assert entry.result.checksum() in report.checksums
    assert report.snapshots["early"].epoch < report.snapshots["late"].epoch
    for name in ("report.csv", "balance.csv", "config.echo", "timings.csv", "loss_finetune.csv"):
        assert (tmp_path / name).is_file()
    assert len(list((tmp_path / "selection").iterdir())) == 4
    assert (tmp_path / "snapshots" / "selected.bin").is_file()
    names = [n for n, _ in report.metrics()]
    assert names[:2] == ["seed", "selector"] and "map_3D_control" in names


def test_full_budget_selection_equals_control(shared_cache):
    cfg = tiny_experiment(selection=SelectionConfig(nu_vs=1.0))
    report = run_pipeline(cfg, cache=shared_cache)
    sel, ctl = report.snapshots["selected"].params.theta, report.snapshots["control"].params.theta
    assert np.array_equal(sel, ctl)
    assert report.selection_stats["kept_fraction"] == 1.0
    assert all(v == 0.0 for v in report.balance.as_dict().values() if v is not None)


def test_pipeline_is_a_function_of_config_and_seed(shared_cache):
    cfg = tiny_experiment(selector="dropout")
    first = run_pipeline(cfg, cache=shared_cache).metrics()
    second = run_pipeline(cfg, cache=PipelineCache()).metrics()
    assert first == second
    other = run_pipeline(cfg.with_seed(1), cache=shared_cache).metrics()
    assert other != first


@pytest.mark.parametrize("selector", ["dropout", "bg_sampling", "inv_freq"])
def test_baseline_selectors_respect_budget(shared_cache, selector):
    report = run_pipeline(tiny_experiment(selector=selector), cache=shared_cache)
    stats = report.selection_stats
    assert stats["voxels_kept"] == stats["budget_total"]
    assert report.checksums == ()


def test_empty_training_set_is_rejected():
    cfg = tiny_experiment(dataset=replace(tiny_experiment().dataset, n_train=0))
    with pytest.raises(DatasetError, match="empty"):
        run_pipeline(cfg)


# -- sweeps ------------------------------------------------------------------------------

def test_single_value_sweep_equals_run(shared_cache):
    cfg = tiny_experiment()
    entries = sweep(cfg, "nu_vs", [0.7], cache=shared_cache)
    direct = run_pipeline(apply_axis(cfg, "nu_vs", 0.7), cache=PipelineCache())
    assert entries[0].ok and entries[0].report.metrics() == direct.metrics()


def test_nu_vs_sweep_set_sizes_are_monotone(shared_cache, tmp_path):
    values = [0.6, 0.7, 0.8, 0.9, 1.0]
    entries = sweep(tiny_experiment(), "nu_vs", values, tmp_path, shared_cache)
    kept = [e.report.selection_stats["voxels_kept"] for e in entries]
    assert kept == sorted(kept) and len(entries) == 5
    with open(tmp_path / "sweep.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert [r[1] for r in rows[1:]] == [str(v) for v in values]
    assert (tmp_path / "nu_vs=0.6" / "report.csv").is_file()


def test_mechanism_grid_sweep_keeps_row_order(shared_cache):
    entries = sweep(tiny_experiment(), "mechanisms", list(MECHANISM_GRID), cache=shared_cache)
    assert [e.value for e in entries] == list(MECHANISM_GRID)
    assert all(e.ok for e in entries)
    first = dict(entries[0].report.metrics())
    assert (first["early_mechanism"], first["late_mechanism"]) == ("mean", "mean")


def test_early_epoch_sweep_shares_pretraining():
    cache = PipelineCache()
    entries = sweep(tiny_experiment(), "early_epoch", [1, 2], cache=cache)
    assert all(e.ok for e in entries)
    assert len(cache.pretrained) == 1
    (pre,) = cache.pretrained.values()
    assert {1, 2} <= set(pre.snaps)


def test_sweep_records_failures_and_continues(shared_cache, monkeypatch):
    real = trainer.run_pipeline

    def flaky(cfg, out_dir=None, cache=None):
        if cfg.selection.nu_vs == 0.5:
            raise RuntimeError("boom")
        return real(cfg, out_dir, cache)

    monkeypatch.setattr(trainer, "run_pipeline", flaky)
    entries = sweep(tiny_experiment(), "nu_vs", [0.5, 0.9], cache=shared_cache)
    assert not entries[0].ok and "boom" in entries[0].error
    assert entries[1].ok


def test_sweep_rejects_unknown_axis():
    with pytest.raises(ValueError, match="axis"):
        sweep(tiny_experiment(), "speed", [1])
