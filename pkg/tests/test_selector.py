import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gravos.detector.model import ArchConfig, DetectorSnapshot, init_params, location_input_gradients, prepare_batch
from gravos.scene import Scene
from gravos.selector import (CSV_HEADER, DegenerateSelectionWarning, SelectionConfig, bg_sampling_mask,
                             bg_sampling_select, dropout_mask, dropout_select, export_kept, export_selection,
                             graph_gradient_magnitude, gravos_select, inv_freq_mask, inv_freq_sampling_select,
                             inv_freq_weights, lower_median, mean_mask, median_mask, read_selection, round_half_up,
                             select_from_magnitudes, select_mean, select_median, select_topk, topk_mask,
                             voxel_gradient_magnitude)
from gravos.voxelizer import BACKGROUND, label_voxels, voxelize
from conftest import SMALL_ARCH, UNIT_GRID, random_small_scene
from oracles import (all_maps, brute_force_magnitude, enumerate_eviction, enumerate_mean, enumerate_median,
                     enumerate_topk, successive_sampling_expectation)


def keyed(values):
    return {(i, 0, 0): v for i, v in enumerate(values)}


def rows(result_set):
    return {k[0] for k in result_set}


# -- gradient magnitude ---------------------------------------------------------------------

def test_magnitude_examples():
    g = np.zeros((3, 2, 4))
    g[1, 0] = (3, 4, 0, 0)
    g[2, 0] = (1, 0, 0, 0)
    g[2, 1] = (0, 2, 0, 0)
    out = voxel_gradient_magnitude(g, [2, 1, 2])
    assert out.tolist() == [0.0, 5.0, 1.5]


def test_magnitude_ignores_padding_slots():
    g = np.ones((1, 3, 4))
    assert voxel_gradient_magnitude(g, [1])[0] == 2.0


def test_magnitude_rejects_empty_voxel():
    with pytest.raises(ValueError):
        voxel_gradient_magnitude(np.zeros((1, 2, 4)), [0])


@given(st.integers(0, 2**32 - 1))
def test_magnitude_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    n, m = int(rng.integers(1, 8)), int(rng.integers(1, 5))
    counts = rng.integers(1, m + 1, n)
    g = rng.normal(size=(n, m, 4)) * 10.0 ** rng.integers(-6, 3)
    ref = brute_force_magnitude(g, counts)
    assert np.max(np.abs(voxel_gradient_magnitude(g, counts) - ref)) <= 1e-12


def test_graph_gradient_magnitude_and_missing_key():
    scene = Scene("s", [[0.5, 0.5, 0.5, 0.1], [0.6, 0.5, 0.5, 0.2], [2.5, 0.5, 0.5, 0.3]])
    vs = voxelize(scene, UNIT_GRID, 5, 0)
    grads = {((0, 0, 0), 0, c): v for c, v in enumerate((3, 4, 0, 0))}
    grads.update({((0, 0, 0), 1, c): 0.0 for c in range(4)})
    grads.update({((2, 0, 0), 0, c): v for c, v in enumerate((0, 0, 1, 0))})
    assert graph_gradient_magnitude(grads, vs).tolist() == [2.5, 1.0]
    del grads[((2, 0, 0), 0, 3)]
    with pytest.raises(KeyError):
        graph_gradient_magnitude(grads, vs)


# -- mechanisms --------------------------------------------------------------------------

def test_mean_examples():
    assert select_mean(keyed([2, 2, 2])) == set(keyed([2, 2, 2]))
    assert rows(select_mean(keyed([1, 2, 3, 10]))) == {3}
    assert rows(select_mean(keyed([0, 0, 6]))) == {2}


def test_mean_is_exact_at_the_threshold():
    # float summation would put the mean a hair above 0.1
    vals = [0.1] * 10
    assert mean_mask(vals).all()
    assert mean_mask([0.1, 0.2, 0.3]).tolist() == [False, True, True]


def test_median_examples():
    assert select_median(keyed([4, 4])) == set(keyed([4, 4]))
    assert rows(select_median(keyed([1, 2, 3]))) == {1, 2}
    assert rows(select_median(keyed([1, 2, 3, 4]))) == {1, 2, 3}
    assert lower_median([4, 1, 3, 2]) == 2


def test_topk_examples():
    assert select_topk(keyed([3, 1]), 0) == set()
    assert select_topk(keyed([3, 1]), 5) == set(keyed([3, 1]))
    assert select_topk({"a": 5, "b": 5, "c": 1}, 1) == {"a"}
    assert select_topk({}, 3) == set()


def test_empty_maps_rejected():
    for fn in (select_mean, select_median):
        with pytest.raises(ValueError):
            fn({})
    with pytest.raises(ValueError):
        topk_mask([1.0], -1)


def test_mapping_forms_use_canonical_key_order():
    values = {(1, 0, 0): 5.0, (0, 9, 9): 5.0, (0, 0, 1): 1.0}
    assert select_topk(values, 1) == {(0, 9, 9)}


@pytest.mark.parametrize("n", range(1, 6))
def test_mechanisms_match_enumeration_small(n):
    maps = all_maps(n)
    mean_ref, median_ref = enumerate_mean(maps), enumerate_median(maps)
    topk_ref = {k: enumerate_topk(maps, k) for k in range(n + 2)}
    for r, values in enumerate(maps):
        assert np.array_equal(mean_mask(values), mean_ref[r])
        assert np.array_equal(median_mask(values), median_ref[r])
        for k, ref in topk_ref.items():
            assert np.array_equal(topk_mask(values, k), ref[r])


def test_mapping_forms_match_enumeration():
    maps = all_maps(4)
    mean_ref, median_ref, top2 = enumerate_mean(maps), enumerate_median(maps), enumerate_topk(maps, 2)
    for r, values in enumerate(maps):
        m = keyed(values.tolist())
        assert rows(select_mean(m)) == set(np.flatnonzero(mean_ref[r]))
        assert rows(select_median(m)) == set(np.flatnonzero(median_ref[r]))
        assert rows(select_topk(m, 2)) == set(np.flatnonzero(top2[r]))


magnitudes = st.lists(st.floats(0, 100, allow_subnormal=False), min_size=1, max_size=30)


@given(magnitudes, st.sampled_from([1e-3, 1.0, 1e3]), st.integers(0, 35))
def test_mechanisms_scale_invariant(values, alpha, k):
    v = np.array(values)
    for fn in (mean_mask, median_mask, lambda x: topk_mask(x, k)):
        assert np.array_equal(fn(v), fn(v * alpha))


@given(magnitudes, st.integers(0, 35), st.integers(0, 35))
def test_topk_monotone_in_k(values, k1, k2):
    lo, hi = sorted((k1, k2))
    assert not np.any(topk_mask(values, lo) & ~topk_mask(values, hi))


# -- budgeted selection ---------------------------------------------------------------

def _coords(n):
    return np.array([(i, 0, 0) for i in range(n)])


def test_six_voxel_hand_fixture():
    # rows a..f; late top-2 = {a, c}; early mean 3 -> {b, d, e}; union of 5 evicts e then d
    g_late = [5, 1, 4, 0, 2, 3]
    g_early = [1, 6, 0, 5, 4, 2]
    cfg = SelectionConfig(nu_vs=0.5, nu_idr=2 / 3, early_mechanism="mean", late_mechanism="topk")
    res = select_from_magnitudes(_coords(6), g_early, g_late, cfg)
    assert (res.n_vs, res.k) == (3, 2)
    assert rows(res.late_set) == {0, 2}
    assert rows(res.evicted_set) == {3, 4}
    assert rows(res.early_set) == {1}
    assert rows(res.merged_set) == {0, 1, 2}
    pre_eviction = set(np.flatnonzero(enumerate_mean(np.array([g_early]))[0]))
    late = set(np.flatnonzero(enumerate_topk(np.array([g_late]), 2)[0]))
    assert pre_eviction == {1, 3, 4}
    assert enumerate_eviction(pre_eviction, late, g_early, 3) == rows(res.merged_set)


def test_eviction_tie_evicts_larger_row_first():
    cfg = SelectionConfig(nu_vs=0.5, nu_idr=0.5, early_mechanism="mean", late_mechanism="topk")
    # n_vs 2, k 1; late {0}; early mean 1.75 -> rows 1, 2 tie at 2 -> row 2 evicted
    res = select_from_magnitudes(_coords(4), [0, 2, 2, 3], [9, 0, 0, 0], cfg)
    assert rows(res.merged_set) == {0, 3}
    res = select_from_magnitudes(_coords(4), [0, 2, 2, 1], [9, 0, 0, 0], cfg)
    assert rows(res.merged_set) == {0, 1}


def test_idr_one_topk_topk_is_late_top_n_vs():
    rng = np.random.default_rng(3)
    g_e, g_l = rng.random(20), rng.random(20)
    cfg = SelectionConfig(nu_vs=0.6, nu_idr=1.0, early_mechanism="topk", late_mechanism="topk")
    res = select_from_magnitudes(_coords(20), g_e, g_l, cfg)
    top = set(np.argsort(-g_l)[:12])
    assert rows(res.merged_set) == rows(res.late_set) == top


@pytest.mark.parametrize("early,late", list(itertools.product(("mean", "median", "topk"), repeat=2)))
def test_full_budget_keeps_everything(early, late):
    cfg = SelectionConfig(nu_vs=1.0, early_mechanism=early, late_mechanism=late)
    res = select_from_magnitudes(_coords(7), [0, 1, 2, 3, 4, 5, 6], [6, 5, 4, 3, 2, 1, 0], cfg)
    assert res.in_merged.all() and not res.evicted.any()


def test_under_budget_union_is_not_padded():
    cfg = SelectionConfig(nu_vs=0.8, nu_idr=0.25, early_mechanism="mean", late_mechanism="topk")
    res = select_from_magnitudes(_coords(10), [0] * 9 + [10], list(range(10)), cfg)
    assert res.n_vs == 8 and res.k == 2
    assert rows(res.merged_set) == {8, 9}


def test_degenerate_fallback_warns():
    cfg = SelectionConfig(nu_vs=0.5)
    with pytest.warns(DegenerateSelectionWarning):
        res = select_from_magnitudes(_coords(4), [0] * 4, [0] * 4, cfg, 0.0, 0.0, "empty-gt")
    assert res.degenerate and rows(res.merged_set) == {0, 1}


def test_empty_voxel_set_selection():
    res = select_from_magnitudes(np.zeros((0, 3)), [], [], SelectionConfig())
    assert res.n_voxels == 0 and res.merged_set == frozenset()


def test_round_half_up_and_budget():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.4999)] == [1, 2, 3, 2]
    assert SelectionConfig(nu_vs=0.5, nu_idr=2 / 3).budget(6) == (3, 2, 1)
    assert SelectionConfig().budget(100) == (80, 50, 30)


@pytest.mark.parametrize("kwargs", [dict(nu_vs=0.0), dict(nu_vs=1.1), dict(nu_idr=-0.1),
                                    dict(early_mechanism="max"), dict(nu_early=2.0)])
def test_selection_config_validation(kwargs):
    with pytest.raises(ValueError):
        SelectionConfig(**kwargs)


mech = st.sampled_from(("mean", "median", "topk"))


@given(st.lists(st.integers(0, 4), min_size=1, max_size=9), st.data(), mech, mech,
       st.sampled_from([0.3, 0.5, 0.8, 0.9]), st.sampled_from([0.0, 0.25, 50 / 80, 1.0]))
def test_union_law_and_eviction_oracle(g_early, data, early_mech, late_mech, nu_vs, nu_idr):
    g_late = data.draw(st.lists(st.integers(0, 4), min_size=len(g_early), max_size=len(g_early)))
    cfg = SelectionConfig(nu_vs=nu_vs, nu_idr=nu_idr, early_mechanism=early_mech, late_mechanism=late_mech)
    res = select_from_magnitudes(_coords(len(g_early)), g_early, g_late, cfg)
    assert res.merged_set == res.early_set | res.late_set
    assert res.merged_set >= res.late_set
    assert not (res.late_set & res.evicted_set)
    if late_mech == "topk" or res.n_vs == len(g_early):
        assert len(res.merged_set) <= res.n_vs
    if res.n_vs < len(g_early):
        n_vs, k, k_early = cfg.budget(len(g_early))
        early_pre = set(np.flatnonzero(res.in_early | res.evicted))
        assert enumerate_eviction(early_pre, rows(res.late_set), g_early, n_vs) == rows(res.merged_set)


def test_result_arrays_read_only_and_checksum_stable():
    res = select_from_magnitudes(_coords(3), [1, 2, 3], [3, 2, 1], SelectionConfig(nu_vs=0.67))
    with pytest.raises(ValueError):
        res.in_merged[0] = False
    again = select_from_magnitudes(_coords(3), [1, 2, 3], [3, 2, 1], SelectionConfig(nu_vs=0.67))
    assert res.checksum() == again.checksum()


# -- gravos_select on real gradients ----------------------------------------------------------

def _snapshots(arch=SMALL_ARCH):
    return (DetectorSnapshot(init_params(arch, 1), "early", 1),
            DetectorSnapshot(init_params(arch, 2), "late", 5))


def test_gravos_select_uses_location_gradients():
    scene = random_small_scene(np.random.default_rng(4), n_voxels=8)
    vs = voxelize(scene, UNIT_GRID, 3, 0)
    early, late = _snapshots()
    cfg = SelectionConfig(nu_vs=0.5)
    res = gravos_select(vs, scene, early, late, cfg)
    batch = prepare_batch(vs, scene, SMALL_ARCH)
    loss_l, grads_l = location_input_gradients(batch, late.params)
    assert loss_l > 0
    assert np.array_equal(res.g_late, voxel_gradient_magnitude(grads_l, vs.n_points))
    ref = select_from_magnitudes(vs.coords, res.g_early, res.g_late, cfg, res.loss_early, res.loss_late)
    assert ref.merged_set == res.merged_set


def test_gravos_select_full_budget_and_degenerate():
    rng = np.random.default_rng(5)
    scene = random_small_scene(rng)
    vs = voxelize(scene, UNIT_GRID, 3, 0)
    early, late = _snapshots()
    assert gravos_select(vs, scene, early, late, SelectionConfig(nu_vs=1.0)).merged_set == set(vs.index_tuples())
    no_gt = Scene("nogt", scene.points, ())
    with pytest.warns(DegenerateSelectionWarning):
        res = gravos_select(vs, no_gt, early, late, SelectionConfig(nu_vs=0.5))
    assert res.degenerate and len(res.merged_set) == round_half_up(0.5 * len(vs))


def test_gravos_select_rejects_mixed_architectures():
    scene = random_small_scene(np.random.default_rng(6))
    vs = voxelize(scene, UNIT_GRID, 3, 0)
    other = DetectorSnapshot(init_params(ArchConfig(point_hidden=3, feature=4, context=3, head_hidden=5,
                                                    ctx_radius=1, ctx_in=2), 0), "late", 3)
    with pytest.raises(ValueError):
        gravos_select(vs, scene, _snapshots()[0], other, SelectionConfig())


# -- baselines -----------------------------------------------------------------------------

def test_dropout_examples():
    vs = voxelize(random_small_scene(np.random.default_rng(7), n_voxels=10), UNIT_GRID, 3, 0)
    assert dropout_select(vs, 1.0, 3) == set(vs.index_tuples())
    assert dropout_select(vs, 0.5, 3) == dropout_select(vs, 0.5, 3)
    assert dropout_mask(100, 0.5, 11).sum() == 50
    assert not np.array_equal(dropout_mask(100, 0.5, 11), dropout_mask(100, 0.5, 12))
    with pytest.raises(ValueError):
        dropout_mask(10, 0.0, 1)


def test_bg_sampling_examples():
    assert bg_sampling_mask(np.array(["Car"] * 10, dtype=object), 0.5, 1).all()
    assert bg_sampling_mask(np.array([BACKGROUND] * 10, dtype=object), 0.5, 1).sum() == 5
    labels = np.array([BACKGROUND] * 80 + ["Pedestrian"] * 20, dtype=object)
    keep = bg_sampling_mask(labels, 0.8, 1)
    assert keep[80:].all() and keep[:80].sum() == 60


def test_label_aware_selectors_accept_voxel_labels():
    scene = random_small_scene(np.random.default_rng(8), n_voxels=10)
    vs = voxelize(scene, UNIT_GRID, 3, 0)
    labels = label_voxels(vs, scene)
    fg = {l.index for l in labels if l.label != BACKGROUND}
    assert fg <= bg_sampling_select(vs, labels, 0.5, 2)
    assert len(inv_freq_sampling_select(vs, labels, 0.5, 2)) == round_half_up(0.5 * len(vs))
    with pytest.raises(ValueError):
        bg_sampling_select(vs, labels[:-1], 0.5, 2)


def test_inv_freq_single_label_equals_dropout():
    for seed in range(20):
        labels = np.array([BACKGROUND] * 37, dtype=object)
        assert np.array_equal(inv_freq_mask(labels, 0.6, seed), dropout_mask(37, 0.6, seed))
    assert inv_freq_mask(np.array(["Car", BACKGROUND], dtype=object), 1.0, 0).all()


def test_inv_freq_weights():
    assert inv_freq_weights(np.array(["a", "b", "a", "a"], dtype=object)).tolist() == [1 / 3, 1, 1 / 3, 1 / 3]


def test_inv_freq_expectation_matches_successive_sampling():
    labels = np.array([BACKGROUND] * 90 + ["Cyclist"] * 10, dtype=object)
    rare = np.array([inv_freq_mask(labels, 0.5, s)[90:].sum() / 10 for s in range(1000)])
    expected = float(successive_sampling_expectation(10, 90, 1 / 10, 1 / 90, 50)) / 10
    sigma = rare.std(ddof=1) / math.sqrt(len(rare))
    assert abs(rare.mean() - expected) <= 3 * sigma
    assert expected > 0.5


# -- export ------------------------------------------------------------------------------------

def test_selection_csv_round_trip(tmp_path):
    res = select_from_magnitudes(_coords(6), [1, 6, 0, 5, 4, 2], [5, 1, 4, 0, 2, 3],
                                 SelectionConfig(nu_vs=0.5, nu_idr=2 / 3))
    path = tmp_path / "s.csv"
    export_selection(res, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1] == "0,0,0,1.0,5.0,0,1,1"
    back = read_selection(path)
    assert back.indices == [tuple(c) for c in _coords(6).tolist()]
    assert back.kept.tolist() == res.in_merged.tolist()
    export_kept(_coords(2), [True, False], tmp_path / "k.csv")
    assert read_selection(tmp_path / "k.csv").kept.tolist() == [True, False]


def test_read_selection_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("i,j,k\n")
    with pytest.raises(ValueError):
        read_selection(path)
