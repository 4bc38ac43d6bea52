import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import boundary_by_enumeration, dice_by_enumeration, surface_distances_brute
from segqc.geometry import EmptyMaskError
from segqc.metrics import (
    boundary_mask,
    boundary_points,
    dice,
    nearest_distances,
    nearest_rank_percentile,
    slice_metrics,
    surface_distances,
    volume_metrics,
)
from segqc.volume_io import Volume


def _random_pair(rng, shape):
    a = rng.random(shape) < rng.uniform(0.1, 0.6)
    b = rng.random(shape) < rng.uniform(0.1, 0.6)
    a.flat[rng.integers(a.size)] = True
    b.flat[rng.integers(b.size)] = True
    return a, b


def test_dice_hand_values():
    a = np.zeros((1, 1, 4), bool)
    b = np.zeros((1, 1, 4), bool)
    a[0, 0, :2] = True
    b[0, 0, 1] = True
    assert dice(a, b) == pytest.approx(2 / 3)
    assert dice(a, a) == 1.0
    assert dice(np.zeros(3), np.zeros(3)) == 1.0
    assert dice(a, np.zeros_like(a)) == 0.0


def test_block_boundary_has_26_points():
    m = np.zeros((5, 5, 5), bool)
    m[1:4, 1:4, 1:4] = True
    assert len(boundary_points(m, (1, 1, 1))) == 26
    assert sorted(map(tuple, np.argwhere(boundary_mask(m)))) == sorted(boundary_by_enumeration(m))


def test_array_border_counts_as_surface():
    m = np.ones((3, 3, 3), bool)
    assert boundary_mask(m).sum() == 26


def test_two_voxels_four_apart():
    a = np.zeros((1, 1, 8), bool)
    b = np.zeros((1, 1, 8), bool)
    a[0, 0, 1] = True
    b[0, 0, 5] = True
    sd = surface_distances(a, b, (3.6, 0.625, 0.625))
    assert (sd.hd_mm, sd.msd_mm, sd.hd95_mm) == (2.5, 2.5, 2.5)


def test_empty_surface_raises():
    with pytest.raises(EmptyMaskError):
        boundary_points(np.zeros((2, 2, 2)), (1, 1, 1))


def test_matches_brute_force_exactly():
    rng = np.random.default_rng(11)
    for _ in range(25):
        shape = tuple(int(n) for n in rng.integers(2, 12, size=3))
        spacing = tuple(float(s) for s in rng.uniform(0.3, 4.0, size=3))
        a, b = _random_pair(rng, shape)
        sd = surface_distances(a, b, spacing)
        hd, msd, hd95 = surface_distances_brute(a, b, spacing)
        assert sd.hd_mm == hd and sd.hd95_mm == hd95
        assert sd.msd_mm == msd
        assert dice(a, b) == dice_by_enumeration(a, b)


def test_nearest_distances_widening_on_ties():
    # many equidistant candidates force the widening path
    dst = np.array([[0.0, y, x] for y in range(-3, 4) for x in range(-3, 4) if abs(y) + abs(x) >= 3])
    src = np.zeros((1, 3))
    got = nearest_distances(src, dst)
    d = np.sqrt(((dst - src) ** 2).sum(-1)).min()
    assert got[0] == d


def test_percentile_nearest_rank():
    v = np.arange(1, 21, dtype=float)
    assert nearest_rank_percentile(v, 95) == 19.0
    assert nearest_rank_percentile(np.array([7.0]), 95) == 7.0
    v = np.arange(1, 101, dtype=float)
    assert nearest_rank_percentile(v, 95) == 95.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_symmetry(seed):
    a, b = _random_pair(np.random.default_rng(seed), (4, 6, 5))
    s1 = surface_distances(a, b, (2.0, 0.7, 0.7))
    s2 = surface_distances(b, a, (2.0, 0.7, 0.7))
    assert s1.hd_mm == s2.hd_mm and s1.hd95_mm == s2.hd95_mm
    assert s1.msd_mm == pytest.approx(s2.msd_mm, rel=1e-12)
    assert dice(a, b) == dice(b, a)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    a, b = _random_pair(rng, (4, 5, 5))
    pa = np.zeros((9, 10, 10), bool)
    pb = np.zeros((9, 10, 10), bool)
    pa[3:7, 2:7, 4:9] = a
    pb[3:7, 2:7, 4:9] = b
    # interior placement removes the array-border surface, so compare two placements
    qa = np.zeros_like(pa)
    qb = np.zeros_like(pb)
    qa[1:5, 4:9, 1:6] = a
    qb[1:5, 4:9, 1:6] = b
    s1 = surface_distances(pa, pb, (1.0, 1.0, 1.0))
    s2 = surface_distances(qa, qb, (1.0, 1.0, 1.0))
    assert s1.hd_mm == s2.hd_mm and s1.hd95_mm == s2.hd95_mm
    assert s1.msd_mm == pytest.approx(s2.msd_mm, rel=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_doubling_spacing_doubles_distances(seed):
    a, b = _random_pair(np.random.default_rng(seed), (4, 5, 6))
    s1 = surface_distances(a, b, (1.5, 0.5, 0.75))
    s2 = surface_distances(a, b, (3.0, 1.0, 1.5))
    assert s2.hd_mm == pytest.approx(2 * s1.hd_mm, rel=1e-12)
    assert s2.msd_mm == pytest.approx(2 * s1.msd_mm, rel=1e-12)
    assert s2.hd95_mm == pytest.approx(2 * s1.hd95_mm, rel=1e-12)


def test_volume_metrics_conventions():
    m = np.zeros((3, 4, 4), np.uint8)
    m[1, 1:3, 1:3] = 1
    v = Volume(m, (3.6, 0.625, 0.625))
    same = volume_metrics(v, v)
    assert (same.dsc, same.hd_mm, same.msd_mm, same.hd95_mm) == (1.0, 0.0, 0.0, 0.0)
    one = volume_metrics(v, v.with_data(np.zeros_like(m)))
    assert one.dsc == 0.0 and one.hd_mm is None and one.msd_mm is None
    empty = Volume(np.zeros_like(m))
    both = volume_metrics(empty, empty)
    assert (both.dsc, both.hd_mm) == (1.0, 0.0)
    with pytest.raises(ValueError):
        volume_metrics(m, np.zeros((3, 4, 5)))
    assert volume_metrics(v, v).to_dict("c")["case_id"] == "c"


def test_slice_metrics_only_gt_slices_and_in_plane_spacing():
    gt = np.zeros((4, 6, 6), np.uint8)
    pred = np.zeros_like(gt)
    gt[1, 2, 1] = gt[2, 2, 2] = 1
    pred[1, 2, 4] = 1  # 3 px away on slice 1
    pred[3, 0, 0] = 1  # slice with no GT, skipped
    rows = slice_metrics(Volume(gt, (10.0, 0.5, 0.5)), Volume(pred, (10.0, 0.5, 0.5)))
    assert [r.slice_index for r in rows] == [1, 2]
    assert rows[0].dsc == 0.0 and rows[0].hd_mm == pytest.approx(1.5)
    assert rows[0].n_fg_gt == 1
    assert rows[1].dsc == 0.0 and rows[1].hd_mm is None


def test_slice_metrics_match_2d_brute_force():
    rng = np.random.default_rng(3)
    gt, pred = _random_pair(rng, (3, 9, 8))
    rows = slice_metrics(gt, pred, (5.0, 0.8, 0.6))
    for r in rows:
        z = r.slice_index
        if pred[z].any():
            hd, msd, hd95 = surface_distances_brute(gt[z], pred[z], (0.8, 0.6))
            assert (r.hd_mm, r.hd95_mm) == (hd, hd95)
            assert r.msd_mm == pytest.approx(msd, rel=1e-12)
        assert r.dsc == dice_by_enumeration(gt[z], pred[z])


def test_distance_values_are_finite():
    rng = np.random.default_rng(8)
    a, b = _random_pair(rng, (6, 6, 6))
    sd = surface_distances(a, b, (1, 1, 1))
    assert all(math.isfinite(x) for x in (sd.hd_mm, sd.msd_mm, sd.hd95_mm))
