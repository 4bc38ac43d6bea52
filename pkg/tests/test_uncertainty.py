import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import dice_by_enumeration, pearson_direct
from segqc.metrics import SliceMetrics
from segqc.uncertainty import (
    Ensemble,
    InsufficientDataError,
    aggregate,
    build_records,
    correlate,
    pair_count,
    pairwise_dsc,
    pearson_pvalue,
    pearson_r,
    slice_uncertainty,
    type1_mean_prob,
    type2_prob_variation,
    type3_pairwise_dsc,
)
from segqc.volume_io import SliceRecord, Volume


def _ens(arrays, case_id="c"):
    return Ensemble(tuple(Volume(np.asarray(a, dtype=np.float32)) for a in arrays), case_id)


def test_aggregate_consensus_hand_values():
    e = _ens([np.full((1, 1, 2), 0.4), np.full((1, 1, 2), 0.7)])
    mean, label = aggregate(e)
    np.testing.assert_allclose(mean.data, 0.55, rtol=1e-6)
    assert label.data.tolist() == [[[1, 1]]]


def test_tie_at_half_is_foreground():
    e = _ens([np.zeros((1, 1, 1)), np.ones((1, 1, 1))])
    assert aggregate(e)[1].data.item() == 1


def test_ensemble_validation():
    with pytest.raises(ValueError):
        _ens([np.zeros((1, 2, 2))])
    with pytest.raises(ValueError):
        _ens([np.zeros((1, 2, 2)), np.zeros((1, 2, 3))])
    with pytest.raises(ValueError):
        Ensemble((Volume(np.zeros((1, 2, 2), np.float32), (1, 1, 1)),
                  Volume(np.zeros((1, 2, 2), np.float32), (2, 1, 1))))
    with pytest.raises(ValueError):
        _ens([np.full((1, 1, 1), 1.5), np.zeros((1, 1, 1))]).stack


def test_type1_hand_value():
    # mean 0.6 everywhere on the slice
    e = _ens([np.full((1, 3, 3), 0.5), np.full((1, 3, 3), 0.7)])
    assert type1_mean_prob(e, 0) == pytest.approx(0.6)


def test_type1_only_counts_consensus_foreground():
    a = np.zeros((1, 1, 3))
    a[0, 0] = [0.9, 0.6, 0.1]
    e = _ens([a, a])
    assert type1_mean_prob(e, 0) == pytest.approx(0.75, rel=1e-6)


def test_type2_balanced_votes():
    e = _ens([np.zeros((1, 2, 2))] * 5 + [np.ones((1, 2, 2))] * 5)
    assert type2_prob_variation(e, 0) == pytest.approx(0.5)


def test_type2_zero_when_members_agree():
    e = _ens([np.full((1, 2, 2), 0.8)] * 4)
    assert type2_prob_variation(e, 0) == 0.0


def test_type3_two_groups():
    a = np.zeros((1, 4, 4))
    b = np.zeros((1, 4, 4))
    a[0, :2, :2] = 1
    b[0, :2, 1:3] = 1
    d = dice_by_enumeration(a, b)
    e = _ens([a] * 10 + [b] * 10)
    assert len(pairwise_dsc(e, 0)) == 190 == pair_count(20)
    assert type3_pairwise_dsc(e, 0) == pytest.approx((90 + 100 * d) / 190, rel=1e-12)


def test_pairwise_dsc_matches_enumeration_and_empty_pairs():
    rng = np.random.default_rng(1)
    arrays = [rng.random((2, 5, 5)) * (i % 3 != 0) for i in range(6)]
    e = _ens(arrays)
    got = pairwise_dsc(e, 1)
    labels = [np.asarray(a, np.float32)[1] >= 0.5 for a in arrays]
    want = [dice_by_enumeration(labels[i], labels[j]) for i, j in itertools.combinations(range(6), 2)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_undefined_slice_raises():
    e = _ens([np.zeros((2, 2, 2)), np.zeros((2, 2, 2))])
    with pytest.raises(ValueError):
        type1_mean_prob(e, 0)
    with pytest.raises(ValueError):
        type3_pairwise_dsc(e, 0)


def test_slice_uncertainty_skips_empty_slices():
    a = np.zeros((3, 2, 2))
    a[1] = 0.9
    rows = slice_uncertainty(_ens([a, a]))
    assert [r.slice_index for r in rows] == [1]
    assert rows[0].n_fg == 4 and rows[0].type3 == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_member_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    arrays = [rng.random((2, 4, 4)) for _ in range(5)]
    arrays[0][0] = 0.9
    e1 = _ens(arrays)
    e2 = _ens([arrays[i] for i in rng.permutation(5)])
    for z in (0, 1):
        if not e1.consensus[z].any():
            continue
        assert type1_mean_prob(e1, z) == pytest.approx(type1_mean_prob(e2, z), rel=1e-12)
        assert type2_prob_variation(e1, z) == pytest.approx(type2_prob_variation(e2, z), rel=1e-12)
        assert type3_pairwise_dsc(e1, z) == pytest.approx(type3_pairwise_dsc(e2, z), rel=1e-12)


def test_build_records_joins():
    unc = slice_uncertainty(_ens([np.full((3, 2, 2), 0.9)] * 2))
    met = [SliceMetrics(1, 4, 0.8, 1.0, 0.5, 0.9), SliceMetrics(5, 1, 0.0, None, None, None)]
    rows = build_records("c", unc, met)
    assert [r.slice_index for r in rows] == [1]
    assert rows[0].dsc == 0.8 and rows[0].type1 == pytest.approx(0.9, rel=1e-6)
    only = build_records("c", unc)
    assert [r.slice_index for r in only] == [0, 1, 2] and only[0].dsc is None


def test_pearson_hand_value():
    assert pearson_r([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)
    assert pearson_r([1, 2, 3], [3, 2, 1]) == -1.0


def test_pearson_matches_direct():
    rng = np.random.default_rng(2)
    for _ in range(20):
        x, y = rng.normal(size=30), rng.normal(size=30)
        assert pearson_r(x, y) == pytest.approx(pearson_direct(list(x), list(y)), rel=1e-10)


@settings(max_examples=40, deadline=None)
@given(st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5), st.integers(0, 2**32 - 1))
def test_pearson_affine_invariance(a, b, c, d, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=12), rng.normal(size=12)
    r = pearson_r(x, y)
    assert pearson_r(a * x + b, c * y + d) == pytest.approx(r, abs=1e-9)
    assert pearson_r(-a * x + b, c * y + d) == pytest.approx(-r, abs=1e-9)


def test_pearson_errors():
    with pytest.raises(InsufficientDataError):
        pearson_r([1, 2], [1, 2])
    with pytest.raises(ValueError):
        pearson_r([1, 1, 1], [1, 2, 3])


def test_pvalue_bounds():
    assert pearson_pvalue(0.0, 10) == pytest.approx(1.0)
    assert pearson_pvalue(1.0, 10) == 0.0
    assert 0 < pearson_pvalue(0.5, 10) < 1


def _records(n):
    rng = np.random.default_rng(0)
    out = []
    for i in range(n):
        t1 = float(rng.random())
        out.append(SliceRecord("c", i, 10, t1, float(rng.random()), float(rng.random()),
                               dsc=t1 + 0.01 * float(rng.random()), hd_mm=float(rng.random())))
    return out


def test_correlate_report():
    rep = correlate(_records(20))
    assert len(rep.entries) == 6
    assert rep.most_correlated("dsc") == "type1"
    assert rep.get("type1", "dsc").r > 0.99
    assert type(rep).from_json(rep.to_json()) == rep


def test_correlate_drops_undefined_and_needs_three():
    recs = _records(5)
    recs[0].hd_mm = None
    rep = correlate(recs)
    assert rep.get("type2", "hd").n == 4 and rep.get("type2", "hd").dropped == 1
    with pytest.raises(InsufficientDataError):
        correlate(_records(2))
