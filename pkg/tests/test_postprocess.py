import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import boundary_length_by_faces, convolve2d_direct
from segqc.postprocess import (
    FlaggedSlice,
    PostprocessConfig,
    apply_postprocess,
    boundary_length_px,
    flag_slices,
    gaussian_kernel1d,
    gaussian_smooth_slice,
    kernel_radius,
)
from segqc.regression import LinearModel
from segqc.uncertainty import SliceUncertainty
from segqc.volume_io import Volume


def test_kernel_shape_and_sum():
    k = gaussian_kernel1d(5.0)
    assert len(k) == 2 * 20 + 1 and kernel_radius(5.0) == 20
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_array_equal(k, k[::-1])
    assert PostprocessConfig().kernel_radius == 20


def test_constant_slice_unchanged():
    out = gaussian_smooth_slice(np.full((30, 17), 0.37))
    assert np.max(np.abs(out - 0.37)) < 1e-12


def test_impulse_response_is_outer_kernel():
    p = np.zeros((61, 61))
    p[30, 30] = 1.0
    k = gaussian_kernel1d(5.0)
    out = gaussian_smooth_slice(p)
    np.testing.assert_allclose(out[10:51, 10:51], np.outer(k, k), atol=1e-15)


def test_matches_direct_convolution():
    rng = np.random.default_rng(0)
    for shape, sigma in (((12, 9), 1.5), ((7, 5), 5.0), ((20, 20), 2.0)):
        p = rng.random(shape)
        want = convolve2d_direct(p, gaussian_kernel1d(sigma))
        assert np.max(np.abs(gaussian_smooth_slice(p, sigma) - want)) < 1e-9


@settings(max_examples=20, deadline=None)
@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2**32 - 1))
def test_linearity(a, b, seed):
    rng = np.random.default_rng(seed)
    p, q = rng.random((10, 11)), rng.random((10, 11))
    lhs = gaussian_smooth_slice(a * p + b * q, 2.0)
    rhs = a * gaussian_smooth_slice(p, 2.0) + b * gaussian_smooth_slice(q, 2.0)
    assert np.max(np.abs(lhs - rhs)) < 1e-12


def test_smoothing_rejects_bad_input():
    with pytest.raises(ValueError):
        gaussian_smooth_slice(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        gaussian_kernel1d(0.0)


def test_boundary_length_hand_values():
    assert boundary_length_px(np.zeros((4, 4))) == 0
    one = np.zeros((4, 4))
    one[1, 1] = 1
    assert boundary_length_px(one) == 4
    sq = np.zeros((4, 4))
    sq[1:3, 1:3] = 1
    assert boundary_length_px(sq) == 8
    assert boundary_length_px(np.ones((3, 5))) == 16


def test_boundary_length_matches_faces():
    rng = np.random.default_rng(4)
    for _ in range(20):
        m = rng.random((9, 13)) < 0.4
        assert boundary_length_px(m) == boundary_length_by_faces(m)


def _hd_model():
    return LinearModel("type1", "hd_mm", 1.0, 0.0)


def test_flags_above_threshold_only():
    unc = [SliceUncertainty(z, 5, v, 0.0, 1.0) for z, v in ((1, 3.0), (2, 9.0), (3, 12.0))]
    flags = flag_slices(unc, _hd_model())
    assert [f.slice_index for f in flags] == [2, 3]
    assert [f.predicted_hd_mm for f in flags] == [9.0, 12.0]
    at = [SliceUncertainty(0, 5, 8.0, 0.0, 1.0)]
    assert flag_slices(at, _hd_model()) == []


def test_flags_gap_slices_as_undefined():
    unc = [SliceUncertainty(0, 5, 1.0, 0, 1), SliceUncertainty(2, 5, 1.0, 0, 1)]
    assert flag_slices(unc, _hd_model()) == [FlaggedSlice(1, None)]
    assert flag_slices([], _hd_model()) == []


def test_flagging_needs_hd_model():
    with pytest.raises(ValueError):
        flag_slices([], LinearModel("type1", "dsc", 1.0, 0.0))


def test_no_flags_is_identity():
    rng = np.random.default_rng(1)
    prob = Volume(rng.random((3, 8, 8)).astype(np.float32))
    label = prob.with_data((prob.data >= 0.5).astype(np.uint8))
    new, report = apply_postprocess(prob, label, [])
    assert np.array_equal(new.data, label.data) and report.flagged_indices == []


def test_only_flagged_slices_change():
    rng = np.random.default_rng(2)
    prob = Volume(rng.random((4, 20, 20)).astype(np.float32))
    label = prob.with_data((prob.data >= 0.5).astype(np.uint8))
    cfg = PostprocessConfig(sigma_px=2.0)
    new, report = apply_postprocess(prob, label, [FlaggedSlice(2, 10.0)], cfg)
    for z in (0, 1, 3):
        assert np.array_equal(new.data[z], label.data[z])
    want = (gaussian_smooth_slice(prob.data[2], 2.0) >= 0.5).astype(np.uint8)
    assert np.array_equal(new.data[2], want)
    ch = report.slices[0]
    assert ch.modified_voxels == int((label.data[2] != want).sum())
    assert ch.boundary_after_px < ch.boundary_before_px
    assert report.to_json()["flagged_slices"][0]["slice_index"] == 2


def test_out_of_range_flag():
    v = Volume(np.zeros((2, 4, 4), np.float32))
    with pytest.raises(IndexError):
        apply_postprocess(v, v.with_data(np.zeros((2, 4, 4), np.uint8)), [FlaggedSlice(5, None)])


def test_config_validation_and_round_trip():
    with pytest.raises(ValueError):
        PostprocessConfig(sigma_px=0)
    cfg = PostprocessConfig(hd_threshold_mm=6.5)
    assert PostprocessConfig.from_dict(cfg.to_dict()) == cfg
