import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import map_coordinates

from cardiokey.core import (
    DescriptorConfig,
    DisplacementFieldSequence,
    FocusPoint,
    ImageSequence,
    RegistrationConfig,
    identity_grid,
    resample,
    sample_with_gradient,
    trilinear_sample,
    warp,
)

finite = st.floats(-100, 100, allow_nan=False)


def test_sample_at_grid_points_is_exact(rng):
    g = rng.normal(size=(5, 6, 7))
    pos = identity_grid(g.shape)
    assert np.array_equal(trilinear_sample(g, pos), g)


def test_sample_mean_of_corners():
    g = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert trilinear_sample(g, [0.5, 0.5]) == 1.5


def test_sample_clamps_outside():
    g = np.arange(12.0).reshape(3, 4)
    assert trilinear_sample(g, [-1.0, 0.0]) == g[0, 0]
    assert trilinear_sample(g, [10.0, 10.0]) == g[2, 3]
    assert trilinear_sample(g, [-3.0, 1.5]) == pytest.approx(1.5)


@given(st.integers(0, 2**31))
def test_sample_matches_scipy_inside(seed):
    r = np.random.default_rng(seed)
    g = r.normal(size=(4, 5, 6))
    pos = r.uniform(0, 1, size=(20, 3)) * (np.array(g.shape) - 1)
    ref = map_coordinates(g, pos.T, order=1, mode="nearest")
    assert np.allclose(trilinear_sample(g, pos), ref, atol=1e-12)


@given(st.integers(0, 2**31), finite, finite)
def test_sample_is_linear_in_grid(seed, a, b):
    r = np.random.default_rng(seed)
    G, H = r.normal(size=(2, 6, 5))
    pos = r.uniform(-2, 8, size=(10, 2))
    lhs = trilinear_sample(a * G + b * H, pos)
    rhs = a * trilinear_sample(G, pos) + b * trilinear_sample(H, pos)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


def test_sample_gradient_matches_finite_difference(rng):
    g = rng.normal(size=(6, 7))
    pos = rng.uniform(0.1, 4.9, size=(15, 2))
    _, grad = sample_with_gradient(g, pos)
    eps = 1e-6
    for ax in range(2):
        step = np.zeros(2)
        step[ax] = eps
        fd = (trilinear_sample(g, pos + step) - trilinear_sample(g, pos - step)) / (2 * eps)
        assert np.allclose(grad[..., ax], fd, atol=1e-6)


def test_warp_zero_field_is_identity(rng):
    img = rng.normal(size=(8, 9))
    assert np.array_equal(warp(img, np.zeros((8, 9, 2))), img)


def test_warp_integer_shift():
    img = np.arange(20.0).reshape(4, 5)
    field = np.zeros((4, 5, 2))
    field[..., 1] = 1.0
    out = warp(img, field)
    assert np.array_equal(out[:, :-1], img[:, 1:])
    assert np.array_equal(out[:, -1], img[:, -1])


def test_resample_dims():
    seq = ImageSequence(np.zeros((2, 12, 128, 128)), (5.0, 1.25, 1.25))
    out = resample(seq, 2.5)
    assert out.dims == (24, 64, 64)
    assert out.spacing == (2.5, 2.5, 2.5)
    assert out.T == 2


def test_resample_identity_bit_exact(rng):
    seq = ImageSequence(rng.normal(size=(3, 7, 9)), (1.0, 1.0))
    assert np.array_equal(resample(seq, 1.0).frames, seq.frames)


def test_resample_ramp():
    frames = np.tile(np.array([0.0, 1.0, 2.0, 3.0]), (2, 2, 1))
    out = resample(ImageSequence(frames, (1.0, 1.0)), 2.0)
    assert out.frames[0, 0].tolist() == [0.0, 2.0]


def test_resample_linear_values():
    # 2 mm -> 1 mm doubles the sample count and interpolates midpoints
    frames = np.tile(np.array([0.0, 4.0, 8.0]), (2, 3, 1))
    out = resample(ImageSequence(frames, (2.0, 2.0)), 1.0)
    assert np.allclose(out.frames[0, 0], [0.0, 2.0, 4.0, 6.0, 8.0, 8.0])


def test_resample_rejects_bad_spacing():
    seq = ImageSequence(np.zeros((2, 4, 4)), (1.0, 1.0))
    for bad in (0.0, -1.0, np.nan):
        with pytest.raises(ValueError):
            resample(seq, bad)


@given(arrays(np.float64, (2, 5, 6), elements=st.floats(-10, 10)))
def test_resample_round_trip_same_spacing(frames):
    seq = ImageSequence(frames, (1.5, 1.5))
    out = resample(resample(seq, 1.5), 1.5)
    assert np.allclose(out.frames, seq.frames, rtol=1e-6, atol=0)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_types_reject_non_finite(bad):
    frames = np.zeros((2, 4, 4))
    frames[1, 2, 2] = bad
    with pytest.raises(ValueError):
        ImageSequence(frames, (1.0, 1.0))
    fields = np.zeros((2, 4, 4, 2))
    fields[0, 1, 1, 0] = bad
    with pytest.raises(ValueError):
        DisplacementFieldSequence(fields, (1.0, 1.0))
    with pytest.raises(ValueError):
        FocusPoint((1.0, bad))


def test_image_sequence_invariants():
    with pytest.raises(ValueError):
        ImageSequence(np.zeros((1, 4, 4)), (1.0, 1.0))
    with pytest.raises(ValueError):
        ImageSequence(np.zeros((2, 4, 4)), (1.0,))
    with pytest.raises(ValueError):
        ImageSequence(np.ones((2, 4, 4)), (1.0, 1.0), intensity_range=(0.0, 0.5))
    seq = ImageSequence(np.linspace(0, 1, 32).reshape(2, 4, 4), (1.0, 1.0))
    assert seq.intensity_range == (0.0, 1.0)
    with pytest.raises(ValueError):
        seq.frames[0, 0, 0] = 5.0


def test_field_sequence_shape_checks():
    with pytest.raises(ValueError):
        DisplacementFieldSequence(np.zeros((2, 4, 4, 3)), (1.0, 1.0))
    f = DisplacementFieldSequence(np.arange(2 * 4 * 4 * 2.0).reshape(2, 4, 4, 2), (1.0, 1.0))
    assert f.T == 2 and f.dims == (4, 4) and f.ndim == 2
    assert np.array_equal(f.rolled(1).fields[1], f.fields[0])


def test_focus_point_bounds():
    FocusPoint((63.0, 63.0)).check_inside((64, 64))
    with pytest.raises(ValueError):
        FocusPoint((-1.0, 0.0)).check_inside((64, 64))
    with pytest.raises(ValueError):
        FocusPoint((1.0, 1.0), kind="bogus")


def test_config_validation():
    with pytest.raises(ValueError):
        RegistrationConfig(ssim_window=4)
    with pytest.raises(ValueError):
        RegistrationConfig(ssim_window=1)
    with pytest.raises(ValueError):
        RegistrationConfig(pyramid_levels=0)
    with pytest.raises(ValueError):
        DescriptorConfig(t_delta_alpha=2.5)
    with pytest.raises(ValueError):
        DescriptorConfig(t_norm_percentile=101)
    with pytest.raises(ValueError):
        DescriptorConfig(focus_kind="lv")


def test_view_presets():
    sax = DescriptorConfig.for_view("sax")
    four = DescriptorConfig.for_view("fourch")
    assert (sax.t_norm_percentile, sax.t_delta_alpha, sax.gaussian_sigma) == (50.0, 0.8, 2.0)
    assert (four.t_norm_percentile, four.t_delta_alpha, four.gaussian_sigma) == (50.0, 1.2, 2.0)
    assert DescriptorConfig.for_view("sax", gaussian_sigma=1.0).gaussian_sigma == 1.0
