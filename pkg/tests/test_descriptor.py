import csv

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cardiokey.core import DegenerateMaskError, DescriptorConfig, DisplacementFieldSequence, FocusPoint
from cardiokey.descriptor import (
    center_of_mass,
    combined_mask,
    compute_descriptor,
    direction_change_mask,
    direction_field,
    focus_explicit,
    focus_mse,
    focus_vol,
    gaussian_smooth_cyclic,
    magnitude_mask,
    nearest_rank,
)
from cardiokey.phantom import PhantomSpec, generate


def single_vector(dims, x, v, T=1):
    f = np.zeros((T,) + tuple(dims) + (len(dims),))
    f[(slice(None),) + tuple(x)] = v
    return DisplacementFieldSequence(f, (1.0,) * len(dims))


def radial_fields(dims, centre, amplitudes):
    grid = np.stack(np.meshgrid(*(np.arange(n, dtype=float) for n in dims), indexing="ij"), axis=-1)
    out = grid - np.asarray(centre)
    out /= np.linalg.norm(out, axis=-1, keepdims=True) + 1e-300
    return DisplacementFieldSequence(np.stack([a * out for a in amplitudes]), (1.0,) * len(dims))


def random_fields(seed, T=8, dims=(10, 12)):
    r = np.random.default_rng(seed)
    return DisplacementFieldSequence(r.normal(size=(T,) + dims + (len(dims),)), (1.0,) * len(dims))


# --------------------------------------------------------------------------- direction field

def test_direction_toward_focus_is_minus_one():
    f = single_vector((16, 16), (10, 10), (-1.0, -1.0))
    alpha = direction_field(f, FocusPoint((5.0, 5.0)))
    assert alpha[0, 10, 10] == pytest.approx(-1.0, abs=1e-15)


def test_direction_orthogonal_is_zero():
    f = single_vector((16, 16), (10, 10), (1.0, -1.0))
    assert direction_field(f, FocusPoint((5.0, 5.0)))[0, 10, 10] == pytest.approx(0.0, abs=1e-15)


def test_direction_hand_value():
    f = single_vector((8, 8), (0, 0), (2.0, 0.0))
    assert direction_field(f, FocusPoint((4.0, 3.0)))[0, 0, 0] == pytest.approx(-0.8, abs=1e-15)


def test_direction_zero_motion_and_focus_point():
    f = DisplacementFieldSequence(np.ones((1, 5, 5, 2)) * 1e-9, (1.0, 1.0))
    assert np.all(direction_field(f, FocusPoint((2.0, 2.0))) == 0.0)
    f = DisplacementFieldSequence(np.ones((1, 5, 5, 2)), (1.0, 1.0))
    assert direction_field(f, FocusPoint((2.0, 2.0)))[0, 2, 2] == 0.0


def test_direction_focus_outside():
    with pytest.raises(ValueError):
        direction_field(random_fields(0), FocusPoint((-1.0, 0.0)))


# --------------------------------------------------------------------------- masks

def test_nearest_rank():
    assert nearest_rank([1, 2, 3, 4], 50) == 2
    assert nearest_rank([4, 3, 2, 1], 0) == 1
    assert nearest_rank([1, 2, 3, 4], 100) == 4
    assert nearest_rank([5.0], 37) == 5.0


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=40), st.floats(0, 100))
def test_nearest_rank_against_numpy(values, p):
    expected = np.percentile(values, p, method="inverted_cdf") if p > 0 else min(values)
    assert nearest_rank(values, p) == expected


def _fields_with_average_magnitudes(mags):
    f = np.zeros((1, 1, len(mags), 2))
    f[0, 0, :, 0] = mags
    return DisplacementFieldSequence(f, (1.0, 1.0))


def test_magnitude_mask_examples():
    f = _fields_with_average_magnitudes([1.0, 2.0, 3.0, 4.0])
    assert magnitude_mask(f, 50)[0].tolist() == [False, True, True, True]
    assert magnitude_mask(f, 0).all()
    assert magnitude_mask(f, 100)[0].tolist() == [False, False, False, True]
    ties = _fields_with_average_magnitudes([1.0, 2.0, 2.0, 2.0])
    assert magnitude_mask(ties, 50)[0].tolist() == [False, True, True, True]


def test_direction_change_mask_examples():
    const = np.full((5, 3), 0.3)
    assert not direction_change_mask(const, 1e-9).any()
    swing = np.array([[-1.0], [1.0], [-1.0]])
    assert direction_change_mask(swing, 2.0).all()
    assert direction_change_mask(np.array([[-0.5], [0.4]]), 0.8).all()
    assert not direction_change_mask(np.array([[-0.5], [0.2]]), 0.8).any()


def test_degenerate_mask_names_filter():
    zero = DisplacementFieldSequence(np.zeros((4, 6, 6, 2)), (1.0, 1.0))
    with pytest.raises(DegenerateMaskError) as info:
        compute_descriptor(zero, DescriptorConfig(focus_kind="vol"))
    assert info.value.stage == "direction_change"
    with pytest.raises(DegenerateMaskError) as info:
        compute_descriptor(zero)
    assert info.value.stage == "direction_change"


# --------------------------------------------------------------------------- focus

def test_focus_vol_examples():
    assert focus_vol((64, 64)).coords == (31.5, 31.5)
    assert focus_vol((16, 64, 64)).coords == (7.5, 31.5, 31.5)
    assert focus_vol((1, 1)).coords == (0.0, 0.0)
    assert focus_vol((4, 4)).kind == "vol"


def test_focus_explicit_examples():
    assert focus_explicit((20.0, 31.0), (64, 64)).coords == (20.0, 31.0)
    assert focus_explicit((63, 63), (64, 64)).coords == (63.0, 63.0)
    assert focus_explicit((1, 2), (8, 8), kind="sept").kind == "sept"
    with pytest.raises(ValueError):
        focus_explicit((-1, 0), (64, 64))
    with pytest.raises(ValueError):
        focus_explicit((1, 2), (8, 8), kind="mse")


def test_center_of_mass_examples():
    m = np.zeros((8, 8), bool)
    m[3, 4] = True
    assert center_of_mass(m) == (3.0, 4.0)
    m[:] = False
    m[2, 2] = m[6, 6] = True
    assert center_of_mass(m) == (4.0, 4.0)
    sym = np.zeros((9, 9), bool)
    sym[2:7, 1:8] = True
    assert center_of_mass(sym) == (4.0, 4.0)


def test_focus_mse_recovers_phantom_centre():
    spec = PhantomSpec(dims=(48, 48), T=20, center=(25.0, 22.0))
    _, fields, _ = generate(spec)
    fp = focus_mse(fields, DescriptorConfig())
    assert fp.kind == "mse"
    assert np.allclose(fp.coords, spec.center, atol=0.5)


def test_focus_mse_symmetric_field():
    f = radial_fields((15, 15), (7.0, 7.0), [1.0, -1.0, 0.5, -0.5])
    assert focus_mse(f, DescriptorConfig()).coords == pytest.approx((7.0, 7.0))


# --------------------------------------------------------------------------- descriptor

def test_uniform_contraction_is_minus_one():
    # half the frames contract, half expand, so the direction filter keeps every point
    f = radial_fields((11, 11), (5.0, 5.0), [-1.0, -1.0, 2.0, 2.0])
    d = compute_descriptor(f, DescriptorConfig(focus_kind="vol", gaussian_sigma=0))
    assert np.allclose(d.alpha_raw, [-1, -1, 1, 1])


@given(st.integers(0, 2**31), st.sampled_from([0.1, 3.0, 100.0, 1e-3, 7.25]))
def test_scale_invariance(seed, s):
    f = random_fields(seed)
    cfg = DescriptorConfig(t_delta_alpha=0.5)
    try:
        base = compute_descriptor(f, cfg)
    except DegenerateMaskError:
        return
    scaled = compute_descriptor(f.scaled(s), cfg)
    assert np.array_equal(scaled.mask, base.mask)
    assert np.max(np.abs(scaled.alpha - base.alpha)) <= 1e-12
    assert np.max(np.abs(scaled.alpha_raw - base.alpha_raw)) <= 1e-12


@given(st.integers(0, 2**31), st.integers(-20, 20))
def test_cyclic_shift_equivariance(seed, k):
    f = random_fields(seed, T=9)
    cfg = DescriptorConfig(focus_kind="vol", t_delta_alpha=0.5)
    base = compute_descriptor(f, cfg)
    rolled = compute_descriptor(f.rolled(k), cfg)
    assert np.array_equal(rolled.alpha_raw, np.roll(base.alpha_raw, k))
    assert np.array_equal(rolled.alpha, np.roll(base.alpha, k))


def test_mirror_invariance(rng):
    # mirroring the grid, the x components and the focus permutes points only
    f = rng.normal(size=(6, 9, 10, 2))
    m = f[:, :, ::-1].copy()
    m[..., 1] *= -1
    cfg = DescriptorConfig(t_delta_alpha=0.5)
    a = compute_descriptor(DisplacementFieldSequence(f, (1, 1)), cfg, FocusPoint((4.0, 3.0)))
    b = compute_descriptor(DisplacementFieldSequence(m, (1, 1)), cfg, FocusPoint((4.0, 6.0)))
    assert np.allclose(a.alpha, b.alpha, atol=1e-12)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=50), st.floats(0, 6))
def test_smoothing_bounds(x, sigma):
    y = gaussian_smooth_cyclic(np.array(x), sigma)
    assert np.all(y >= min(x) - 1e-12) and np.all(y <= max(x) + 1e-12)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=50), st.floats(0.1, 6), st.integers(-60, 60))
def test_smoothing_shift_equivariant(x, sigma, k):
    x = np.array(x)
    assert np.array_equal(gaussian_smooth_cyclic(np.roll(x, k), sigma), np.roll(gaussian_smooth_cyclic(x, sigma), k))


def test_smoothing_constant_and_mass():
    assert np.allclose(gaussian_smooth_cyclic(np.full(7, 0.3), 2.0), 0.3)
    x = np.zeros(40)
    x[5] = 1.0
    y = gaussian_smooth_cyclic(x, 2.0)
    assert y.sum() == pytest.approx(1.0)
    assert np.argmax(y) == 5


def test_phantom_alpha_sign_matches_schedule():
    spec = PhantomSpec(dims=(48, 48), T=24)
    _, fields, _ = generate(spec)
    d = compute_descriptor(fields)
    a = np.asarray(spec.schedule)
    sel = np.abs(a) > 0.01
    assert np.mean(np.sign(d.alpha[sel]) == np.sign(a[sel])) >= 0.9
    assert np.all(np.abs(d.alpha) <= 1.0)


def test_descriptor_csv_and_normalisation(tmp_path):
    spec = PhantomSpec(dims=(32, 32), T=12)
    _, fields, _ = generate(spec)
    d = compute_descriptor(fields)
    norm = d.magnitude_normalized
    assert norm.min() == 0.0 and norm.max() == 1.0
    d.write_csv(tmp_path / "d.csv")
    with open(tmp_path / "d.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["frame", "alpha_raw", "alpha", "magnitude", "magnitude_normalized"]
    assert [float(r["alpha"]) for r in rows] == d.alpha.tolist()


def test_combined_mask_is_and(rng):
    f = DisplacementFieldSequence(rng.normal(size=(6, 8, 8, 2)), (1, 1))
    fp = FocusPoint((3.5, 3.5))
    cfg = DescriptorConfig(t_delta_alpha=1.0)
    m = combined_mask(f, fp, cfg)
    expected = magnitude_mask(f, 50) & direction_change_mask(direction_field(f, fp), 1.0)
    assert np.array_equal(m, expected)
