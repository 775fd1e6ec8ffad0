import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tssg.stexdecomp import (
    DecompositionConfig,
    decompose,
    dyadic_grid,
    gate,
    interval_gradient,
    rescale_gradients,
    rescale_weight,
    rescale_weight_color,
)


def interval_gradient_loop(sig, r):
    """Windowed one-sided means, written out sample by sample."""
    sigma = r / 2.0
    out = []
    n = len(sig)
    for p in range(n - 1):
        rn = rd = ln = ld = 0.0
        for d in range(r + 1):
            wt = math.exp(-d * d / (2 * sigma * sigma))
            if p + 1 + d < n:
                rn += wt * sig[p + 1 + d]
                rd += wt
            if p - d >= 0:
                ln += wt * sig[p - d]
                ld += wt
        out.append(rn / rd - ln / ld)
    return np.array(out)


def ramp_checkerboard(n=64, amp=0.1):
    yy, xx = np.mgrid[0:n, 0:n]
    ramp = 0.2 + 0.6 * xx / (n - 1)
    return ramp, ramp + amp * np.where((yy + xx) % 2 == 0, 1.0, -1.0)


@pytest.mark.parametrize("r", [1, 2, 3, 4, 7])
@pytest.mark.parametrize("length", [2, 3, 5, 30])
def test_interval_gradient_matches_loop(r, length):
    sig = np.random.default_rng(r * 100 + length).uniform(0, 1, length)
    np.testing.assert_allclose(interval_gradient(sig, r), interval_gradient_loop(sig, r), rtol=0, atol=1e-14)


def test_interval_gradient_of_ramp_is_positive():
    assert np.all(interval_gradient(np.linspace(0, 1, 40), 3) > 0)
    assert np.all(interval_gradient(np.linspace(0, 1, 40) ** 3, 3) > 0)


def test_interval_gradient_of_constant_is_zero():
    assert np.all(interval_gradient(np.full(12, 0.3), 3) == 0)


def test_interval_gradient_damps_period_two_texture():
    sig = np.array([1.0, -1.0] * 16)
    ig = interval_gradient(sig, 3)
    g = np.diff(sig)
    interior = slice(3, len(g) - 3)
    assert np.all(np.abs(ig[interior]) < np.abs(g[interior]))
    # the loop oracle agrees on the magnitude the filter sees
    np.testing.assert_allclose(ig, interval_gradient_loop(sig, 3), atol=1e-14)


@pytest.mark.parametrize("r", [0, -1, 1.5])
def test_interval_gradient_rejects_bad_radius(r):
    with pytest.raises(ValueError):
        interval_gradient(np.arange(5.0), r)


def test_interval_gradient_rejects_short_signal():
    with pytest.raises(ValueError):
        interval_gradient(np.array([1.0]), 2)


def test_rescale_weight_arithmetic():
    # (0.1 + 1e-4) / (0.5 + 1e-4)
    assert rescale_weight(0.5, 0.1, 1e-4) == pytest.approx(0.20015996800639872, abs=1e-15)
    assert rescale_weight(-0.5, -0.1, 1e-4) == pytest.approx(0.20015996800639872, abs=1e-15)


def test_rescale_weight_clamped_at_one():
    assert rescale_weight(0.1, 0.4, 1e-4) == 1.0
    assert gate(0.1, 0.4, rescale_weight(0.1, 0.4, 1e-4)) == 0.1


def test_gate_zeroes_sign_mismatch():
    assert gate(0.3, -0.2, 0.5) == 0.0
    assert gate(-0.3, -0.2, 0.5) == -0.15


def test_rescale_gradients_sign_mismatch_gives_zero():
    # a single spike: its falling edge disagrees with the window trend
    sig = np.array([0.0, 0.0, 0.0, 1.0, 0.9, 0.9, 0.9, 0.9])
    g = np.diff(sig)
    ig = interval_gradient(sig, 2)
    out = rescale_gradients(sig, 2)
    mismatch = np.sign(g) != np.sign(ig)
    assert mismatch.any()
    assert np.all(out[mismatch] == 0.0)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(2, 40), elements=st.floats(0, 1)), st.integers(1, 5))
def test_rescaled_gradient_never_exceeds_original(sig, r):
    out = rescale_gradients(sig, r)
    g = np.diff(sig)
    assert np.all(np.abs(out) <= np.abs(g))
    w = rescale_weight(g, interval_gradient(sig, r), 1e-4)
    assert np.all((w >= 0) & (w <= 1))


def test_color_weight_identical_channels_equals_gray():
    rng = np.random.default_rng(0)
    g = rng.normal(0, 0.3, 50)
    ig = rng.normal(0, 0.3, 50)
    wc = rescale_weight_color(np.stack([g] * 3), np.stack([ig] * 3), 1e-4)
    assert np.max(np.abs(wc - rescale_weight(g, ig, 1e-4))) < 1e-12


def test_color_weight_flat_channel():
    grads = np.array([0.0, 0.5, 0.3])
    igrads = np.array([0.0, 0.1, 0.06])
    # (0.16 + 3e-4) / (0.8 + 3e-4)
    assert rescale_weight_color(grads, igrads, 1e-4) == pytest.approx(0.16030 / 0.80030, abs=1e-15)


def test_color_weight_constant_channels_is_one():
    assert rescale_weight_color(np.zeros(3), np.zeros(3), 1e-4) == 1.0


def test_color_weight_rejects_grayscale():
    with pytest.raises(ValueError):
        rescale_weight_color(np.zeros(5), np.zeros(5), 1e-4)


def test_decompose_constant_image():
    img = np.full((16, 20), 0.37)
    res = decompose(img)
    assert np.array_equal(res.structure, img)
    assert np.all(res.texture == 0)


def test_decompose_removes_checkerboard():
    ramp, img = ramp_checkerboard()
    res = decompose(img)
    assert np.abs(res.structure - ramp).sum() < np.abs(img - ramp).sum()
    # stronger than the bare inequality: most of the texture is gone
    assert np.abs(res.structure - ramp).sum() < 0.2 * np.abs(img - ramp).sum()


def test_decompose_idempotent_in_the_limit():
    _, img = ramp_checkerboard()
    first = decompose(img)
    second = decompose(first.structure)
    assert np.abs(second.texture).sum() <= 0.1 * np.abs(first.texture).sum()


def test_decompose_weights_stay_in_unit_interval():
    seen = []
    _, img = ramp_checkerboard(32)
    cfg = DecompositionConfig(iterations=3)
    decompose(img, cfg, on_weights=lambda w: seen.append((w.min(), w.max(), w.size)))
    # rows and columns, every iteration
    assert len(seen) == 2 * cfg.iterations
    assert all(lo >= 0 and hi <= 1 for lo, hi, _ in seen)


@settings(max_examples=25, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(4, 24), st.integers(4, 24)), elements=st.floats(0, 1, width=32)))
def test_structure_plus_texture_is_exact_float32(img):
    res = decompose(img)
    assert np.max(np.abs(res.structure + res.texture - img.astype(np.float64))) == 0.0
    assert res.structure.min() >= 0 and res.structure.max() <= 1


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(4, 16), st.integers(4, 16)), elements=st.floats(0, 1)))
def test_structure_plus_texture_is_exact_float64(img):
    res = decompose(img)
    assert np.max(np.abs(res.structure + res.texture - img)) == 0.0
    assert res.structure.min() >= 0 and res.structure.max() <= 1


@pytest.mark.parametrize("levels", [255, 65535])
def test_structure_plus_texture_is_exact_for_rasters(levels):
    rng = np.random.default_rng(levels)
    img = rng.integers(0, levels + 1, (24, 24)) / levels
    res = decompose(img)
    assert np.max(np.abs(res.structure + res.texture - img)) == 0.0


def test_color_decomposition_matches_gray_on_identical_channels():
    _, img = ramp_checkerboard(24)
    gray = decompose(img)
    color = decompose(np.repeat(img[..., None], 3, axis=2))
    for c in range(3):
        assert np.max(np.abs(color.structure[..., c] - gray.structure)) < 1e-12


def test_decompose_rejects_small_or_bad_input():
    with pytest.raises(ValueError):
        decompose(np.zeros((3, 8)))
    with pytest.raises(ValueError):
        decompose(np.zeros((8, 8, 2)))
    with pytest.raises(ValueError):
        decompose(np.full((8, 8), np.nan))


@pytest.mark.parametrize(
    "kwargs",
    [dict(window_radius=0), dict(eps_s=0.0), dict(smoothing_eps=1e-3), dict(smoothing_eps=5e-5), dict(iterations=0)],
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        DecompositionConfig(**kwargs)


def test_config_band_edges_accepted():
    DecompositionConfig(smoothing_eps=0.01**2)
    DecompositionConfig(smoothing_eps=0.03**2)


def test_dyadic_grid():
    assert dyadic_grid(np.array([0.5, 0.25, 0.75])) == 0.25
    assert dyadic_grid(np.array([3.0, 1.0])) == 1.0
    assert dyadic_grid(np.zeros(4)) == 1.0
    assert dyadic_grid(np.array([1 / 255])) <= 2.0**-53
