import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pkn.kernels import (
    RHO_LIMIT,
    Family,
    KernelSpec,
    ParameterDomainError,
    aniso_gaussian_weight_grad,
    aniso_gaussian_weights,
    covariance,
    iso_gaussian_weight_grad,
    iso_gaussian_weights,
    nlm_weight_grad,
    nlm_weights,
    polyblur_apply,
    precision,
    remap_sigmoid,
    remap_sigmoid_grad,
)

ISO = KernelSpec(Family.ISO_GAUSSIAN)
ANISO = KernelSpec(Family.ANISO_GAUSSIAN)
NLM = KernelSpec(Family.NLM)
POLY = KernelSpec(Family.POLYBLUR)

sigmas = st.floats(0.05, 4.0)
rhos = st.floats(-0.99, 0.99)


def test_spec_defaults_and_round_trip():
    assert NLM.param_channels == 1 and ANISO.param_channels == 3 and POLY.param_channels == 3
    assert NLM.window_size == 5 and NLM.margin == 3
    assert KernelSpec.from_dict(ANISO.to_dict()) == ANISO
    assert KernelSpec.from_name("aniso") == ANISO


def test_spec_rejects_bad_values():
    with pytest.raises(ValueError):
        KernelSpec(window_radius=0)
    with pytest.raises(ValueError):
        KernelSpec(Family.ISO_GAUSSIAN, remap_ranges=((0.0, 1.0), (0.0, 1.0)))


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-60, 60), lo=st.floats(-5, 0), span=st.floats(0.1, 10))
def test_sigmoid_bounded_and_grad(x, lo, span):
    hi = lo + span
    y = remap_sigmoid(x, lo, hi)
    assert lo <= y <= hi
    h = 1e-5
    num = (remap_sigmoid(x + h, lo, hi) - remap_sigmoid(x - h, lo, hi)) / (2 * h)
    assert remap_sigmoid_grad(x, lo, hi) == pytest.approx(num, rel=1e-5, abs=1e-9)


def test_sigmoid_midpoint_and_extremes():
    assert remap_sigmoid(0.0, 0.0, 4.0) == 2.0
    assert np.isfinite(remap_sigmoid(np.array([-1e4, 1e4]), 0.0, 4.0)).all()


@settings(max_examples=40, deadline=None)
@given(s1=sigmas, s2=sigmas, rho=rhos)
def test_aniso_weights_normalized_nonnegative(s1, s2, rho):
    w = aniso_gaussian_weights((s1, s2, rho), ANISO).weights
    assert abs(w.sum() - 1.0) < 1e-6
    assert (w >= 0).all()


@settings(max_examples=40, deadline=None)
@given(s=sigmas)
def test_aniso_reduces_to_iso(s):
    a = aniso_gaussian_weights((s, s, 0.0), ANISO).weights
    b = iso_gaussian_weights((s,), ISO).weights
    assert np.abs(a - b).max() < 1e-9


def test_iso_neighbor_ratios():
    # sigma 1: a unit step costs exp(-1/2), a diagonal step exp(-1)
    w = iso_gaussian_weights((1.0,), ISO).weights
    assert w[2, 2] / w[2, 3] == pytest.approx(math.exp(0.5))
    assert w[2, 2] / w[3, 3] == pytest.approx(math.exp(1.0))


def test_precision_worked_example():
    # sigma1 = 1, sigma2 = 2, rho = 0.5 -> inverse of [[1, 1], [1, 4]]
    np.testing.assert_allclose(precision((1.0, 2.0, 0.5)), np.array([[4, -1], [-1, 1]]) / 3.0)
    np.testing.assert_allclose(precision((1.0, 2.0, 0.5)) @ covariance((1.0, 2.0, 0.5)), np.eye(2),
                               atol=1e-14)


def test_aniso_orientation():
    # positive correlation puts more weight on the main diagonal than the anti-diagonal
    w = aniso_gaussian_weights((1.0, 1.0, 0.8), ANISO).weights
    assert w[3, 3] > w[3, 1]


def test_aniso_domain():
    with pytest.raises(ParameterDomainError):
        aniso_gaussian_weights((1.0, 1.0, 1.5), ANISO)
    with pytest.raises(ParameterDomainError):
        aniso_gaussian_weights((np.nan, 1.0, 0.0), ANISO)
    w = aniso_gaussian_weights((1.0, 1.0, 1.0), ANISO).weights
    assert np.isfinite(w).all()
    assert covariance((1.0, 1.0, 1.0))[0, 1] == pytest.approx(RHO_LIMIT)


def test_iso_zero_sigma_is_delta():
    w = iso_gaussian_weights((0.0,), ISO).weights
    assert w[2, 2] == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.floats(0.05, 4.0))
def test_nlm_weights_normalized_nonnegative(seed, m):
    win = np.random.default_rng(seed).uniform(size=(7, 7))
    w = nlm_weights(win, (m,), 0.1, NLM).weights
    assert abs(w.sum() - 1.0) < 1e-6 and (w >= 0).all()


def test_nlm_window_shape_checked():
    with pytest.raises(ValueError):
        nlm_weights(np.zeros((5, 5)), (1.0,), 0.1, NLM)


def test_nlm_patch0_matches_bilateral_formula():
    rng = np.random.default_rng(5)
    spec = KernelSpec(Family.NLM, patch_radius=0)
    win = rng.uniform(size=(5, 5))
    w = nlm_weights(win, (1.3,), 0.1, spec).weights
    sig = 0.13
    dy, dx = np.mgrid[-2:3, -2:3]
    ref = np.exp(-(dx ** 2 + dy ** 2) / (2 * 1.5 ** 2)) * np.exp(-(win - win[2, 2]) ** 2 / (2 * sig ** 2))
    np.testing.assert_allclose(w, ref / ref.sum(), atol=1e-15)


def _fd(fn, x, h=1e-6):
    return (fn(x + h) - fn(x - h)) / (2 * h)


@settings(max_examples=30, deadline=None)
@given(s1=st.floats(0.3, 3.0), s2=st.floats(0.3, 3.0), rho=st.floats(-0.9, 0.9))
def test_aniso_weight_grad_matches_fd(s1, s2, rho):
    g = aniso_gaussian_weight_grad((s1, s2, rho), ANISO)
    p = np.array([s1, s2, rho])
    for i in range(3):
        def f(t, i=i):
            q = p.copy()
            q[i] = t
            return aniso_gaussian_weights(q, ANISO).weights
        np.testing.assert_allclose(g[i], _fd(f, p[i]), atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(s=st.floats(0.3, 3.0))
def test_iso_weight_grad_matches_fd(s):
    g = iso_gaussian_weight_grad((s,), ISO)
    np.testing.assert_allclose(g, _fd(lambda t: iso_gaussian_weights((t,), ISO).weights, s), atol=1e-7)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.floats(0.3, 3.0))
def test_nlm_weight_grad_matches_fd(seed, m):
    win = np.random.default_rng(seed).uniform(size=(7, 7))
    g = nlm_weight_grad(win, (m,), 0.1, NLM)
    num = _fd(lambda t: nlm_weights(win, (t,), 0.1, NLM).weights, m)
    np.testing.assert_allclose(g, num, atol=1e-6)


def test_grads_zero_on_clamp():
    assert not iso_gaussian_weight_grad((0.0,), ISO).any()
    assert not aniso_gaussian_weight_grad((1.0, 1.0, 1.0), ANISO)[2].any()
    win = np.random.default_rng(0).uniform(size=(7, 7))
    assert not nlm_weight_grad(win, (0.0,), 0.1, NLM).any()


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-1, 2), coeffs=st.lists(st.floats(-4, 4), min_size=3, max_size=3))
def test_polyblur_preserves_constants(c, coeffs):
    img = np.full((1, 12, 12), c)
    cmap = np.broadcast_to(np.array(coeffs)[:, None, None], (3, 12, 12))
    np.testing.assert_allclose(polyblur_apply(img, cmap, POLY), c, atol=1e-6)


def test_polyblur_zero_coeffs_identity():
    img = np.random.default_rng(0).uniform(size=(2, 10, 10))
    np.testing.assert_array_equal(polyblur_apply(img, np.zeros((3, 10, 10)), POLY), img)


def test_polyblur_sharpens_blurred_edge():
    from pkn.image import gaussian_blur, mse

    x = np.zeros((1, 16, 16))
    x[:, :, 8:] = 1.0
    blurred = gaussian_blur(x, 1.0)
    # first-order inverse: I + (I - BI) ~ 2I - BI
    cmap = np.broadcast_to(np.array([-1.0, 0.0, 0.0])[:, None, None], (3, 16, 16))
    assert mse(polyblur_apply(blurred, cmap, POLY), x) < mse(blurred, x)


def test_polyblur_map_shape_checked():
    with pytest.raises(ValueError):
        polyblur_apply(np.zeros((1, 8, 8)), np.zeros((3, 4, 4)), POLY)
