import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pkn.image import (
    PSNR_CAP,
    NoiseModel,
    add_awgn,
    as_image,
    bilinear_resize,
    gaussian_blur,
    gaussian_taps,
    interp_matrix,
    load_image,
    pad_mirror,
    psnr,
    quantize,
    read_pfm,
    save_image,
    write_pfm,
)


def test_as_image_shapes():
    assert as_image(np.zeros((4, 5))).shape == (1, 4, 5)
    assert as_image(np.zeros((2, 4, 5))).shape == (2, 4, 5)
    with pytest.raises(ValueError):
        as_image(np.zeros(3))


def test_psnr_known_value_and_cap():
    a = np.zeros((1, 4, 4))
    b = np.full((1, 4, 4), 0.1)
    assert psnr(a, b) == pytest.approx(20.0)
    assert psnr(a, a) == PSNR_CAP


def test_psnr_shape_mismatch():
    with pytest.raises(ValueError):
        psnr(np.zeros((1, 4, 4)), np.zeros((1, 4, 5)))


def test_quantize_round_half_up():
    img = np.array([[[0.5 / 255, 1.5 / 255, 254.5 / 255]]])
    np.testing.assert_array_equal(quantize(img), [[[1, 2, 255]]])


@pytest.mark.parametrize("depth", [8, 16])
def test_png_round_trip(tmp_path, depth):
    rng = np.random.default_rng(0)
    levels = 2 ** depth - 1
    img = np.round(rng.uniform(0, 1, (3, 7, 9)) * levels) / levels
    save_image(img, tmp_path / "a.png", bit_depth=depth)
    np.testing.assert_array_equal(load_image(tmp_path / "a.png"), img)


def test_gray_png_loads_single_channel(tmp_path):
    img = np.linspace(0, 1, 20).reshape(1, 4, 5)
    save_image(img, tmp_path / "g.png")
    assert load_image(tmp_path / "g.png").shape == (1, 4, 5)


@pytest.mark.parametrize("channels", [1, 3])
def test_pfm_round_trip(tmp_path, channels):
    rng = np.random.default_rng(1)
    img = rng.normal(size=(channels, 5, 6)).astype(np.float32).astype(np.float64)
    write_pfm(tmp_path / "a.pfm", img)
    np.testing.assert_array_equal(read_pfm(tmp_path / "a.pfm"), img)


def test_pfm_rows_stored_bottom_up(tmp_path):
    img = np.arange(6.0).reshape(1, 2, 3)
    write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    payload = np.frombuffer(raw[-24:], dtype="<f4")
    np.testing.assert_array_equal(payload, [3, 4, 5, 0, 1, 2])


def test_load_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_image(tmp_path / "nope.png")


def test_awgn_seeded_and_scaled():
    clean = np.zeros((1, 200, 200))
    a = add_awgn(clean, NoiseModel(0.1, 3))
    b = add_awgn(clean, NoiseModel(0.1, 3))
    np.testing.assert_array_equal(a, b)
    assert a.std() == pytest.approx(0.1, rel=0.02)
    assert not np.array_equal(a, add_awgn(clean, NoiseModel(0.1, 4)))


def test_noise_model_rejects_negative():
    with pytest.raises(ValueError):
        NoiseModel(-0.1, 0)


def test_pad_mirror_reflects_without_repeat():
    img = np.tile([1.0, 2.0, 3.0], (3, 1))[None]
    np.testing.assert_array_equal(pad_mirror(img, 1)[0, 1], [2, 1, 2, 3, 2])
    with pytest.raises(ValueError):
        pad_mirror(img, 3)


def test_gaussian_taps_normalized_and_truncated():
    taps = gaussian_taps(1.0)
    assert taps.size == 7
    assert taps.sum() == pytest.approx(1.0, abs=1e-15)


def test_interp_matrix_rows_are_partitions_of_unity():
    m = interp_matrix(5, 13)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-15)


def test_resize_identity():
    img = np.random.default_rng(2).uniform(size=(1, 6, 7))
    np.testing.assert_array_equal(bilinear_resize(img, 7, 6), img)


@settings(max_examples=40, deadline=None)
@given(c=st.floats(-2, 2), h=st.integers(1, 9), w=st.integers(1, 9),
       oh=st.integers(1, 20), ow=st.integers(1, 20))
def test_resize_preserves_constants(c, h, w, oh, ow):
    out = bilinear_resize(np.full((1, h, w), c), ow, oh)
    assert np.all(out == c)


@settings(max_examples=30, deadline=None)
@given(c=st.floats(-2, 2), sigma=st.floats(0.3, 2.0))
def test_blur_preserves_constants(c, sigma):
    out = gaussian_blur(np.full((1, 12, 12), c), sigma)
    np.testing.assert_allclose(out, c, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_psnr_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(size=(2, 1, 5, 5))
    assert psnr(a, b) == psnr(b, a)
    assert psnr(a, a) == PSNR_CAP


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), oh=st.integers(1, 20), ow=st.integers(1, 20))
def test_resize_stays_within_input_bounds(seed, oh, ow):
    img = np.random.default_rng(seed).normal(size=(1, 5, 6))
    out = bilinear_resize(img, ow, oh)
    assert out.min() >= img.min() and out.max() <= img.max()
