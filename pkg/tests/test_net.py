import numpy as np
import pytest

from pkn.image import save_image
from pkn.kernels import Family, KernelSpec
from pkn.net import (
    PARAM_LIMIT,
    Checkpoint,
    CheckpointError,
    Conv2d,
    TrainConfig,
    build_network,
    list_images,
    load_checkpoint,
    network_grad_check,
    save_checkpoint,
    train,
)

NLM = KernelSpec(Family.NLM)
ANISO = KernelSpec(Family.ANISO_GAUSSIAN)


def expected_params(p):
    # (in * 9 + 1) * out per 3x3 layer, then a 1x1 head
    layers = [(2, 16), (16, 24), (24, 24), (24, 16)]
    return sum((i * 9 + 1) * o for i, o in layers) + (16 + 1) * p


@pytest.mark.parametrize("family", list(Family), ids=lambda f: f.value)
def test_param_count(family):
    spec = KernelSpec(family)
    net = build_network(spec)
    assert net.param_count() == expected_params(spec.param_channels)
    assert net.param_count() < PARAM_LIMIT


def test_param_limit_enforced():
    with pytest.raises(ValueError):
        build_network(NLM, widths=(64, 64, 64, 64))


def direct_conv(x, w, b, stride):
    """Loop reference for a zero-padded 'same' convolution."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho, wo = (h - 1) // stride + 1, (wd - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + k, j * stride:j * stride + k]
            out[:, :, i, j] = np.einsum("ncij,ocij->no", patch, w) + b
    return out


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_forward_and_grads_match_direct(stride):
    rng = np.random.default_rng(stride)
    conv = Conv2d(3, 4, 3, stride, rng, dtype=np.float64)
    conv.bias[:] = rng.normal(size=4)
    x = rng.normal(size=(2, 3, 7, 6))
    out = conv.forward(x)
    np.testing.assert_allclose(out, direct_conv(x, conv.weight, conv.bias, stride), atol=1e-12)
    g = rng.normal(size=out.shape)
    dx = conv.backward(g)
    # loss = sum(out * g); finite differences on a few inputs and weights
    h = 1e-6
    for idx in [(0, 0, 0, 0), (1, 2, 6, 5), (0, 1, 3, 2)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        num = (np.sum(direct_conv(xp, conv.weight, conv.bias, stride) * g)
               - np.sum(direct_conv(xm, conv.weight, conv.bias, stride) * g)) / (2 * h)
        assert dx[idx] == pytest.approx(num, rel=1e-6, abs=1e-8)
    for idx in [(0, 0, 0, 0), (3, 2, 1, 2)]:
        wp, wm = conv.weight.copy(), conv.weight.copy()
        wp[idx] += h
        wm[idx] -= h
        num = (np.sum(direct_conv(x, wp, conv.bias, stride) * g)
               - np.sum(direct_conv(x, wm, conv.bias, stride) * g)) / (2 * h)
        assert conv.grad_weight[idx] == pytest.approx(num, rel=1e-6, abs=1e-8)
    np.testing.assert_allclose(conv.grad_bias, g.sum(axis=(0, 2, 3)))


def test_forward_shapes_and_ranges():
    net = build_network(ANISO)
    pmap = net.forward(np.random.default_rng(0).uniform(size=(20, 17)), 0.1)
    assert pmap.data.shape == (3, 10, 9)
    assert pmap.within_ranges()
    assert net.output_shape(20, 17) == (10, 9)


def test_forward_rejects_tiny_and_negative_noise():
    net = build_network(NLM)
    with pytest.raises(ValueError):
        net.forward(np.zeros((4, 4)), 0.1)
    with pytest.raises(ValueError):
        net.forward(np.zeros((8, 8)), -0.1)


def test_seeded_init_is_deterministic():
    a, b = build_network(NLM, seed=3), build_network(NLM, seed=3)
    assert all(np.array_equal(p, q) for p, q in zip(a.params, b.params))
    c = build_network(NLM, seed=4)
    assert not np.array_equal(a.params[0], c.params[0])


def test_weights_are_float32():
    assert all(p.dtype == np.float32 for p in build_network(NLM).params)


def test_checkpoint_round_trip_bit_identical(tmp_path):
    net = build_network(ANISO, seed=7)
    save_checkpoint(Checkpoint(net, ANISO, {"note": "x"}), tmp_path / "c.pkn")
    back = load_checkpoint(tmp_path / "c.pkn", ANISO)
    img = np.random.default_rng(1).uniform(size=(16, 16))
    assert np.array_equal(net.forward(img, 0.1).data, back.network.forward(img, 0.1).data)
    assert back.metadata["note"] == "x"


def test_checkpoint_spec_mismatch(tmp_path):
    save_checkpoint(Checkpoint(build_network(NLM), NLM, {}), tmp_path / "c.pkn")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.pkn", ANISO)


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "c.pkn"
    save_checkpoint(Checkpoint(build_network(NLM), NLM, {}), path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    path.write_bytes(b"NOTACKPT" + bytes(raw[8:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


@pytest.mark.parametrize("family", list(Family), ids=lambda f: f.value)
def test_network_grad_check(family):
    spec = KernelSpec(family)
    res = network_grad_check(spec, trials=4, seed=2)
    assert res["passed"], res
    assert not network_grad_check(spec, trials=2, seed=2, corrupt=1.01)["passed"]


def make_dataset(path, n=10, size=40):
    rng = np.random.default_rng(0)
    y, x = np.mgrid[0:size, 0:size] / size
    for i in range(n):
        f = rng.uniform(2, 8, size=2)
        img = 0.5 + 0.3 * np.sin(f[0] * x + i) * np.cos(f[1] * y) + 0.2 * (x + y > 1)
        save_image(img[None], path / f"img_{i:02d}.png")
    return path


@pytest.mark.parametrize("family", [Family.NLM, Family.POLYBLUR], ids=lambda f: f.value)
def test_training_smoke_descends(tmp_path, family):
    spec = KernelSpec(family)
    cfg = TrainConfig(dataset_dir=str(make_dataset(tmp_path)), crops_per_epoch=80, crop_size=24,
                      batch=4, lr=2e-3, seed=0)
    ck = train(build_network(spec, seed=0), spec, cfg)
    h = ck.metadata["loss_history"]
    assert len(h) == cfg.steps == 20
    assert np.mean(h[-5:]) < np.mean(h[:5])
    assert ck.metadata["images"] == 10


def test_training_is_deterministic(tmp_path):
    cfg = TrainConfig(dataset_dir=str(make_dataset(tmp_path, 4)), crops_per_epoch=8, crop_size=16,
                      batch=4, seed=1)
    a = train(build_network(NLM, seed=1), NLM, cfg)
    b = train(build_network(NLM, seed=1), NLM, cfg)
    assert all(np.array_equal(p, q) for p, q in zip(a.network.params, b.network.params))


def test_list_images_empty(tmp_path):
    with pytest.raises((FileNotFoundError, ValueError)):
        list_images(tmp_path / "missing")
