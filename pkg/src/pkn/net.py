"""Tiny convolutional parameter predictor, written directly in numpy.

Input is two planes (noisy signal, per-pixel noise std); output is a
half-resolution raw map, squashed per channel by the spec's sigmoid
remap. Layers compute in their weights' dtype: float32 for real
networks, float64 for gradient probes. Kernels always run in float64.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .filtering import ParamMap
from .image import as_image, gaussian_blur, load_image
from .kernels import Family, KernelSpec, remap_channels, remap_channels_grad
from .optim import Adam, LossModel, NonFiniteLossError, relative_error

log = logging.getLogger(__name__)

BODY_WIDTHS = (16, 24, 24, 16)
BODY_STRIDES = (2, 1, 1, 1)
MIN_INPUT = 8
PARAM_LIMIT = 20_000


class Conv2d:
    """Zero-padded 'same' convolution with optional stride, via im2col."""

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, rng=None, dtype=np.float32):
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        rng = rng if rng is not None else np.random.default_rng(0)
        bound = math.sqrt(6.0 / (in_ch * kernel * kernel))  # He uniform
        self.weight = rng.uniform(-bound, bound, (out_ch, in_ch, kernel, kernel)).astype(dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self.grad_weight = np.zeros(self.weight.shape)
        self.grad_bias = np.zeros(self.bias.shape)
        self._cache = None

    @property
    def params(self):
        return [self.weight, self.bias]

    @property
    def grads(self):
        return [self.grad_weight, self.grad_bias]

    def out_size(self, n: int) -> int:
        return (n - 1) // self.stride + 1

    def forward(self, x):
        """(N, C, H, W) -> (N, O, Ho, Wo), computed in the weights' dtype."""
        k, s, p = self.kernel, self.stride, self.kernel // 2
        n, c, h, w = x.shape
        ho, wo = self.out_size(h), self.out_size(w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        cols = np.empty((n, ho, wo, c, k, k), dtype=self.weight.dtype)
        for i in range(k):
            for j in range(k):
                cols[..., i, j] = xp[:, :, i:i + s * ho:s, j:j + s * wo:s].transpose(0, 2, 3, 1)
        cols = cols.reshape(n * ho * wo, c * k * k)
        self._cache = (x.shape, cols)
        out = cols @ self.weight.reshape(self.out_ch, -1).T + self.bias
        return out.reshape(n, ho, wo, self.out_ch).transpose(0, 3, 1, 2)

    def backward(self, grad):
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        shape, cols = self._cache
        n, c, h, w = shape
        k, s, p = self.kernel, self.stride, self.kernel // 2
        ho, wo = grad.shape[2], grad.shape[3]
        gmat = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_ch).astype(cols.dtype)
        self.grad_weight[...] = (gmat.T @ cols).reshape(self.weight.shape)
        self.grad_bias[...] = gmat.sum(axis=0)
        dcols = (gmat @ self.weight.reshape(self.out_ch, -1)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=cols.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w] if p else dxp


class Network:
    """Stack of 3x3 conv + ReLU blocks followed by a 1x1 head and sigmoid remap."""

    def __init__(self, spec: KernelSpec, seed: int = 0, widths=BODY_WIDTHS,
                 strides=BODY_STRIDES, dtype=np.float32):
        if len(widths) != len(strides):
            raise ValueError("one stride per body layer")
        self.spec = spec
        self.seed = seed
        self.widths = tuple(widths)
        self.strides = tuple(strides)
        rng = np.random.default_rng(seed)
        self.layers = []
        in_ch = 2
        for width, stride in zip(self.widths, self.strides):
            self.layers.append(Conv2d(in_ch, width, 3, stride, rng, dtype))
            in_ch = width
        self.head = Conv2d(in_ch, spec.param_channels, 1, 1, rng, dtype)
        self.layers.append(self.head)
        self._acts = None
        self._raw = None

    @property
    def params(self):
        return [p for layer in self.layers for p in layer.params]

    @property
    def grads(self):
        return [g for layer in self.layers for g in layer.grads]

    def param_count(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def downsample(self) -> int:
        return int(np.prod(self.strides))

    def output_shape(self, height: int, width: int):
        for layer in self.layers:
            height, width = layer.out_size(height), layer.out_size(width)
        return height, width

    def describe(self) -> dict:
        return {"widths": list(self.widths), "strides": list(self.strides),
                "in_channels": 2, "out_channels": self.spec.param_channels,
                "dtype": np.dtype(self.layers[0].weight.dtype).name}

    def forward_raw(self, x) -> np.ndarray:
        """(N, 2, H, W) inputs -> (N, P, h, w) raw head outputs; caches activations."""
        x = np.asarray(x, dtype=self.layers[0].weight.dtype)
        if x.ndim != 4 or x.shape[1] != 2:
            raise ValueError(f"expected (N, 2, H, W) input, got {x.shape}")
        if min(x.shape[2:]) < MIN_INPUT:
            raise ValueError(f"input must be at least {MIN_INPUT}x{MIN_INPUT}")
        masks = []
        for layer in self.layers[:-1]:
            x = layer.forward(x)
            mask = x > 0
            masks.append(mask)
            x = x * mask
        raw = self.head.forward(x).astype(np.float64)
        self._acts = masks
        self._raw = raw
        return raw

    def forward_batch(self, x) -> np.ndarray:
        raw = self.forward_raw(x)
        return np.stack([remap_channels(r, self.spec) for r in raw])

    def forward(self, img_channel, noise_sigma) -> ParamMap:
        """Predict a parameter map for one image channel.

        ``noise_sigma`` is a scalar or a per-pixel std map of the same size.
        """
        plane = np.asarray(img_channel, dtype=np.float64)
        if plane.ndim == 3:
            if plane.shape[0] != 1:
                raise ValueError("forward takes a single channel")
            plane = plane[0]
        noise = np.broadcast_to(np.asarray(noise_sigma, dtype=np.float64), plane.shape)
        if np.any(noise < 0):
            raise ValueError("noise sigma must be >= 0")
        values = self.forward_batch(np.stack([plane, noise])[None])[0]
        return ParamMap.for_spec(values, self.spec, scale_hint=self.downsample)

    def backward(self, grad_map) -> list:
        """Backpropagate d(loss)/d(bounded map values) to every weight.

        Returns the weight gradients in :attr:`params` order.
        """
        if self._raw is None:
            raise RuntimeError("backward called before forward")
        g = np.asarray(grad_map, dtype=np.float64)
        g = g * np.stack([remap_channels_grad(r, self.spec) for r in self._raw])
        g = self.head.backward(g.astype(self.head.weight.dtype))
        for layer, mask in zip(reversed(self.layers[:-1]), reversed(self._acts)):
            g = layer.backward(g * mask)
        return self.grads

    def zero_weights(self) -> None:
        for p in self.params:
            p[...] = 0


def build_network(spec: KernelSpec, seed: int = 0, **kwargs) -> Network:
    net = Network(spec, seed, **kwargs)
    if net.param_count() >= PARAM_LIMIT:
        raise ValueError(f"network has {net.param_count()} parameters, limit is {PARAM_LIMIT}")
    return net


# -- checkpoints -------------------------------------------------------------

MAGIC = b"PKNCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    network: Network
    spec: KernelSpec
    metadata: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Write magic, version, then length-prefixed arch/spec/weights/metadata blocks and a CRC."""
    net = ckpt.network
    weights = b"".join(np.asarray(p, dtype="<f4").tobytes() for p in net.params)
    blocks = [
        json.dumps(net.describe(), sort_keys=True).encode(),
        json.dumps(ckpt.spec.to_dict(), sort_keys=True).encode(),
        weights,
        json.dumps(ckpt.metadata, sort_keys=True).encode(),
    ]
    body = MAGIC + struct.pack("<I", FORMAT_VERSION)
    for b in blocks:
        body += struct.pack("<Q", len(b)) + b
    Path(path).write_bytes(body + struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path, spec: KernelSpec | None = None) -> Checkpoint:
    """Read a checkpoint; ``spec``, when given, must agree on family and channel count."""
    buf = Path(path).read_bytes()
    if len(buf) < len(MAGIC) + 8 or buf[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt file)")
    (version,) = struct.unpack_from("<I", buf, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    pos, blocks = len(MAGIC) + 4, []
    for _ in range(4):
        (n,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        blocks.append(buf[pos:pos + n])
        pos += n
    arch = json.loads(blocks[0])
    stored = KernelSpec.from_dict(json.loads(blocks[1]))
    if spec is not None and (spec.family is not stored.family
                             or spec.param_channels != arch["out_channels"]):
        raise CheckpointError(
            f"checkpoint predicts {arch['out_channels']} {stored.family.value} channels, "
            f"requested {spec.param_channels} for {spec.family.value}")
    net = Network(stored, widths=arch["widths"], strides=arch["strides"])
    flat = np.frombuffer(blocks[2], dtype="<f4")
    if flat.size != net.param_count():
        raise CheckpointError(f"{path}: weight block has {flat.size} values, expected {net.param_count()}")
    offset = 0
    for p in net.params:
        p[...] = flat[offset:offset + p.size].reshape(p.shape)
        offset += p.size
    return Checkpoint(net, stored, json.loads(blocks[3]))


# -- training ----------------------------------------------------------------

IMAGE_SUFFIXES = {".png", ".ppm", ".pgm", ".pnm", ".pfm"}


def list_images(dataset_dir) -> list:
    d = Path(dataset_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {d}")
    paths = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise ValueError(f"no images in {d}")
    return paths


@dataclass
class TrainConfig:
    dataset_dir: str = ""
    crops_per_epoch: int = 1600
    epochs: int = 1
    crop_size: int = 128
    batch: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    noise_low: float = 0.05
    noise_high: float = 0.1
    blur_sigma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.noise_low <= self.noise_high:
            raise ValueError("need 0 <= noise_low <= noise_high")
        if self.batch < 1 or self.epochs < 1 or self.crops_per_epoch < 1:
            raise ValueError("batch, epochs and crops_per_epoch must be >= 1")

    @property
    def steps(self) -> int:
        return self.epochs * -(-self.crops_per_epoch // self.batch)


def degrade(clean, sigma: float, spec: KernelSpec, cfg: TrainConfig, rng) -> np.ndarray:
    """Training corruption: AWGN, preceded by a Gaussian blur for POLYBLUR."""
    src = gaussian_blur(clean, cfg.blur_sigma) if spec.family is Family.POLYBLUR else as_image(clean)
    return src + sigma * rng.standard_normal(src.shape)


def _crop(images, size, rng):
    img = images[rng.integers(len(images))]
    c, h, w = img.shape
    ch = rng.integers(c)
    s = min(size, h, w)
    y = rng.integers(h - s + 1)
    x = rng.integers(w - s + 1)
    return img[ch, y:y + s, x:x + s]


def batch_loss_and_grad(net: Network, clean_crops, noisy_crops, sigmas):
    """Mean per-crop L2 loss through predictor and kernel; fills ``net`` grads."""
    spec = net.spec
    x = np.stack([np.stack([n, np.full(n.shape, s)]) for n, s in zip(noisy_crops, sigmas)])
    maps = net.forward_batch(x)
    hw = maps.shape[2:]
    n = len(clean_crops)
    grad_maps = np.empty_like(maps)
    total = 0.0
    for i in range(n):
        model = LossModel(noisy_crops[i], clean_crops[i], spec, sigmas[i], hw)
        loss, g, _ = model.loss_and_grad(maps[i])
        total += loss
        grad_maps[i] = g / n
    net.backward(grad_maps)
    return total / n


def train(net: Network, spec: KernelSpec, cfg: TrainConfig, images=None, progress=None) -> Checkpoint:
    """End-to-end training through the differentiable kernel.

    ``images`` may be passed pre-loaded; otherwise every image in
    ``cfg.dataset_dir`` is read. The loss history is stored in the
    checkpoint metadata.
    """
    if net.spec.family is not spec.family:
        raise ValueError("network and spec families differ")
    if images is None:
        images = [load_image(p) for p in list_images(cfg.dataset_dir)]
    if not images:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    history = []
    per_epoch = -(-cfg.crops_per_epoch // cfg.batch)
    for step in range(cfg.steps):
        clean = [_crop(images, cfg.crop_size, rng) for _ in range(cfg.batch)]
        sigmas = rng.uniform(cfg.noise_low, cfg.noise_high, cfg.batch)
        noisy = [degrade(c, s, spec, cfg, rng)[0] for c, s in zip(clean, sigmas)]
        loss = batch_loss_and_grad(net, clean, noisy, sigmas)
        if not math.isfinite(loss):
            raise NonFiniteLossError(step, loss)
        history.append(loss)
        opt.step(net.grads)
        if progress is not None:
            progress(step, loss)
        if step % 50 == 0:
            log.info("step %d/%d loss %.6g", step, cfg.steps, loss)
    meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "steps": cfg.steps,
        "steps_per_epoch": per_epoch,
        "images": len(images),
        "noise_range": [cfg.noise_low, cfg.noise_high],
        "loss_history": history,
    }
    return Checkpoint(net, spec, meta)


def predict_map(net: Network, img, noise_sigma) -> list:
    """One parameter map per image channel."""
    return [net.forward(ch, noise_sigma) for ch in as_image(img)]


# -- end-to-end gradient probe -----------------------------------------------

def network_grad_check(spec: KernelSpec, trials: int = 100, seed: int = 0, size: int = 16,
                       weights_per_trial: int = 8, h: float = 1e-5, floor: float = 1e-8,
                       tolerance: float = 1e-3, corrupt: float = 1.0) -> dict:
    """d(loss)/d(weights) by backprop vs central differences on sampled weights.

    Runs in float64. A probe whose +h/-h evaluations flip any ReLU mask
    straddles a kink where the difference quotient is meaningless; it is
    skipped and another weight drawn. ``floor`` bounds the relative-error
    denominator from below, above the ~eps*loss/h roundoff of the quotient.
    """
    rng = np.random.default_rng(seed)
    worst, skipped = 0.0, 0
    for _ in range(trials):
        net = Network(spec, seed=int(rng.integers(2**31)), dtype=np.float64)
        for p in net.params:
            p += rng.normal(0.0, 0.05, p.shape)  # non-zero biases too
        clean = rng.uniform(0.0, 1.0, (size, size))
        sigma = float(rng.uniform(0.05, 0.1))
        noisy = degrade(clean, sigma, spec, TrainConfig(), rng)[0]
        batch_loss_and_grad(net, [clean], [noisy], [sigma])
        analytic = [g.copy() for g in net.grads]
        base_masks = net._acts
        params = net.params
        done = 0
        while done < weights_per_trial:
            k = int(rng.integers(len(params)))
            idx = tuple(int(rng.integers(n)) for n in params[k].shape)
            orig = params[k][idx]
            params[k][idx] = orig + h
            lp, kink_p = _probe_loss(net, clean, noisy, sigma, base_masks)
            params[k][idx] = orig - h
            lm, kink_m = _probe_loss(net, clean, noisy, sigma, base_masks)
            params[k][idx] = orig
            if kink_p or kink_m:
                skipped += 1
                continue
            numeric = (lp - lm) / (2.0 * h)
            err = relative_error(analytic[k][idx] * corrupt, numeric, floor)
            worst = max(worst, float(err))
            done += 1
    return {"max_rel_error": worst, "passed": worst < tolerance,
            "probes": trials * weights_per_trial, "kink_skips": skipped}


def _probe_loss(net, clean, noisy, sigma, base_masks):
    maps = net.forward_batch(np.stack([noisy, np.full(noisy.shape, sigma)])[None])
    kink = any(np.any(a != b) for a, b in zip(net._acts, base_masks))
    return LossModel(noisy, clean, net.spec, sigma, maps.shape[2:]).loss(maps[0]), kink
