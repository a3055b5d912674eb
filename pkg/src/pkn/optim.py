"""Per-image global and per-pixel (oracle) parameter optimization."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .filtering import MapSampler, ParamMap, filter_plane
from .image import as_image, mse, psnr_from_mse
from .kernels import (
    Family,
    KernelSpec,
    ParameterDomainError,
    blur_powers,
    remap_channels,
    remap_channels_grad,
)

log = logging.getLogger(__name__)

GLOBAL_BRACKET = (1e-3, 4.0)
GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class NonFiniteLossError(FloatingPointError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


def loss_l2(a, b) -> float:
    """Mean squared error over all samples."""
    return mse(a, b)


class Adam:
    """Adam over a list of float arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p[...] = (p - update).astype(p.dtype)

    def state(self) -> dict:
        return {"t": self.t, "m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}


@dataclass
class OptimConfig:
    steps: int = 300
    learning_rate: float = 0.05
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    init_raw: float = 0.0
    map_scale: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or not self.learning_rate > 0 or self.map_scale < 1:
            raise ValueError("need steps >= 1, learning_rate > 0, map_scale >= 1")


@dataclass
class GlobalResult:
    value: float
    psnr: float
    loss: float


@dataclass
class LocalResult:
    pmap: ParamMap
    psnr: float
    losses: list = field(default_factory=list)

    @property
    def initial_loss(self) -> float:
        return self.losses[0]

    @property
    def final_loss(self) -> float:
        return min(self.losses)


def map_shape(height: int, width: int, map_scale: int):
    return max(1, -(-height // map_scale)), max(1, -(-width // map_scale))


class LossModel:
    """L2 loss of a filtered image as a function of a low-resolution parameter map.

    Holds everything that stays fixed across iterations (sampler, blur
    stacks) so repeated evaluations only redo the filtering.
    """

    def __init__(self, noisy, clean, spec: KernelSpec, noise_sigma: float, map_hw):
        self.noisy = as_image(noisy)
        self.clean = as_image(clean)
        if self.noisy.shape != self.clean.shape:
            raise ValueError(f"dimension mismatch: {self.noisy.shape} vs {self.clean.shape}")
        if not (np.all(np.isfinite(self.noisy)) and np.all(np.isfinite(self.clean))):
            raise ParameterDomainError("non-finite image samples")
        self.spec = spec
        self.noise_sigma = float(noise_sigma)
        self.sampler = MapSampler(map_hw, self.noisy.shape[1:])
        self._basis = None
        if spec.family is Family.POLYBLUR:
            # d(out)/d(b, c, d) = B^k I - I, independent of the coefficients
            self._basis = np.stack([p - self.noisy for p in blur_powers(self.noisy, spec)])

    def filtered(self, values, need_grad=False):
        full = self.sampler.sample(values)
        if self._basis is not None:
            out = self.noisy + np.einsum("kchw,khw->chw", self._basis, full)
            return out, (self._basis if need_grad else None)
        outs, grads = [], []
        for ch in self.noisy:
            o, g = filter_plane(ch, full, self.spec, self.noise_sigma, need_grad)
            outs.append(o)
            grads.append(g)
        return np.stack(outs), (np.stack(grads, axis=1) if need_grad else None)

    def loss(self, values) -> float:
        out, _ = self.filtered(values)
        return float(np.mean((out - self.clean) ** 2))

    def loss_and_grad(self, values):
        """Loss and its gradient w.r.t. the bounded map values (P, h, w)."""
        out, dout = self.filtered(values, need_grad=True)
        resid = out - self.clean
        loss = float(np.mean(resid ** 2))
        dloss = 2.0 * resid / resid.size
        full_grad = np.einsum("chw,kchw->khw", dloss, dout)
        return loss, self.sampler.adjoint(full_grad), out

    def raw_loss_and_grad(self, raw):
        """Loss and gradient w.r.t. pre-sigmoid raw values."""
        loss, g, out = self.loss_and_grad(remap_channels(raw, self.spec))
        return loss, g * remap_channels_grad(raw, self.spec), out


def optimize_global_param(noisy, clean, spec: KernelSpec, noise_sigma: float,
                          tol: float = 1e-3) -> GlobalResult:
    """Golden-section search for the best single parameter over the whole image."""
    if spec.param_channels != 1:
        raise ValueError("global search needs a single-parameter family (nlm or iso)")
    model = LossModel(noisy, clean, spec, noise_sigma, (1, 1))
    cache = {}

    def f(x):
        if x not in cache:
            cache[x] = model.loss(np.full((1, 1, 1), x))
        return cache[x]

    a, b = GLOBAL_BRACKET
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    while b - a >= tol:
        if f(c) <= f(d):
            b, d = d, c
            c = b - GOLDEN * (b - a)
        else:
            a, c = c, d
            d = a + GOLDEN * (b - a)
    candidates = [GLOBAL_BRACKET[0], GLOBAL_BRACKET[1], c, d]
    best = min(candidates, key=lambda x: (f(x), x))
    loss = f(best)
    return GlobalResult(best, psnr_from_mse(loss), loss)


def optimize_local_params(noisy, clean, spec: KernelSpec, noise_sigma: float,
                          cfg: OptimConfig | None = None, init_raw=None,
                          loss_log=None) -> LocalResult:
    """Adam on a raw (pre-sigmoid) map at ``1/map_scale`` resolution against the clean image.

    ``init_raw`` optionally overrides the constant ``cfg.init_raw`` start
    with a full raw map. The best iterate seen is returned, so the final
    loss never exceeds the initial one. ``loss_log`` is an optional text
    stream receiving one ``iteration loss`` line per step.
    """
    cfg = cfg or OptimConfig()
    noisy = as_image(noisy)
    hw = map_shape(noisy.shape[1], noisy.shape[2], cfg.map_scale)
    model = LossModel(noisy, clean, spec, noise_sigma, hw)
    if init_raw is None:
        raw = np.full((spec.param_channels,) + hw, float(cfg.init_raw))
    else:
        raw = np.array(init_raw, dtype=np.float64).reshape((spec.param_channels,) + hw)
    opt = Adam([raw], cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    losses = []
    best_loss, best_raw = math.inf, raw.copy()
    for it in range(cfg.steps + 1):
        loss, grad, _ = model.raw_loss_and_grad(raw)
        if not math.isfinite(loss):
            raise NonFiniteLossError(it, loss)
        losses.append(loss)
        if loss_log is not None:
            loss_log.write(f"{it} {loss!r}\n")
        if loss < best_loss:
            best_loss, best_raw = loss, raw.copy()
        if it < cfg.steps:
            opt.step([grad])
    log.debug("oracle: loss %.6g -> %.6g in %d steps", losses[0], best_loss, cfg.steps)
    pmap = ParamMap.for_spec(remap_channels(best_raw, spec), spec,
                             scale_hint=noisy.shape[1] / hw[0])
    return LocalResult(pmap, psnr_from_mse(best_loss), losses)


def logit_for(value: float, low: float, high: float) -> float:
    """Raw value whose sigmoid remap equals ``value`` (clipped inside the open range)."""
    p = (value - low) / (high - low)
    p = min(max(p, 1e-9), 1.0 - 1e-9)
    return math.log(p / (1.0 - p))


@dataclass
class GradCheckReport:
    family: str
    trials: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor=1e-10) -> np.ndarray:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def grad_check(spec: KernelSpec, trials: int = 100, seed: int = 0, size: int = 8,
               h: float = 1e-4, tolerance: float = 1e-3, corrupt: float = 1.0) -> GradCheckReport:
    """Full-chain analytic gradient (loss -> kernel -> map sampling -> sigmoid) vs central differences.

    ``corrupt`` scales the analytic gradient; anything other than 1 is a
    negative control and should fail.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    hw = map_shape(size, size, 2)
    for _ in range(trials):
        clean = rng.uniform(0.0, 1.0, (1, size, size))
        noise_sigma = rng.uniform(0.05, 0.2)
        noisy = clean + noise_sigma * rng.standard_normal(clean.shape)
        if spec.family is Family.POLYBLUR:
            noisy = blur_powers(clean, spec)[0] + 0.02 * rng.standard_normal(clean.shape)
        model = LossModel(noisy, clean, spec, noise_sigma, hw)
        raw = rng.normal(0.0, 1.0, (spec.param_channels,) + hw)
        _, analytic, _ = model.raw_loss_and_grad(raw)
        analytic = analytic * corrupt
        numeric = np.empty_like(raw)
        for idx in np.ndindex(raw.shape):
            step = np.zeros_like(raw)
            step[idx] = h
            numeric[idx] = (model.loss(remap_channels(raw + step, spec))
                            - model.loss(remap_channels(raw - step, spec))) / (2.0 * h)
        worst = max(worst, float(relative_error(analytic, numeric).max()))
    return GradCheckReport(spec.family.value, trials, worst, tolerance)
