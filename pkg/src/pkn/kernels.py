"""Procedural kernel weight generators and their parameter gradients.

The per-pixel functions in this module build the weight window for a
single output pixel. They are deliberately plain and are what the
brute-force tests compare the whole-image filters against.

Offsets follow image indexing: ``dx`` runs along columns, ``dy`` along
rows (downwards). ``sigma1`` pairs with ``dx`` and ``sigma2`` with ``dy``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .image import as_image, gaussian_blur

SIGMA_FLOOR = 1e-4
RHO_LIMIT = 1.0 - 1e-6


class ParameterDomainError(ValueError):
    """Kernel parameters outside the family's valid domain."""


class Family(str, enum.Enum):
    NLM = "nlm"
    ISO_GAUSSIAN = "iso"
    ANISO_GAUSSIAN = "aniso"
    POLYBLUR = "polyblur"


PARAM_CHANNELS = {
    Family.NLM: 1,
    Family.ISO_GAUSSIAN: 1,
    Family.ANISO_GAUSSIAN: 3,
    Family.POLYBLUR: 3,
}

DEFAULT_RANGES = {
    Family.NLM: ((0.0, 4.0),),
    Family.ISO_GAUSSIAN: ((0.0, 4.0),),
    Family.ANISO_GAUSSIAN: ((0.0, 4.0), (0.0, 4.0), (-1.0, 1.0)),
    Family.POLYBLUR: ((-4.0, 4.0),) * 3,
}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus the hyperparameters that stay fixed per run."""

    family: Family = Family.NLM
    window_radius: int = 2
    patch_radius: int = 1
    spatial_sigma: float = 1.5
    base_blur_sigma: float = 1.0
    remap_ranges: tuple = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        ranges = self.remap_ranges
        if ranges is None:
            ranges = DEFAULT_RANGES[self.family]
        ranges = tuple((float(lo), float(hi)) for lo, hi in ranges)
        if len(ranges) != self.param_channels:
            raise ValueError(
                f"{self.family.value} needs {self.param_channels} remap ranges, got {len(ranges)}")
        if any(not lo < hi for lo, hi in ranges):
            raise ValueError(f"remap ranges must satisfy low < high: {ranges}")
        object.__setattr__(self, "remap_ranges", ranges)
        if self.window_radius < 1 or self.patch_radius < 0:
            raise ValueError("window_radius must be >= 1 and patch_radius >= 0")

    @property
    def param_channels(self) -> int:
        return PARAM_CHANNELS[self.family]

    @property
    def window_size(self) -> int:
        return 2 * self.window_radius + 1

    @property
    def margin(self) -> int:
        """Padding a whole-image filter needs around the image."""
        if self.family is Family.NLM:
            return self.window_radius + self.patch_radius
        return self.window_radius

    @classmethod
    def from_name(cls, name: str, **overrides) -> "KernelSpec":
        return cls(family=Family(name), **overrides)

    def to_dict(self) -> dict:
        return {
            "family": self.family.value,
            "window_radius": self.window_radius,
            "patch_radius": self.patch_radius,
            "spatial_sigma": self.spatial_sigma,
            "base_blur_sigma": self.base_blur_sigma,
            "remap_ranges": [list(r) for r in self.remap_ranges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSpec":
        d = dict(d)
        d["remap_ranges"] = tuple(tuple(r) for r in d["remap_ranges"])
        return cls(**d)


@dataclass
class KernelWeights:
    weights: np.ndarray  # (window_size, window_size)
    center_index: tuple

    def apply(self, window) -> float:
        """Weighted sum over a window of the same size as the kernel."""
        return float(np.sum(self.weights * window))


# -- sigmoid remapping -------------------------------------------------------

def _logistic(x):
    x = np.asarray(x, dtype=np.float64)
    # two-branch form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def remap_sigmoid(raw, low: float, high: float):
    if not low < high:
        raise ValueError("remap requires low < high")
    out = low + (high - low) * _logistic(raw)
    return out if np.ndim(out) else float(out)


def remap_sigmoid_grad(raw, low: float, high: float):
    s = _logistic(raw)
    out = (high - low) * s * (1.0 - s)
    return out if np.ndim(out) else float(out)


def remap_channels(raw, spec: KernelSpec) -> np.ndarray:
    """Apply each channel's remap range to a (channels, ...) raw array."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.stack([remap_sigmoid(raw[k], lo, hi) for k, (lo, hi) in enumerate(spec.remap_ranges)])


def remap_channels_grad(raw, spec: KernelSpec) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    return np.stack([remap_sigmoid_grad(raw[k], lo, hi) for k, (lo, hi) in enumerate(spec.remap_ranges)])


# -- shared helpers ----------------------------------------------------------

def window_offsets(radius: int):
    """Column and row offset grids for a square window."""
    r = np.arange(-radius, radius + 1, dtype=np.float64)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return dx, dy


def spatial_gaussian(radius: int, sigma: float) -> np.ndarray:
    dx, dy = window_offsets(radius)
    return np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))


def _normalize(u, radius):
    return KernelWeights(u / u.sum(), (radius, radius))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ParameterDomainError("non-finite kernel input")


# -- NLM / bilateral ---------------------------------------------------------

def patch_distances(window, spec: KernelSpec) -> np.ndarray:
    """Mean squared patch difference between the center and every window position.

    ``window`` has side ``2 * (window_radius + patch_radius) + 1``.
    """
    R, P = spec.window_radius, spec.patch_radius
    window = np.asarray(window, dtype=np.float64)
    side = 2 * (R + P) + 1
    if window.shape != (side, side):
        raise ValueError(f"NLM window must be {side}x{side}, got {window.shape}")
    c = R + P
    center = window[c - P:c + P + 1, c - P:c + P + 1]
    d = np.empty((2 * R + 1, 2 * R + 1))
    for i in range(2 * R + 1):
        for j in range(2 * R + 1):
            patch = window[i:i + 2 * P + 1, j:j + 2 * P + 1]
            d[i, j] = np.mean((center - patch) ** 2)
    return d


def _nlm_parts(window, params, noise_sigma, spec):
    _check_finite(window)
    (m,) = params
    sig = m * noise_sigma
    floored = sig < SIGMA_FLOOR
    sig = max(sig, SIGMA_FLOOR)
    d = patch_distances(window, spec)
    u = spatial_gaussian(spec.window_radius, spec.spatial_sigma) * np.exp(-d / (2.0 * sig * sig))
    return u, d, sig, floored


def nlm_weights(window, params, noise_sigma: float, spec: KernelSpec) -> KernelWeights:
    """Non-local means weights for one pixel; the signal sigma is ``multiplier * noise_sigma``."""
    u, _, _, _ = _nlm_parts(window, params, noise_sigma, spec)
    return _normalize(u, spec.window_radius)


def nlm_weight_grad(window, params, noise_sigma: float, spec: KernelSpec) -> np.ndarray:
    """d(weights)/d(multiplier), zero where the signal sigma sits on its floor."""
    u, d, sig, floored = _nlm_parts(window, params, noise_sigma, spec)
    if floored:
        return np.zeros_like(u)
    w = u / u.sum()
    dw_dsig = w * (d - np.sum(w * d)) / sig ** 3
    return dw_dsig * noise_sigma


# -- Gaussian families -------------------------------------------------------

def iso_gaussian_weights(params, spec: KernelSpec) -> KernelWeights:
    (sigma,) = params
    _check_finite(sigma)
    sigma = max(float(sigma), SIGMA_FLOOR)
    dx, dy = window_offsets(spec.window_radius)
    u = np.exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma))
    return _normalize(u, spec.window_radius)


def iso_gaussian_weight_grad(params, spec: KernelSpec) -> np.ndarray:
    (sigma,) = params
    if sigma < SIGMA_FLOOR:
        return np.zeros((spec.window_size,) * 2)
    w = iso_gaussian_weights(params, spec).weights
    dx, dy = window_offsets(spec.window_radius)
    r2 = dx * dx + dy * dy
    return w * (r2 - np.sum(w * r2)) / sigma ** 3


def aniso_params(params):
    """Validate and clamp (sigma1, sigma2, rho) into the positive-definite domain."""
    s1, s2, rho = (float(v) for v in params)
    _check_finite(s1, s2, rho)
    if abs(rho) > 1.0:
        raise ParameterDomainError(f"correlation {rho} outside [-1, 1]")
    return (max(s1, SIGMA_FLOOR), max(s2, SIGMA_FLOOR),
            min(max(rho, -RHO_LIMIT), RHO_LIMIT))


def covariance(params) -> np.ndarray:
    s1, s2, rho = aniso_params(params)
    return np.array([[s1 * s1, rho * s1 * s2], [rho * s1 * s2, s2 * s2]])


def precision(params) -> np.ndarray:
    """Closed-form inverse of the 2x2 covariance."""
    s1, s2, rho = aniso_params(params)
    k = 1.0 / (1.0 - rho * rho)
    return k * np.array([[1.0 / (s1 * s1), -rho / (s1 * s2)],
                         [-rho / (s1 * s2), 1.0 / (s2 * s2)]])


def _aniso_quadratic(params, spec):
    s1, s2, rho = aniso_params(params)
    dx, dy = window_offsets(spec.window_radius)
    a, b = dx / s1, dy / s2
    k = 1.0 / (1.0 - rho * rho)
    q = k * (a * a - 2.0 * rho * a * b + b * b)
    return q, a, b, k, (s1, s2, rho)


def aniso_gaussian_weights(params, spec: KernelSpec) -> KernelWeights:
    q, *_ = _aniso_quadratic(params, spec)
    return _normalize(np.exp(-0.5 * q), spec.window_radius)


def aniso_gaussian_weight_grad(params, spec: KernelSpec) -> np.ndarray:
    """Weight gradients stacked as (3, K, K) for (sigma1, sigma2, rho)."""
    q, a, b, k, (s1, s2, rho) = _aniso_quadratic(params, spec)
    w = np.exp(-0.5 * q)
    w /= w.sum()
    raw = [float(v) for v in params]
    dq = [
        2.0 * k / s1 * (rho * a * b - a * a),
        2.0 * k / s2 * (rho * a * b - b * b),
        -2.0 * k * a * b + 2.0 * rho * k * q,
    ]
    active = [raw[0] >= SIGMA_FLOOR, raw[1] >= SIGMA_FLOOR, abs(raw[2]) <= RHO_LIMIT]
    out = np.zeros((3,) + w.shape)
    for i in range(3):
        if active[i]:
            out[i] = -0.5 * w * (dq[i] - np.sum(w * dq[i]))
    return out


# -- polynomial reblurring ---------------------------------------------------

def blur_powers(img, spec: KernelSpec) -> list:
    """[B I, B^2 I, B^3 I] for the spec's base blur."""
    out, cur = [], as_image(img)
    for _ in range(3):
        cur = gaussian_blur(cur, spec.base_blur_sigma)
        out.append(cur)
    return out


def polyblur_apply(img, coeff_map, spec: KernelSpec) -> np.ndarray:
    """Per-pixel ``a I + b BI + c B^2 I + d B^3 I`` with ``a = 1 - (b + c + d)``.

    ``coeff_map`` holds (b, c, d) at image resolution, either as an array of
    shape (3, H, W) or as a full-resolution ParamMap.
    """
    img = as_image(img)
    coeffs = np.asarray(getattr(coeff_map, "data", coeff_map), dtype=np.float64)
    if coeffs.shape != (3,) + img.shape[1:]:
        raise ValueError(f"coefficient map must be (3, H, W) at image size, got {coeffs.shape}")
    if not np.all(np.isfinite(coeffs)):
        raise ParameterDomainError("non-finite polyblur coefficients")
    out = img.copy()
    for c, blurred in zip(coeffs, blur_powers(img, spec)):
        out += c * (blurred - img)
    return out
