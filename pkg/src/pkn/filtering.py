"""Spatially varying application of procedural kernels.

Parameter maps live at reduced resolution and are bilinearly sampled at
every output pixel before kernel generation.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _backend
from .image import as_image, bilinear_resize, interp_axis, interp_matrix, pad_mirror, read_pfm, write_pfm
from .kernels import (
    RHO_LIMIT,
    SIGMA_FLOOR,
    Family,
    KernelSpec,
    ParameterDomainError,
    polyblur_apply,
)

RBF_RADIUS = 2


@dataclass
class ParamMap:
    """Per-pixel kernel parameters, already remapped into their bounded ranges."""

    data: np.ndarray  # (channels, height, width)
    family: Family
    ranges: tuple
    scale_hint: float = 1.0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[None]
        self.family = Family(self.family)
        self.ranges = tuple((float(lo), float(hi)) for lo, hi in self.ranges)
        if self.data.shape[0] != len(self.ranges):
            raise ValueError("one remap range per map channel required")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @classmethod
    def for_spec(cls, data, spec: KernelSpec, scale_hint: float = 1.0) -> "ParamMap":
        return cls(data, spec.family, spec.remap_ranges, scale_hint)

    @classmethod
    def constant(cls, spec: KernelSpec, values, height: int, width: int) -> "ParamMap":
        values = np.broadcast_to(np.asarray(values, dtype=np.float64), (spec.param_channels,))
        data = np.broadcast_to(values[:, None, None], (spec.param_channels, height, width)).copy()
        return cls.for_spec(data, spec)

    def within_ranges(self) -> bool:
        return all(np.all((lo <= ch) & (ch <= hi)) for ch, (lo, hi) in zip(self.data, self.ranges))


def _check_channels(pmap: ParamMap, spec: KernelSpec):
    if pmap.channels != spec.param_channels:
        raise ValueError(
            f"{spec.family.value} expects {spec.param_channels} map channels, got {pmap.channels}")


class MapSampler:
    """Bilinear upsampling of a (channels, h, w) map to (H, W), plus its adjoint."""

    def __init__(self, map_shape, out_shape):
        self.map_shape = tuple(map_shape)
        self.out_shape = tuple(out_shape)
        h, w = self.map_shape
        H, W = self.out_shape
        self._y = interp_axis(h, H)
        self._x = interp_axis(w, W)
        self._ay = interp_matrix(h, H)
        self._ax = interp_matrix(w, W)

    def sample(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        y0, y1, ty = self._y
        x0, x1, tx = self._x
        a, b = values[:, y0, :], values[:, y1, :]
        rows = a + ty[None, :, None] * (b - a)
        a, b = rows[:, :, x0], rows[:, :, x1]
        return a + tx[None, None, :] * (b - a)

    def adjoint(self, grad) -> np.ndarray:
        return self._ay.T @ np.asarray(grad) @ self._ax


def sample_map(pmap: ParamMap, height: int, width: int) -> np.ndarray:
    return MapSampler((pmap.height, pmap.width), (height, width)).sample(pmap.data)


def _backend_impl(backend):
    return _backend.impl if backend is None else _backend.get(backend)


def filter_plane(plane, full, spec: KernelSpec, noise_sigma: float = 0.0,
                 need_grad: bool = False, backend=None):
    """Filter one channel with full-resolution bounded parameters ``full`` (P, H, W).

    Returns ``(out, grads)`` where ``grads`` is d(out)/d(full) per parameter
    channel (zero where a parameter sits on its clamp), or None.
    """
    impl = _backend_impl(backend)
    plane = np.asarray(plane, dtype=np.float64)
    if not np.all(np.isfinite(plane)):
        raise ParameterDomainError("non-finite image samples")
    padded = np.ascontiguousarray(pad_mirror(plane, spec.margin)[0])
    fam = spec.family
    if fam is Family.NLM:
        sig = full[0] * noise_sigma
        active = sig >= SIGMA_FLOOR
        sig = np.ascontiguousarray(np.maximum(sig, SIGMA_FLOOR))
        out, g = impl.nlm_filter(padded, sig, spec.window_radius, spec.patch_radius,
                                 float(spec.spatial_sigma), need_grad)
        return out, (None if g is None else (g * noise_sigma * active)[None])
    if fam is Family.ISO_GAUSSIAN:
        s = np.ascontiguousarray(np.maximum(full[0], SIGMA_FLOOR))
        out, g = impl.aniso_filter(padded, s, s, np.zeros_like(s), spec.window_radius, need_grad)
        return out, (None if g is None else ((g[0] + g[1]) * (full[0] >= SIGMA_FLOOR))[None])
    if fam is Family.ANISO_GAUSSIAN:
        if np.any(np.abs(full[2]) > 1.0):
            raise ParameterDomainError("correlation outside [-1, 1]")
        s1 = np.ascontiguousarray(np.maximum(full[0], SIGMA_FLOOR))
        s2 = np.ascontiguousarray(np.maximum(full[1], SIGMA_FLOOR))
        rho = np.ascontiguousarray(np.clip(full[2], -RHO_LIMIT, RHO_LIMIT))
        out, g = impl.aniso_filter(padded, s1, s2, rho, spec.window_radius, need_grad)
        if g is not None:
            g = g * np.stack([full[0] >= SIGMA_FLOOR, full[1] >= SIGMA_FLOOR,
                              np.abs(full[2]) <= RHO_LIMIT])
        return out, g
    raise ValueError(f"{fam.value} is not a windowed kernel family; use apply_polyblur")


def apply_varying(img, pmap: ParamMap, spec: KernelSpec, noise_sigma: float = 0.0,
                  backend=None) -> np.ndarray:
    """Filter every channel with the spatially varying kernel described by ``pmap``."""
    img = as_image(img)
    _check_channels(pmap, spec)
    if spec.family is Family.POLYBLUR:
        raise ValueError("apply_varying handles NLM/ISO/ANISO; use apply_polyblur")
    full = sample_map(pmap, *img.shape[1:])
    return np.stack([filter_plane(ch, full, spec, noise_sigma, backend=backend)[0] for ch in img])


def apply_polyblur(img, pmap: ParamMap, spec: KernelSpec) -> np.ndarray:
    img = as_image(img)
    if spec.family is not Family.POLYBLUR:
        raise ValueError("apply_polyblur requires a POLYBLUR spec")
    _check_channels(pmap, spec)
    return polyblur_apply(img, sample_map(pmap, *img.shape[1:]), spec)


def apply_map(img, pmap: ParamMap, spec: KernelSpec, noise_sigma: float = 0.0) -> np.ndarray:
    """Dispatch to :func:`apply_polyblur` or :func:`apply_varying` by family."""
    if spec.family is Family.POLYBLUR:
        return apply_polyblur(img, pmap, spec)
    return apply_varying(img, pmap, spec, noise_sigma)


# -- continuous upsampling ---------------------------------------------------

def output_size(factor: float, n: int) -> int:
    return int(np.floor(factor * n + 0.5))


def precision_planes(params) -> np.ndarray:
    """(sigma1, sigma2, rho) planes -> (P11, P12, P22) precision planes."""
    params = np.asarray(params, dtype=np.float64)
    if np.any(np.abs(params[2]) > 1.0):
        raise ParameterDomainError("correlation outside [-1, 1]")
    s1 = np.maximum(params[0], SIGMA_FLOOR)
    s2 = np.maximum(params[1], SIGMA_FLOOR)
    rho = np.clip(params[2], -RHO_LIMIT, RHO_LIMIT)
    k = 1.0 / (1.0 - rho * rho)
    return np.stack([k / (s1 * s1), -k * rho / (s1 * s2), k / (s2 * s2)])


def source_coords(n_in: int, n_out: int) -> np.ndarray:
    return (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5


def upsample_continuous(img, pmap: ParamMap, factor: float, backend=None) -> np.ndarray:
    """Resample by an arbitrary factor with locally anisotropic Gaussian RBFs.

    The precision matrix entries, not (sigma1, sigma2, rho), are bilinearly
    interpolated to the output grid. Distances are in source pixels.
    """
    img = as_image(img)
    if pmap.channels != 3:
        raise ValueError("upsampling needs a 3-channel (sigma1, sigma2, rho) map")
    if not factor > 0:
        raise ValueError("factor must be > 0")
    _, h, w = img.shape
    H, W = output_size(factor, h), output_size(factor, w)
    if H < 1 or W < 1:
        raise ValueError(f"factor {factor} produces an empty output")
    impl = _backend_impl(backend)
    prec = bilinear_resize(precision_planes(pmap.data), W, H)
    p11, p12, p22 = (np.ascontiguousarray(p) for p in prec)
    u, v = source_coords(w, W), source_coords(h, H)
    padded = pad_mirror(img, RBF_RADIUS)
    return np.stack([impl.rbf_resample(np.ascontiguousarray(p), u, v, p11, p12, p22)
                     for p in padded])


def infer_once_upsample_many(img, pmap: ParamMap, factors, backend=None) -> list:
    """Upsample by several factors, reusing one parameter map for all of them."""
    return [upsample_continuous(img, pmap, f, backend=backend) for f in factors]


# -- map files ---------------------------------------------------------------

def _sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".txt")


def save_param_map(pmap: ParamMap, path, extra: dict | None = None) -> None:
    """Write the map as PFM and a ``key=value`` sidecar next to it (``<path>.txt``)."""
    path = Path(path)
    if pmap.channels == 2:
        raise ValueError("PFM stores 1 or 3 channels")
    write_pfm(path, pmap.data)
    lines = {
        "family": pmap.family.value,
        "channels": pmap.channels,
        "scale_hint": repr(pmap.scale_hint),
    }
    for k, (lo, hi) in enumerate(pmap.ranges):
        lines[f"range{k}"] = f"{lo!r},{hi!r}"
    lines.update(extra or {})
    _sidecar(path).write_text("".join(f"{k}={v}\n" for k, v in lines.items()))


def load_param_map(path) -> ParamMap:
    path = Path(path)
    meta = {}
    for line in _sidecar(path).read_text().splitlines():
        if line.strip() and not line.startswith("#"):
            key, _, value = line.partition("=")
            meta[key.strip()] = value.strip()
    data = read_pfm(path)
    channels = int(meta["channels"])
    if data.shape[0] != channels:
        raise ValueError(f"{path}: sidecar says {channels} channels, file has {data.shape[0]}")
    ranges = [tuple(float(x) for x in meta[f"range{k}"].split(",")) for k in range(channels)]
    return ParamMap(data, Family(meta["family"]), ranges, float(meta.get("scale_hint", 1.0)))
