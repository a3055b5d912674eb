"""Raster primitives shared by the rest of the package.

Images are planar ``float64`` arrays of shape ``(channels, height, width)``.
Nothing here clamps sample values except the integer encoders.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

PSNR_CAP = 99.0


def as_image(a) -> np.ndarray:
    """Return ``a`` as a planar float64 array of shape (C, H, W)."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or not 1 <= arr.shape[0] <= 3:
        raise ValueError(f"expected (H, W) or (C, H, W) with 1-3 channels, got {arr.shape}")
    if arr.shape[1] == 0 or arr.shape[2] == 0:
        raise ValueError("zero-dimension image")
    return arr


# -- file I/O ---------------------------------------------------------------

def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file")
        dims = f.readline().split()
        while len(dims) < 2:
            dims += f.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype)
    if width == 0 or height == 0:
        raise ValueError(f"{path}: zero-dimension image")
    if data.size != width * height * channels:
        raise ValueError(f"{path}: truncated PFM payload")
    data = data.reshape(height, width, channels)[::-1]
    return np.ascontiguousarray(data.transpose(2, 0, 1), dtype=np.float64)


def write_pfm(path, img) -> None:
    img = as_image(img)
    if img.shape[0] == 2:
        raise ValueError("PFM stores 1 or 3 channels")
    c, h, w = img.shape
    payload = img.transpose(1, 2, 0)[::-1].astype("<f4")
    with open(path, "wb") as f:
        f.write(b"PF\n" if c == 3 else b"Pf\n")
        f.write(f"{w} {h}\n-1.0\n".encode("ascii"))
        f.write(payload.tobytes())


def load_image(path) -> np.ndarray:
    """Read PNG (8/16-bit), binary PPM/PGM or PFM into a planar float image.

    Integer formats are normalized to [0, 1]; PFM samples pass through.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValueError(f"{path}: unreadable image")
    if raw.dtype == np.uint8:
        scale = 255.0
    elif raw.dtype == np.uint16:
        scale = 65535.0
    else:
        raise ValueError(f"{path}: unsupported bit depth {raw.dtype}")
    if raw.ndim == 3:
        if raw.shape[2] != 3:
            raise ValueError(f"{path}: unsupported channel count {raw.shape[2]}")
        raw = raw[:, :, ::-1].transpose(2, 0, 1)
    return as_image(raw.astype(np.float64) / scale)


def quantize(img, bit_depth: int = 8) -> np.ndarray:
    """Clamp to [0, 1] and quantize with round-half-up."""
    peak = (1 << bit_depth) - 1
    q = np.floor(np.clip(img, 0.0, 1.0) * peak + 0.5)
    return q.astype(np.uint8 if bit_depth == 8 else np.uint16)


def save_image(img, path, bit_depth: int = 8) -> None:
    img = as_image(img)
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"directory does not exist: {path.parent}")
    if path.suffix.lower() == ".pfm":
        write_pfm(path, img)
        return
    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    if img.shape[0] == 2:
        raise ValueError("two-channel images cannot be encoded as PNG/PPM")
    q = quantize(img, bit_depth)
    q = q[0] if q.shape[0] == 1 else q[::-1].transpose(1, 2, 0)
    if not cv2.imwrite(str(path), np.ascontiguousarray(q)):
        raise OSError(f"could not write {path}")


# -- noise and metrics -------------------------------------------------------

@dataclass(frozen=True)
class NoiseModel:
    sigma: float
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError("noise sigma must be >= 0")


def add_awgn(img, noise: NoiseModel) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise, unclamped, independently per channel."""
    img = as_image(img)
    if noise.sigma == 0:
        return img.copy()
    rng = np.random.default_rng(noise.seed)
    return img + noise.sigma * rng.standard_normal(img.shape)


def mse(a, b) -> float:
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB for peak 1.0, capped at ``PSNR_CAP`` for identical inputs."""
    return psnr_from_mse(mse(a, b))


def psnr_from_mse(err: float) -> float:
    if err <= 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(1.0 / err)))


# -- resampling --------------------------------------------------------------

def interp_axis(n_in: int, n_out: int):
    """Lerp indices and fractions for half-pixel-center resampling of one axis."""
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Dense (n_out, n_in) matrix form of :func:`interp_axis`."""
    i0, i1, t = interp_axis(n_in, n_out)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - t)
    np.add.at(m, (rows, i1), t)
    return m


def _lerp(a, b, t):
    # a + t (b - a) keeps a == b exact; the clip removes rounding overshoot
    out = a + t * (b - a)
    return np.clip(out, np.minimum(a, b), np.maximum(a, b))


def bilinear_resize(img, out_width: int, out_height: int) -> np.ndarray:
    img = as_image(img)
    if out_width < 1 or out_height < 1:
        raise ValueError("output dimensions must be >= 1")
    _, h, w = img.shape
    y0, y1, ty = interp_axis(h, out_height)
    x0, x1, tx = interp_axis(w, out_width)
    rows = _lerp(img[:, y0, :], img[:, y1, :], ty[None, :, None])
    return _lerp(rows[:, :, x0], rows[:, :, x1], tx[None, None, :])


def pad_mirror(img, radius: int) -> np.ndarray:
    """Reflect-without-repeat padding: row [a, b, c] with radius 1 -> [b, a, b, c, b]."""
    img = as_image(img)
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius >= min(img.shape[1:]):
        raise ValueError(f"pad radius {radius} too large for image {img.shape[1:]}")
    if radius == 0:
        return img.copy()
    return np.pad(img, ((0, 0), (radius, radius), (radius, radius)), mode="reflect")


def gaussian_taps(sigma: float) -> np.ndarray:
    """1-D Gaussian truncated at 3 sigma and renormalized to sum 1."""
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-0.5 * (x / sigma) ** 2)
    return taps / taps.sum()


def gaussian_blur(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with mirror boundaries; preserves constants."""
    img = as_image(img)
    taps = gaussian_taps(sigma)
    r = taps.size // 2
    _, h, w = img.shape
    p = pad_mirror(img, r)
    tmp = sum(t * p[:, i:i + h, :] for i, t in enumerate(taps))
    return sum(t * tmp[:, :, i:i + w] for i, t in enumerate(taps))
