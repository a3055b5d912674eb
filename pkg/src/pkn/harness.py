"""Experiment orchestration behind the command line: evaluation tables,
config resolution, provenance sidecars and parameter-map rendering."""
from __future__ import annotations

import csv
import hashlib
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from . import __version__
from .filtering import ParamMap, apply_map
from .image import NoiseModel, add_awgn, as_image, psnr
from .kernels import KernelSpec
from .optim import OptimConfig, logit_for, map_shape, optimize_global_param, optimize_local_params

log = logging.getLogger(__name__)

TABLE_HEADER = ("Noise sigma", "PSNR Optimal sigma per image",
                "PSNR Network predicted sigma", "PSNR Optimal local sigma")


# -- config and provenance ---------------------------------------------------

def read_config(path) -> dict:
    """Parse ``key=value`` lines; ``#`` starts a comment, dashes in keys become underscores."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def config_lines(config: dict) -> str:
    return "".join(f"{k}={config[k]}\n" for k in sorted(config))


def config_hash(config: dict) -> str:
    return hashlib.sha256(config_lines(config).encode()).hexdigest()


def provenance_line(config: dict) -> str:
    return f"pkn {__version__} config_sha256={config_hash(config)}"


def write_provenance(artifact, config: dict) -> Path:
    """Sidecar ``<artifact>.prov``: provenance line followed by the resolved config."""
    artifact = Path(artifact)
    side = artifact.with_name(artifact.name + ".prov")
    side.write_text(provenance_line(config) + "\n" + config_lines(config))
    return side


# -- parameter-map rendering -------------------------------------------------

def render_param_map(pmap: ParamMap) -> np.ndarray:
    """False-color rendering as a (3, h, w) image in [0, 1].

    One-channel maps go through OpenCV's viridis colormap (monotone in
    luminance) after scaling the remap range to [0, 255]. Three-channel
    maps are scaled per channel to [0, 1] and shown directly as RGB.
    """
    norm = np.stack([(ch - lo) / (hi - lo) for ch, (lo, hi) in zip(pmap.data, pmap.ranges)])
    norm = np.clip(norm, 0.0, 1.0)
    if pmap.channels == 1:
        q = np.floor(norm[0] * 255.0 + 0.5).astype(np.uint8)
        bgr = cv2.applyColorMap(q, cv2.COLORMAP_VIRIDIS)
        return bgr[:, :, ::-1].transpose(2, 0, 1) / 255.0
    return norm


# -- evaluation --------------------------------------------------------------

def noise_seed(seed: int, image_index: int, sigma: float) -> int:
    """Noise seed per (image, sigma) so every method sees the same corruption."""
    ss = np.random.SeedSequence([seed, image_index, int(round(sigma * 1e6))])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def warm_start(value: float, spec: KernelSpec, shape) -> np.ndarray:
    lo, hi = spec.remap_ranges[0]
    return np.full((1,) + tuple(shape), logit_for(value, lo, hi))


def oracle_denoise(noisy, clean, spec: KernelSpec, noise_sigma: float, cfg: OptimConfig,
                   start_value: float | None = None):
    """Per-channel oracle maps; optionally warm-started from a global parameter.

    Returns (output image, list of ParamMaps, list of LocalResults).
    """
    noisy, clean = as_image(noisy), as_image(clean)
    hw = map_shape(noisy.shape[1], noisy.shape[2], cfg.map_scale)
    init = None if start_value is None else warm_start(start_value, spec, hw)
    outs, maps, results = [], [], []
    for ch in range(noisy.shape[0]):
        res = optimize_local_params(noisy[ch:ch + 1], clean[ch:ch + 1], spec, noise_sigma, cfg,
                                    init_raw=init)
        outs.append(apply_map(noisy[ch:ch + 1], res.pmap, spec, noise_sigma)[0])
        maps.append(res.pmap)
        results.append(res)
    return np.stack(outs), maps, results


def network_denoise(net, noisy, spec: KernelSpec, noise_sigma: float):
    noisy = as_image(noisy)
    maps = [net.forward(ch, noise_sigma) for ch in noisy]
    out = np.stack([apply_map(ch[None], m, spec, noise_sigma)[0] for ch, m in zip(noisy, maps)])
    return out, maps


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    per_image: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    has_network: bool = False

    def check(self, tol: float = 1e-6) -> bool:
        """Oracle column never below the global column."""
        return all(r["psnr_oracle"] >= r["psnr_global"] - tol for r in self.rows)

    def columns(self):
        cols = ["noise_sigma", "psnr_global"]
        if self.has_network:
            cols.append("psnr_network")
        return cols + ["psnr_oracle", "images"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        cols = self.columns()
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r[c] if c == "images" else f"{r[c]:.6f}" for c in cols])
        return buf.getvalue()

    def to_table(self) -> str:
        header = [TABLE_HEADER[0], TABLE_HEADER[1]]
        if self.has_network:
            header.append(TABLE_HEADER[2])
        header += [TABLE_HEADER[3], "Images"]
        body = []
        for r in self.rows:
            cells = [f"{r['noise_sigma']:g}", f"{r['psnr_global']:.2f} dB"]
            if self.has_network:
                cells.append(f"{r['psnr_network']:.2f} dB")
            cells += [f"{r['psnr_oracle']:.2f} dB", str(r["images"])]
            body.append(cells)
        widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
        fmt = lambda row: " | ".join(c.rjust(wd) for c, wd in zip(row, widths))
        lines = [fmt(header), "-+-".join("-" * wd for wd in widths)] + [fmt(r) for r in body]
        meta = "".join(f"# {k}: {v}\n" for k, v in self.metadata.items())
        return meta + "\n".join(lines) + "\n"


def _eval_one(task):
    index, name, clean, sigma, spec, net, cfg, seed = task
    noisy = add_awgn(clean, NoiseModel(sigma, noise_seed(seed, index, sigma)))
    g = optimize_global_param(noisy, clean, spec, sigma)
    out_o, _, _ = oracle_denoise(noisy, clean, spec, sigma, cfg, start_value=g.value)
    row = {"image": name, "noise_sigma": sigma, "global_value": g.value,
           "psnr_global": g.psnr, "psnr_oracle": psnr(out_o, clean)}
    if net is not None:
        out_n, _ = network_denoise(net, noisy, spec, sigma)
        row["psnr_network"] = psnr(out_n, clean)
    return row


def evaluate(images, sigmas, spec: KernelSpec, net=None, cfg: OptimConfig | None = None,
             seed: int = 0, threads: int = 1, metadata: dict | None = None) -> EvalReport:
    """Global / network / oracle PSNR per noise level, averaged over ``images``.

    ``images`` is a sequence of (name, clean image) pairs.
    """
    if not images:
        raise ValueError("empty dataset")
    if spec.param_channels != 1:
        raise ValueError("evaluation compares single-parameter families (nlm, iso)")
    cfg = cfg or OptimConfig()
    tasks = [(i, name, as_image(img), float(s), spec, net, cfg, seed)
             for s in sigmas for i, (name, img) in enumerate(images)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_eval_one, tasks))
    else:
        results = [_eval_one(t) for t in tasks]
    report = EvalReport(per_image=results, metadata=dict(metadata or {}), has_network=net is not None)
    for s in sigmas:
        rs = [r for r in results if r["noise_sigma"] == float(s)]
        row = {"noise_sigma": float(s), "images": len(rs),
               "psnr_global": float(np.mean([r["psnr_global"] for r in rs])),
               "psnr_oracle": float(np.mean([r["psnr_oracle"] for r in rs]))}
        if net is not None:
            row["psnr_network"] = float(np.mean([r["psnr_network"] for r in rs]))
        report.rows.append(row)
        log.info("sigma %g: %s", s, row)
    return report
