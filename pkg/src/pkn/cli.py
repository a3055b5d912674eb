"""Command-line front end.

Options resolve in three layers: built-in defaults, then ``--config``
file values (``key=value`` lines), then explicit flags.

Exit codes: 0 success, 1 usage error, 2 runtime failure, 3 gradcheck failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import _backend
from .filtering import ParamMap, apply_varying, infer_once_upsample_many, save_param_map
from .harness import (
    evaluate,
    network_denoise,
    oracle_denoise,
    provenance_line,
    read_config,
    render_param_map,
    write_provenance,
)
from .image import load_image, save_image
from .kernels import Family, KernelSpec
from .net import (
    Checkpoint,
    TrainConfig,
    build_network,
    list_images,
    load_checkpoint,
    network_grad_check,
    save_checkpoint,
    train,
)
from .optim import OptimConfig, grad_check, map_shape, optimize_global_param

log = logging.getLogger("pkn")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text) -> list:
    return [float(x) for x in str(text).replace(" ", "").split(",") if x]


# name -> (type, default, help); shared by flags and config-file values
OPTIONS = {
    "input": (str, None, "input image"),
    "output": (str, None, "output path"),
    "reference": (str, None, "clean reference image (oracle / global tuning)"),
    "checkpoint": (str, None, "network checkpoint"),
    "method": (str, None, "global | oracle | checkpoint"),
    "spec": (str, "nlm", "kernel family: nlm | iso | aniso | polyblur"),
    "sigma": (float, 0.1, "noise standard deviation of the input"),
    "sigmas": (_floats, [0.025, 0.05, 0.1, 0.2], "comma-separated noise levels"),
    "multiplier": (float, 1.0, "global parameter used when no reference is given"),
    "export_params": (str, None, "write the parameter map (PFM + sidecar) and a PNG rendering"),
    "factor": (float, None, "single upsampling factor"),
    "factors": (_floats, None, "comma-separated upsampling factors"),
    "iso_sigma": (float, 0.5, "RBF sigma in source pixels when no checkpoint is given"),
    "base_blur_sigma": (float, 1.0, "polyblur base blur sigma (pixels)"),
    "spatial_sigma": (float, 1.5, "NLM spatial sigma (pixels)"),
    "window_radius": (int, 2, "kernel window radius"),
    "patch_radius": (int, 1, "NLM patch radius"),
    "steps": (int, 300, "oracle Adam steps"),
    "lr": (float, None, "learning rate (oracle default 0.05, training default 1e-3)"),
    "map_scale": (int, 2, "oracle map resolution divisor"),
    "dataset": (str, None, "directory of images"),
    "limit": (int, None, "use at most this many dataset images"),
    "epochs": (int, 1, "training epochs"),
    "crops_per_epoch": (int, 1600, "training crops per epoch"),
    "crop_size": (int, 128, "training crop size"),
    "batch": (int, 8, "training batch size"),
    "noise_low": (float, 0.05, "lowest training noise sigma"),
    "noise_high": (float, 0.1, "highest training noise sigma"),
    "blur_sigma": (float, 1.0, "training blur for polyblur degradations"),
    "trials": (int, 100, "gradient-check trials per family"),
    "net_trials": (int, 100, "network gradient-check trials per family"),
    "corrupt_gradient": (float, 1.0, argparse.SUPPRESS),
    "seed": (int, 0, "random seed"),
    "threads": (int, 1, "worker threads for per-image tasks"),
}

COMMANDS = {
    "denoise": ("input", "output", "method", "reference", "checkpoint", "spec", "sigma",
                "multiplier", "export_params", "steps", "lr", "map_scale", "spatial_sigma",
                "window_radius", "patch_radius"),
    "oracle": ("input", "output", "reference", "spec", "sigma", "export_params", "steps", "lr",
               "map_scale", "spatial_sigma", "window_radius", "patch_radius"),
    "deblur": ("input", "output", "method", "reference", "checkpoint", "sigma", "base_blur_sigma",
               "export_params", "steps", "lr", "map_scale"),
    "upsample": ("input", "output", "factor", "factors", "checkpoint", "iso_sigma", "sigma"),
    "train": ("dataset", "output", "spec", "epochs", "crops_per_epoch", "crop_size", "batch", "lr",
              "noise_low", "noise_high", "blur_sigma", "base_blur_sigma", "spatial_sigma",
              "window_radius", "patch_radius", "limit"),
    "eval": ("dataset", "sigmas", "checkpoint", "output", "spec", "steps", "lr", "map_scale",
             "limit", "spatial_sigma", "window_radius", "patch_radius"),
    "gradcheck": ("spec", "trials", "net_trials", "corrupt_gradient"),
}
HELP = {
    "denoise": "denoise with a global, oracle or network-predicted parameter map",
    "oracle": "alias for denoise --method oracle",
    "deblur": "polynomial reblurring with oracle or network coefficients",
    "upsample": "fractional upsampling with anisotropic Gaussian RBFs",
    "train": "train a parameter-predicting network",
    "eval": "PSNR table: global vs network vs oracle parameters",
    "gradcheck": "analytic vs finite-difference gradients for every family",
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pkn", description="Procedural kernel networks")
    parser.add_argument("--version", action="version", version=f"pkn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=HELP[name], argument_default=argparse.SUPPRESS)
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--verbose", "-v", action="store_true")
        for opt in opts + ("seed", "threads"):
            typ, _, text = OPTIONS[opt]
            p.add_argument("--" + opt.replace("_", "-"), type=typ, help=text)
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Defaults <- config file <- flags, limited to the command's own options."""
    allowed = COMMANDS[args.command] + ("seed", "threads")
    cfg = {k: OPTIONS[k][1] for k in allowed}
    flags = vars(args)
    if flags.get("config"):
        for key, value in read_config(flags["config"]).items():
            if key not in allowed:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            try:
                cfg[key] = OPTIONS[key][0](value)
            except ValueError as exc:
                raise UsageError(f"config key {key}: {exc}") from None
    for key in allowed:
        if key in flags:
            cfg[key] = flags[key]
    cfg["command"] = args.command
    if flags.get("config"):
        cfg["_from_config"] = tuple(read_config(flags["config"]))
    return cfg


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def _spec(cfg, family=None) -> KernelSpec:
    fam = family or cfg.get("spec", "nlm")
    try:
        fam = Family(fam)
    except ValueError:
        raise UsageError(f"unknown spec {fam!r}; choose nlm, iso, aniso or polyblur") from None
    kw = {}
    for key in ("window_radius", "patch_radius", "spatial_sigma", "base_blur_sigma"):
        if key in cfg:
            kw[key] = cfg[key]
    return KernelSpec(family=fam, **kw)


def _optim_cfg(cfg) -> OptimConfig:
    return OptimConfig(steps=cfg.get("steps", 300), learning_rate=cfg.get("lr") or 0.05,
                       map_scale=cfg.get("map_scale", 2), seed=cfg.get("seed", 0))


def _export(maps, path, cfg):
    """Write each channel's map (suffixed ``_c<k>`` when there are several) plus its rendering."""
    path = Path(path)
    written = []
    for k, pmap in enumerate(maps):
        p = path if len(maps) == 1 else path.with_name(f"{path.stem}_c{k}{path.suffix}")
        save_param_map(pmap, p, {"provenance": provenance_line(cfg)})
        vis = p.with_name(p.stem + "_vis.png")
        save_image(render_param_map(pmap), vis)
        write_provenance(vis, cfg)
        written.append(p)
    return written


def _load_net(cfg, spec=None) -> Checkpoint:
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_checkpoint(path, spec)


def cmd_denoise(cfg) -> int:
    method = cfg.get("method") or ("checkpoint" if cfg.get("checkpoint") else "global")
    if method not in ("global", "oracle", "checkpoint"):
        raise UsageError(f"unknown method {method!r}")
    _require(cfg, "input", "output")
    noisy = load_image(cfg["input"])
    sigma = cfg["sigma"]
    clean = None
    if cfg.get("reference"):
        clean = load_image(cfg["reference"])
    if method == "checkpoint":
        _require(cfg, "checkpoint")
        ckpt = _load_net(cfg)
        spec = ckpt.spec
        out, maps = network_denoise(ckpt.network, noisy, spec, sigma)
    else:
        spec = _spec(cfg)
        if spec.family is Family.POLYBLUR:
            raise UsageError("use the deblur command for polyblur")
        if method == "oracle":
            if clean is None:
                raise UsageError("oracle needs --reference")
            start = None
            if spec.param_channels == 1:
                start = optimize_global_param(noisy, clean, spec, sigma).value
            out, maps, results = oracle_denoise(noisy, clean, spec, sigma, _optim_cfg(cfg), start)
            log.info("oracle loss %s", [(r.initial_loss, r.final_loss) for r in results])
        else:
            if spec.param_channels != 1:
                raise UsageError("global tuning needs a single-parameter family (nlm or iso)")
            value = cfg["multiplier"]
            if clean is not None:
                value = optimize_global_param(noisy, clean, spec, sigma).value
            hw = map_shape(noisy.shape[1], noisy.shape[2], cfg.get("map_scale", 2))
            maps = [ParamMap.constant(spec, value, *hw)]
            out = apply_varying(noisy, maps[0], spec, sigma)
            log.info("global parameter %.6g", value)
    save_image(out, cfg["output"])
    write_provenance(cfg["output"], cfg)
    if clean is not None:
        from .image import psnr
        print(f"psnr input={psnr(noisy, clean):.4f} output={psnr(out, clean):.4f}")
    if cfg.get("export_params"):
        _export(maps, cfg["export_params"], cfg)
    return EXIT_OK


def cmd_oracle(cfg) -> int:
    cfg["method"] = "oracle"
    return cmd_denoise(cfg)


def cmd_deblur(cfg) -> int:
    _require(cfg, "input", "output")
    method = cfg.get("method") or ("checkpoint" if cfg.get("checkpoint") else "oracle")
    blurred = load_image(cfg["input"])
    clean = load_image(cfg["reference"]) if cfg.get("reference") else None
    sigma = cfg["sigma"]
    if method == "checkpoint":
        _require(cfg, "checkpoint")
        ckpt = _load_net(cfg, KernelSpec(Family.POLYBLUR))
        out, maps = network_denoise(ckpt.network, blurred, ckpt.spec, sigma)
    elif method == "oracle":
        if clean is None:
            raise UsageError("oracle deblurring needs --reference")
        spec = _spec(cfg, Family.POLYBLUR)
        out, maps, _ = oracle_denoise(blurred, clean, spec, sigma, _optim_cfg(cfg))
    else:
        raise UsageError(f"unknown method {method!r}")
    save_image(out, cfg["output"])
    write_provenance(cfg["output"], cfg)
    if clean is not None:
        from .image import psnr
        print(f"psnr input={psnr(blurred, clean):.4f} output={psnr(out, clean):.4f}")
    if cfg.get("export_params"):
        _export(maps, cfg["export_params"], cfg)
    return EXIT_OK


def upsample_outputs(output, factors) -> list:
    out = Path(output)
    if len(factors) == 1:
        return [out]
    return [out.with_name(f"{out.stem}_x{f:g}{out.suffix}") for f in factors]


def cmd_upsample(cfg) -> int:
    _require(cfg, "input", "output")
    factors = cfg.get("factors") or ([cfg["factor"]] if cfg.get("factor") is not None else None)
    if not factors:
        raise UsageError("give --factor or --factors")
    if any(not f > 0 for f in factors):
        raise UsageError("factors must be > 0")
    img = load_image(cfg["input"])
    aniso = KernelSpec(Family.ANISO_GAUSSIAN)
    if cfg.get("checkpoint"):
        net = _load_net(cfg, aniso).network
        maps = [net.forward(ch, cfg["sigma"]) for ch in img]
    else:
        hw = map_shape(img.shape[1], img.shape[2], 2)
        s = cfg["iso_sigma"]
        maps = [ParamMap.constant(aniso, (s, s, 0.0), *hw)] * img.shape[0]
    # one inference per channel, shared by every factor
    per_channel = [infer_once_upsample_many(ch[None], m, factors) for ch, m in zip(img, maps)]
    for k, path in enumerate(upsample_outputs(cfg["output"], factors)):
        out = np.concatenate([outs[k] for outs in per_channel])
        save_image(out, path)
        write_provenance(path, cfg)
        print(f"{path} {out.shape[2]}x{out.shape[1]}")
    return EXIT_OK


def _train_cfg(cfg) -> TrainConfig:
    return TrainConfig(
        dataset_dir=cfg["dataset"], crops_per_epoch=cfg["crops_per_epoch"], epochs=cfg["epochs"],
        crop_size=cfg["crop_size"], batch=cfg["batch"], lr=cfg.get("lr") or 1e-3,
        noise_low=cfg["noise_low"], noise_high=cfg["noise_high"], blur_sigma=cfg["blur_sigma"],
        seed=cfg["seed"])


def cmd_train(cfg) -> int:
    _require(cfg, "dataset", "output")
    spec = _spec(cfg)
    tcfg = _train_cfg(cfg)
    paths = list_images(tcfg.dataset_dir)
    if cfg.get("limit"):
        paths = paths[:cfg["limit"]]
    images = [load_image(p) for p in paths]
    net = build_network(spec, seed=tcfg.seed)
    ckpt = train(net, spec, tcfg, images=images)
    ckpt.metadata["provenance"] = provenance_line(cfg)
    save_checkpoint(ckpt, cfg["output"])
    write_provenance(cfg["output"], cfg)
    loss_csv = Path(cfg["output"]).with_suffix(".loss.csv")
    with open(loss_csv, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        for i, v in enumerate(ckpt.metadata["loss_history"]):
            w.writerow([i, repr(v)])
    write_provenance(loss_csv, cfg)
    h = ckpt.metadata["loss_history"]
    print(f"trained {len(h)} steps on {len(images)} images: loss {h[0]:.6g} -> {h[-1]:.6g}")
    return EXIT_OK


def cmd_eval(cfg) -> int:
    _require(cfg, "dataset")
    spec = _spec(cfg)
    net = None
    if cfg.get("checkpoint"):
        ckpt = _load_net(cfg, spec)
        net, spec = ckpt.network, ckpt.spec
    paths = list_images(cfg["dataset"])
    if cfg.get("limit"):
        paths = paths[:cfg["limit"]]
    images = [(p.name, load_image(p)) for p in paths]
    meta = {"dataset": str(cfg["dataset"]), "spec": spec.family.value, "seed": cfg["seed"],
            "provenance": provenance_line(cfg)}
    report = evaluate(images, cfg["sigmas"], spec, net, _optim_cfg(cfg), cfg["seed"],
                      cfg["threads"], meta)
    print(report.to_table(), end="")
    if cfg.get("output"):
        out = Path(cfg["output"])
        out.write_text(report.to_csv(), newline="")
        write_provenance(out, cfg)
        out.with_suffix(".txt").write_text(report.to_table())
    if not report.check():
        log.error("oracle column below global column")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gradcheck(cfg) -> int:
    families = [_spec(cfg).family] if cfg.get("_spec_given") else list(Family)
    ok = True
    print(f"backend: {_backend.NAME}")
    for fam in families:
        spec = KernelSpec(fam)
        rep = grad_check(spec, cfg["trials"], cfg["seed"], corrupt=cfg["corrupt_gradient"])
        net = network_grad_check(spec, cfg["net_trials"], cfg["seed"], corrupt=cfg["corrupt_gradient"])
        status = "PASS" if rep.passed and net["passed"] else "FAIL"
        ok &= status == "PASS"
        print(f"{status} {fam.value:9s} kernel-chain max_rel_err={rep.max_rel_error:.3e} "
              f"network max_rel_err={net['max_rel_error']:.3e} "
              f"(trials={rep.trials}, net probes={net['probes']}, kink skips={net['kink_skips']})")
    return EXIT_OK if ok else EXIT_GRADCHECK


HANDLERS = {
    "denoise": cmd_denoise, "oracle": cmd_oracle, "deblur": cmd_deblur, "upsample": cmd_upsample,
    "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        spec_given = "spec" in vars(args) or "spec" in cfg.get("_from_config", ())
        cfg.pop("_from_config", None)
        if args.command == "gradcheck":
            cfg["_spec_given"] = spec_given
        return HANDLERS[args.command](cfg)
    except UsageError as exc:
        print(f"pkn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, FloatingPointError) as exc:
        print(f"pkn {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
