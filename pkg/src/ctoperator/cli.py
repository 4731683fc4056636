"""``ctoperator`` command line: phantom, project, subsample, recon, train, verify, metrics.

Exit codes: 0 success, 1 failed verify checks, 2 usage or validation error, 3 runtime or format error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .core import (AngleSet, FormatError, Image, SampleMask, Sinogram, add_gaussian_noise,
                   apply_mask, make_rng, read_grid_file, write_grid_file)

log = logging.getLogger("ctoperator")

EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(ValueError):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (v > 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a positive number, got {text}")
    return v


def _nonneg_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (v >= 0 and math.isfinite(v)):
        raise argparse.ArgumentTypeError(f"expected a non-negative number, got {text}")
    return v


def _log_config(command: str, args: argparse.Namespace) -> dict:
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
           if k not in ("func",)}
    log.info("%s config %s", command, json.dumps(cfg, sort_keys=True))
    return cfg


# -- commands -----------------------------------------------------------------

def cmd_phantom(args) -> int:
    from .phantom import load_phantom, random_phantom, rasterize, shepp_logan

    spacing = args.spacing if args.spacing is not None else 2.0 / args.size
    args.spacing = spacing
    _log_config("phantom", args)
    extent = args.size * spacing / 2
    if args.spec == "shepp-logan":
        spec = shepp_logan(extent)
    elif args.spec == "random":
        spec = random_phantom(make_rng(args.seed), radius=extent)
    else:
        spec = load_phantom(args.spec)
    img = rasterize(spec, args.size, args.size, spacing)
    write_grid_file(args.out, img)
    print(f"{img.width}x{img.height} spacing={spacing!r} "
          f"range=[{img.values.min():.6g}, {img.values.max():.6g}]")
    return 0


def _image_arg(path) -> Image:
    obj = read_grid_file(path)
    if not isinstance(obj, Image):
        raise UsageError(f"{path} holds a sinogram, expected an image")
    return obj


def _sino_arg(path) -> Sinogram:
    obj = read_grid_file(path)
    if not isinstance(obj, Sinogram):
        raise UsageError(f"{path} holds an image, expected a sinogram")
    return obj


def cmd_project(args) -> int:
    from .phantom import analytic_sinogram, load_phantom
    from .projector import ProjectorConfig, forward

    img = _image_arg(args.inp)
    det_spacing = args.det_spacing if args.det_spacing is not None else img.spacing
    args.det_spacing = det_spacing
    _log_config("project", args)
    period = math.pi if args.period == "pi" else 2 * math.pi
    angles = AngleSet.uniform_views(args.views, period)
    if args.analytic:
        sino = analytic_sinogram(load_phantom(args.analytic), angles, args.detectors, det_spacing)
    else:
        cfg = ProjectorConfig(img.width, img.height, angles, args.detectors, img.spacing,
                              det_spacing, args.step_fraction)
        sino = forward(cfg, img)
    if args.noise_sigma > 0:
        sino = add_gaussian_noise(sino, args.noise_sigma, args.seed)
    write_grid_file(args.out, sino)
    print(f"{len(angles)}x{args.detectors} sinogram")
    return 0


def cmd_subsample(args) -> int:
    _log_config("subsample", args)
    sino = _sino_arg(args.inp)
    mask = SampleMask.stride(len(sino.angle_set), args.views)
    write_grid_file(args.out, apply_mask(sino, mask))
    print(f"kept {args.views} of {len(sino.angle_set)} views (stride {len(sino.angle_set) // args.views})")
    return 0


def cmd_recon(args) -> int:
    from .classical import FbpConfig, SartConfig, fbp, sart
    from .model import cto_forward, infer_superres, load_model
    from .projector import ProjectorConfig

    if args.method == "cto" and not args.model:
        raise UsageError("--method cto requires --model")
    sino = _sino_arg(args.inp)
    if args.method == "cto":
        _log_config("recon", args)
        cfg, params = load_model(args.model)
        img = (cto_forward(params, sino, cfg) if args.scale == 1
               else infer_superres(params, sino, cfg, args.scale))
    else:
        size = args.size
        spacing = args.spacing if args.spacing is not None else sino.det_spacing
        args.spacing = spacing
        proj = ProjectorConfig(size, size, sino.angle_set, sino.det_count, spacing,
                               sino.det_spacing, args.step_fraction)
        if args.method == "fbp":
            _log_config("recon", args)
            img = fbp(FbpConfig(args.filter, args.pad_factor), proj, sino)
        else:
            scfg = SartConfig(args.iterations, args.relaxation, args.clip_min, args.clip_max)
            _log_config("recon", args)
            log.info("sart iterations=%d relaxation=%g clip=[%g,%g]", scfg.iterations,
                     scfg.relaxation, scfg.clip_min, scfg.clip_max)
            img = sart(scfg, proj, sino)
    write_grid_file(args.out, img)
    print(f"{img.width}x{img.height} reconstruction ({args.method})")
    return 0


def _read_train_config(path):
    from dataclasses import replace

    from .model import CtoConfig
    from .training import TrainConfig

    model, train = CtoConfig.mini(), TrainConfig()
    if path is None:
        return model, train
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(raw, dict) or set(raw) - {"model", "train"}:
        raise UsageError("config must be an object with optional 'model' and 'train' sections")
    mkw = dict(raw.get("model", {}))
    try:
        for key in ("nos_spatial", "nos_freq", "noi"):
            if key in mkw:
                mkw[key] = replace(getattr(model, key), **mkw[key])
        model = replace(model, **mkw)
        train = replace(train, **raw.get("train", {}))
    except TypeError as exc:
        raise UsageError(f"bad config: {exc}") from None
    return model, train


def _grid_dir(path) -> list[tuple[str, Image]]:
    d = Path(path)
    if not d.is_dir():
        raise UsageError(f"{path} is not a directory")
    out = []
    for f in sorted(p for p in d.iterdir() if p.is_file()):
        out.append((f.name, _image_arg(f)))
    return out


def cmd_train(args) -> int:
    from .model import init_params, save_model
    from .training import train

    cfg, tcfg = _read_train_config(args.config)
    _log_config("train", args)
    log.info("model config %s", cfg.to_json())
    log.info("train config %s", tcfg)
    data = [img for _, img in _grid_dir(args.data_dir)]
    if not data:
        raise UsageError(f"no images in {args.data_dir}")
    val = [img for _, img in _grid_dir(args.val_dir)] if args.val_dir else None
    if args.epochs == 0:
        params, history = init_params(cfg, args.seed), []
    else:
        result = train(cfg, data, args.epochs, args.seed, tcfg, val)
        params, history = result.params, result.history
    save_model(args.out, cfg, params)
    hist_path = args.history or f"{args.out}.history"
    Path(hist_path).write_text("".join(rec.line() + "\n" for rec in history))
    if history:
        print(f"trained {args.epochs} epochs; final loss {history[-1].loss:.6g}")
    else:
        print("wrote initialized model")
    return 0


def cmd_verify(args) -> int:
    from .verify import report, timed_run

    cfg = _log_config("verify", args)
    checks, elapsed = timed_run(args.suite, args.seed)
    text = f"# config {json.dumps(cfg, sort_keys=True)}\n" + report(checks, elapsed)
    if args.report:
        Path(args.report).write_text(text)
    sys.stdout.write(text)
    return 0 if all(c.passed for c in checks) else 1


def cmd_metrics(args) -> int:
    from .metrics import MU_WATER, MetricReport

    mu = args.mu_water if args.mu_water is not None else MU_WATER[args.unit]
    args.mu_water = mu
    cfg = _log_config("metrics", args)
    rep = MetricReport()
    test, ref = Path(args.test), Path(args.ref)
    if test.is_dir() != ref.is_dir():
        raise UsageError("--test and --ref must both be files or both be directories")
    if test.is_dir():
        refs = dict(_grid_dir(ref))
        pairs = _grid_dir(test)
        if not pairs:
            raise UsageError(f"no images in {test}")
        for name, img in pairs:
            if name not in refs:
                raise UsageError(f"no reference for {name}")
            rep.add(name, img, refs[name], mu, args.peak)
    else:
        rep.add(test.name, _image_arg(test), _image_arg(ref), mu, args.peak)
    text = f"# config {json.dumps(cfg, sort_keys=True)}\n" + rep.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
        Path(f"{args.out}.kv").write_text(rep.to_keyvalue())
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctoperator", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=_positive_int, default=None,
                   help="cap on numeric worker threads (default: $CTO_THREADS)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("phantom", help="rasterize a phantom")
    s.add_argument("--spec", required=True, help="phantom spec file, 'shepp-logan' or 'random'")
    s.add_argument("--size", type=_positive_int, default=256)
    s.add_argument("--spacing", type=_positive_float, default=None,
                   help="pixel spacing (default 2/size: the grid spans [-1, 1])")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_phantom)

    s = sub.add_parser("project", help="forward-project an image")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--views", type=_positive_int, default=720)
    s.add_argument("--detectors", type=_positive_int, default=300)
    s.add_argument("--det-spacing", type=_positive_float, default=None,
                   help="detector spacing (default: image pixel spacing)")
    s.add_argument("--period", choices=("pi", "2pi"), default="pi")
    s.add_argument("--analytic", default=None, help="phantom spec file for exact line integrals")
    s.add_argument("--step-fraction", type=_positive_float, default=0.5)
    s.add_argument("--noise-sigma", type=_nonneg_float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_project)

    s = sub.add_parser("subsample", help="keep a uniform stride of views")
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--views", type=_positive_int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_subsample)

    s = sub.add_parser("recon", help="reconstruct an image from a sinogram")
    s.add_argument("--method", choices=("fbp", "sart", "cto"), required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--model", default=None)
    s.add_argument("--size", type=_positive_int, default=256)
    s.add_argument("--spacing", type=_positive_float, default=None,
                   help="pixel spacing (default: detector spacing)")
    s.add_argument("--step-fraction", type=_positive_float, default=0.5)
    s.add_argument("--filter", choices=("ramp", "none"), default="ramp")
    s.add_argument("--pad-factor", type=_positive_int, default=2)
    s.add_argument("--iterations", type=_positive_int, default=5)
    s.add_argument("--relaxation", type=_nonneg_float, default=0.15)
    s.add_argument("--clip-min", type=float, default=0.0)
    s.add_argument("--clip-max", type=float, default=0.549)
    s.add_argument("--scale", type=_positive_int, default=1, help="cto super-resolution factor")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_recon)

    s = sub.add_parser("train", help="train a CTO model")
    s.add_argument("--config", default=None, help="JSON with optional 'model' and 'train' sections")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--val-dir", default=None)
    s.add_argument("--epochs", type=_nonneg_int, default=1)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--history", default=None, help="history file (default: <out>.history)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("verify", help="run property-verification suites")
    s.add_argument("--suite", choices=("adjoint", "equivariance", "slice", "disco", "gradcheck",
                                       "all"), default="all")
    s.add_argument("--report", default=None)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("metrics", help="PSNR / SSIM / RMSE(HU) against a reference")
    s.add_argument("--test", required=True, help="image file or directory")
    s.add_argument("--ref", required=True, help="image file or directory (matched by name)")
    s.add_argument("--unit", choices=("mm", "cm"), required=True,
                   help="attenuation unit; sets the water default (0.0192/mm, 0.192/cm)")
    s.add_argument("--mu-water", type=_positive_float, default=None)
    s.add_argument("--peak", type=_positive_float, default=None,
                   help="PSNR peak (default: reference maximum)")
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_metrics)
    return p


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("CTO_THREADS")
    if env is None or env == "":
        return None
    try:
        v = int(env)
    except ValueError:
        raise UsageError(f"CTO_THREADS must be a positive integer, got {env!r}") from None
    if v < 1:
        raise UsageError(f"CTO_THREADS must be a positive integer, got {env!r}")
    return v


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        threads = _threads(args)
        args.threads = threads
        if threads is None:
            return args.func(args)
        with threadpool_limits(limits=threads):
            return args.func(args)
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        print(f"error: no such file: {exc.filename}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # anything else is a runtime failure, not a usage problem
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
