"""``envfield`` command-line interface.

Every command accepts ``--config FILE`` (``key = value`` lines, keys named like
the long flags) and ``--out DIR``; flags given on the command line override the
file.  A ``manifest.json`` is written to the output directory before any work
starts.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import platform
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__, checkpoint, hdr_io

OUT_ENV = "ENVFIELD_OUT"
DEFAULT_OUT = "envfield_out"

log = logging.getLogger("envfield")


class UsageError(Exception):
    """A mistake in the command line, config file or inputs; reported without a traceback."""


# -- argument handling --------------------------------------------------------


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HEIGHTxWIDTH, got {text!r}") from None
    if h < 2 or w < 2:
        raise argparse.ArgumentTypeError("image size must be at least 2x2")
    return h, w


def _latent_dim(text: str) -> int:
    try:
        D = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"latent dimension must be an integer, got {text!r}") from None
    if D <= 0 or D % 3:
        raise argparse.ArgumentTypeError(f"latent dimension D={D} must be a positive multiple of 3 (D = 3N)")
    return D


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file supplying defaults for any flag")
    p.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="torch threads; 1 gives bitwise-reproducible runs")
    p.add_argument("--verbose", action="store_true")


def _fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--fit-steps", type=int, default=2500)
    p.add_argument("--lr-start", type=float, default=1e-1)
    p.add_argument("--lr-end", type=float, default=1e-7)
    p.add_argument("--fit-batch-size", type=int, default=4096)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="envfield", description="Rotation-equivariant neural fields for HDR environment maps.")
    parser.add_argument("--version", action="version", version=f"envfield {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write synthetic sky environment maps as .hdr files")
    _common(p)
    p.add_argument("--count", type=int, default=32)
    p.add_argument("--size", type=_size, default=(32, 64), help="HEIGHTxWIDTH, e.g. 32x64")

    p = sub.add_parser("train", help="train a field and latent bank on a directory of .hdr files")
    _common(p)
    p.add_argument("--data", help="directory of .hdr environment maps")
    p.add_argument("--mode", choices=("so2", "so3", "none"), default="so2")
    p.add_argument("--latent-dim", type=_latent_dim, default=27, help="D = 3N")
    p.add_argument("--steps", type=int, default=50_000)
    p.add_argument("--warmup", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--batch-size", type=int, default=4096)
    p.add_argument("--codes-per-batch", type=int, default=0, help="0 = every image in every batch")
    p.add_argument("--beta", type=float, default=1e-6, help="KL weight")
    p.add_argument("--hflip", type=_bool, default=True)
    p.add_argument("--az-rotations", type=int, default=0)
    p.add_argument("--layers", type=int, default=6)
    p.add_argument("--hidden", type=int, default=128)
    p.add_argument("--heads", type=int, default=8)
    p.add_argument("--pe-frequencies", type=int, default=8)
    p.add_argument("--log-every", type=int, default=500)

    for name, help_text in (("fit", "fit a latent code to an environment map (optionally masked)"),
                            ("complete", "fill in the hidden part of a masked environment map")):
        p = sub.add_parser(name, help=help_text)
        _common(p)
        p.add_argument("--ckpt")
        p.add_argument("--image")
        p.add_argument("--mask", help="single-channel PNG, 0 = hidden")
        _fit_flags(p)

    p = sub.add_parser("sample", help="decode codes drawn from the N(0, I) prior")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=_size, default=(64, 128))

    p = sub.add_parser("interpolate", help="decode linear blends between two codes")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--latent-a", help="latent checkpoint, or bank:<i> for a training image")
    p.add_argument("--latent-b", help="latent checkpoint, or bank:<i> for a training image")
    p.add_argument("--frames", type=int, default=5)
    p.add_argument("--size", type=_size, default=(64, 128))

    p = sub.add_parser("rotate", help="rotate a code about +y and decode it")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--latent", help="latent checkpoint, or bank:<i> for a training image")
    p.add_argument("--angle", type=float, default=90.0, help="degrees")
    p.add_argument("--size", type=_size, default=(64, 128))

    p = sub.add_parser("invert", help="recover lighting from a rendering of a shiny sphere")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--target", help="rendered sphere (.hdr, resolution x resolution)")
    p.add_argument("--image", help="environment map to render the target from (instead of --target)")
    p.add_argument("--kd", type=float, nargs=3, default=(0.8, 0.8, 0.8))
    p.add_argument("--ks", type=float, default=0.6)
    p.add_argument("--shininess", type=float, default=32.0)
    p.add_argument("--resolution", type=int, default=128)
    p.add_argument("--env-height", type=int, default=64)
    p.add_argument("--inv-steps", type=int, default=200)
    p.add_argument("--inv-lr", type=float, default=1e-2)
    p.add_argument("--compare-sh", type=_bool, default=False, help="also invert with order-2 SH")

    p = sub.add_parser("baseline-fit", help="fit SH or SG lighting to an environment map")
    _common(p)
    p.add_argument("--image")
    p.add_argument("--kind", choices=("sh", "sg"), default="sh")
    p.add_argument("--latent-dim", type=_latent_dim, default=27, help="match this D")
    p.add_argument("--sg-steps", type=int, default=500)

    p = sub.add_parser("eval", help="score fitted reconstructions against SH and SG baselines")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--data")
    p.add_argument("--baselines", type=_bool, default=True)
    p.add_argument("--triptychs", type=_bool, default=False)
    p.add_argument("--rotation-table", type=_bool, default=False, help="also run the rotation-recovery experiment")
    p.add_argument("--sg-steps", type=int, default=500)
    _fit_flags(p)

    p = sub.add_parser("audit", help="measure the equivariance error of a checkpoint")
    _common(p)
    p.add_argument("--ckpt")
    p.add_argument("--trials", type=int, default=100)
    return parser


def _apply_config(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse once to find the command and config file, then re-parse with file values as defaults."""
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("envfield: a command is required (see envfield --help)")
    if not args.config:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    path = Path(args.config)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        values = checkpoint.parse_header(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, checkpoint.CheckpointError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    actions = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, raw in values.items():
        dest = key.replace("-", "_")
        if dest not in actions or dest in ("config", "help"):
            raise UsageError(f"{path}: unknown key {key!r} for command {args.command!r}")
        action = actions[dest]
        try:
            if action.nargs is not None and action.nargs not in ("?",):
                items = raw.replace(",", " ").split()
                defaults[dest] = [action.type(v) if action.type else v for v in items]
            else:
                defaults[dest] = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{path}: bad value for {key!r}: {exc}") from None
        if action.choices is not None and defaults[dest] not in action.choices:
            raise UsageError(f"{path}: {key!r} must be one of {sorted(action.choices)}")
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _require(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s) {', '.join(missing)}")


def _revision() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def _manifest(args, out: Path, argv) -> dict:
    resolved = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(args).items()}
    return {
        "command": args.command,
        "argv": list(argv),
        "config": args.config,
        "seed": args.seed,
        "out": str(out),
        "revision": f"envfield {__version__} ({_revision()})",
        "python": platform.python_version(),
        "torch": torch.__version__,
        "arguments": resolved,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }


# -- helpers ------------------------------------------------------------------


def _load_image(path) -> hdr_io.EnvironmentImage:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"image not found: {path}")
    return hdr_io.load_hdr(path)


def _load_model(path):
    from .field import load_model

    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    return load_model(path)


def _latent(ref: str, model, tensors) -> torch.Tensor:
    from .equivariance import unvec

    if ref.startswith("bank:"):
        if "latent_bank.mu" not in tensors:
            raise UsageError("checkpoint holds no latent bank")
        try:
            i = int(ref[5:])
        except ValueError:
            raise UsageError(f"bad bank reference {ref!r}; expected bank:<index>") from None
        mu = tensors["latent_bank.mu"]
        if not 0 <= i < len(mu):
            raise UsageError(f"bank index {i} out of range (bank has {len(mu)} codes)")
        return unvec(torch.from_numpy(mu[i]), model.n_latent)
    path = Path(ref)
    if not path.is_file():
        raise UsageError(f"latent file not found: {path}")
    _, t = checkpoint.load_checkpoint(path)
    if "latent.Z" not in t:
        raise UsageError(f"{path} holds no latent code")
    Z = torch.from_numpy(t["latent.Z"])
    if Z.shape != (3, model.n_latent):
        raise UsageError(f"{path}: latent is {tuple(Z.shape)}, model expects (3, {model.n_latent})")
    return Z


def _save_latent(path, Z, header=None) -> None:
    checkpoint.save_checkpoint(path, {"kind": "latent", **(header or {})},
                               {"latent.Z": Z.detach().double().numpy() if isinstance(Z, torch.Tensor) else Z})


def _save_env(pixels, stem: Path) -> None:
    pixels = np.asarray(pixels, dtype=np.float32)
    hdr_io.save_hdr(pixels, stem.with_suffix(".hdr"))
    from .evaluation import ldr_exposure, tone_map

    hdr_io.save_png(tone_map(pixels, ldr_exposure(pixels)), stem.with_suffix(".png"))


def _write_rows(rows, path) -> None:
    from .evaluation import write_csv

    write_csv(rows, path)


def _fit_config(args):
    from .fitting import FitConfig

    return FitConfig(steps=args.fit_steps, lr_start=args.lr_start, lr_end=args.lr_end,
                     batch_size=args.fit_batch_size, seed=args.seed)


def _data_images(directory):
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"data directory not found: {d}")
    files = sorted(d.glob("*.hdr"))
    if not files:
        raise UsageError(f"no .hdr files in {d}")
    return files, [hdr_io.load_hdr(f) for f in files]


# -- commands -----------------------------------------------------------------


def cmd_gen_data(args, out: Path) -> None:
    H, W = args.size
    for i in range(args.count):
        img = hdr_io.generate_synthetic_env(args.seed * 100_003 + i, H, W)
        hdr_io.save_hdr(img, out / f"env_{i:04d}.hdr")
    print(f"wrote {args.count} environment maps ({H}x{W}) to {out}")


def cmd_train(args, out: Path) -> None:
    from .field import FieldConfig, save_model
    from .training import TrainConfig, train, write_history_csv

    _require(args, "data")
    files, images = _data_images(args.data)
    fc = FieldConfig(n_latent=args.latent_dim // 3, mode=args.mode, layers=args.layers, hidden=args.hidden,
                     heads=args.heads, pe_frequencies=args.pe_frequencies)
    tc = TrainConfig(steps=args.steps, warmup=args.warmup, lr0=args.lr, alpha=args.alpha, batch_size=args.batch_size,
                     codes_per_batch=args.codes_per_batch, beta=args.beta, seed=args.seed, hflip=args.hflip,
                     az_rotations=args.az_rotations, log_every=args.log_every)
    result = train(images, tc, fc)
    header = {**tc.to_header(), "train.images": len(images)}
    save_model(out / "model.ckpt", result.model, header, result.bank.tensors())
    write_history_csv(result.history, out / "loss.csv")
    last = result.history[-1]
    print(f"trained {len(result.bank)} codes for {tc.steps} steps in {result.seconds:.1f}s; "
          f"final loss {last['total']:.5f}; wrote {out / 'model.ckpt'} and {out / 'loss.csv'}")


def cmd_fit(args, out: Path, require_mask: bool = False) -> None:
    from .field import decode_log_image
    from .fitting import fit_latent

    _require(args, "ckpt", "image", *(("mask",) if require_mask else ()))
    model, _, _ = _load_model(args.ckpt)
    image = _load_image(args.image)
    mask = None
    if args.mask:
        if not Path(args.mask).is_file():
            raise UsageError(f"mask not found: {args.mask}")
        mask = hdr_io.load_mask_png(args.mask)
        if mask.shape != (image.height, image.width):
            raise UsageError(f"mask is {mask.shape[1]}x{mask.shape[0]} but image is {image.width}x{image.height}")
        if not mask.any():
            raise UsageError("mask hides every pixel; nothing to fit")
    result = fit_latent(model, image, _fit_config(args), mask)
    log_img = decode_log_image(model, result.Z, image.height, image.width)
    from .fitting import optimal_scale

    b = optimal_scale(log_img, hdr_io.log_radiance(image.pixels), mask)
    stem = Path(args.image).stem + ("_completed" if mask is not None else "_fit")
    _save_env(np.exp(log_img + b), out / stem)
    _save_latent(out / f"{stem}_latent.ckpt", result.Z, {"source": Path(args.image).name, "exposure_offset": b})
    _write_rows(result.history, out / f"{stem}_loss.csv")
    print(f"final loss {result.history[-1]['total']:.5f}; wrote {out / (stem + '.hdr')}")


def cmd_sample(args, out: Path) -> None:
    from .field import decode_image
    from .fitting import sample_prior

    _require(args, "ckpt")
    model, _, _ = _load_model(args.ckpt)
    rng = np.random.default_rng(args.seed)
    H, W = args.size
    for i in range(args.count):
        Z = sample_prior(model.n_latent, rng)
        _save_env(decode_image(model, Z, H, W), out / f"sample_{i:03d}")
        _save_latent(out / f"sample_{i:03d}_latent.ckpt", Z)
    print(f"wrote {args.count} samples to {out}")


def cmd_interpolate(args, out: Path) -> None:
    from .field import decode_image
    from .fitting import interpolate

    _require(args, "ckpt", "latent_a", "latent_b")
    if args.frames < 2:
        raise UsageError("--frames must be at least 2")
    model, _, tensors = _load_model(args.ckpt)
    Za, Zb = _latent(args.latent_a, model, tensors), _latent(args.latent_b, model, tensors)
    H, W = args.size
    for i, t in enumerate(np.linspace(0.0, 1.0, args.frames)):
        _save_env(decode_image(model, interpolate(Za, Zb, float(t)), H, W), out / f"frame_{i:03d}")
    print(f"wrote {args.frames} frames to {out}")


def cmd_rotate(args, out: Path) -> None:
    from .equivariance import rotate_latent
    from .field import decode_image
    from .geometry import rotation_y

    _require(args, "ckpt", "latent")
    model, _, tensors = _load_model(args.ckpt)
    Z = _latent(args.latent, model, tensors)
    H, W = args.size
    Z_rot = rotate_latent(Z, rotation_y(math.radians(args.angle)))
    _save_env(decode_image(model, Z, H, W), out / "original")
    _save_env(decode_image(model, Z_rot, H, W), out / f"rotated_{args.angle:g}")
    _save_latent(out / f"rotated_{args.angle:g}_latent.ckpt", Z_rot, {"angle_deg": args.angle})
    print(f"wrote original and rotated ({args.angle:g} deg) environments to {out}")


def cmd_invert(args, out: Path) -> None:
    from .evaluation import hdr_psnr, psnr
    from .field import decode_log_image
    from .inverse_render import InverseConfig, Material, Renderer, invert_lighting, invert_lighting_sh

    _require(args, "ckpt")
    if bool(args.target) == bool(args.image):
        raise UsageError("invert: give exactly one of --target or --image")
    model, _, _ = _load_model(args.ckpt)
    try:
        material = Material(kd=tuple(args.kd), ks=args.ks, n=args.shininess)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    renderer = Renderer(material, args.resolution, args.env_height)
    if args.image:
        env = _load_image(args.image)
        target = renderer.render(renderer.raster_radiance(env.pixels))
        hdr_io.save_hdr(target.astype(np.float32), out / "target.hdr")
    else:
        target = _load_image(args.target).pixels
        if target.shape[:2] != (args.resolution, args.resolution):
            raise UsageError(f"target must be {args.resolution}x{args.resolution}, got {target.shape[1]}x{target.shape[0]}")
    config = InverseConfig(steps=args.inv_steps, lr=args.inv_lr)
    result = invert_lighting(target, renderer, model, config)
    render = renderer.to_image(result.render)
    peak = float(target.max()) or 1.0
    rows = [{"method": "neural", "render_psnr": psnr(render, target, peak)}]
    _save_env(render, out / "render_neural")
    env_log = decode_log_image(model, result.params, args.env_height, 2 * args.env_height)
    _save_env(np.exp(env_log) * result.exposure, out / "environment_neural")
    _save_latent(out / "inverted_latent.ckpt", result.params, {"exposure": result.exposure})
    _write_rows(result.history, out / "inversion_loss.csv")
    if args.image:
        gt = hdr_io.log_radiance(renderer.raster_radiance(env.pixels).numpy().reshape(args.env_height, -1, 3))
        rows[0]["env_log_psnr"] = hdr_psnr(env_log, gt)
    if args.compare_sh:
        sh = invert_lighting_sh(target, renderer, 2, config)
        sh_render = renderer.to_image(sh.render)
        row = {"method": "sh_order2", "render_psnr": psnr(sh_render, target, peak)}
        sh_env = (renderer.sh_radiance(sh.params) * sh.exposure).numpy().reshape(args.env_height, -1, 3)
        if args.image:
            row["env_log_psnr"] = hdr_psnr(hdr_io.log_radiance(sh_env), gt)
        rows.append(row)
        _save_env(sh_render, out / "render_sh")
    keys = sorted({k for r in rows for k in r}, key=["method", "render_psnr", "env_log_psnr"].index)
    rows = [{k: r.get(k, float("nan")) for k in keys} for r in rows]
    _write_rows(rows, out / "inversion.csv")
    for r in rows:
        print("  ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))


def cmd_baseline_fit(args, out: Path) -> None:
    from . import baselines
    from .evaluation import score

    _require(args, "image")
    image = _load_image(args.image)
    stem = Path(args.image).stem
    if args.kind == "sh":
        try:
            order = baselines.sh_order_for_dimension(args.latent_dim)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        coeffs = baselines.fit_sh(image, order)
        recon = baselines.render_sh(coeffs, image.height, image.width)
        checkpoint.save_checkpoint(out / f"{stem}_sh.ckpt", {"kind": "sh", "order": order}, coeffs.tensors())
    else:
        lobes, losses = baselines.fit_sg(image, baselines.sg_lobes_for_dimension(args.latent_dim), args.sg_steps)
        recon = baselines.render_sg(lobes, image.height, image.width)
        checkpoint.save_checkpoint(out / f"{stem}_sg.ckpt", {"kind": "sg", "lobes": lobes.count}, lobes.tensors())
    recon = np.maximum(recon, 0.0)
    _save_env(recon, out / f"{stem}_{args.kind}")
    scores = score(recon, image.pixels)
    _write_rows([{"image": stem, "method": args.kind, **scores}], out / f"{stem}_{args.kind}_metrics.csv")
    print("  ".join(f"{k}={v:.3f}" for k, v in scores.items()))


def cmd_eval(args, out: Path) -> None:
    from . import baselines
    from .evaluation import MetricReport, evaluate_fits, rotation_fit_experiment, save_triptych, score, write_tables

    _require(args, "ckpt", "data")
    model, header, _ = _load_model(args.ckpt)
    files, images = _data_images(args.data)
    names = [f.stem for f in files]
    report, decoded = evaluate_fits(model, images, _fit_config(args), names)
    summary = [{"method": "neural", "D": 3 * model.n_latent, **report.mean()}]
    write_tables(report.rows(), out, "metrics_neural")
    if args.triptychs:
        for name, pred, img in zip(names, decoded, images):
            save_triptych(pred, img.pixels, out / f"{name}_triptych.png")
    if args.baselines:
        D = 3 * model.n_latent
        try:
            order = baselines.sh_order_for_dimension(D)
        except ValueError:
            order = None
        if order is not None:
            sh = MetricReport()
            for name, img in zip(names, images):
                recon = np.maximum(baselines.render_sh(baselines.fit_sh(img, order), img.height, img.width), 0.0)
                sh.add(name, score(recon, img.pixels))
            write_tables(sh.rows(), out, "metrics_sh")
            summary.append({"method": f"sh_order{order}", "D": D, **sh.mean()})
        sg = MetricReport()
        lobes = baselines.sg_lobes_for_dimension(D)
        for name, img in zip(names, images):
            fitted, _ = baselines.fit_sg(img, lobes, args.sg_steps)
            sg.add(name, score(baselines.render_sg(fitted, img.height, img.width), img.pixels))
        write_tables(sg.rows(), out, "metrics_sg")
        summary.append({"method": f"sg_{lobes}lobes", "D": 6 * lobes, **sg.mean()})
    write_tables(summary, out, "summary")
    if args.rotation_table:
        rows = rotation_fit_experiment(model, images, config=_fit_config(args))
        write_tables(rows, out, "rotation_table")
    from .evaluation import markdown_table

    print(markdown_table(summary), end="")


def cmd_audit(args, out: Path) -> None:
    from .evaluation import equivariance_audit

    _require(args, "ckpt")
    model, _, _ = _load_model(args.ckpt)
    worst = equivariance_audit(model, args.trials, args.seed)
    text = f"mode={model.config.mode} trials={args.trials} max_deviation={worst:.3e}\n"
    (out / "audit.txt").write_text(text)
    print(text, end="")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "fit": cmd_fit,
    "complete": lambda a, o: cmd_fit(a, o, require_mask=True),
    "sample": cmd_sample,
    "interpolate": cmd_interpolate,
    "rotate": cmd_rotate,
    "invert": cmd_invert,
    "baseline-fit": cmd_baseline_fit,
    "eval": cmd_eval,
    "audit": cmd_audit,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _apply_config(build_parser(), argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    out = Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)
    try:
        out.mkdir(parents=True, exist_ok=True)
        manifest = _manifest(args, out, argv)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
        torch.set_num_threads(max(1, args.threads))
        if args.threads == 1:
            torch.use_deterministic_algorithms(True)
        t0 = time.perf_counter()
        COMMANDS[args.command](args, out)
        manifest["wall_clock_seconds"] = round(time.perf_counter() - t0, 3)
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    except (UsageError, checkpoint.CheckpointError, hdr_io.HDRFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.strerror or exc}: {exc.filename or ''}".rstrip(": "), file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
