"""Command-line entry points: simulate, optimize, gradcheck, recover, bench.

Every command writes a manifest.json (resolved config echo, arguments,
timings) plus config.resolved.json, which can be passed back via --config to
reproduce the run bit-exactly in deterministic mode.

Exit codes: 0 ok; 1 failed gradient check; 2 config/usage error; 3 I/O
error; 4 transport error (remote); 5 not converged / not recovered.
"""

from __future__ import annotations

import argparse
import json
import os
import pathlib
import sys
import time

import numpy as np

from . import __version__
from .config import SimConfig, load_config
from .errors import (DreamPhysError, MalformedPly, ProtocolError, RangeError,
                     SchemaError, Transport)
from .experiments import RECOVERY_SEED, SCENES, run_recovery
from .field import MaterialField
from .guidance import DEFAULT_CFG, DiffusionSchedule, RemoteDenoiser
from .imageio import load_frames, save_frames
from .mpm import Engine
from .optimizer import (AnalyticGuidance, OptimizerConfig, RemoteGuidance,
                        optimize, resolve_cameras, simulate_and_render)
from .ply import load_ply
from .protocol import Condition
from .render import VideoTensor

EXIT_OK = 0
EXIT_GRADCHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_TRANSPORT = 4
EXIT_NOT_CONVERGED = 5


def _write_manifest(out_dir: pathlib.Path, command: str, args: dict,
                    config: SimConfig = None, extra: dict = None):
    out_dir.mkdir(parents=True, exist_ok=True)
    args = {k: v for k, v in args.items()
            if isinstance(v, (str, int, float, bool, type(None)))}
    manifest = {
        "command": command,
        "version": __version__,
        "args": args,
        "config": config.to_dict() if config is not None else None,
    }
    manifest.update(extra or {})
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    if config is not None:
        with open(out_dir / "config.resolved.json", "w", encoding="utf-8") as f:
            json.dump(config.to_dict(), f, indent=2, sort_keys=True)


def _resolve_threads(args) -> int:
    """--threads beats DREAMPHYS_THREADS beats hardware count; deterministic
    mode pins 1. The current engine kernels are serial either way; the value
    is recorded in the manifest for interface stability."""
    if getattr(args, "threads", None):
        n = args.threads
    elif os.environ.get("DREAMPHYS_THREADS"):
        n = int(os.environ["DREAMPHYS_THREADS"])
    else:
        n = os.cpu_count() or 1
    if getattr(args, "deterministic", True):
        n = 1
    return max(1, n)


def _load_inputs(args):
    scene = load_ply(args.scene)
    config = load_config(args.config) if args.config else SimConfig()
    return scene, config


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    scene, config = _load_inputs(args)
    out = pathlib.Path(args.out)
    if args.params:
        field = MaterialField.load(args.params)
        young = field.eval_many(scene.centers)
    else:
        young = np.full(len(scene), args.young)
    engine = Engine(config, *scene.bounds,
                    dtype=np.float64 if args.fp64 else np.float32)
    cameras = resolve_cameras(config, scene)
    video, _ = simulate_and_render(scene, engine, young, cameras,
                                   dtype=engine.dtype)
    save_frames(video.frames, out)
    _write_manifest(out, "simulate", vars(args) | {"young": float(np.mean(young))},
                    config, {"wall_s": time.perf_counter() - t0,
                             "frames": int(config.frame_count),
                             "threads": _resolve_threads(args),
                             "det_clamps": engine.clamp_events})
    print(f"wrote {config.frame_count} frames to {out}")
    return EXIT_OK


def cmd_optimize(args) -> int:
    t0 = time.perf_counter()
    scene, config = _load_inputs(args)
    out = pathlib.Path(args.out)
    schedule = DiffusionSchedule()

    if args.oracle == "analytic":
        if not args.reference:
            raise SchemaError("--oracle analytic requires --reference <dir>")
        # frames.npy, when present, bypasses 8-bit PNG quantization so a
        # self-reference run is an exact fixed point
        npy = pathlib.Path(args.reference) / "frames.npy"
        frames = np.load(npy) if npy.exists() else load_frames(args.reference)
        if frames.shape[0] != config.frame_count:
            raise SchemaError(
                f"reference has {frames.shape[0]} frames, config wants "
                f"{config.frame_count}")
        reference = VideoTensor(frames, np.zeros(frames.shape[0], dtype=int))
        guidance = AnalyticGuidance(reference, schedule)
    else:
        if not args.endpoint:
            raise SchemaError("--oracle remote requires --endpoint <url>")
        if bool(args.text) == bool(args.image):
            raise SchemaError("remote oracle needs exactly one of --text/--image")
        if args.text:
            condition = Condition(kind="text", text=args.text)
        else:
            from PIL import Image
            arr = np.asarray(Image.open(args.image).convert("RGB"),
                             dtype=np.float32) / 255.0
            condition = Condition(kind="image", image=arr)
        client = RemoteDenoiser(args.endpoint, condition, cfg_scale=args.cfg)
        guidance = RemoteGuidance(client, schedule)

    opt = OptimizerConfig(groups=args.groups, max_iterations=args.max_iterations,
                          seed=args.seed, deterministic=args.deterministic)
    report = optimize(scene, config, opt, guidance, out_dir=out,
                      dtype=np.float64 if args.fp64 else np.float32)

    young = report.field.eval_many(scene.centers)
    engine = Engine(config, *scene.bounds,
                    dtype=np.float64 if args.fp64 else np.float32)
    video, _ = simulate_and_render(scene, engine, young,
                                   resolve_cameras(config, scene),
                                   dtype=engine.dtype)
    save_frames(video.frames, out / "final")
    _write_manifest(out, "optimize", {k: v for k, v in vars(args).items()},
                    config, {
                        "threads": _resolve_threads(args),
                        "cfg_scale": args.cfg,
                        "iterations": report.iterations,
                        "converged": report.converged,
                        "mean_log10_E": report.history[-1] if report.history else None,
                        "wall_s": time.perf_counter() - t0,
                    })
    print(f"finished after {report.iterations} iterations "
          f"(converged={report.converged}); artifacts in {out}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all
    results, ok = run_all(fp64=args.fp64, seed=args.seed)
    if args.out:
        out = pathlib.Path(args.out)
        _write_manifest(out, "gradcheck", vars(args), None,
                        {"results": results, "passed": ok})
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_recover(args) -> int:
    t0 = time.perf_counter()
    out = pathlib.Path(args.out)
    overrides = {}
    if args.groups is not None:
        overrides["groups"] = args.groups
    if args.max_iterations is not None:
        overrides["max_iterations"] = args.max_iterations
    result = run_recovery(scene_kind=args.scene, true_young=args.true_young,
                          init_bias=args.init_bias, seed=args.seed,
                          out_dir=out, opt_overrides=overrides)
    save_frames(result.reference, out / "reference")
    save_frames(result.final_video, out / "final")
    _, config = SCENES[args.scene]()
    _write_manifest(out, "recover", vars(args), config, {
        "true_young": args.true_young,
        "mean_log10_E": result.report.history[-1] if result.report.history else None,
        "log10_error": result.log10_error,
        "psnr_db": result.psnr_db,
        "iterations": result.iterations,
        "converged": result.converged,
        "recovered": result.recovered,
        "wall_s": time.perf_counter() - t0,
    })
    print(f"recover[{args.scene}] E*={args.true_young:g} bias={args.init_bias}: "
          f"|dlog10E|={result.log10_error:.3f} psnr={result.psnr_db:.1f} dB "
          f"iterations={result.iterations} converged={result.converged}")
    return EXIT_OK if result.recovered else EXIT_NOT_CONVERGED


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dreamphys",
                                description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="forward simulation to PNG frames")
    sim.add_argument("--scene", required=True)
    sim.add_argument("--config")
    sim.add_argument("--out", required=True)
    sim.add_argument("--params", help="material-field checkpoint")
    sim.add_argument("--young", type=float, default=1e6,
                     help="constant Young's modulus when no --params")
    sim.add_argument("--fp64", action="store_true")
    sim.add_argument("--threads", type=int, default=None)
    sim.set_defaults(fn=cmd_simulate)

    opt = sub.add_parser("optimize", help="estimate the material field")
    opt.add_argument("--scene", required=True)
    opt.add_argument("--config")
    opt.add_argument("--out", required=True)
    opt.add_argument("--oracle", choices=("analytic", "remote"), required=True)
    opt.add_argument("--reference", help="PNG frame dir (analytic oracle)")
    opt.add_argument("--endpoint", help="denoise server URL (remote oracle)")
    opt.add_argument("--text", help="text condition (remote)")
    opt.add_argument("--image", help="image condition PNG (remote)")
    opt.add_argument("--cfg", type=float, default=DEFAULT_CFG)
    opt.add_argument("--groups", type=int, default=5)
    opt.add_argument("--max-iterations", type=int, default=60)
    opt.add_argument("--seed", type=int, default=0)
    opt.add_argument("--deterministic", action="store_true", default=True)
    opt.add_argument("--fp64", action="store_true")
    opt.add_argument("--threads", type=int, default=None)
    opt.set_defaults(fn=cmd_optimize)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--fp64", action="store_true")
    gc.add_argument("--out")
    gc.set_defaults(fn=cmd_gradcheck)

    rec = sub.add_parser("recover", help="closed-loop parameter recovery")
    rec.add_argument("--scene", choices=tuple(SCENES), default="cantilever")
    rec.add_argument("--true-young", type=float, default=1e6)
    rec.add_argument("--init-bias", choices=("low", "high"), default="low")
    rec.add_argument("--seed", type=int, default=RECOVERY_SEED)
    rec.add_argument("--groups", type=int, default=None)
    rec.add_argument("--max-iterations", type=int, default=None)
    rec.add_argument("--out", required=True)
    rec.add_argument("--threads", type=int, default=None)
    rec.set_defaults(fn=cmd_recover)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (SchemaError, RangeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (Transport, ProtocolError) as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (MalformedPly, FileNotFoundError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except DreamPhysError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
