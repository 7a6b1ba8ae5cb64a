"""Bundled desk-scale scenes and the closed-loop recovery experiment.

The recovery experiment synthesizes ground-truth frames at a known Young's
modulus, biases the initial material field away from it, optimizes against
the analytic oracle and reports how close the recovered modulus lands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import SimConfig, config_from_dict
from .errors import RangeError
from .field import MaterialField
from .guidance import DiffusionSchedule
from .imageio import psnr
from .mpm import Engine
from .optimizer import (AnalyticGuidance, OptimizeReport, OptimizerConfig,
                        optimize, resolve_cameras, simulate_and_render)
from .scene import Scene, scene_from_colors

YOUNG_LO = 1e4
YOUNG_HI = 1e8


def _lattice(lo, hi, counts):
    axes = [lo[a] + (np.arange(counts[a]) + 0.5) * (hi[a] - lo[a]) / counts[a]
            for a in range(3)]
    g = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return g.reshape(-1, 3)


def make_cantilever(resolution: int = 32, image_size=(48, 48),
                    frame_count: int = 80, substeps: int = 75,
                    dt: float = 8e-5):
    """Horizontal beam pinned at one end, sagging under gravity.

    ~1900 particles on a regular lattice; stable up to E = 1e8 at the given
    dt (CFL ~ 0.3 against the stiffest admissible sound speed).
    """
    lo = np.array([0.70, 1.82, 1.42])
    hi = np.array([1.90, 2.18, 1.78])
    pts = _lattice(lo, hi, (30, 8, 8))
    rel = (pts - lo) / (hi - lo)
    colors = 0.15 + 0.7 * rel
    scene = scene_from_colors(pts, colors, opacity=0.9, scale=0.026)
    config = config_from_dict({
        "grid_resolution": resolution,
        "dt": dt,
        "substeps_per_frame": substeps,
        "frame_count": frame_count,
        "gravity": [0.0, -9.8, 0.0],
        "density": 1000.0,
        "poisson": 0.3,
        "domain": {"min": [0.0, 0.0, 0.0], "max": [3.2, 3.2, 3.2]},
        "fixed_region": {"min": [0.0, 0.0, 0.0], "max": [0.79, 3.2, 3.2]},
        "camera_path": {"eye": [1.55, 1.85, 4.4], "target": [1.55, 1.85, 1.6],
                        "fov_y": 0.75},
        "image_size": list(image_size),
    })
    return scene, config


def make_dropball(resolution: int = 32, image_size=(48, 48),
                  frame_count: int = 80, substeps: int = 75,
                  dt: float = 8e-5):
    """Elastic ball dropping onto a sticky ground plane."""
    center = np.array([1.6, 1.45, 1.6])
    radius = 0.33
    lo = center - radius
    hi = center + radius
    pts = _lattice(lo, hi, (16, 16, 16))
    keep = np.linalg.norm(pts - center, axis=1) <= radius
    pts = pts[keep]
    rel = (pts - lo) / (hi - lo)
    colors = 0.15 + 0.7 * rel
    scene = scene_from_colors(pts, colors, opacity=0.9, scale=0.026)
    config = config_from_dict({
        "grid_resolution": resolution,
        "dt": dt,
        "substeps_per_frame": substeps,
        "frame_count": frame_count,
        "gravity": [0.0, -9.8, 0.0],
        "density": 1000.0,
        "poisson": 0.3,
        "boundary": {"kind": "sticky_ground", "ground_height": 0.82},
        "initial_velocity": {"kind": "translate", "velocity": [0.0, -1.0, 0.0]},
        "domain": {"min": [0.0, 0.0, 0.0], "max": [3.2, 3.2, 3.2]},
        "camera_path": {"eye": [1.6, 1.35, 4.4], "target": [1.6, 1.35, 1.6],
                        "fov_y": 0.75},
        "image_size": list(image_size),
    })
    return scene, config


SCENES = {"cantilever": make_cantilever, "dropball": make_dropball}

BIAS_OFFSET = 2.0   # raw-logit shift; low -> mean log10 E near 4.5, high near 7.5

# Bundled-experiment optimizer settings. The analytic oracle gives noise-free,
# sign-coherent gradients; the library-default momentum (beta1 0.9) then
# overshoots the target decade before the order-of-magnitude rule can fire,
# so the experiment runs with damped momentum and a faster rate.
RECOVERY_OPT = {"max_iterations": 60, "lr": 2e-2, "beta1": 0.6}
RECOVERY_SEED = 2


@dataclass
class RecoveryResult:
    report: OptimizeReport
    true_young: float
    log10_error: float          # |mean log10 E - log10 E*|
    psnr_db: float
    iterations: int
    converged: bool
    recovered: bool
    reference: np.ndarray
    final_video: np.ndarray


def reference_video(scene: Scene, config: SimConfig, young: float,
                    dtype=np.float32):
    engine = Engine(config, *scene.bounds, dtype=dtype)
    cameras = resolve_cameras(config, scene)
    video, _ = simulate_and_render(scene, engine, np.full(len(scene), young),
                                   cameras, dtype=dtype, record=False)
    return video


def biased_field(scene: Scene, bias: str, seed: int) -> MaterialField:
    field = MaterialField.create(*scene.padded_bounds(), seed=seed)
    field.calibrate(scene.centers)
    field.bias_output(-BIAS_OFFSET if bias == "low" else +BIAS_OFFSET)
    return field


def run_recovery(scene_kind: str = "cantilever", true_young: float = 1e6,
                 init_bias: str = "low", seed: int = RECOVERY_SEED,
                 out_dir=None, opt_overrides: dict = None,
                 dtype=np.float32) -> RecoveryResult:
    """Synthesize ground truth at E*, optimize from a biased field, report."""
    if not YOUNG_LO <= true_young <= YOUNG_HI:
        raise RangeError(f"true Young's modulus {true_young:g} outside "
                         f"[{YOUNG_LO:g}, {YOUNG_HI:g}]")
    if init_bias not in ("low", "high"):
        raise RangeError(f"init_bias must be low or high, got {init_bias!r}")
    scene, config = SCENES[scene_kind]()

    ref = reference_video(scene, config, true_young, dtype=dtype)
    schedule = DiffusionSchedule()
    guidance = AnalyticGuidance(ref, schedule)
    field = biased_field(scene, init_bias, seed)

    overrides = dict(RECOVERY_OPT)
    overrides.update(opt_overrides or {})
    opt = OptimizerConfig(seed=seed, **overrides)
    report = optimize(scene, config, opt, guidance, out_dir=out_dir,
                      dtype=dtype, field=field)

    final = reference_video_from_field(scene, config, report.field, dtype=dtype)
    mean_log10 = float(np.mean(np.log10(report.final_E)))
    err = abs(mean_log10 - math.log10(true_young))
    quality = psnr(final.frames, ref.frames)
    result = RecoveryResult(
        report=report, true_young=true_young, log10_error=err,
        psnr_db=quality, iterations=report.iterations,
        converged=report.converged,
        recovered=report.converged and err < 0.5,
        reference=ref.frames, final_video=final.frames)
    return result


def reference_video_from_field(scene: Scene, config: SimConfig,
                               field: MaterialField, dtype=np.float32):
    engine = Engine(config, *scene.bounds, dtype=dtype)
    cameras = resolve_cameras(config, scene)
    E = field.eval_many(scene.centers)
    video, _ = simulate_and_render(scene, engine, E, cameras,
                                   dtype=dtype, record=False)
    return video


def run_boost_ablation(seed: int = 0, group_len: int = 16,
                       opt_overrides: dict = None, boosted: bool = True):
    """Frame-boosting ablation: M=5 interleaved groups vs the single-group
    baseline.

    The guiding video length is fixed at `group_len` (the denoiser's native
    frame count), so the boosted run simulates and supervises M*group_len
    frames while the M=1 baseline only sees one group's worth. Returns
    (boosted RecoveryResult or None, baseline RecoveryResult); pass
    boosted=False to skip the M=5 run (it equals the low-bias recovery run).
    """
    results = []
    for m in (5, 1) if boosted else (1,):
        scene, config = make_cantilever(frame_count=group_len * m)
        ref = reference_video(scene, config, 1e6)
        guidance = AnalyticGuidance(ref, DiffusionSchedule())
        field = biased_field(scene, "low", seed)
        overrides = dict(RECOVERY_OPT)
        overrides.update(opt_overrides or {})
        overrides["groups"] = m
        opt = OptimizerConfig(seed=seed, **overrides)
        report = optimize(scene, config, opt, guidance, field=field)
        final = reference_video_from_field(scene, config, report.field)
        mean_log10 = float(np.mean(np.log10(report.final_E)))
        err = abs(mean_log10 - 6.0)
        results.append(RecoveryResult(
            report=report, true_young=1e6, log10_error=err,
            psnr_db=psnr(final.frames, ref.frames),
            iterations=report.iterations, converged=report.converged,
            recovered=report.converged and err < 0.5,
            reference=ref.frames, final_video=final.frames))
    if not boosted:
        return None, results[0]
    return results[0], results[1]
