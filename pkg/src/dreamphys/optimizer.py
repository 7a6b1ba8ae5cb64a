"""Training loop: simulate, render, frame-boosted motion distillation,
back-propagate through the renderer, the last MPM substep and the material
field, Adam update, order-of-magnitude convergence check."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field as dc_field
from typing import List

import numpy as np

from .cameras import Camera, camera_from_pose, default_camera
from .config import SimConfig
from .errors import NotDivisible, ShapeMismatch
from .field import MaterialField
from .guidance import AnalyticOracle, DiffusionSchedule, RemoteDenoiser, mds_score
from .mpm import Engine, deform_backward, deform_kernels
from .render import KernelStates, VideoTensor, render, render_backward
from .scene import Scene


@dataclass
class OptimizerConfig:
    groups: int = 5                     # M
    max_iterations: int = 60
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    convergence_window: int = 3
    seed: int = 0
    deterministic: bool = True
    group_schedule: str = "averaged"    # averaged | alternating

    def __post_init__(self):
        if self.groups < 1:
            raise ValueError("group count must be >= 1")
        if self.group_schedule not in ("averaged", "alternating"):
            raise ValueError(f"unknown group schedule {self.group_schedule!r}")


class Adam:
    def __init__(self, params: dict, lr, beta1, beta2, eps):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def split_groups(frame_count: int, m: int) -> List[np.ndarray]:
    """Partition frame indices 0..frame_count-1 into m equal-stride groups.

    Group i holds {i, i+m, i+2m, ...}; groups are disjoint and cover all
    frames. Raises NotDivisible when m does not divide frame_count.
    """
    if m < 1:
        raise NotDivisible("group count must be >= 1")
    if frame_count % m != 0:
        raise NotDivisible(f"{frame_count} frames not divisible by {m} groups")
    return [np.arange(i, frame_count, m) for i in range(m)]


def check_convergence(history, window: int = 3) -> bool:
    """True iff the last `window` mean moduli share an order of magnitude."""
    if len(history) < window:
        return False
    floors = [math.floor(math.log10(v)) for v in history[-window:]]
    return len(set(floors)) == 1


# --------------------------------------------------------------------------
# guidance plumbing
# --------------------------------------------------------------------------

class AnalyticGuidance:
    """Per-group analytic oracles sliced from a full reference video."""

    def __init__(self, reference: VideoTensor, schedule: DiffusionSchedule):
        self.reference = reference
        self.schedule = schedule

    def check(self, frame_count: int):
        if len(self.reference) != frame_count:
            raise ShapeMismatch(
                f"reference has {len(self.reference)} frames, need {frame_count}")

    def for_group(self, idx: np.ndarray) -> AnalyticOracle:
        return AnalyticOracle(self.reference.frames[idx], self.schedule)


class RemoteGuidance:
    """One remote client answering every group."""

    def __init__(self, client: RemoteDenoiser, schedule: DiffusionSchedule):
        self.client = client
        self.schedule = schedule

    def check(self, frame_count: int):
        pass

    def for_group(self, idx: np.ndarray) -> RemoteDenoiser:
        return self.client


def resolve_cameras(config: SimConfig, scene: Scene) -> List[Camera]:
    h, w = config.image_size
    if config.camera_path is None:
        lo, hi = scene.bounds
        return [default_camera(lo, hi, h, w)]
    cams = [camera_from_pose(p, h, w) for p in config.camera_path]
    if len(cams) not in (1, config.frame_count):
        raise ShapeMismatch(
            f"camera_path has {len(cams)} poses for {config.frame_count} frames")
    return cams


# --------------------------------------------------------------------------
# training state and the iteration
# --------------------------------------------------------------------------

@dataclass
class TrainState:
    field: MaterialField
    adam: Adam
    k: int = 0
    history: list = dc_field(default_factory=list)        # mean log10 E
    mean_E: list = dc_field(default_factory=list)         # geometric mean, Pa
    score_norms: list = dc_field(default_factory=list)
    wall_ms: list = dc_field(default_factory=list)
    events: list = dc_field(default_factory=list)
    rng: np.random.Generator = None


def init_train_state(field: MaterialField, opt: OptimizerConfig) -> TrainState:
    adam = Adam(field.parameters(), opt.lr, opt.beta1, opt.beta2, opt.adam_eps)
    return TrainState(field=field, adam=adam,
                      rng=np.random.default_rng(opt.seed))


def simulate_and_render(scene: Scene, engine: Engine, young: np.ndarray,
                        cameras: List[Camera], dtype=np.float32,
                        record: bool = False):
    """Full-horizon simulation + per-frame renders.

    Returns (video, per-frame records) where each record bundles the frame's
    substep tape, deformed F and render record when `record` is set.
    """
    config = engine.config
    state = engine.state_from_scene(scene, young)
    Sigma0 = scene.covariances()
    frames = []
    ids = []
    recs = []
    for f in range(config.frame_count):
        state, tape = engine.simulate_frame(state, record_gradient=record)
        F = state.F.astype(np.float64)
        centers, Sigma, R = deform_kernels(Sigma0, F, state.x.astype(np.float64))
        ks = KernelStates(centers, Sigma, R, scene.opacities, scene.sh,
                          scene.sh_degree)
        cam_id = 0 if len(cameras) == 1 else f
        if record:
            img, rrec = render(ks, cameras[cam_id], dtype=dtype, record=True)
            recs.append({"tape": tape, "F": F, "render": rrec})
        else:
            img = render(ks, cameras[cam_id], dtype=dtype)
        frames.append(img)
        ids.append(cam_id)
    video = VideoTensor(np.stack(frames), np.asarray(ids))
    return video, recs


def group_field_gradient(scene: Scene, video: VideoTensor, recs, idx,
                         mu, eps, backend, schedule, field_record,
                         field: MaterialField):
    """Field-weight gradients contributed by one frame group."""
    Sigma0 = scene.covariances()
    group_video = video.frames[idx]
    score = mds_score(group_video, group_video[0], mu, eps, backend, schedule)
    g_E = np.zeros(len(scene))
    for j, f in enumerate(idx):
        rec = recs[f]
        g_center, g_Sigma = render_backward(
            score[j].astype(video.frames.dtype), rec["render"])
        g_x, g_F = deform_backward(Sigma0, rec["F"], g_center, g_Sigma)
        g_E += rec["tape"].backward(g_x, g_F)
    grads = field.backward(field_record, g_E)
    return field.grads_as_params(grads), float(np.linalg.norm(score))


def iteration(train: TrainState, scene: Scene, sim_config: SimConfig,
              guidance_spec, opt: OptimizerConfig, engine: Engine = None,
              cameras: List[Camera] = None, dtype=np.float32) -> TrainState:
    """One optimization step over all frame groups."""
    t0 = time.perf_counter()
    if engine is None:
        engine = Engine(sim_config, *scene.bounds, dtype=dtype,
                        deterministic=opt.deterministic)
    if cameras is None:
        cameras = resolve_cameras(sim_config, scene)
    schedule = guidance_spec.schedule
    groups = split_groups(sim_config.frame_count, opt.groups)
    guidance_spec.check(sim_config.frame_count)

    E, field_record = train.field.eval_many(scene.centers, record=True)
    video, recs = simulate_and_render(scene, engine, E, cameras,
                                      dtype=dtype, record=True)

    t_group = sim_config.frame_count // opt.groups
    h, w = sim_config.image_size
    mu = schedule.sample_mu(train.rng)
    eps = train.rng.standard_normal((t_group, h, w, 3))

    if opt.group_schedule == "averaged":
        active = list(range(opt.groups))
        weight = 1.0 / opt.groups
    else:
        active = [train.k % opt.groups]
        weight = 1.0

    total = None
    sq_norm = 0.0
    for i in active:
        grads, snorm = group_field_gradient(
            scene, video, recs, groups[i], mu, eps,
            guidance_spec.for_group(groups[i]), schedule, field_record,
            train.field)
        sq_norm += snorm**2
        if total is None:
            total = {k: weight * v for k, v in grads.items()}
        else:
            for k in total:
                total[k] += weight * grads[k]

    finite = all(np.all(np.isfinite(g)) for g in total.values())
    if not finite:
        train.events.append({"iteration": train.k, "event": "nonfinite_gradient"})
        total = {k: np.zeros_like(v) for k, v in total.items()}

    train.adam.step(total)
    train.field.mark_updated()

    log10_E = np.log10(E)
    train.history.append(float(np.mean(log10_E)))
    train.mean_E.append(float(10.0 ** np.mean(log10_E)))
    train.score_norms.append(math.sqrt(sq_norm))
    train.wall_ms.append((time.perf_counter() - t0) * 1e3)
    train.k += 1
    return train


# --------------------------------------------------------------------------
# full optimization
# --------------------------------------------------------------------------

@dataclass
class OptimizeReport:
    field: MaterialField
    iterations: int
    converged: bool
    history: list
    mean_E: list
    score_norms: list
    wall_ms: list
    events: list
    final_E: np.ndarray


def optimize(scene: Scene, sim_config: SimConfig, opt: OptimizerConfig,
             guidance_spec, out_dir=None, dtype=np.float32,
             field: MaterialField = None, log_path=None) -> OptimizeReport:
    """Run iterations until the order-of-magnitude rule fires or the budget
    runs out; optionally writes checkpoint + JSONL progress under out_dir."""
    import pathlib

    if sim_config.frame_count % opt.groups != 0:
        raise NotDivisible(
            f"{sim_config.frame_count} frames not divisible by M={opt.groups}")
    if field is None:
        lo, hi = scene.padded_bounds()
        field = MaterialField.create(lo, hi, seed=opt.seed)
        field.calibrate(scene.centers)
    train = init_train_state(field, opt)
    engine = Engine(sim_config, *scene.bounds, dtype=dtype,
                    deterministic=opt.deterministic)
    cameras = resolve_cameras(sim_config, scene)

    log_f = None
    if out_dir is not None:
        out_dir = pathlib.Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_f = open(log_path or out_dir / "progress.jsonl", "w", encoding="utf-8")

    converged = False
    try:
        while train.k < opt.max_iterations:
            iteration(train, scene, sim_config, guidance_spec, opt,
                      engine=engine, cameras=cameras, dtype=dtype)
            if log_f is not None:
                log_f.write(json.dumps({
                    "k": train.k,
                    "mean_log10_E": train.history[-1],
                    "score_norm": train.score_norms[-1],
                    "wall_ms": train.wall_ms[-1],
                }) + "\n")
                log_f.flush()
            if check_convergence(train.mean_E, opt.convergence_window):
                converged = True
                break
    finally:
        if log_f is not None:
            log_f.close()

    final_E = train.field.eval_many(scene.centers)
    if out_dir is not None:
        train.field.save(out_dir / "material_field.dpmf")
    return OptimizeReport(field=train.field, iterations=train.k,
                          converged=converged, history=train.history,
                          mean_E=train.mean_E, score_norms=train.score_norms,
                          wall_ms=train.wall_ms, events=train.events,
                          final_E=final_E)
