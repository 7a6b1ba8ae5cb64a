"""Finite-difference verification suites for every gradient path.

Each suite returns its maximum relative error; `run_all` prints one table
row per suite. FD oracles replay recorded computations in float64, so the
suites validate the adjoint math in both precision modes.

Test hook: DREAMPHYS_FAULT=signflip flips one analytic gradient's sign so
the suites' fault detection can itself be exercised.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .config import config_from_dict
from .field import MaterialField
from .guidance import DiffusionSchedule, mds_score
from .mpm import Engine, deform_backward, deform_kernels, stress, stress_backward
from .optimizer import AnalyticGuidance, simulate_and_render, split_groups
from .render import KernelStates, render, render_backward
from .scene import scene_from_colors

TOL_FP64 = 1e-3
TOL_FP32 = 1e-2


def _fault() -> float:
    return -1.0 if os.environ.get("DREAMPHYS_FAULT") == "signflip" else 1.0


def _rel(fd, an, floor=1e-12):
    denom = max(abs(fd), abs(an), floor)
    return abs(fd - an) / denom


# --------------------------------------------------------------------------

def check_renderer(dtype=np.float64, seed=3) -> float:
    """Center and covariance gradients of a pixel probe vs central FD."""
    rng = np.random.default_rng(seed)
    n = 6
    centers = np.concatenate([np.zeros((1, 3)), 0.35 * rng.standard_normal((n - 1, 3))])
    a = 0.05 * rng.standard_normal((n, 3, 3))
    covs = np.einsum("nij,nkj->nik", a, a) + 0.02**2 * np.tile(np.eye(3), (n, 1, 1))
    rot = np.tile(np.eye(3), (n, 1, 1))
    opac = 0.4 + 0.5 * rng.random(n)
    sh = rng.random((n, 1, 3)) * 1.2 - 0.6
    from .cameras import look_at
    cam = look_at(eye=(0.1, 0.2, 2.0), target=(0, 0, 0), fov_y=0.8,
                  height=16, width=16)

    def probe(c, s):
        ks = KernelStates(c, s, rot, opac, sh, 0)
        return float(np.sum(g_img * render(ks, cam, dtype=np.float64)))

    ks = KernelStates(centers, covs, rot, opac, sh, 0)
    img, rec = render(ks, cam, dtype=dtype, record=True)
    g_img = rng.standard_normal(img.shape)
    gc, gS = render_backward(g_img.astype(img.dtype), rec)
    gc = gc * _fault()

    h = 1e-6
    worst = 0.0
    for k in range(n):
        for axis in range(3):
            cp, cm = centers.copy(), centers.copy()
            cp[k, axis] += h
            cm[k, axis] -= h
            fd = (probe(cp, covs) - probe(cm, covs)) / (2 * h)
            worst = max(worst, _rel(fd, gc[k, axis], floor=1e-8))
        for ia in range(3):
            for ib in range(ia, 3):
                sp, sm = covs.copy(), covs.copy()
                sp[k, ia, ib] += h
                sp[k, ib, ia] = sp[k, ia, ib]
                sm[k, ia, ib] -= h
                sm[k, ib, ia] = sm[k, ia, ib]
                fd = (probe(centers, sp) - probe(centers, sm)) / (2 * h)
                an = gS[k, ia, ib] if ia == ib else gS[k, ia, ib] + gS[k, ib, ia]
                worst = max(worst, _rel(fd, an, floor=1e-8))
    return worst


def check_stress(dtype=np.float64, seed=5) -> float:
    """d<G, tau>/dF (including the rotation factor), d/dmu, d/dlambda."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(10):
        F = np.eye(3) + 0.25 * rng.standard_normal((3, 3))
        if np.linalg.det(F) < 0.3:
            F = np.eye(3) + 0.05 * rng.standard_normal((3, 3))
        mu, lam = 4e5 * (0.5 + rng.random()), 4e5 * (0.5 + rng.random())
        G = rng.standard_normal((3, 3))
        g_F, g_mu, g_lam = stress_backward(F, mu, lam, G)
        g_F = g_F * _fault()
        h = 1e-6
        for ia in range(3):
            for ib in range(3):
                Fp, Fm = F.copy(), F.copy()
                Fp[ia, ib] += h
                Fm[ia, ib] -= h
                fd = (np.sum(G * stress(Fp, mu, lam))
                      - np.sum(G * stress(Fm, mu, lam))) / (2 * h)
                worst = max(worst, _rel(fd, g_F[ia, ib], floor=1e-3))
        hm = mu * 1e-6
        fd = (np.sum(G * stress(F, mu + hm, lam))
              - np.sum(G * stress(F, mu - hm, lam))) / (2 * hm)
        worst = max(worst, _rel(fd, g_mu, floor=1e-3))
        hl = lam * 1e-6
        fd = (np.sum(G * stress(F, mu, lam + hl))
              - np.sum(G * stress(F, mu, lam - hl))) / (2 * hl)
        worst = max(worst, _rel(fd, g_lam, floor=1e-3))
    return worst


def _small_sim(dtype, seed, n=100):
    rng = np.random.default_rng(seed)
    pts = 0.35 + 0.3 * rng.random((n, 3))
    scene = scene_from_colors(pts, 0.2 + 0.6 * rng.random((n, 3)))
    config = config_from_dict({
        "grid_resolution": 16, "dt": 2e-4, "substeps_per_frame": 3,
        "frame_count": 4, "gravity": [0, -9.8, 0],
        "domain": {"min": [0, 0, 0], "max": [1, 1, 1]},
        "boundary": {"kind": "sticky_ground", "ground_height": 0.3},
        "image_size": [16, 16],
        "camera_path": {"eye": [0.5, 0.5, 2.2], "target": [0.5, 0.5, 0.5],
                        "fov_y": 0.8},
    })
    engine = Engine(config, *scene.bounds, dtype=dtype)
    return rng, scene, config, engine


def check_substep(dtype=np.float64, seed=7) -> float:
    """Taped-substep dE gradient vs FD over a float64 tape replay."""
    rng, scene, config, engine = _small_sim(dtype, seed)
    state = engine.state_from_scene(scene, 1e5)
    state.v[:] = (0.1 * rng.standard_normal(state.v.shape)).astype(state.dtype)
    state.E[:] = (10 ** (4.5 + rng.random(len(state)))).astype(state.dtype)
    for _ in range(5):
        engine.substep(state)
    _, tape = engine.simulate_frame(state, record_gradient=True)

    gx = rng.standard_normal((len(state), 3))
    gF = rng.standard_normal((len(state), 3, 3))
    gE = tape.backward(gx, gF) * _fault()

    eng64 = Engine(config, *scene.bounds, dtype=np.float64)

    from .mpm import MpmState

    def probe(E):
        st = MpmState(tape.x.copy(), tape.v.copy(), tape.C.copy(),
                      tape.F.copy(), E.copy(), tape.engine.mass,
                      tape.engine.vol0, tape.engine.nu_arr,
                      tape.engine.fixed, dtype=np.float64)
        eng64.substep(st)
        return float(np.sum(gx * st.x) + np.sum(gF * st.F))

    worst = 0.0
    for p in rng.choice(len(state), 25, replace=False):
        h = float(tape.E[p]) * 0.3
        Ep = tape.E.astype(np.float64).copy()
        Em = Ep.copy()
        Ep[p] += h
        Em[p] -= h
        fd = (probe(Ep) - probe(Em)) / (2 * h)
        worst = max(worst, _rel(fd, gE[p], floor=1e-16))
    return worst


def check_field(dtype=np.float64, seed=11) -> float:
    """Plane-cell and spline-coefficient gradients vs FD."""
    rng = np.random.default_rng(seed)
    field = MaterialField.create([0, 0, 0], [1, 1, 1], resolution=8, fdim=4,
                                 hidden=(8,), seed=seed)
    pts = rng.random((40, 3))
    field.calibrate(pts)
    # non-trivial spline coefficients
    for layer in field.layers:
        layer.coeffs += 0.2 * rng.standard_normal(layer.coeffs.shape)
    field.mark_updated()
    u = rng.standard_normal(40)

    E, rec = field.eval_many(pts, record=True)
    grads = field.backward(rec, u)
    worst = 0.0
    h = 1e-5

    def probe():
        return float(np.sum(u * field.eval_many(pts)))

    g_pl = grads["planes"] * _fault()
    flat = np.argsort(np.abs(g_pl).ravel())[::-1][:8]
    for fi in flat:
        idx = np.unravel_index(fi, g_pl.shape)
        orig = field.triplane.planes[idx]
        field.triplane.planes[idx] = orig + h
        up = probe()
        field.triplane.planes[idx] = orig - h
        dn = probe()
        field.triplane.planes[idx] = orig
        worst = max(worst, _rel((up - dn) / (2 * h), g_pl[idx], floor=1e-10))

    g_c = grads["coeffs"][0]
    flat = np.argsort(np.abs(g_c).ravel())[::-1][:8]
    for fi in flat:
        idx = np.unravel_index(fi, g_c.shape)
        orig = field.layers[0].coeffs[idx]
        field.layers[0].coeffs[idx] = orig + h
        up = probe()
        field.layers[0].coeffs[idx] = orig - h
        dn = probe()
        field.layers[0].coeffs[idx] = orig
        worst = max(worst, _rel((up - dn) / (2 * h), g_c[idx], floor=1e-10))
    return worst


def check_end_to_end(dtype=np.float64, seed=13) -> float:
    """Plane-cell gradient of a frozen-score probe through the whole
    truncated chain (field -> taped substeps -> renderer)."""
    rng = np.random.default_rng(seed)
    n = 50
    pts = 0.38 + 0.24 * rng.random((n, 3))
    scene = scene_from_colors(pts, 0.2 + 0.6 * rng.random((n, 3)),
                              opacity=0.8, scale=0.03)
    config = config_from_dict({
        "grid_resolution": 16, "dt": 8e-4, "substeps_per_frame": 1,
        "frame_count": 4, "gravity": [0, 0, 0],
        "domain": {"min": [0, 0, 0], "max": [1, 1, 1]},
        "initial_velocity": {"kind": "spin", "axis": [0, 0, 1],
                             "rad_per_s": 6.0},
        "image_size": [16, 16],
        "camera_path": {"eye": [0.5, 0.5, 2.2], "target": [0.5, 0.5, 0.5],
                        "fov_y": 0.8},
    })
    engine = Engine(config, *scene.bounds, dtype=dtype)

    field = MaterialField.create(*scene.padded_bounds(), resolution=8, fdim=4,
                                 hidden=(8,), seed=seed)
    field.calibrate(scene.centers)
    from .optimizer import resolve_cameras
    cameras = resolve_cameras(config, scene)

    schedule = DiffusionSchedule()
    ref_video, _ = simulate_and_render(
        scene, Engine(config, *scene.bounds, dtype=dtype),
        np.full(len(scene), 1e5), cameras, dtype=dtype)
    guidance = AnalyticGuidance(ref_video, schedule)

    E, frec = field.eval_many(scene.centers, record=True)
    video, recs = simulate_and_render(scene, engine, E, cameras,
                                      dtype=dtype, record=True)
    groups = split_groups(config.frame_count, 2)
    mu = 500
    eps = rng.standard_normal((config.frame_count // 2, *config.image_size, 3))

    Sigma0 = scene.covariances()
    g_E = np.zeros(len(scene))
    scores = {}
    for gi, idx in enumerate(groups):
        gv = video.frames[idx]
        s = mds_score(gv, gv[0], mu, eps, guidance.for_group(idx), schedule)
        scores[gi] = s.astype(np.float64)
        for j, f in enumerate(idx):
            g_c, g_S = render_backward(s[j].astype(video.frames.dtype),
                                       recs[f]["render"])
            g_x, g_F = deform_backward(Sigma0, recs[f]["F"], g_c, g_S)
            g_E += recs[f]["tape"].backward(g_x, g_F)
    grads = field.backward(frec, g_E)
    g_pl = grads["planes"] * _fault()

    from .mpm import MpmState
    eng64 = Engine(config, *scene.bounds, dtype=np.float64)

    def probe():
        # truncated-chain replay in float64: frozen scores and substep inputs
        E2 = field.eval_many(scene.centers).astype(np.float64)
        total = 0.0
        for gi, idx in enumerate(groups):
            for j, f in enumerate(idx):
                tape = recs[f]["tape"]
                st = MpmState(tape.x, tape.v, tape.C, tape.F, E2,
                              tape.engine.mass, tape.engine.vol0,
                              tape.engine.nu_arr, tape.engine.fixed,
                              dtype=np.float64)
                eng64.substep(st)
                centers, Sigma, _ = deform_kernels(
                    Sigma0, st.F, st.x)
                ks = KernelStates(centers, Sigma, np.tile(np.eye(3), (len(scene), 1, 1)),
                                  scene.opacities, scene.sh, scene.sh_degree)
                cam = cameras[0] if len(cameras) == 1 else cameras[f]
                img = render(ks, cam, dtype=np.float64)
                total += float(np.sum(scores[gi][j] * img))
        return total

    worst = 0.0
    flat = np.argsort(np.abs(g_pl).ravel())[::-1][:6]
    h = 1e-3
    for fi in flat:
        idx = np.unravel_index(fi, g_pl.shape)
        orig = field.triplane.planes[idx]
        field.triplane.planes[idx] = orig + h
        up = probe()
        field.triplane.planes[idx] = orig - h
        dn = probe()
        field.triplane.planes[idx] = orig
        worst = max(worst, _rel((up - dn) / (2 * h), g_pl[idx], floor=1e-12))
    return worst


SUITES = (
    ("renderer", check_renderer),
    ("stress", check_stress),
    ("taped-substep", check_substep),
    ("material-field", check_field),
    ("end-to-end", check_end_to_end),
)


def run_all(fp64: bool = True, seed: int = 0, printer=print):
    """Run every suite; returns (results dict, all_passed)."""
    dtype = np.float64 if fp64 else np.float32
    tol = TOL_FP64 if fp64 else TOL_FP32
    results = {}
    ok = True
    printer(f"{'suite':16s} {'max rel err':>12s} {'tolerance':>10s}  status")
    for name, fn in SUITES:
        err = float(fn(dtype=dtype, seed=seed + 3))
        results[name] = err
        passed = bool(err < tol)
        ok = ok and passed
        printer(f"{name:16s} {err:12.3e} {tol:10.0e}  {'ok' if passed else 'FAIL'}")
    return results, ok
