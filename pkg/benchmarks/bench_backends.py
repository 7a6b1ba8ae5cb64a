#!/usr/bin/env python3
"""Throughput comparison of the compiled core vs the numpy fallback.

Times the fused MPM substep and the alpha compositor (forward + backward)
at recovery scale. Run: python3 benchmarks/bench_backends.py
"""

import time

import numpy as np

from dreamphys import backends
from dreamphys.cameras import look_at
from dreamphys.config import config_from_dict
from dreamphys.experiments import make_cantilever
from dreamphys.mpm import Engine
from dreamphys.render import render, render_backward


def time_substep(backend, reps):
    scene, config = make_cantilever()
    engine = Engine(config, *scene.bounds, dtype=np.float32, backend=backend)
    state = engine.state_from_scene(scene, 1e6)
    engine.substep(state)
    t0 = time.perf_counter()
    for _ in range(reps):
        engine.substep(state)
    return (time.perf_counter() - t0) / reps


def time_render(backend, reps):
    from dreamphys.optimizer import resolve_cameras
    from dreamphys.render import rest_states
    scene, config = make_cantilever()
    states = rest_states(scene)
    camera = resolve_cameras(config, scene)[0]
    img, rec = render(states, camera, record=True, backend=backend)
    g = np.ones_like(img)
    t0 = time.perf_counter()
    for _ in range(reps):
        render(states, camera, backend=backend)
    fwd = (time.perf_counter() - t0) / reps
    t0 = time.perf_counter()
    for _ in range(reps):
        render_backward(g, rec, backend=backend)
    bwd = (time.perf_counter() - t0) / reps
    return fwd, bwd


def main():
    rows = []
    for name in backends.available_backends():
        be = backends.compiled if name == "compiled" else backends.numpy_impl
        reps = 200 if name == "compiled" else 10
        sub = time_substep(be, reps)
        fwd, bwd = time_render(be, max(reps // 4, 3))
        rows.append((name, sub, fwd, bwd))

    print(f"{'backend':10s} {'substep':>12s} {'render fwd':>12s} {'render bwd':>12s}")
    for name, sub, fwd, bwd in rows:
        print(f"{name:10s} {sub*1e3:9.3f} ms {fwd*1e3:9.3f} ms {bwd*1e3:9.3f} ms")
    if len(rows) == 2:
        print(f"{'speedup':10s} {rows[1][1]/rows[0][1]:10.1f}x "
              f"{rows[1][2]/rows[0][2]:10.1f}x {rows[1][3]/rows[0][3]:10.1f}x")


if __name__ == "__main__":
    main()
