"""MLS-MPM elastic simulator over Gaussian-kernel particles.

Particles carry position, velocity, APIC affine matrix, deformation gradient
and per-particle Young's modulus. The engine runs explicit symplectic-Euler
substeps with quadratic B-spline transfers and fixed-corotated elasticity;
gradients w.r.t. the material parameters are taken through the last substep
of each frame only (all states entering that substep are held constant).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import backends
from .backends import numpy_impl as _ref
from .config import SimConfig, resolve_domain
from .errors import DegenerateF, OutOfGrid, RangeError
from .scene import Scene

DET_FLOOR = _ref.DET_FLOOR


def lame_params(E: float, nu: float):
    """Lame coefficients (mu, lambda) from Young's modulus and Poisson ratio."""
    if np.any(np.asarray(E) <= 0):
        raise RangeError("E must be > 0")
    if np.any(np.asarray(nu) < 0) or np.any(np.asarray(nu) >= 0.5):
        raise RangeError("nu must lie in [0, 0.5)")
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


# --------------------------------------------------------------------------
# grid and transfer ops
# --------------------------------------------------------------------------

@dataclass
class Grid:
    """Background grid: cubic, `res` nodes per axis, flat node storage."""

    res: int
    dx: float
    origin: np.ndarray
    mass: np.ndarray = field(default=None)       # (res^3,)
    momentum: np.ndarray = field(default=None)   # (res^3, 3)
    velocity: np.ndarray = field(default=None)   # (res^3, 3)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        n = self.res**3
        if self.mass is None:
            self.mass = np.zeros(n)
        if self.momentum is None:
            self.momentum = np.zeros((n, 3))
        if self.velocity is None:
            self.velocity = np.zeros((n, 3))

    def clear(self):
        self.mass[:] = 0
        self.momentum[:] = 0
        self.velocity[:] = 0

    def node_positions(self) -> np.ndarray:
        r = self.res
        ix, iy, iz = np.unravel_index(np.arange(r**3), (r, r, r))
        return self.origin + np.stack([ix, iy, iz], axis=1) * self.dx


@dataclass
class BoundarySpec:
    kind: str = "none"                      # none | sticky_ground | slip_ground
    ground_height: float = 0.0
    node_mask: Optional[np.ndarray] = None  # uint8 (res^3,), 1 = pinned node

    @property
    def kind_id(self) -> int:
        return {"none": 0, "sticky_ground": 1, "slip_ground": 2}[self.kind]


def bspline_weights(xp, grid: Grid):
    """Quadratic B-spline weights of one particle: (3,3,3) tensor + base index.

    Raises OutOfGrid when the particle sits within one cell of the boundary;
    the simulator clamps positions before transfers so this is a caller error.
    """
    xp = np.asarray(xp, dtype=np.float64)
    xl = (xp - grid.origin) / grid.dx
    base = np.floor(xl - 0.5).astype(np.int64)
    if np.any(base < 0) or np.any(base + 2 > grid.res - 1):
        raise OutOfGrid(f"particle at {xp} too close to the grid boundary")
    fx = xl - base
    w_ax = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2,
                     0.5 * (fx - 0.5) ** 2])
    w = np.einsum("i,j,k->ijk", w_ax[:, 0], w_ax[:, 1], w_ax[:, 2])
    return w, base


def p2g(state: "MpmState", grid: Grid) -> None:
    """Scatter particle mass and APIC momentum to the grid."""
    grid.clear()
    ncell = grid.res**3
    base, w, xl = _ref.quadratic_weights(state.x, grid.origin, grid.dx, grid.res)
    m64 = state.mass.astype(np.float64)
    mv = m64[:, None] * state.v.astype(np.float64)
    C64 = state.C.astype(np.float64)
    for i, j, k in _ref._OFFSETS:
        weight = w[:, i, 0] * w[:, j, 1] * w[:, k, 2]
        node = base + (i, j, k)
        idx = (node[:, 0] * grid.res + node[:, 1]) * grid.res + node[:, 2]
        d = (node - xl) * grid.dx
        contrib = weight[:, None] * (mv + m64[:, None] * np.einsum("nab,nb->na", C64, d))
        grid.mass += np.bincount(idx, weights=weight * m64, minlength=ncell)
        for a in range(3):
            grid.momentum[:, a] += np.bincount(idx, weights=contrib[:, a], minlength=ncell)


def grid_update(grid: Grid, state: "MpmState", dt: float, gravity,
                boundary: BoundarySpec) -> int:
    """Momentum -> velocity, apply internal stress forces, gravity, BCs.

    The force uses the MLS weight gradient (4/dx^2) * w * (x_i - x_p).
    Returns the number of det-clamped deformation gradients.
    """
    ncell = grid.res**3
    base, w, xl = _ref.quadratic_weights(state.x, grid.origin, grid.dx, grid.res)
    mu, lam = lame_params(state.E.astype(np.float64), state.nu.astype(np.float64))
    tau, _, _, n_clamped = _ref.kirchhoff_stress(state.F, mu, lam)
    coef = dt * (4.0 / grid.dx**2) * state.vol0.astype(np.float64)

    force_mom = np.zeros((ncell, 3))
    for i, j, k in _ref._OFFSETS:
        weight = w[:, i, 0] * w[:, j, 1] * w[:, k, 2]
        node = base + (i, j, k)
        idx = (node[:, 0] * grid.res + node[:, 1]) * grid.res + node[:, 2]
        d = (node - xl) * grid.dx
        contrib = -(weight * coef)[:, None] * np.einsum("nab,nb->na", tau, d)
        for a in range(3):
            force_mom[:, a] += np.bincount(idx, weights=contrib[:, a], minlength=ncell)

    nz = grid.mass > 0
    grid.velocity[:] = 0.0
    grid.velocity[nz] = (grid.momentum[nz] + force_mom[nz]) / grid.mass[nz, None]
    grid.velocity[nz] += dt * np.asarray(gravity, dtype=np.float64)
    _ref._apply_bc(grid.velocity, grid.origin, grid.dx, grid.res,
                   boundary.kind_id, boundary.ground_height, boundary.node_mask)
    return n_clamped


def g2p(grid: Grid, state: "MpmState", dt: float) -> None:
    """Gather grid velocities back: updates v, x, C and F in that order."""
    base, w, xl = _ref.quadratic_weights(state.x, grid.origin, grid.dx, grid.res)
    new_v = np.zeros((len(state), 3))
    new_C = np.zeros((len(state), 3, 3))
    for i, j, k in _ref._OFFSETS:
        weight = w[:, i, 0] * w[:, j, 1] * w[:, k, 2]
        node = base + (i, j, k)
        idx = (node[:, 0] * grid.res + node[:, 1]) * grid.res + node[:, 2]
        d = (node - xl) * grid.dx
        vi = grid.velocity[idx]
        new_v += weight[:, None] * vi
        new_C += weight[:, None, None] * np.einsum("na,nb->nab", vi, d)
    new_C *= 4.0 / grid.dx**2

    dtype = state.x.dtype
    free = ~state.fixed.astype(bool)
    Fn = (np.eye(3) + dt * new_C[free]) @ state.F[free].astype(np.float64)
    state.v[free] = new_v[free].astype(dtype)
    state.x[free] += (dt * new_v[free]).astype(dtype)
    state.C[free] = new_C[free].astype(dtype)
    state.F[free] = Fn.astype(dtype)
    state.v[~free] = 0
    state.C[~free] = 0


# --------------------------------------------------------------------------
# constitutive model
# --------------------------------------------------------------------------

def stress(F, mu: float, lam: float) -> np.ndarray:
    """Fixed-corotated Kirchhoff stress of one deformation gradient."""
    F = np.asarray(F, dtype=np.float64)
    J = float(np.linalg.det(F))
    if J <= DET_FLOOR:
        raise DegenerateF(f"det(F) = {J:.3e} <= {DET_FLOOR}")
    R = _ref.polar_rotations(F[None])[0]
    return 2.0 * mu * (F - R) @ F.T + lam * J * (J - 1.0) * np.eye(3)


def stress_backward(F, mu: float, lam: float, g_tau):
    """Adjoint of `stress`: returns (g_F, g_mu, g_lam) for cotangent g_tau.

    The rotation factor's derivative uses the SVD formula with the
    singular-value-sum denominators clamped at 1e-6.
    """
    F = np.asarray(F, dtype=np.float64)
    G = np.asarray(g_tau, dtype=np.float64)
    J = float(np.linalg.det(F))
    if J <= DET_FLOOR:
        raise DegenerateF(f"det(F) = {J:.3e} <= {DET_FLOOR}")
    U, s, Vt = np.linalg.svd(F)
    if np.linalg.det(U) < 0:
        U = U.copy(); U[:, 2] *= -1; s = s.copy(); s[2] *= -1
    if np.linalg.det(Vt) < 0:
        Vt = Vt.copy(); Vt[2, :] *= -1; s = s.copy(); s[2] *= -1
    R = U @ Vt

    g_F = 2.0 * mu * (G @ F) + 2.0 * mu * (G.T @ (F - R))
    # rotation term: cotangent on R is -2 mu (G @ F)
    GR = -2.0 * mu * (G @ F)
    W = U.T @ GR @ Vt.T
    Om = np.zeros((3, 3))
    for i in range(3):
        for j in range(i + 1, 3):
            denom = max(s[i] + s[j], 1e-6)
            val = (W[i, j] - W[j, i]) / denom
            Om[i, j] = val
            Om[j, i] = -val
    g_F += U @ Om @ Vt
    g_F += lam * (2.0 * J - 1.0) * np.trace(G) * J * np.linalg.inv(F).T

    g_mu = float(np.sum(G * (2.0 * (F - R) @ F.T)))
    g_lam = J * (J - 1.0) * float(np.trace(G))
    return g_F, g_mu, g_lam


def kernel_deform(Sigma0, F, x):
    """Deformed kernel state: center x, Sigma' = F Sigma0 F^T, R = polar(F)."""
    F = np.asarray(F, dtype=np.float64)
    if np.linalg.det(F) <= DET_FLOOR:
        raise DegenerateF("deformation gradient degenerate")
    R = _ref.polar_rotations(F[None])[0]
    Sigma = F @ np.asarray(Sigma0, dtype=np.float64) @ F.T
    return np.asarray(x, dtype=np.float64).copy(), Sigma, R


def deform_kernels(Sigma0, F, x):
    """Batched kernel_deform over (N, 3, 3) inputs; clamps instead of raising."""
    F = np.asarray(F, dtype=np.float64)
    R = _ref.polar_rotations(F)
    Sigma = F @ np.asarray(Sigma0, dtype=np.float64) @ F.transpose(0, 2, 1)
    return np.asarray(x, dtype=np.float64).copy(), Sigma, R


def deform_backward(Sigma0, F, g_center, g_Sigma):
    """Map (dL/dcenter', dL/dSigma') to (dL/dx_out, dL/dF_out), batched."""
    F = np.asarray(F, dtype=np.float64)
    gS = np.asarray(g_Sigma, dtype=np.float64)
    g_F = (gS + gS.transpose(0, 2, 1)) @ F @ np.asarray(Sigma0, dtype=np.float64)
    return np.asarray(g_center, dtype=np.float64).copy(), g_F


# --------------------------------------------------------------------------
# particle state
# --------------------------------------------------------------------------

class MpmState:
    """Struct-of-arrays particle state (positions, velocities, C, F, ...).

    Owns its arrays: construction always copies, since substeps mutate the
    state in place.
    """

    def __init__(self, x, v, C, F, E, mass, vol0, nu, fixed, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.x = np.array(x, dtype=self.dtype, order="C")
        self.v = np.array(v, dtype=self.dtype, order="C")
        self.C = np.array(C, dtype=self.dtype, order="C")
        self.F = np.array(F, dtype=self.dtype, order="C")
        self.E = np.array(E, dtype=self.dtype, order="C")
        self.mass = np.array(mass, dtype=self.dtype, order="C")
        self.vol0 = np.array(vol0, dtype=self.dtype, order="C")
        self.nu = np.array(nu, dtype=self.dtype, order="C")
        self.fixed = np.array(fixed, dtype=np.uint8, order="C")

    def __len__(self):
        return self.x.shape[0]

    def copy(self) -> "MpmState":
        return MpmState(self.x.copy(), self.v.copy(), self.C.copy(),
                        self.F.copy(), self.E.copy(), self.mass.copy(),
                        self.vol0.copy(), self.nu.copy(), self.fixed.copy(),
                        dtype=self.dtype)

    def set_young(self, E) -> None:
        self.E[:] = np.asarray(E, dtype=self.dtype)

    def to_debug_dict(self) -> dict:
        return {k: getattr(self, k).tolist()
                for k in ("x", "v", "C", "F", "E", "mass", "vol0", "nu", "fixed")}

    @classmethod
    def from_debug_dict(cls, d, dtype=np.float64) -> "MpmState":
        return cls(**{k: np.asarray(v) for k, v in d.items()}, dtype=dtype)


def occupancy_volumes(x, origin, dx, res):
    """Per-particle rest volume dx^3 / (particles in the containing cell)."""
    cell = np.floor((np.asarray(x, np.float64) - origin) / dx).astype(np.int64)
    cell = np.clip(cell, 0, res - 1)
    idx = (cell[:, 0] * res + cell[:, 1]) * res + cell[:, 2]
    counts = np.bincount(idx, minlength=res**3)
    return dx**3 / counts[idx]


def initial_velocities(x, spec: dict):
    x = np.asarray(x, dtype=np.float64)
    kind = spec.get("kind", "none")
    if kind == "none":
        return np.zeros_like(x)
    if kind == "translate":
        return np.broadcast_to(np.asarray(spec["velocity"], np.float64), x.shape).copy()
    if kind == "spin":
        axis = np.asarray(spec["axis"], dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        center = np.asarray(spec.get("center", x.mean(axis=0)), dtype=np.float64)
        return float(spec["rad_per_s"]) * np.cross(axis, x - center)
    raise RangeError(f"unknown initial_velocity kind {kind!r}")


# --------------------------------------------------------------------------
# engine
# --------------------------------------------------------------------------

@dataclass
class StepTape:
    """Record of exactly one substep, sufficient for replay and reverse mode."""

    engine: "Engine"
    x: np.ndarray
    v: np.ndarray
    C: np.ndarray
    F: np.ndarray
    E: np.ndarray
    out_x: np.ndarray = None
    out_v: np.ndarray = None
    out_C: np.ndarray = None
    out_F: np.ndarray = None

    def replay(self, E=None):
        """Re-run the recorded substep (optionally with substituted E)."""
        st = MpmState(self.x.copy(), self.v.copy(), self.C.copy(), self.F.copy(),
                      self.E.copy() if E is None else E,
                      self.engine.mass, self.engine.vol0, self.engine.nu_arr,
                      self.engine.fixed, dtype=self.x.dtype)
        self.engine.substep(st)
        return st

    def backward(self, g_x_out, g_F_out) -> np.ndarray:
        """dL/dE given cotangents on the substep's output x and F."""
        eng = self.engine
        return eng.backend.substep_backward(
            self.x, self.v, self.C, self.F, self.E, eng.mass, eng.vol0,
            eng.fixed, eng.nu_arr, eng.dx, eng.dt, eng.gravity, eng.origin,
            eng.res, eng.boundary.kind_id, eng.boundary.ground_height,
            eng.node_mask,
            np.ascontiguousarray(g_x_out, dtype=np.float64),
            np.ascontiguousarray(g_F_out, dtype=np.float64))


class Engine:
    """Owns grid geometry, boundary handling and the substep loop."""

    def __init__(self, config: SimConfig, bounds_min, bounds_max,
                 dtype=np.float32, backend=None, deterministic: bool = True):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.res = config.grid_resolution
        origin, dx = resolve_domain(config, bounds_min, bounds_max)
        self.origin = origin
        self.dx = dx
        self.dt = config.dt
        self.gravity = np.asarray(config.gravity, dtype=np.float64)
        self.deterministic = deterministic
        self.backend = backend if backend is not None else backends.get_backend()
        self.clamp_events = 0

        self.node_mask = None
        if config.fixed_region is not None:
            lo = np.asarray(config.fixed_region[0])
            hi = np.asarray(config.fixed_region[1])
            pos = Grid(self.res, self.dx, self.origin).node_positions()
            inside = np.all((pos >= lo) & (pos <= hi), axis=1)
            self.node_mask = inside.astype(np.uint8)
        self.boundary = BoundarySpec(config.boundary_kind, config.ground_height,
                                     self.node_mask)

        # filled by attach_particles
        self.mass = self.vol0 = self.nu_arr = self.fixed = None

    def make_grid(self) -> Grid:
        return Grid(self.res, self.dx, self.origin)

    def attach_particles(self, state: MpmState) -> None:
        self.mass = state.mass
        self.vol0 = state.vol0
        self.nu_arr = state.nu
        self.fixed = state.fixed

    def state_from_scene(self, scene: Scene, young) -> MpmState:
        n = len(scene)
        x = scene.centers
        v = initial_velocities(x, self.config.initial_velocity)
        C = np.zeros((n, 3, 3))
        F = np.tile(np.eye(3), (n, 1, 1))
        vol0 = occupancy_volumes(x, self.origin, self.dx, self.res)
        mass = self.config.density * vol0
        E = np.array(np.broadcast_to(np.asarray(young, dtype=np.float64), (n,)))
        nu = np.full(n, self.config.poisson)
        fixed = np.zeros(n, dtype=np.uint8)
        if self.config.fixed_region is not None:
            lo = np.asarray(self.config.fixed_region[0])
            hi = np.asarray(self.config.fixed_region[1])
            fixed = np.all((x >= lo) & (x <= hi), axis=1).astype(np.uint8)
        st = MpmState(x, v, C, F, E, mass, vol0, nu, fixed, dtype=self.dtype)
        self.attach_particles(st)
        return st

    def substep(self, state: MpmState) -> MpmState:
        """One full substep in place; deterministic given identical inputs."""
        n = self.backend.substep(
            state.x, state.v, state.C, state.F, state.E, state.mass,
            state.vol0, state.fixed, state.nu, self.dx, self.dt, self.gravity,
            self.origin, self.res, self.boundary.kind_id,
            self.boundary.ground_height, self.node_mask)
        self.clamp_events += n
        return state

    def simulate_frame(self, state: MpmState, record_gradient: bool = False):
        """Advance substeps_per_frame substeps; tape only the last one."""
        steps = self.config.substeps_per_frame
        for _ in range(steps - 1):
            self.substep(state)
        tape = None
        if record_gradient:
            self.attach_particles(state)
            tape = StepTape(self, state.x.copy(), state.v.copy(),
                            state.C.copy(), state.F.copy(), state.E.copy())
        self.substep(state)
        if tape is not None:
            tape.out_x = state.x.copy()
            tape.out_v = state.v.copy()
            tape.out_C = state.C.copy()
            tape.out_F = state.F.copy()
        return state, tape
