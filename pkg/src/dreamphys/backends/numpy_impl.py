"""Pure-numpy backend: MPM substep (forward + parameter adjoint) and the
front-to-back alpha compositor. Semantically identical to the compiled core;
used when the extension is unavailable and as the reference in parity tests.
"""

from __future__ import annotations

import numpy as np

name = "numpy"

DET_FLOOR = 1e-8
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_STOP = 1e-4

_OFFSETS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


# --------------------------------------------------------------------------
# shared pieces
# --------------------------------------------------------------------------

def clamp_positions(x, origin, dx, res):
    """Keep particles at least 1.5 cells from the grid boundary, in place."""
    lo = origin + 1.5 * dx
    hi = origin + (res - 1.5) * dx * (1.0 - 1e-12) - 1e-12 * dx
    np.clip(x, lo.astype(x.dtype), hi.astype(x.dtype), out=x)


def quadratic_weights(x, origin, dx, res):
    """Base node index (N, 3) and per-axis weights (N, 3, 3): w[:, o, axis]."""
    xl = (x.astype(np.float64) - origin) / dx
    base = np.floor(xl - 0.5).astype(np.int64)
    fx = xl - base
    w = np.empty((x.shape[0], 3, 3))
    w[:, 0, :] = 0.5 * (1.5 - fx) ** 2
    w[:, 1, :] = 0.75 - (fx - 1.0) ** 2
    w[:, 2, :] = 0.5 * (fx - 0.5) ** 2
    return base, w, xl


def polar_rotations(F):
    """Batched closest-rotation factor of (N, 3, 3) deformation gradients."""
    U, s, Vt = np.linalg.svd(F.astype(np.float64))
    det_u = np.linalg.det(U)
    det_v = np.linalg.det(Vt)
    U = U.copy()
    Vt = Vt.copy()
    U[det_u < 0, :, 2] *= -1.0
    Vt[det_v < 0, 2, :] *= -1.0
    return U @ Vt


def kirchhoff_stress(F, mu, lam):
    """Fixed-corotated Kirchhoff stress, batched. Returns (tau, n_clamped)."""
    F64 = F.astype(np.float64)
    J = np.linalg.det(F64)
    n_clamped = int(np.count_nonzero(J <= DET_FLOOR))
    Jc = np.maximum(J, DET_FLOOR)
    R = polar_rotations(F64)
    tau = 2.0 * mu[:, None, None] * ((F64 - R) @ F64.transpose(0, 2, 1))
    diag = lam * Jc * (Jc - 1.0)
    tau[:, 0, 0] += diag
    tau[:, 1, 1] += diag
    tau[:, 2, 2] += diag
    return tau, R, Jc, n_clamped


def _lame(E, nu):
    mu = E / (2.0 * (1.0 + nu))
    lam = E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def _scatter(idx, values, ncell):
    return np.bincount(idx, weights=values, minlength=ncell)


def _apply_bc(grid_v, origin, dx, res, bc_kind, ground, node_mask):
    if bc_kind:
        iy = (np.arange(res**3, dtype=np.int64) // res) % res
        below = origin[1] + iy * dx < ground
        if bc_kind == 1:
            grid_v[below] = 0.0
        else:
            grid_v[below, 1] = 0.0
    if node_mask is not None:
        grid_v[node_mask.astype(bool)] = 0.0


# --------------------------------------------------------------------------
# fused substep
# --------------------------------------------------------------------------

def substep(x, v, C, F, E, mass, vol0, fixed, nu, dx, dt, gravity,
            origin, res, bc_kind, ground, node_mask):
    """One MLS-MPM substep, in place. Returns the det-clamp count."""
    dtype = x.dtype
    ncell = res**3
    clamp_positions(x, origin, dx, res)
    base, w, xl = quadratic_weights(x, origin, dx, res)

    mu, lam = _lame(E.astype(np.float64), nu.astype(np.float64))
    tau, _, _, n_clamped = kirchhoff_stress(F, mu, lam)

    inv_dx2 = 1.0 / (dx * dx)
    coef = dt * 4.0 * inv_dx2 * vol0.astype(np.float64)
    m64 = mass.astype(np.float64)
    A = m64[:, None, None] * C.astype(np.float64) - coef[:, None, None] * tau
    mv = m64[:, None] * v.astype(np.float64)

    grid_m = np.zeros(ncell)
    grid_mom = np.zeros((ncell, 3))
    for i, j, k in _OFFSETS:
        weight = w[:, i, 0] * w[:, j, 1] * w[:, k, 2]
        node = base + (i, j, k)
        idx = (node[:, 0] * res + node[:, 1]) * res + node[:, 2]
        d = (node - xl) * dx
        contrib = weight[:, None] * (mv + np.einsum("nab,nb->na", A, d))
        grid_m += _scatter(idx, weight * m64, ncell)
        for a in range(3):
            grid_mom[:, a] += _scatter(idx, contrib[:, a], ncell)

    grid_v = np.zeros((ncell, 3))
    nz = grid_m > 0
    grid_v[nz] = grid_mom[nz] / grid_m[nz, None]
    grid_v[nz] += dt * np.asarray(gravity, dtype=np.float64)
    _apply_bc(grid_v, origin, dx, res, bc_kind, ground, node_mask)

    new_v = np.zeros((x.shape[0], 3))
    new_C = np.zeros((x.shape[0], 3, 3))
    for i, j, k in _OFFSETS:
        weight = w[:, i, 0] * w[:, j, 1] * w[:, k, 2]
        node = base + (i, j, k)
        idx = (node[:, 0] * res + node[:, 1]) * res + node[:, 2]
        d = (node - xl) * dx
        vi = grid_v[idx]
        new_v += weight[:, None] * vi
        new_C += weight[:, None, None] * np.einsum("na,nb->nab", vi, d)
    new_C *= 4.0 * inv_dx2

    free = ~fixed.astype(bool)
    eye = np.eye(3)
    Fn = (eye + dt * new_C[free]) @ F[free].astype(np.float64)
    v[free] = new_v[free].astype(dtype)
    x[free] += (dt * new_v[free]).astype(dtype)
    C[free] = new_C[free].astype(dtype)
    F[free] = Fn.astype(dtype)
    v[~free] = 0
    C[~free] = 0
    return n_clamped


# --------------------------------------------------------------------------
# adjoint of one substep w.r.t. per-particle Young's modulus
# --------------------------------------------------------------------------

def substep_backward(x, v, C, F, E, mass, vol0, fixed, nu, dx, dt, gravity,
                     origin, res, bc_kind, ground, node_mask,
                     g_x_out, g_F_out):
    """Gradient of <g_x, x_out> + <g_F, F_out> w.r.t. E over one substep.

    Inputs are the pre-substep state; everything but E is treated constant.
    Computed in float64 regardless of the forward dtype.
    """
    ncell = res**3
    x = x.astype(np.float64).copy()
    clamp_positions(x, origin, dx, res)
    base, w, xl = quadratic_weights(x, origin, dx, res)

    E64 = E.astype(np.float64)
    nu64 = nu.astype(np.float64)
    mu, lam = _lame(E64, nu64)
    F64 = F.astype(np.float64)
    J = np.linalg.det(F64)
    Jc = np.maximum(J, DET_FLOOR)
    R = polar_rotations(F64)

    grid_m = np.zeros(ncell)
    m64 = mass.astype(np.float64)
    idx_all = []
    weight_all = []
    d_all = []
    for i, j, k in _OFFSETS:
        weight = w[:, i, 0] * w[:, j, 1] * w[:, k, 2]
        node = base + (i, j, k)
        idx = (node[:, 0] * res + node[:, 1]) * res + node[:, 2]
        grid_m += _scatter(idx, weight * m64, ncell)
        idx_all.append(idx)
        weight_all.append(weight)
        d_all.append((node - xl) * dx)

    free = ~fixed.astype(bool)
    g_v = dt * g_x_out.astype(np.float64)
    g_C = dt * (g_F_out.astype(np.float64) @ F64.transpose(0, 2, 1))
    g_v[~free] = 0.0
    g_C[~free] = 0.0

    k2 = 4.0 / (dx * dx)
    g_gridv = np.zeros((ncell, 3))
    for idx, weight, d in zip(idx_all, weight_all, d_all):
        contrib = weight[:, None] * (g_v + k2 * np.einsum("nab,nb->na", g_C, d))
        for a in range(3):
            g_gridv[:, a] += _scatter(idx, contrib[:, a], ncell)
    _apply_bc(g_gridv, origin, dx, res, bc_kind, ground, node_mask)

    g_tau = np.zeros((x.shape[0], 3, 3))
    inv_m = np.where(grid_m > 0, 1.0 / np.maximum(grid_m, 1e-300), 0.0)
    coef = dt * k2 * vol0.astype(np.float64)
    for idx, weight, d in zip(idx_all, weight_all, d_all):
        gv = g_gridv[idx]
        s = weight * coef * inv_m[idx]
        g_tau += s[:, None, None] * np.einsum("na,nb->nab", gv, d)
    g_tau = -g_tau

    dtau_dmu = 2.0 * ((F64 - R) @ F64.transpose(0, 2, 1))
    g_mu = np.einsum("nab,nab->n", g_tau, dtau_dmu)
    g_lam = Jc * (Jc - 1.0) * np.einsum("naa->n", g_tau)
    g_E = g_mu / (2.0 * (1.0 + nu64)) \
        + g_lam * nu64 / ((1.0 + nu64) * (1.0 - 2.0 * nu64))
    return g_E


# --------------------------------------------------------------------------
# alpha compositing (front-to-back, globally depth-sorted input)
# --------------------------------------------------------------------------

def composite(mean2d, icov, opac, colors, bbox, H, W):
    """Composite depth-sorted 2D Gaussians into an (H, W, 3) image.

    `icov` holds the packed inverse 2D covariance (a, b, c) for
    [[a, b], [b, c]]; `bbox` holds inclusive pixel ranges (x0, x1, y0, y1).
    """
    dtype = mean2d.dtype
    image = np.zeros((H, W, 3), dtype=dtype)
    T = np.ones((H, W), dtype=dtype)
    for n in range(mean2d.shape[0]):
        x0, x1, y0, y1 = bbox[n]
        if x1 < x0 or y1 < y0:
            continue
        px = np.arange(x0, x1 + 1, dtype=dtype) + dtype.type(0.5) - mean2d[n, 0]
        py = np.arange(y0, y1 + 1, dtype=dtype) + dtype.type(0.5) - mean2d[n, 1]
        dx_, dy_ = np.meshgrid(px, py)
        a, b, c = icov[n]
        q = a * dx_ * dx_ + 2.0 * b * dx_ * dy_ + c * dy_ * dy_
        alpha = np.minimum(opac[n] * np.exp(-0.5 * q), dtype.type(ALPHA_MAX))
        tile = T[y0:y1 + 1, x0:x1 + 1]
        live = (alpha >= ALPHA_MIN) & (tile >= T_STOP)
        contrib = np.where(live, tile * alpha, 0.0).astype(dtype)
        image[y0:y1 + 1, x0:x1 + 1] += contrib[:, :, None] * colors[n]
        T[y0:y1 + 1, x0:x1 + 1] = np.where(live, tile * (1.0 - alpha), tile)
    return image


def composite_backward(mean2d, icov, opac, colors, bbox, H, W, image, g_image):
    """Adjoint of `composite`: gradients w.r.t. mean2d and packed icov.

    Recomputes alphas in the forward dtype so skip/stop branches match the
    forward pass exactly; accumulates gradients in float64.
    """
    dtype = mean2d.dtype
    K = mean2d.shape[0]
    T = np.ones((H, W), dtype=dtype)
    C_acc = np.zeros((H, W, 3))
    g_mean = np.zeros((K, 2))
    g_icov = np.zeros((K, 3))
    img64 = image.astype(np.float64)
    g64 = g_image.astype(np.float64)
    for n in range(K):
        x0, x1, y0, y1 = bbox[n]
        if x1 < x0 or y1 < y0:
            continue
        px = np.arange(x0, x1 + 1, dtype=dtype) + dtype.type(0.5) - mean2d[n, 0]
        py = np.arange(y0, y1 + 1, dtype=dtype) + dtype.type(0.5) - mean2d[n, 1]
        dx_, dy_ = np.meshgrid(px, py)
        a, b, c = icov[n]
        q = a * dx_ * dx_ + 2.0 * b * dx_ * dy_ + c * dy_ * dy_
        G = np.exp(-0.5 * q)
        alpha_raw = opac[n] * G
        alpha = np.minimum(alpha_raw, dtype.type(ALPHA_MAX))
        tile = T[y0:y1 + 1, x0:x1 + 1]
        live = (alpha >= ALPHA_MIN) & (tile >= T_STOP)

        a64 = alpha.astype(np.float64)
        t64 = tile.astype(np.float64)
        contrib = np.where(live, t64 * a64, 0.0)
        C_tile = C_acc[y0:y1 + 1, x0:x1 + 1]
        C_tile += contrib[:, :, None] * colors[n].astype(np.float64)

        gpix = g64[y0:y1 + 1, x0:x1 + 1]
        itile = img64[y0:y1 + 1, x0:x1 + 1]
        dLda = np.einsum("yxc,yxc->yx",
                         gpix,
                         t64[:, :, None] * colors[n].astype(np.float64)
                         - (itile - C_tile) / (1.0 - a64)[:, :, None])
        dLda = np.where(live & (alpha_raw <= ALPHA_MAX), dLda, 0.0)
        g_q = dLda * float(opac[n]) * G.astype(np.float64) * (-0.5)
        lx = dx_.astype(np.float64)
        ly = dy_.astype(np.float64)
        g_mean[n, 0] = np.sum(-g_q * (2.0 * a * lx + 2.0 * b * ly))
        g_mean[n, 1] = np.sum(-g_q * (2.0 * b * lx + 2.0 * c * ly))
        g_icov[n, 0] = np.sum(g_q * lx * lx)
        g_icov[n, 1] = np.sum(g_q * 2.0 * lx * ly)
        g_icov[n, 2] = np.sum(g_q * ly * ly)

        T[y0:y1 + 1, x0:x1 + 1] = np.where(live, tile * (1.0 - alpha), tile)
    return g_mean, g_icov
