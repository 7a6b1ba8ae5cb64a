# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: fused MLS-MPM substep and the alpha compositor.

Float32 and float64 specializations are generated from the same source; the
parameter adjoint of the substep is delegated to the numpy implementation
(it runs once per frame, not per substep).
"""

import numpy as np

cimport cython
from libc.math cimport exp, fabs, log, sqrt

from dreamphys.backends.numpy_impl import substep_backward  # noqa: F401

name = "compiled"

ctypedef fused floating:
    float
    double

cdef double DET_FLOOR = 1e-8
cdef double ALPHA_MAX = 0.99
cdef double ALPHA_MIN = 1.0 / 255.0
cdef double T_STOP = 1e-4

_scratch = {}


cdef inline void _jrot(double* A, double* V, int p, int q) nogil:
    cdef double apq = A[3 * p + q]
    cdef double theta, t, c, s, akp, akq
    cdef int k
    if fabs(apq) < 1e-300:
        return
    theta = (A[3 * q + q] - A[3 * p + p]) / (2.0 * apq)
    t = 1.0 / (fabs(theta) + sqrt(theta * theta + 1.0))
    if theta < 0:
        t = -t
    c = 1.0 / sqrt(t * t + 1.0)
    s = t * c
    for k in range(3):
        akp = A[3 * k + p]
        akq = A[3 * k + q]
        A[3 * k + p] = c * akp - s * akq
        A[3 * k + q] = s * akp + c * akq
    for k in range(3):
        akp = A[3 * p + k]
        akq = A[3 * q + k]
        A[3 * p + k] = c * akp - s * akq
        A[3 * q + k] = s * akp + c * akq
    for k in range(3):
        akp = V[3 * k + p]
        akq = V[3 * k + q]
        V[3 * k + p] = c * akp - s * akq
        V[3 * k + q] = s * akp + c * akq


cdef inline void _polar3(const double* F, double* R) nogil:
    """Closest rotation R = F (F^T F)^(-1/2) via Jacobi eigensolve."""
    cdef double A[9]
    cdef double V[9]
    cdef double B[9]
    cdef double inv_sig[3]
    cdef int i, j, k, sweep
    for i in range(3):
        for j in range(3):
            A[3 * i + j] = (F[i] * F[j] + F[3 + i] * F[3 + j]
                            + F[6 + i] * F[6 + j])
    for i in range(9):
        V[i] = 0.0
    V[0] = V[4] = V[8] = 1.0
    for sweep in range(6):
        if fabs(A[1]) + fabs(A[2]) + fabs(A[5]) < 1e-18:
            break
        _jrot(A, V, 0, 1)
        _jrot(A, V, 0, 2)
        _jrot(A, V, 1, 2)
    for i in range(3):
        inv_sig[i] = 1.0 / sqrt(A[4 * i] if A[4 * i] > 1e-24 else 1e-24)
    # B = V diag(1/sigma) V^T
    for i in range(3):
        for j in range(3):
            B[3 * i + j] = (V[3 * i + 0] * inv_sig[0] * V[3 * j + 0]
                            + V[3 * i + 1] * inv_sig[1] * V[3 * j + 1]
                            + V[3 * i + 2] * inv_sig[2] * V[3 * j + 2])
    for i in range(3):
        for j in range(3):
            R[3 * i + j] = (F[3 * i + 0] * B[0 + j] + F[3 * i + 1] * B[3 + j]
                            + F[3 * i + 2] * B[6 + j])


cdef inline double _det3(const double* F) nogil:
    return (F[0] * (F[4] * F[8] - F[5] * F[7])
            - F[1] * (F[3] * F[8] - F[5] * F[6])
            + F[2] * (F[3] * F[7] - F[4] * F[6]))


def substep(floating[:, ::1] x, floating[:, ::1] v, floating[:, :, ::1] C,
            floating[:, :, ::1] F, floating[::1] E, floating[::1] mass,
            floating[::1] vol0, const unsigned char[::1] fixed,
            floating[::1] nu, double dx, double dt, gravity, origin,
            int res, int bc_kind, double ground, node_mask):
    """One fused MLS-MPM substep in place; returns the det-clamp count."""
    cdef Py_ssize_t N = x.shape[0]
    cdef Py_ssize_t ncell = <Py_ssize_t> res * res * res
    cdef double gx = gravity[0], gy = gravity[1], gz = gravity[2]
    cdef double ox = origin[0], oy = origin[1], oz = origin[2]

    key = (res, "f64")
    if key not in _scratch:
        _scratch[key] = (np.zeros(ncell), np.zeros((ncell, 3)))
    gm_arr, gv_arr = _scratch[key]
    gm_arr[:] = 0.0
    gv_arr[:] = 0.0
    cdef double[::1] gm = gm_arr
    cdef double[:, ::1] gv = gv_arr

    cdef unsigned char[::1] nmask
    cdef int has_mask = 0
    if node_mask is not None:
        nmask = node_mask
        has_mask = 1
    else:
        nmask = np.zeros(1, dtype=np.uint8)

    cdef double inv_dx = 1.0 / dx
    cdef double k2 = 4.0 * inv_dx * inv_dx
    cdef double lo = 1.5 * dx
    cdef double hi = (res - 1.5) * dx * (1.0 - 1e-12) - 1e-12 * dx

    cdef Py_ssize_t p, c
    cdef int i, j, k, a, b, bi, bj, bk, idx, iy
    cdef double xp, yp, zp, xl0, xl1, xl2, f0, f1, f2
    cdef double wxa[3]
    cdef double wya[3]
    cdef double wza[3]
    cdef double dxa[3]
    cdef double dya[3]
    cdef double dza[3]
    cdef double Fp[9]
    cdef double Rm[9]
    cdef double tau[9]
    cdef double Ap[9]
    cdef double Cn[9]
    cdef double Fn[9]
    cdef double mv0, mv1, mv2, mu_p, lam_p, J, diag, coef, mp, w, wi, wij
    cdef double d0, d1, d2, vx, vy, vz, nvx, nvy, nvz, ny
    cdef int nclamp = 0

    with nogil:
        # --- particle to grid (mass, APIC momentum, internal force) ---
        for p in range(N):
            xp = x[p, 0]
            yp = x[p, 1]
            zp = x[p, 2]
            if xp < ox + lo: xp = ox + lo
            if xp > ox + hi: xp = ox + hi
            if yp < oy + lo: yp = oy + lo
            if yp > oy + hi: yp = oy + hi
            if zp < oz + lo: zp = oz + lo
            if zp > oz + hi: zp = oz + hi
            x[p, 0] = <floating> xp
            x[p, 1] = <floating> yp
            x[p, 2] = <floating> zp
            xl0 = (xp - ox) * inv_dx
            xl1 = (yp - oy) * inv_dx
            xl2 = (zp - oz) * inv_dx
            bi = <int> (xl0 - 0.5)
            bj = <int> (xl1 - 0.5)
            bk = <int> (xl2 - 0.5)
            f0 = xl0 - bi
            f1 = xl1 - bj
            f2 = xl2 - bk
            wxa[0] = 0.5 * (1.5 - f0) * (1.5 - f0)
            wxa[1] = 0.75 - (f0 - 1.0) * (f0 - 1.0)
            wxa[2] = 0.5 * (f0 - 0.5) * (f0 - 0.5)
            wya[0] = 0.5 * (1.5 - f1) * (1.5 - f1)
            wya[1] = 0.75 - (f1 - 1.0) * (f1 - 1.0)
            wya[2] = 0.5 * (f1 - 0.5) * (f1 - 0.5)
            wza[0] = 0.5 * (1.5 - f2) * (1.5 - f2)
            wza[1] = 0.75 - (f2 - 1.0) * (f2 - 1.0)
            wza[2] = 0.5 * (f2 - 0.5) * (f2 - 0.5)
            for i in range(3):
                dxa[i] = (bi + i - xl0) * dx
                dya[i] = (bj + i - xl1) * dx
                dza[i] = (bk + i - xl2) * dx

            for a in range(3):
                for b in range(3):
                    Fp[3 * a + b] = F[p, a, b]
            J = _det3(Fp)
            if J <= DET_FLOOR:
                nclamp += 1
                J = DET_FLOOR
            _polar3(Fp, Rm)
            mu_p = E[p] / (2.0 * (1.0 + nu[p]))
            lam_p = E[p] * nu[p] / ((1.0 + nu[p]) * (1.0 - 2.0 * nu[p]))
            diag = lam_p * J * (J - 1.0)
            for a in range(3):
                for b in range(3):
                    tau[3 * a + b] = 2.0 * mu_p * (
                        (Fp[3 * a] - Rm[3 * a]) * Fp[3 * b]
                        + (Fp[3 * a + 1] - Rm[3 * a + 1]) * Fp[3 * b + 1]
                        + (Fp[3 * a + 2] - Rm[3 * a + 2]) * Fp[3 * b + 2])
                tau[4 * a] += diag

            mp = mass[p]
            coef = dt * k2 * vol0[p]
            for a in range(3):
                for b in range(3):
                    Ap[3 * a + b] = mp * C[p, a, b] - coef * tau[3 * a + b]
            mv0 = mp * v[p, 0]
            mv1 = mp * v[p, 1]
            mv2 = mp * v[p, 2]

            for i in range(3):
                wi = wxa[i]
                d0 = dxa[i]
                for j in range(3):
                    wij = wi * wya[j]
                    d1 = dya[j]
                    for k in range(3):
                        w = wij * wza[k]
                        d2 = dza[k]
                        idx = ((bi + i) * res + (bj + j)) * res + (bk + k)
                        gm[idx] += w * mp
                        gv[idx, 0] += w * (mv0 + Ap[0] * d0 + Ap[1] * d1 + Ap[2] * d2)
                        gv[idx, 1] += w * (mv1 + Ap[3] * d0 + Ap[4] * d1 + Ap[5] * d2)
                        gv[idx, 2] += w * (mv2 + Ap[6] * d0 + Ap[7] * d1 + Ap[8] * d2)

        # --- grid update: momentum -> velocity, gravity, boundary ---
        for c in range(ncell):
            if gm[c] > 0.0:
                gv[c, 0] = gv[c, 0] / gm[c] + dt * gx
                gv[c, 1] = gv[c, 1] / gm[c] + dt * gy
                gv[c, 2] = gv[c, 2] / gm[c] + dt * gz
            else:
                gv[c, 0] = 0.0
                gv[c, 1] = 0.0
                gv[c, 2] = 0.0
            if bc_kind != 0:
                iy = <int> ((c / res) % res)
                ny = oy + iy * dx
                if ny < ground:
                    if bc_kind == 1:
                        gv[c, 0] = 0.0
                        gv[c, 1] = 0.0
                        gv[c, 2] = 0.0
                    else:
                        gv[c, 1] = 0.0
            if has_mask and nmask[c]:
                gv[c, 0] = 0.0
                gv[c, 1] = 0.0
                gv[c, 2] = 0.0

        # --- grid to particle ---
        for p in range(N):
            if fixed[p]:
                v[p, 0] = 0
                v[p, 1] = 0
                v[p, 2] = 0
                for a in range(3):
                    for b in range(3):
                        C[p, a, b] = 0
                continue
            xl0 = (x[p, 0] - ox) * inv_dx
            xl1 = (x[p, 1] - oy) * inv_dx
            xl2 = (x[p, 2] - oz) * inv_dx
            bi = <int> (xl0 - 0.5)
            bj = <int> (xl1 - 0.5)
            bk = <int> (xl2 - 0.5)
            f0 = xl0 - bi
            f1 = xl1 - bj
            f2 = xl2 - bk
            wxa[0] = 0.5 * (1.5 - f0) * (1.5 - f0)
            wxa[1] = 0.75 - (f0 - 1.0) * (f0 - 1.0)
            wxa[2] = 0.5 * (f0 - 0.5) * (f0 - 0.5)
            wya[0] = 0.5 * (1.5 - f1) * (1.5 - f1)
            wya[1] = 0.75 - (f1 - 1.0) * (f1 - 1.0)
            wya[2] = 0.5 * (f1 - 0.5) * (f1 - 0.5)
            wza[0] = 0.5 * (1.5 - f2) * (1.5 - f2)
            wza[1] = 0.75 - (f2 - 1.0) * (f2 - 1.0)
            wza[2] = 0.5 * (f2 - 0.5) * (f2 - 0.5)
            for i in range(3):
                dxa[i] = (bi + i - xl0) * dx
                dya[i] = (bj + i - xl1) * dx
                dza[i] = (bk + i - xl2) * dx

            nvx = 0.0
            nvy = 0.0
            nvz = 0.0
            for a in range(9):
                Cn[a] = 0.0
            for i in range(3):
                wi = wxa[i]
                d0 = dxa[i]
                for j in range(3):
                    wij = wi * wya[j]
                    d1 = dya[j]
                    for k in range(3):
                        w = wij * wza[k]
                        d2 = dza[k]
                        idx = ((bi + i) * res + (bj + j)) * res + (bk + k)
                        vx = gv[idx, 0]
                        vy = gv[idx, 1]
                        vz = gv[idx, 2]
                        nvx += w * vx
                        nvy += w * vy
                        nvz += w * vz
                        Cn[0] += w * vx * d0
                        Cn[1] += w * vx * d1
                        Cn[2] += w * vx * d2
                        Cn[3] += w * vy * d0
                        Cn[4] += w * vy * d1
                        Cn[5] += w * vy * d2
                        Cn[6] += w * vz * d0
                        Cn[7] += w * vz * d1
                        Cn[8] += w * vz * d2
            for a in range(9):
                Cn[a] *= k2
            for a in range(3):
                for b in range(3):
                    Fp[3 * a + b] = F[p, a, b]
            # Fn = (I + dt Cn) Fp
            for a in range(3):
                for b in range(3):
                    Fn[3 * a + b] = Fp[3 * a + b] + dt * (
                        Cn[3 * a] * Fp[b]
                        + Cn[3 * a + 1] * Fp[3 + b]
                        + Cn[3 * a + 2] * Fp[6 + b])
            for a in range(3):
                for b in range(3):
                    F[p, a, b] = <floating> Fn[3 * a + b]
                    C[p, a, b] = <floating> Cn[3 * a + b]
            v[p, 0] = <floating> nvx
            v[p, 1] = <floating> nvy
            v[p, 2] = <floating> nvz
            x[p, 0] += <floating> (dt * nvx)
            x[p, 1] += <floating> (dt * nvy)
            x[p, 2] += <floating> (dt * nvz)

    return nclamp


def composite(floating[:, ::1] mean2d, floating[:, ::1] icov,
              floating[::1] opac, floating[:, ::1] colors,
              const int[:, ::1] bbox, int H, int W):
    """Composite depth-sorted 2D Gaussians; mirrors numpy_impl.composite."""
    if floating is float:
        out_dtype = np.float32
    else:
        out_dtype = np.float64
    image_arr = np.zeros((H, W, 3), dtype=out_dtype)
    t_arr = np.ones((H, W), dtype=out_dtype)
    cdef floating[:, :, ::1] image = image_arr
    cdef floating[:, ::1] T = t_arr
    cdef Py_ssize_t K = mean2d.shape[0]
    cdef Py_ssize_t n
    cdef int px, py, x0, x1, y0, y1
    cdef floating dxp, dyp, q, alpha, t, g
    cdef floating a, b, c, op, c0, c1, c2, tw

    with nogil:
        for n in range(K):
            x0 = bbox[n, 0]
            x1 = bbox[n, 1]
            y0 = bbox[n, 2]
            y1 = bbox[n, 3]
            if x1 < x0 or y1 < y0:
                continue
            a = icov[n, 0]
            b = icov[n, 1]
            c = icov[n, 2]
            op = opac[n]
            c0 = colors[n, 0]
            c1 = colors[n, 1]
            c2 = colors[n, 2]
            for py in range(y0, y1 + 1):
                dyp = (<floating> py) + <floating> 0.5 - mean2d[n, 1]
                for px in range(x0, x1 + 1):
                    t = T[py, px]
                    if t < <floating> T_STOP:
                        continue
                    dxp = (<floating> px) + <floating> 0.5 - mean2d[n, 0]
                    q = a * dxp * dxp + <floating> 2.0 * b * dxp * dyp + c * dyp * dyp
                    g = <floating> exp(-0.5 * <double> q)
                    alpha = op * g
                    if alpha > <floating> ALPHA_MAX:
                        alpha = <floating> ALPHA_MAX
                    if alpha < <floating> ALPHA_MIN:
                        continue
                    tw = t * alpha
                    image[py, px, 0] += tw * c0
                    image[py, px, 1] += tw * c1
                    image[py, px, 2] += tw * c2
                    T[py, px] = t * (<floating> 1.0 - alpha)
    return image_arr


def composite_backward(floating[:, ::1] mean2d, floating[:, ::1] icov,
                       floating[::1] opac, floating[:, ::1] colors,
                       const int[:, ::1] bbox, int H, int W,
                       floating[:, :, ::1] image, floating[:, :, ::1] g_image):
    """Adjoint of composite; forward-dtype branching, float64 accumulation."""
    if floating is float:
        work_dtype = np.float32
    else:
        work_dtype = np.float64
    t_arr = np.ones((H, W), dtype=work_dtype)
    cacc_arr = np.zeros((H, W, 3))
    gmean_arr = np.zeros((mean2d.shape[0], 2))
    gicov_arr = np.zeros((mean2d.shape[0], 3))
    cdef floating[:, ::1] T = t_arr
    cdef double[:, :, ::1] Cacc = cacc_arr
    cdef double[:, ::1] g_mean = gmean_arr
    cdef double[:, ::1] g_icov = gicov_arr

    cdef Py_ssize_t K = mean2d.shape[0]
    cdef Py_ssize_t n
    cdef int px, py, x0, x1, y0, y1
    cdef floating dxp, dyp, q, alpha, alpha_raw, t, g
    cdef floating a, b, c, op
    cdef double c0, c1, c2, t64, a64, contrib, one_m
    cdef double dLda, g_q, lx, ly

    with nogil:
        for n in range(K):
            x0 = bbox[n, 0]
            x1 = bbox[n, 1]
            y0 = bbox[n, 2]
            y1 = bbox[n, 3]
            if x1 < x0 or y1 < y0:
                continue
            a = icov[n, 0]
            b = icov[n, 1]
            c = icov[n, 2]
            op = opac[n]
            c0 = <double> colors[n, 0]
            c1 = <double> colors[n, 1]
            c2 = <double> colors[n, 2]
            for py in range(y0, y1 + 1):
                dyp = (<floating> py) + <floating> 0.5 - mean2d[n, 1]
                for px in range(x0, x1 + 1):
                    t = T[py, px]
                    if t < <floating> T_STOP:
                        continue
                    dxp = (<floating> px) + <floating> 0.5 - mean2d[n, 0]
                    q = a * dxp * dxp + <floating> 2.0 * b * dxp * dyp + c * dyp * dyp
                    g = <floating> exp(-0.5 * <double> q)
                    alpha_raw = op * g
                    alpha = alpha_raw
                    if alpha > <floating> ALPHA_MAX:
                        alpha = <floating> ALPHA_MAX
                    if alpha < <floating> ALPHA_MIN:
                        continue
                    t64 = <double> t
                    a64 = <double> alpha
                    contrib = t64 * a64
                    Cacc[py, px, 0] += contrib * c0
                    Cacc[py, px, 1] += contrib * c1
                    Cacc[py, px, 2] += contrib * c2
                    one_m = 1.0 - a64
                    dLda = (
                        (<double> g_image[py, px, 0]) * (t64 * c0 - ((<double> image[py, px, 0]) - Cacc[py, px, 0]) / one_m)
                        + (<double> g_image[py, px, 1]) * (t64 * c1 - ((<double> image[py, px, 1]) - Cacc[py, px, 1]) / one_m)
                        + (<double> g_image[py, px, 2]) * (t64 * c2 - ((<double> image[py, px, 2]) - Cacc[py, px, 2]) / one_m))
                    if alpha_raw <= <floating> ALPHA_MAX:
                        g_q = dLda * (<double> op) * (<double> g) * (-0.5)
                        lx = <double> dxp
                        ly = <double> dyp
                        g_mean[n, 0] += -g_q * (2.0 * (<double> a) * lx + 2.0 * (<double> b) * ly)
                        g_mean[n, 1] += -g_q * (2.0 * (<double> b) * lx + 2.0 * (<double> c) * ly)
                        g_icov[n, 0] += g_q * lx * lx
                        g_icov[n, 1] += g_q * 2.0 * lx * ly
                        g_icov[n, 2] += g_q * ly * ly
                    T[py, px] = t * (<floating> 1.0 - alpha)
    return gmean_arr, gicov_arr
