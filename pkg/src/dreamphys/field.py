"""KAN tri-plane material field.

Maps rest positions to physical parameters (by default log10 of Young's
modulus squashed into [4, 8]). Three feature planes are bilinearly sampled
and summed, then passed through KAN layers whose edges are cubic B-spline
functions plus a silu base term. All weights live in float64; the checkpoint
stores float32 per the file format.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass
from typing import List

import numpy as np

from .errors import OutOfBounds, ProtocolError, StaleRecord

MAGIC = b"DPMF"
VERSION = 1

SPLINE_ORDER = 3


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def spline_knots(grid_size: int) -> np.ndarray:
    """Uniform knot vector on [-1, 1] extended by the spline order per side."""
    h = 2.0 / grid_size
    return -1.0 + h * np.arange(-SPLINE_ORDER, grid_size + SPLINE_ORDER + 1)


def spline_basis(u: np.ndarray, grid_size: int, derivative: bool = False):
    """Cubic B-spline basis values (..., grid_size + 3) via the Cox-de Boor
    recursion on the extended uniform knot grid; optionally also d/du."""
    t = spline_knots(grid_size)
    x = np.asarray(u, dtype=np.float64)[..., None]
    bases = ((x >= t[:-1]) & (x < t[1:])).astype(np.float64)
    prev = None
    for k in range(1, SPLINE_ORDER + 1):
        if k == SPLINE_ORDER:
            prev = bases
        left = (x - t[: -k - 1]) / (t[k:-1] - t[: -k - 1])
        right = (t[k + 1:] - x) / (t[k + 1:] - t[1:-k])
        bases = left * bases[..., :-1] + right * bases[..., 1:]
    if not derivative:
        return bases
    k = SPLINE_ORDER
    dl = k / (t[k:-1] - t[: -k - 1])
    dr = k / (t[k + 1:] - t[1:-k])
    deriv = dl * prev[..., :-1] - dr * prev[..., 1:]
    return bases, deriv


@dataclass
class KanLayer:
    """One KAN layer: per-edge spline coefficients + silu base weights.

    Inputs are normalized to [-1, 1] by a per-dimension affine calibrated
    once from data (see MaterialField.calibrate) and clamped.
    """

    coeffs: np.ndarray        # (out, in, grid_size + 3)
    base_weight: np.ndarray   # (out, in)
    grid_size: int
    shift: np.ndarray = None  # (in,)
    scale: np.ndarray = None  # (in,)

    def __post_init__(self):
        n_in = self.coeffs.shape[1]
        if self.shift is None:
            self.shift = np.zeros(n_in)
        if self.scale is None:
            self.scale = np.ones(n_in)

    @property
    def in_dim(self):
        return self.coeffs.shape[1]

    @property
    def out_dim(self):
        return self.coeffs.shape[0]

    def normalize(self, u):
        un = (u - self.shift) / self.scale
        inside = (un > -1.0) & (un < 1.0)
        return np.clip(un, -1.0, 1.0), inside

    def forward(self, u: np.ndarray):
        """(N, in) -> (N, out); also returns the cache for backward."""
        un, inside = self.normalize(u)
        B = spline_basis(un, self.grid_size)
        v = np.einsum("nik,oik->no", B, self.coeffs)
        v += _silu(un) @ self.base_weight.T
        return v, (un, inside, B)

    def backward(self, cache, g_v: np.ndarray):
        """Returns (g_u, g_coeffs, g_base) for the cached forward."""
        un, inside, B = cache
        _, dB = spline_basis(un, self.grid_size, derivative=True)
        g_coeffs = np.einsum("no,nik->oik", g_v, B)
        g_base = g_v.T @ _silu(un)
        g_un = np.einsum("no,oik,nik->ni", g_v, self.coeffs, dB)
        g_un += (g_v @ self.base_weight) * _silu_grad(un)
        g_u = np.where(inside, g_un / self.scale, 0.0)
        return g_u, g_coeffs, g_base


def kan_eval(layer: KanLayer, u: np.ndarray) -> np.ndarray:
    """Evaluate one KAN layer on a single input vector."""
    v, _ = layer.forward(np.asarray(u, dtype=np.float64)[None])
    return v[0]


@dataclass
class TriPlane:
    """Three R x R x Fdim feature grids (XY, YZ, XZ) over normalized bounds."""

    planes: np.ndarray        # (3, R, R, Fdim)
    bounds_min: np.ndarray
    bounds_max: np.ndarray

    # which normalized coordinates index each plane, in (u, v) order
    AXES = ((0, 1), (1, 2), (0, 2))

    @property
    def resolution(self):
        return self.planes.shape[1]

    @property
    def fdim(self):
        return self.planes.shape[3]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        n = (x - self.bounds_min) / (self.bounds_max - self.bounds_min)
        if np.any(n < -1e-9) or np.any(n > 1.0 + 1e-9):
            raise OutOfBounds("position outside the padded scene bounds")
        return np.clip(n, 0.0, 1.0)

    def sample(self, x: np.ndarray):
        """Bilinear features summed over the three planes; returns cache."""
        n = self.normalize(np.asarray(x, dtype=np.float64))
        R = self.resolution
        feat = np.zeros((x.shape[0], self.fdim))
        cache = []
        for p, (au, av) in enumerate(self.AXES):
            u = n[:, au] * (R - 1)
            v = n[:, av] * (R - 1)
            iu = np.minimum(u.astype(np.int64), R - 2)
            iv = np.minimum(v.astype(np.int64), R - 2)
            fu = u - iu
            fv = v - iv
            w00 = (1 - fu) * (1 - fv)
            w01 = (1 - fu) * fv
            w10 = fu * (1 - fv)
            w11 = fu * fv
            feat += (w00[:, None] * self.planes[p, iu, iv]
                     + w01[:, None] * self.planes[p, iu, iv + 1]
                     + w10[:, None] * self.planes[p, iu + 1, iv]
                     + w11[:, None] * self.planes[p, iu + 1, iv + 1])
            cache.append((iu, iv, w00, w01, w10, w11))
        return feat, cache

    def sample_backward(self, cache, g_feat: np.ndarray) -> np.ndarray:
        """Scatter feature cotangents back to plane cells."""
        R = self.resolution
        g_planes = np.zeros_like(self.planes)
        for p, (iu, iv, w00, w01, w10, w11) in enumerate(cache):
            flat = g_planes[p].reshape(R * R, self.fdim)
            for w, du, dv in ((w00, 0, 0), (w01, 0, 1), (w10, 1, 0), (w11, 1, 1)):
                np.add.at(flat, (iu + du) * R + (iv + dv), w[:, None] * g_feat)
        return g_planes


def triplane_sample(triplane: TriPlane, x) -> np.ndarray:
    """Feature vector at a single position."""
    feat, _ = triplane.sample(np.asarray(x, dtype=np.float64)[None])
    return feat[0]


class MaterialField:
    """Tri-plane features -> KAN layers -> squashed physical parameters."""

    def __init__(self, triplane: TriPlane, layers: List[KanLayer],
                 ranges=((4.0, 8.0),)):
        self.triplane = triplane
        self.layers = layers
        self.ranges = tuple((float(lo), float(hi)) for lo, hi in ranges)
        if layers[-1].out_dim != len(self.ranges):
            raise ValueError("output layer width must match the range count")
        self._epoch = 0

    # -- construction --------------------------------------------------------

    @classmethod
    def create(cls, bounds_min, bounds_max, resolution=32, fdim=16,
               hidden=(16,), ranges=((4.0, 8.0),), grid_size=5, seed=0):
        rng = np.random.default_rng(seed)
        planes = rng.uniform(-0.1, 0.1, size=(3, resolution, resolution, fdim))
        dims = [fdim, *hidden, len(ranges)]
        layers = []
        for din, dout in zip(dims[:-1], dims[1:]):
            layers.append(KanLayer(
                coeffs=np.zeros((dout, din, grid_size + SPLINE_ORDER)),
                base_weight=rng.uniform(-0.5, 0.5, size=(dout, din)),
                grid_size=grid_size))
        tp = TriPlane(planes, np.asarray(bounds_min, dtype=np.float64),
                      np.asarray(bounds_max, dtype=np.float64))
        return cls(tp, layers, ranges)

    def bias_output(self, offset: float) -> None:
        """Shift the raw output by a constant via the last layer's splines.

        Splines are a partition of unity on [-1, 1], so a constant
        coefficient shift of offset/in_dim per edge shifts the sum exactly.
        """
        last = self.layers[-1]
        last.coeffs += offset / last.in_dim
        self._epoch += 1

    def calibrate(self, positions: np.ndarray, margin: float = 1.25) -> None:
        """One-shot input-range calibration of every layer's affine.

        Sets each layer's (shift, scale) from the min/max of the activations
        observed at `positions`, with a safety margin; frozen afterwards so
        training stays deterministic.
        """
        u, _ = self.triplane.sample(np.asarray(positions, dtype=np.float64))
        for layer in self.layers:
            lo = u.min(axis=0)
            hi = u.max(axis=0)
            layer.shift = 0.5 * (lo + hi)
            layer.scale = np.maximum(0.5 * (hi - lo) * margin, 1e-6)
            u, _ = layer.forward(u)
        self._epoch += 1

    # -- evaluation ----------------------------------------------------------

    def _forward_raw(self, x: np.ndarray):
        feat, tp_cache = self.triplane.sample(x)
        u = feat
        layer_caches = []
        for layer in self.layers:
            u, cache = layer.forward(u)
            layer_caches.append(cache)
        return u, (tp_cache, layer_caches, x.shape[0], self._epoch)

    def squash(self, raw: np.ndarray) -> np.ndarray:
        out = np.empty_like(raw)
        for i, (lo, hi) in enumerate(self.ranges):
            out[:, i] = lo + (hi - lo) * _sigmoid(raw[:, i])
        return out

    def eval_many(self, positions: np.ndarray, record: bool = False):
        """Young's modulus (Pa) at each position; optionally keep the record
        for `backward`."""
        x = np.asarray(positions, dtype=np.float64)
        raw, cache = self._forward_raw(x)
        log10 = self.squash(raw)
        E = 10.0 ** log10[:, 0]
        if record:
            return E, (raw, cache)
        return E

    def backward(self, record, dL_dE: np.ndarray):
        """Gradients of sum(dL_dE * E) w.r.t. all planes and KAN weights.

        Returns a dict: {"planes": ..., "coeffs": [per layer], "base": [...]}.
        """
        raw, (tp_cache, layer_caches, n, epoch) = record
        if epoch != self._epoch or len(dL_dE) != n:
            raise StaleRecord("field weights changed since the forward pass")
        log10 = self.squash(raw)
        E = 10.0 ** log10[:, 0]
        lo, hi = self.ranges[0]
        s = _sigmoid(raw[:, 0])
        g_raw = np.zeros_like(raw)
        g_raw[:, 0] = np.asarray(dL_dE, dtype=np.float64) * E * np.log(10.0) \
            * (hi - lo) * s * (1.0 - s)

        g_coeffs = [None] * len(self.layers)
        g_base = [None] * len(self.layers)
        g_u = g_raw
        for i in range(len(self.layers) - 1, -1, -1):
            g_u, g_c, g_b = self.layers[i].backward(layer_caches[i], g_u)
            g_coeffs[i] = g_c
            g_base[i] = g_b
        g_planes = self.triplane.sample_backward(tp_cache, g_u)
        return {"planes": g_planes, "coeffs": g_coeffs, "base": g_base}

    # -- parameter plumbing (optimizer-facing) --------------------------------

    def parameters(self) -> dict:
        params = {"planes": self.triplane.planes}
        for i, layer in enumerate(self.layers):
            params[f"coeffs{i}"] = layer.coeffs
            params[f"base{i}"] = layer.base_weight
        return params

    def grads_as_params(self, grads: dict) -> dict:
        out = {"planes": grads["planes"]}
        for i in range(len(self.layers)):
            out[f"coeffs{i}"] = grads["coeffs"][i]
            out[f"base{i}"] = grads["base"][i]
        return out

    def mark_updated(self):
        self._epoch += 1

    # -- checkpoint io ---------------------------------------------------------

    def save(self, path) -> None:
        header = {
            "R": self.triplane.resolution,
            "Fdim": self.triplane.fdim,
            "layer_dims": [self.layers[0].in_dim]
                          + [l.out_dim for l in self.layers],
            "G": self.layers[0].grid_size,
            "ranges": [list(r) for r in self.ranges],
            "bounds": [self.triplane.bounds_min.tolist(),
                       self.triplane.bounds_max.tolist()],
            "norm": [[l.shift.tolist(), l.scale.tolist()] for l in self.layers],
        }
        hjson = json.dumps(header, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<II", VERSION, len(hjson)))
        buf.write(hjson)
        buf.write(self.triplane.planes.astype("<f4").tobytes())
        for layer in self.layers:
            buf.write(layer.coeffs.astype("<f4").tobytes())
            buf.write(layer.base_weight.astype("<f4").tobytes())
        with open(path, "wb") as f:
            f.write(buf.getvalue())

    @classmethod
    def load(cls, path) -> "MaterialField":
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != MAGIC:
            raise ProtocolError("bad checkpoint magic")
        version, hlen = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise ProtocolError(f"unsupported checkpoint version {version}")
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        off = 12 + hlen
        R, fdim, G = header["R"], header["Fdim"], header["G"]
        dims = header["layer_dims"]

        def take(shape):
            nonlocal off
            count = int(np.prod(shape))
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            off += count * 4
            return arr.reshape(shape).astype(np.float64)

        planes = take((3, R, R, fdim))
        layers = []
        for i, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
            coeffs = take((dout, din, G + SPLINE_ORDER))
            base = take((dout, din))
            shift, scale = header["norm"][i]
            layers.append(KanLayer(coeffs, base, G,
                                   shift=np.asarray(shift),
                                   scale=np.asarray(scale)))
        tp = TriPlane(planes, np.asarray(header["bounds"][0]),
                      np.asarray(header["bounds"][1]))
        return cls(tp, layers, [tuple(r) for r in header["ranges"]])


def field_eval(field: MaterialField, x) -> float:
    """Young's modulus at a single rest position."""
    return float(field.eval_many(np.asarray(x, dtype=np.float64)[None])[0])


def field_backward(field: MaterialField, record, dL_dtheta) -> dict:
    return field.backward(record, np.atleast_1d(np.asarray(dL_dtheta, np.float64)))
