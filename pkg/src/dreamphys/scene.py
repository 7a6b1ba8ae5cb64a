"""Gaussian splat scene container.

A scene is stored struct-of-arrays for the simulator and renderer; the
GaussianKernel dataclass is a per-kernel view used by tests and tooling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# DC basis constant of real spherical harmonics, Y_00.
SH_C0 = 0.28209479177387814


@dataclass
class GaussianKernel:
    """One splat: center, opacity, scale/rotation factors and SH colors."""

    center: np.ndarray        # (3,)
    opacity: float            # in [0, 1], post-sigmoid
    scale: np.ndarray         # (3,), > 0, post-exp
    rotation: np.ndarray      # unit quaternion (w, x, y, z)
    sh: np.ndarray            # ((deg+1)^2, 3)

    @property
    def covariance(self) -> np.ndarray:
        return build_covariance(self.scale[None], self.rotation[None])[0]


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (N, 4) wxyz -> rotation matrices (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    R = np.empty((q.shape[0], 3, 3), dtype=q.dtype)
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(scale: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Sigma = R diag(scale^2) R^T for each kernel."""
    R = quat_to_rotmat(rotation)
    S2 = scale**2
    return np.einsum("nij,nj,nkj->nik", R, S2, R)


class Scene:
    """A set of Gaussian kernels plus axis-aligned bounds.

    Arrays are float64, read-only after construction. `sh` is stored as
    (N, (deg+1)^2, 3); entry 0 is the DC coefficient.
    """

    def __init__(self, centers, opacities, scales, rotations, sh, sh_degree: int):
        self.centers = np.ascontiguousarray(centers, dtype=np.float64)
        self.opacities = np.ascontiguousarray(opacities, dtype=np.float64)
        self.scales = np.ascontiguousarray(scales, dtype=np.float64)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        self.sh = np.ascontiguousarray(sh, dtype=np.float64)
        self.sh_degree = int(sh_degree)
        if self.centers.shape[0] < 1:
            raise ValueError("scene requires at least one kernel")

        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        self.rotations = self.rotations / norms

        self.bounds_min = self.centers.min(axis=0)
        self.bounds_max = self.centers.max(axis=0)

    def __len__(self) -> int:
        return self.centers.shape[0]

    @property
    def bounds(self):
        return self.bounds_min.copy(), self.bounds_max.copy()

    def padded_bounds(self, pad: float = 0.10):
        """Bounds grown by `pad` of the extent per side (tri-plane domain)."""
        extent = self.bounds_max - self.bounds_min
        margin = np.maximum(extent * pad, 1e-6)
        return self.bounds_min - margin, self.bounds_max + margin

    def covariances(self) -> np.ndarray:
        return build_covariance(self.scales, self.rotations)

    def kernel(self, i: int) -> GaussianKernel:
        return GaussianKernel(
            center=self.centers[i].copy(),
            opacity=float(self.opacities[i]),
            scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(),
            sh=self.sh[i].copy(),
        )


def scene_from_colors(centers, colors, opacity=0.9, scale=0.02) -> Scene:
    """Build a degree-0 scene from particle positions and RGB colors.

    Used by the bundled experiments; colors are plain RGB in [0, 1] and get
    converted to DC spherical-harmonic coefficients.
    """
    centers = np.asarray(centers, dtype=np.float64)
    colors = np.asarray(colors, dtype=np.float64)
    n = centers.shape[0]
    sh = np.zeros((n, 1, 3))
    sh[:, 0, :] = (colors - 0.5) / SH_C0
    scales = np.full((n, 3), scale, dtype=np.float64)
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    opacities = np.full(n, opacity, dtype=np.float64)
    return Scene(centers, opacities, scales, rotations, sh, sh_degree=0)
