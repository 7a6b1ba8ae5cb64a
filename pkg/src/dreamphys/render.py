"""Differentiable forward splat renderer.

Kernels are globally depth-sorted and alpha-composited front-to-back per
pixel; reverse mode yields exact gradients w.r.t. kernel centers and world
covariances through both the compositing chain and the projection (including
the projection Jacobian's dependence on depth). Spherical-harmonic colors are
view-adjusted by the per-kernel continuum rotation but treated as constants
in the gradient tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backends
from .cameras import NEAR_PLANE, Camera
from .errors import BehindCamera, ShapeMismatch, StaleRecord
from .scene import Scene

LOWPASS = 0.3          # isotropic screen-space variance floor, px^2
ALPHA_MIN = backends.numpy_impl.ALPHA_MIN

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435)


@dataclass
class KernelStates:
    """Per-kernel render inputs (deformed or rest-pose)."""

    centers: np.ndarray       # (N, 3)
    covariances: np.ndarray   # (N, 3, 3)
    rotations: np.ndarray     # (N, 3, 3) continuum rotations for SH adjustment
    opacities: np.ndarray     # (N,)
    sh: np.ndarray            # (N, K, 3)
    sh_degree: int

    def __len__(self):
        return self.centers.shape[0]


def rest_states(scene: Scene) -> KernelStates:
    n = len(scene)
    return KernelStates(scene.centers.copy(), scene.covariances(),
                        np.tile(np.eye(3), (n, 1, 1)), scene.opacities.copy(),
                        scene.sh.copy(), scene.sh_degree)


@dataclass
class VideoTensor:
    """T x H x W x 3 frame stack in [0, 1] plus per-frame camera ids."""

    frames: np.ndarray
    camera_ids: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.camera_ids = np.asarray(self.camera_ids, dtype=np.int64)
        if self.frames.ndim != 4 or self.frames.shape[3] != 3:
            raise ShapeMismatch(f"video must be (T,H,W,3), got {self.frames.shape}")
        if self.camera_ids.shape != (self.frames.shape[0],):
            raise ShapeMismatch("one camera id per frame required")
        if not np.all(np.isfinite(self.frames)):
            raise ShapeMismatch("video contains non-finite values")

    def __len__(self):
        return self.frames.shape[0]


# --------------------------------------------------------------------------
# spherical harmonics
# --------------------------------------------------------------------------

def eval_sh_colors(sh: np.ndarray, dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real-SH color evaluation (3DGS basis order), batched over kernels."""
    res = SH_C0 * sh[:, 0]
    if degree >= 1:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        res = res - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
        if degree >= 2:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            res = (res + SH_C2[0] * xy * sh[:, 4] + SH_C2[1] * yz * sh[:, 5]
                   + SH_C2[2] * (2 * zz - xx - yy) * sh[:, 6]
                   + SH_C2[3] * xz * sh[:, 7] + SH_C2[4] * (xx - yy) * sh[:, 8])
            if degree >= 3:
                res = (res + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9]
                       + SH_C3[1] * xy * z * sh[:, 10]
                       + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
                       + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
                       + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
                       + SH_C3[5] * z * (xx - yy) * sh[:, 14]
                       + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15])
    return np.clip(res + 0.5, 0.0, 1.0)


def eval_color(sh: np.ndarray, view_dir: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    """Color of one kernel for a unit view direction, SH frame rotated by R."""
    sh = np.asarray(sh, dtype=np.float64)
    d = np.asarray(rotation, dtype=np.float64).T @ np.asarray(view_dir, np.float64)
    degree = int(np.sqrt(sh.shape[0])) - 1
    return eval_sh_colors(sh[None], d[None], degree)[0]


# --------------------------------------------------------------------------
# projection
# --------------------------------------------------------------------------

def _project_batch(centers, covs, camera: Camera):
    """Camera-space depth, pixel means and 2x2 screen covariances."""
    t = camera.world_to_cam(centers.astype(np.float64))
    depth = t[:, 2]
    f = camera.focal
    z = depth
    with np.errstate(divide="ignore", invalid="ignore"):
        u = f * t[:, 0] / z + 0.5 * camera.width
        v = f * t[:, 1] / z + 0.5 * camera.height
        J = np.zeros((centers.shape[0], 2, 3))
        J[:, 0, 0] = f / z
        J[:, 1, 1] = f / z
        J[:, 0, 2] = -f * t[:, 0] / z**2
        J[:, 1, 2] = -f * t[:, 1] / z**2
    A = J @ camera.rotation
    cov2d = A @ covs.astype(np.float64) @ A.transpose(0, 2, 1)
    cov2d[:, 0, 0] += LOWPASS
    cov2d[:, 1, 1] += LOWPASS
    return t, depth, np.stack([u, v], axis=1), A, cov2d


def project(center, cov, camera: Camera):
    """Project one kernel: (pixel mean, 2x2 screen covariance, depth).

    Raises BehindCamera when the center is behind the near plane.
    """
    center = np.asarray(center, dtype=np.float64)[None]
    cov = np.asarray(cov, dtype=np.float64)[None]
    _, depth, mean2d, _, cov2d = _project_batch(center, cov, camera)
    if depth[0] <= NEAR_PLANE:
        raise BehindCamera(f"kernel depth {depth[0]:.4f} <= near plane")
    return mean2d[0], cov2d[0], float(depth[0])


def _inv2x2_packed(cov2d):
    a = cov2d[:, 0, 0]
    b = cov2d[:, 0, 1]
    c = cov2d[:, 1, 1]
    det = a * c - b * b
    out = np.stack([c / det, -b / det, a / det], axis=1)
    return out, det


def _bboxes(mean2d, cov2d, opac, H, W):
    lam_max = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1]) + np.sqrt(
        0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2 + cov2d[:, 0, 1] ** 2)
    qmax = 2.0 * np.log(np.maximum(255.0 * opac, 1e-12))
    r = np.where(qmax > 0, np.sqrt(np.maximum(qmax, 0.0) * lam_max), -1.0)
    bbox = np.empty((mean2d.shape[0], 4), dtype=np.int32)
    bbox[:, 0] = np.clip(np.floor(mean2d[:, 0] - r - 0.5), 0, W - 1)
    bbox[:, 1] = np.clip(np.ceil(mean2d[:, 0] + r + 0.5), 0, W - 1)
    bbox[:, 2] = np.clip(np.floor(mean2d[:, 1] - r - 0.5), 0, H - 1)
    bbox[:, 3] = np.clip(np.ceil(mean2d[:, 1] + r + 0.5), 0, H - 1)
    empty = r < 0
    bbox[empty, 1] = -1
    bbox[empty, 3] = -1
    return bbox


# --------------------------------------------------------------------------
# render / backward
# --------------------------------------------------------------------------

@dataclass
class RenderRecord:
    camera: Camera
    states: KernelStates
    order: np.ndarray           # visible kernel indices, front-to-back
    t_cam: np.ndarray
    mean2d: np.ndarray
    A: np.ndarray
    cov2d: np.ndarray
    icov: np.ndarray
    bbox: np.ndarray
    colors: np.ndarray
    image: np.ndarray


def render(states: KernelStates, camera: Camera, dtype=np.float32,
           record: bool = False, backend=None):
    """Render kernels into an (H, W, 3) image; optionally keep the record
    needed for `render_backward`."""
    be = backend if backend is not None else backends.get_backend()
    H, W = camera.height, camera.width
    n = len(states)
    if n == 0:
        img = np.zeros((H, W, 3), dtype=dtype)
        return (img, None) if record else img
    if not (np.all(np.isfinite(states.centers)) and np.all(np.isfinite(states.covariances))):
        raise ValueError("kernel states contain non-finite values")

    t, depth, mean2d, A, cov2d = _project_batch(states.centers, states.covariances, camera)
    visible = depth > NEAR_PLANE
    vis_idx = np.nonzero(visible)[0]
    order = vis_idx[np.argsort(depth[vis_idx], kind="stable")]

    cam_pos = camera.position
    dirs = states.centers[order] - cam_pos
    dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = np.einsum("nji,nj->ni", states.rotations[order], dirs)
    colors = eval_sh_colors(states.sh[order], dirs, states.sh_degree)

    icov, _ = _inv2x2_packed(cov2d[order])
    bbox = _bboxes(mean2d[order], cov2d[order], states.opacities[order], H, W)

    m2 = np.ascontiguousarray(mean2d[order], dtype=dtype)
    ic = np.ascontiguousarray(icov, dtype=dtype)
    op = np.ascontiguousarray(states.opacities[order], dtype=dtype)
    cl = np.ascontiguousarray(colors, dtype=dtype)
    image = be.composite(m2, ic, op, cl, bbox, H, W)

    if not record:
        return image
    rec = RenderRecord(camera=camera, states=states, order=order,
                       t_cam=t, mean2d=m2, A=A[order], cov2d=cov2d[order],
                       icov=ic, bbox=bbox, colors=cl, image=image)
    return image, rec


def render_backward(g_image: np.ndarray, rec: RenderRecord, backend=None):
    """Exact reverse mode of compositing + projection.

    Returns (dL/dcenter, dL/dSigma') per kernel in the original index order;
    the world-covariance cotangent is unsymmetrized (dL = <g, dSigma> for a
    general perturbation).
    """
    be = backend if backend is not None else backends.get_backend()
    if g_image.shape != rec.image.shape:
        raise StaleRecord(
            f"gradient image {g_image.shape} does not match render {rec.image.shape}")
    H, W = rec.image.shape[:2]
    g_img = np.ascontiguousarray(g_image, dtype=rec.image.dtype)
    g_mean, g_icov = be.composite_backward(
        rec.mean2d, rec.icov, np.ascontiguousarray(
            rec.states.opacities[rec.order], dtype=rec.image.dtype),
        rec.colors, rec.bbox, H, W, rec.image, g_img)

    # packed inverse-covariance cotangent -> full covariance cotangent
    lam = np.zeros((len(rec.order), 2, 2))
    lam[:, 0, 0] = rec.icov[:, 0]
    lam[:, 0, 1] = lam[:, 1, 0] = rec.icov[:, 1]
    lam[:, 1, 1] = rec.icov[:, 2]
    gl = np.zeros_like(lam)
    gl[:, 0, 0] = g_icov[:, 0]
    gl[:, 0, 1] = gl[:, 1, 0] = 0.5 * g_icov[:, 1]
    gl[:, 1, 1] = g_icov[:, 2]
    g_cov = -lam @ gl @ lam

    A = rec.A
    Sigma = rec.states.covariances[rec.order].astype(np.float64)
    g_Sigma_v = A.transpose(0, 2, 1) @ g_cov @ A
    g_A = (g_cov + g_cov.transpose(0, 2, 1)) @ A @ Sigma
    g_J = g_A @ rec.camera.rotation.T

    t = rec.t_cam[rec.order]
    f = rec.camera.focal
    z = t[:, 2]
    inv_z2 = 1.0 / z**2
    g_t = np.zeros((len(rec.order), 3))
    g_t[:, 0] = -f * inv_z2 * g_J[:, 0, 2]
    g_t[:, 1] = -f * inv_z2 * g_J[:, 1, 2]
    g_t[:, 2] = (-f * inv_z2 * (g_J[:, 0, 0] + g_J[:, 1, 1])
                 + 2.0 * f * t[:, 0] / z**3 * g_J[:, 0, 2]
                 + 2.0 * f * t[:, 1] / z**3 * g_J[:, 1, 2])
    g_t[:, 0] += g_mean[:, 0] * f / z
    g_t[:, 1] += g_mean[:, 1] * f / z
    g_t[:, 2] += -f * inv_z2 * (g_mean[:, 0] * t[:, 0] + g_mean[:, 1] * t[:, 1])
    g_center_v = g_t @ rec.camera.rotation

    n = len(rec.states)
    g_center = np.zeros((n, 3))
    g_Sigma = np.zeros((n, 3, 3))
    g_center[rec.order] = g_center_v
    g_Sigma[rec.order] = g_Sigma_v
    return g_center, g_Sigma


def render_video(states_per_frame, cameras, dtype=np.float32, backend=None) -> VideoTensor:
    """Stack per-frame renders; cameras may be one camera or one per frame."""
    if isinstance(cameras, Camera):
        cameras = [cameras]
    T = len(states_per_frame)
    if len(cameras) not in (1, T):
        raise ShapeMismatch(f"{len(cameras)} cameras for {T} frames")
    frames = []
    ids = []
    for i, st in enumerate(states_per_frame):
        cam_id = 0 if len(cameras) == 1 else i
        frames.append(render(st, cameras[cam_id], dtype=dtype, backend=backend))
        ids.append(cam_id)
    return VideoTensor(np.stack(frames), np.asarray(ids))
