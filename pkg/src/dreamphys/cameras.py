"""Pinhole cameras. Convention: camera x right, y down, z forward (OpenCV)."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import RangeError

NEAR_PLANE = 0.01


@dataclass
class Camera:
    rotation: np.ndarray          # (3, 3) world-to-camera
    translation: np.ndarray       # (3,), x_cam = R x_world + t
    fov_y: float                  # vertical field of view, radians
    height: int
    width: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise RangeError(f"camera rotation not orthonormal (err {err:.2e})")
        if not 0.0 < self.fov_y < np.pi:
            raise RangeError("fov_y must lie in (0, pi)")

    @property
    def focal(self) -> float:
        """Focal length in pixels (square pixels assumed)."""
        return 0.5 * self.height / np.tan(0.5 * self.fov_y)

    @property
    def position(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_cam(self, x: np.ndarray) -> np.ndarray:
        return x @ self.rotation.T + self.translation


def look_at(eye, target, up=(0.0, 1.0, 0.0), fov_y=0.9, height=64, width=64) -> Camera:
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, up)
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise RangeError("look_at: view direction parallel to up vector")
    right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd], axis=0)
    return Camera(rotation=R, translation=-R @ eye, fov_y=fov_y,
                  height=int(height), width=int(width))


def camera_from_pose(pose: dict, height: int, width: int) -> Camera:
    return look_at(
        eye=pose["eye"],
        target=pose["target"],
        up=pose.get("up", (0.0, 1.0, 0.0)),
        fov_y=pose.get("fov_y", 0.9),
        height=height,
        width=width,
    )


def default_camera(bounds_min, bounds_max, height: int, width: int) -> Camera:
    """Frame the scene bounds from +z with a comfortable margin."""
    bounds_min = np.asarray(bounds_min, dtype=np.float64)
    bounds_max = np.asarray(bounds_max, dtype=np.float64)
    center = 0.5 * (bounds_min + bounds_max)
    radius = max(0.5 * float(np.linalg.norm(bounds_max - bounds_min)), 1e-3)
    fov = 0.9
    dist = 2.2 * radius / np.tan(0.5 * fov)
    eye = center + np.array([0.0, 0.0, dist])
    return look_at(eye, center, fov_y=fov, height=height, width=width)
