"""PNG frame export/import and video metrics."""

from __future__ import annotations

import pathlib

import numpy as np
from PIL import Image

PSNR_CAP = 100.0


def to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_frames(frames: np.ndarray, out_dir) -> list:
    """Write frame_0000.png ... as 8-bit sRGB; returns the paths."""
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = out_dir / f"frame_{i:04d}.png"
        Image.fromarray(to_uint8(frame), mode="RGB").save(p)
        paths.append(p)
    return paths


def load_frames(dir_path) -> np.ndarray:
    """Read frame_*.png in name order into a (T, H, W, 3) float array."""
    dir_path = pathlib.Path(dir_path)
    paths = sorted(dir_path.glob("frame_*.png"))
    if not paths:
        raise FileNotFoundError(f"no frame_*.png files under {dir_path}")
    frames = [np.asarray(Image.open(p).convert("RGB"), dtype=np.float32) / 255.0
              for p in paths]
    return np.stack(frames)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Mean per-frame PSNR in dB (unit peak); identical frames count as
    PSNR_CAP."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    per_frame = []
    for fa, fb in zip(a, b):
        mse = float(np.mean((fa - fb) ** 2))
        per_frame.append(PSNR_CAP if mse <= 10 ** (-PSNR_CAP / 10)
                         else -10.0 * np.log10(mse))
    return float(np.mean(per_frame))
