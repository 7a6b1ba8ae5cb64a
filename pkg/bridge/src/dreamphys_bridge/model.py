"""Video-diffusion backend with classifier-free guidance.

Wraps any pipeline exposing

    predict_noise(video_t, timestep, text=None, image=None) -> ndarray

evaluated once conditioned and once unconditioned, combined as
eps = eps_uncond + cfg * (eps_cond - eps_uncond). The backend adapts frame
count and resolution between the request tensors and the pipeline's native
format (truncate/pad frames, nearest-neighbor resize) and always answers in
the request shape. When no pipeline could be loaded the server responds 503.
"""

from __future__ import annotations

import numpy as np

from .wire import DenoiseRequest


class ModelNotLoaded(Exception):
    """No usable pipeline -> HTTP 503."""


def _resize_nn(frames: np.ndarray, h: int, w: int) -> np.ndarray:
    t, fh, fw, c = frames.shape
    if (fh, fw) == (h, w):
        return frames
    yi = np.minimum((np.arange(h) * fh / h).astype(int), fh - 1)
    xi = np.minimum((np.arange(w) * fw / w).astype(int), fw - 1)
    return frames[:, yi][:, :, xi]


def _fit_frames(frames: np.ndarray, count: int) -> np.ndarray:
    t = frames.shape[0]
    if t == count:
        return frames
    if t > count:
        return frames[:count]
    pad = np.repeat(frames[-1:], count - t, axis=0)
    return np.concatenate([frames, pad], axis=0)


class ModelBackend:
    """Serves denoise requests from a wrapped diffusion pipeline."""

    def __init__(self, pipeline=None, native_frames: int = None,
                 native_size: tuple = None):
        self.pipeline = pipeline
        self.native_frames = native_frames
        self.native_size = native_size

    @classmethod
    def from_identifier(cls, identifier: str) -> "ModelBackend":
        """Try to stand up a pretrained pipeline; raises ModelNotLoaded."""
        try:
            from diffusers import DiffusionPipeline  # type: ignore
        except ImportError as exc:
            raise ModelNotLoaded(
                f"diffusers unavailable, cannot load {identifier!r}: {exc}"
            ) from exc
        try:
            pipe = DiffusionPipeline.from_pretrained(identifier)
        except Exception as exc:  # model hub / weights / hardware issues
            raise ModelNotLoaded(f"loading {identifier!r} failed: {exc}") from exc
        return cls(pipeline=_DiffusersAdapter(pipe))

    def denoise(self, req: DenoiseRequest) -> np.ndarray:
        if self.pipeline is None:
            raise ModelNotLoaded("no pipeline configured")
        video = req.video.astype(np.float32)
        t_req, h_req, w_req, _ = video.shape
        work = video
        if self.native_frames:
            work = _fit_frames(work, self.native_frames)
        if self.native_size:
            work = _resize_nn(work, *self.native_size)

        cond = self.pipeline.predict_noise(
            work, req.timestep,
            text=req.text if req.condition_kind == "text" else None,
            image=req.image if req.condition_kind == "image" else None)
        uncond = self.pipeline.predict_noise(work, req.timestep)
        eps = uncond + req.cfg_scale * (cond - uncond)

        eps = _resize_nn(eps.astype(np.float32), h_req, w_req)
        eps = _fit_frames(eps, t_req)
        return np.ascontiguousarray(eps, dtype=np.float32)


class _DiffusersAdapter:
    """Minimal shim: single denoising step of a loaded video pipeline."""

    def __init__(self, pipe):
        self.pipe = pipe

    def predict_noise(self, video_t, timestep, text=None, image=None):
        import torch  # heavy import only on the model path

        unet = self.pipe.unet
        device = next(unet.parameters()).device
        latents = torch.from_numpy(
            np.transpose(video_t, (3, 0, 1, 2))[None]).to(device)
        if text is not None and hasattr(self.pipe, "encode_prompt"):
            emb = self.pipe.encode_prompt(text, device, 1, False)[0]
        else:
            emb = None
        with torch.no_grad():
            out = unet(latents, timestep, encoder_hidden_states=emb).sample
        return np.transpose(out[0].cpu().numpy(), (1, 2, 3, 0))
