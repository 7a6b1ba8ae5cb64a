"""Noise schedule, distillation scores and denoiser backends.

The motion score subtracts a denoised first-frame color anchor from the
denoised video prediction, weighting by omega(mu) = 1 - alpha_bar(mu). Two
backends ship: an analytic oracle (exact denoiser for a point mass at a
reference video; the desk-scale verification vehicle) and a blocking HTTP
client for the wire protocol.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import requests

from .errors import ProtocolError, ShapeMismatch, Transport
from .protocol import Condition, decode_response, encode_request

DEFAULT_CFG = 100.0
DEFAULT_TIMEOUT = 120.0


@dataclass
class DiffusionSchedule:
    """Linear-beta DDPM schedule; alpha_bar[mu] = prod(1 - beta[:mu+1])."""

    steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        self.betas = np.linspace(self.beta_start, self.beta_end, self.steps)
        self.alpha_bar = np.cumprod(1.0 - self.betas)
        self.mu_min = int(round(0.02 * self.steps))
        self.mu_max = int(round(0.98 * self.steps))

    def check_mu(self, mu: int) -> int:
        mu = int(mu)
        if not 0 <= mu < self.steps:
            raise ShapeMismatch(f"timestep {mu} outside [0, {self.steps})")
        return mu

    def sample_mu(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.mu_min, self.mu_max + 1))

    def omega(self, mu: int) -> float:
        return float(1.0 - self.alpha_bar[self.check_mu(mu)])


def add_noise(video: np.ndarray, eps: np.ndarray, mu: int,
              schedule: DiffusionSchedule) -> np.ndarray:
    """Forward process: sqrt(a_bar) * video + sqrt(1 - a_bar) * eps."""
    video = np.asarray(video)
    eps = np.asarray(eps)
    if video.shape != eps.shape:
        raise ShapeMismatch(f"video {video.shape} vs noise {eps.shape}")
    ab = schedule.alpha_bar[schedule.check_mu(mu)]
    return np.sqrt(ab) * video + np.sqrt(1.0 - ab) * eps


def analytic_denoise(v_t: np.ndarray, mu: int, reference: np.ndarray,
                     schedule: DiffusionSchedule) -> np.ndarray:
    """Exact noise prediction when the data prior is a point mass at
    `reference`: inverts the forward process."""
    v_t = np.asarray(v_t)
    reference = np.asarray(reference)
    if v_t.shape != reference.shape:
        raise ShapeMismatch(f"noised {v_t.shape} vs reference {reference.shape}")
    ab = schedule.alpha_bar[schedule.check_mu(mu)]
    return (v_t - np.sqrt(ab) * reference) / np.sqrt(1.0 - ab)


def remote_denoise(endpoint: str, v_t: np.ndarray, mu: int,
                   condition: Condition, cfg_scale: float = DEFAULT_CFG,
                   timeout: float = DEFAULT_TIMEOUT) -> np.ndarray:
    """POST one denoise request; returns the predicted noise (same shape)."""
    blob = encode_request(np.asarray(v_t, dtype=np.float32), mu, cfg_scale, condition)
    url = endpoint.rstrip("/") + "/v1/denoise"
    try:
        resp = requests.post(url, data=blob, timeout=timeout,
                             headers={"Content-Type": "application/octet-stream"})
    except requests.RequestException as exc:
        raise Transport(f"denoise request to {url} failed: {exc}") from exc
    if resp.status_code == 400:
        raise ProtocolError(f"server rejected frame: {resp.text[:200]}")
    if resp.status_code == 422:
        raise ShapeMismatch(f"server shape/condition mismatch: {resp.text[:200]}")
    if resp.status_code != 200:
        raise Transport(f"server returned HTTP {resp.status_code}")
    return decode_response(resp.content, expect_shape=np.asarray(v_t).shape)


# --------------------------------------------------------------------------
# backends
# --------------------------------------------------------------------------

class AnalyticOracle:
    """Denoiser for a point-mass video prior at a fixed reference video.

    Anchor calls (the repeated-first-frame video of the motion score) are
    answered against the reference's own repeated first frame.
    """

    def __init__(self, reference: np.ndarray, schedule: DiffusionSchedule):
        self.reference = np.asarray(reference, dtype=np.float64)
        self.schedule = schedule
        self._anchor = np.broadcast_to(self.reference[0],
                                       self.reference.shape).copy()

    def denoise(self, v_t: np.ndarray, mu: int, condition: Condition = None,
                anchor: bool = False) -> np.ndarray:
        ref = self._anchor if anchor else self.reference
        return analytic_denoise(v_t, mu, ref, self.schedule)


class RemoteDenoiser:
    """Blocking wire-protocol client; at most one request in flight."""

    def __init__(self, endpoint: str, condition: Condition,
                 cfg_scale: float = DEFAULT_CFG, timeout: float = DEFAULT_TIMEOUT):
        self.endpoint = endpoint
        self.condition = condition
        self.cfg_scale = cfg_scale
        self.timeout = timeout

    def denoise(self, v_t: np.ndarray, mu: int, condition: Condition = None,
                anchor: bool = False) -> np.ndarray:
        cond = condition if condition is not None else self.condition
        return remote_denoise(self.endpoint, v_t, mu, cond,
                              cfg_scale=self.cfg_scale, timeout=self.timeout)


# --------------------------------------------------------------------------
# distillation scores
# --------------------------------------------------------------------------

def mds_score(video: np.ndarray, first_frame: np.ndarray, mu: int,
              eps: np.ndarray, backend, schedule: DiffusionSchedule,
              omega: float = None) -> np.ndarray:
    """Motion distillation score.

    The color anchor repeats `first_frame` to the video length; both videos
    are noised with the *same* eps so the analytic algebra cancels the draw.
    """
    video = np.asarray(video)
    anchor = np.broadcast_to(np.asarray(first_frame), video.shape)
    if eps.shape != video.shape:
        raise ShapeMismatch(f"noise {eps.shape} vs video {video.shape}")
    w = schedule.omega(mu) if omega is None else float(omega)
    e_video = backend.denoise(add_noise(video, eps, mu, schedule), mu)
    e_anchor = backend.denoise(add_noise(anchor, eps, mu, schedule), mu,
                               anchor=True)
    return w * (e_video - e_anchor)


def sds_t_score(video: np.ndarray, mu: int, eps: np.ndarray, backend,
                schedule: DiffusionSchedule, omega: float = None) -> np.ndarray:
    """Temporal score-distillation baseline: omega * (eps_hat - eps)."""
    video = np.asarray(video)
    if eps.shape != video.shape:
        raise ShapeMismatch(f"noise {eps.shape} vs video {video.shape}")
    w = schedule.omega(mu) if omega is None else float(omega)
    e_video = backend.denoise(add_noise(video, eps, mu, schedule), mu)
    return w * (e_video - eps)
