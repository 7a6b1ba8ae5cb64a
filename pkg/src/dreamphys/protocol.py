"""Binary framing for the denoise wire protocol.

Request:  b"DPGD" | u32 version | u32 header_len | JSON header
          | T*H*W*3 f32 LE video | optional H*W*3 f32 LE condition image
Response: b"DPGR" | u32 version | u32 header_len | JSON {"shape": [T,H,W,3]}
          | f32 LE noise payload

Header JSON: {"shape": [T,H,W,3], "timestep": int, "cfg_scale": float,
"condition": {"kind": "text"|"image"|"none", "text"?: str,
"image_shape"?: [H,W,3]}}. Tensors are frame-major, row-major, RGB.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ProtocolError, ShapeMismatch

REQUEST_MAGIC = b"DPGD"
RESPONSE_MAGIC = b"DPGR"
VERSION = 1
MAX_PAYLOAD = 256 * 1024 * 1024


@dataclass
class Condition:
    kind: str = "none"            # none | text | image
    text: Optional[str] = None
    image: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("none", "text", "image"):
            raise ProtocolError(f"unknown condition kind {self.kind!r}")
        if (self.kind == "image") != (self.image is not None):
            raise ProtocolError("condition image present iff kind == 'image'")
        if self.kind == "text" and not self.text:
            raise ProtocolError("text condition requires non-empty text")
        if self.image is not None:
            self.image = np.ascontiguousarray(self.image, dtype=np.float32)
            if self.image.ndim != 3 or self.image.shape[2] != 3:
                raise ShapeMismatch("condition image must be (H, W, 3)")

    def header_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.kind == "text":
            d["text"] = self.text
        elif self.kind == "image":
            d["image_shape"] = list(self.image.shape)
        return d


def encode_request(video: np.ndarray, timestep: int, cfg_scale: float,
                   condition: Condition) -> bytes:
    video = np.ascontiguousarray(video, dtype=np.float32)
    if video.ndim != 4 or video.shape[3] != 3:
        raise ShapeMismatch(f"video must be (T,H,W,3), got {video.shape}")
    header = {
        "shape": list(video.shape),
        "timestep": int(timestep),
        "cfg_scale": float(cfg_scale),
        "condition": condition.header_dict(),
    }
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [REQUEST_MAGIC, struct.pack("<II", VERSION, len(hjson)), hjson,
             video.tobytes()]
    if condition.kind == "image":
        parts.append(condition.image.tobytes())
    blob = b"".join(parts)
    if len(blob) > MAX_PAYLOAD:
        raise ProtocolError(f"request of {len(blob)} bytes exceeds 256 MB")
    return blob


def decode_request(blob: bytes):
    """-> (video (T,H,W,3) f32, timestep, cfg_scale, Condition)."""
    if len(blob) < 12 or blob[:4] != REQUEST_MAGIC:
        raise ProtocolError("bad request magic")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    if len(blob) < 12 + hlen:
        raise ProtocolError("truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        timestep = int(header["timestep"])
        cfg_scale = float(header["cfg_scale"])
        cond_h = header["condition"]
        kind = cond_h["kind"]
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed header: {exc}") from exc
    if len(shape) != 4 or shape[3] != 3:
        raise ShapeMismatch(f"header shape {shape} is not (T,H,W,3)")

    off = 12 + hlen
    count = int(np.prod(shape))
    if len(blob) < off + 4 * count:
        raise ProtocolError("truncated video payload")
    video = np.frombuffer(blob, dtype="<f4", count=count, offset=off).reshape(shape)
    off += 4 * count

    image = None
    if kind == "image":
        ishape = tuple(int(s) for s in cond_h["image_shape"])
        icount = int(np.prod(ishape))
        if len(blob) < off + 4 * icount:
            raise ProtocolError("truncated condition image payload")
        image = np.frombuffer(blob, dtype="<f4", count=icount, offset=off)
        image = image.reshape(ishape)
        off += 4 * icount
    condition = Condition(kind=kind, text=cond_h.get("text"), image=image)
    if len(blob) != off:
        raise ProtocolError(f"{len(blob) - off} trailing bytes in request")
    return video.copy(), timestep, cfg_scale, condition


def encode_response(noise: np.ndarray) -> bytes:
    noise = np.ascontiguousarray(noise, dtype=np.float32)
    header = {"shape": list(noise.shape)}
    hjson = json.dumps(header, sort_keys=True).encode("utf-8")
    return b"".join([RESPONSE_MAGIC, struct.pack("<II", VERSION, len(hjson)),
                     hjson, noise.tobytes()])


def decode_response(blob: bytes, expect_shape=None) -> np.ndarray:
    if len(blob) < 12 or blob[:4] != RESPONSE_MAGIC:
        raise ProtocolError("bad response magic")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ProtocolError(f"unsupported protocol version {version}")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed response header: {exc}") from exc
    if expect_shape is not None and shape != tuple(expect_shape):
        raise ShapeMismatch(f"server returned shape {shape}, expected {tuple(expect_shape)}")
    count = int(np.prod(shape))
    if len(blob) != 12 + hlen + 4 * count:
        raise ProtocolError("response payload size mismatch")
    noise = np.frombuffer(blob, dtype="<f4", count=count, offset=12 + hlen)
    return noise.reshape(shape).copy()
