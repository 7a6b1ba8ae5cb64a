"""Denoise wire-protocol framing (server side).

Independent implementation of the byte format served on /v1/denoise:

Request:  b"DPGD" | u32 LE version=1 | u32 LE header_len | UTF-8 JSON header
          | T*H*W*3 f32 LE noised video | optional H*W*3 f32 LE image
Response: b"DPGR" | u32 LE version=1 | u32 LE header_len
          | JSON {"shape": [T,H,W,3]} | f32 LE predicted noise

Header JSON: {"shape": [T,H,W,3], "timestep": int, "cfg_scale": float,
"condition": {"kind": "text"|"image"|"none", "text"?, "image_shape"?}}.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

REQUEST_MAGIC = b"DPGD"
RESPONSE_MAGIC = b"DPGR"
VERSION = 1
MAX_PAYLOAD = 256 * 1024 * 1024


class BadFrame(Exception):
    """Malformed request framing -> HTTP 400."""


class BadShape(Exception):
    """Shape or condition mismatch -> HTTP 422."""


@dataclass
class DenoiseRequest:
    video: np.ndarray            # (T, H, W, 3) float32
    timestep: int
    cfg_scale: float
    condition_kind: str          # none | text | image
    text: Optional[str] = None
    image: Optional[np.ndarray] = None


def parse_request(blob: bytes) -> DenoiseRequest:
    if len(blob) > MAX_PAYLOAD:
        raise BadFrame("payload exceeds 256 MB")
    if len(blob) < 12 or blob[:4] != REQUEST_MAGIC:
        raise BadFrame("bad request magic")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise BadFrame(f"unsupported version {version}")
    if len(blob) < 12 + hlen:
        raise BadFrame("truncated header")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        timestep = int(header["timestep"])
        cfg_scale = float(header["cfg_scale"])
        cond = header["condition"]
        kind = cond["kind"]
    except (KeyError, ValueError, UnicodeDecodeError,
            json.JSONDecodeError) as exc:
        raise BadFrame(f"malformed header: {exc}") from exc

    if len(shape) != 4 or shape[3] != 3 or any(s < 1 for s in shape):
        raise BadShape(f"shape {shape} is not a valid (T,H,W,3)")
    if kind not in ("none", "text", "image"):
        raise BadShape(f"unknown condition kind {kind!r}")

    off = 12 + hlen
    count = int(np.prod(shape))
    if len(blob) < off + 4 * count:
        raise BadFrame("truncated video payload")
    video = np.frombuffer(blob, "<f4", count=count, offset=off).reshape(shape)
    off += 4 * count

    text = None
    image = None
    if kind == "text":
        text = cond.get("text")
        if not text:
            raise BadShape("text condition without text")
    elif kind == "image":
        try:
            ishape = tuple(int(s) for s in cond["image_shape"])
        except (KeyError, ValueError) as exc:
            raise BadShape("image condition without image_shape") from exc
        if len(ishape) != 3 or ishape[2] != 3:
            raise BadShape(f"image shape {ishape} is not (H,W,3)")
        icount = int(np.prod(ishape))
        if len(blob) < off + 4 * icount:
            raise BadFrame("truncated image payload")
        image = np.frombuffer(blob, "<f4", count=icount,
                              offset=off).reshape(ishape)
        off += 4 * icount
    if len(blob) != off:
        raise BadFrame(f"{len(blob) - off} trailing bytes")
    return DenoiseRequest(video.copy(), timestep, cfg_scale, kind, text, image)


def build_response(noise: np.ndarray) -> bytes:
    noise = np.ascontiguousarray(noise, dtype=np.float32)
    hjson = json.dumps({"shape": list(noise.shape)},
                       sort_keys=True).encode("utf-8")
    return b"".join([RESPONSE_MAGIC, struct.pack("<II", VERSION, len(hjson)),
                     hjson, noise.tobytes()])
