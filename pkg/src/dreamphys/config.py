"""Simulation configuration: JSON schema, defaults, validation.

Schema (all keys optional, unknown keys rejected):

    grid_resolution     int >= 8, cells per axis (cubic grid)      default 64
    dt                  float > 0, seconds per substep             default 5e-5
    substeps_per_frame  int >= 1                                   default 800
    frame_count         int >= 1                                   default 16
    gravity             [gx, gy, gz] m/s^2                         default [0,-9.8,0]
    density             float > 0, kg/m^3                          default 1000
    poisson             float in [0, 0.45]                         default 0.3
    boundary            {"kind": "none"|"sticky_ground"|"slip_ground",
                         "ground_height": float}                   default none
    fixed_region        null or {"min":[3], "max":[3]}             default null
    initial_velocity    {"kind":"none"}
                        | {"kind":"spin","axis":[3],"rad_per_s":f,"center":[3]?}
                        | {"kind":"translate","velocity":[3]}      default none
    domain              null or {"min":[3], "max":[3]}; grid box.
                        When null it is derived from the scene
                        bounds with 2x padding.                    default null
    camera_path         null, a pose, or a list of poses (one per
                        frame). pose = {"eye":[3],"target":[3],
                        "up":[3]?,"fov_y":float?}                  default null
    image_size          [H, W]                                     default [64, 64]
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import RangeError, SchemaError

BOUNDARY_KINDS = ("none", "sticky_ground", "slip_ground")
VELOCITY_KINDS = ("none", "spin", "translate")


@dataclass
class SimConfig:
    grid_resolution: int = 64
    dt: float = 5e-5
    substeps_per_frame: int = 800
    frame_count: int = 16
    gravity: tuple = (0.0, -9.8, 0.0)
    density: float = 1000.0
    poisson: float = 0.3
    boundary_kind: str = "none"
    ground_height: float = 0.0
    fixed_region: Optional[tuple] = None          # ((min3), (max3))
    initial_velocity: dict = field(default_factory=lambda: {"kind": "none"})
    domain: Optional[tuple] = None                # ((min3), (max3))
    camera_path: Optional[list] = None            # list of pose dicts
    image_size: tuple = (64, 64)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.dt <= 0:
            raise RangeError(f"dt must be > 0, got {self.dt}")
        if self.substeps_per_frame < 1:
            raise RangeError("substeps_per_frame must be >= 1")
        if self.grid_resolution < 8:
            raise RangeError("grid_resolution must be >= 8")
        if self.frame_count < 1:
            raise RangeError("frame_count must be >= 1")
        if not 0.0 <= self.poisson <= 0.45:
            raise RangeError(f"poisson must lie in [0, 0.45], got {self.poisson}")
        if self.density <= 0:
            raise RangeError("density must be > 0")
        if self.boundary_kind not in BOUNDARY_KINDS:
            raise RangeError(f"unknown boundary kind {self.boundary_kind!r}")
        if self.initial_velocity.get("kind", "none") not in VELOCITY_KINDS:
            raise RangeError(
                f"unknown initial_velocity kind {self.initial_velocity.get('kind')!r}")
        h, w = self.image_size
        if h < 1 or w < 1:
            raise RangeError("image_size entries must be >= 1")
        for region in (self.fixed_region, self.domain):
            if region is not None:
                lo, hi = np.asarray(region[0], float), np.asarray(region[1], float)
                if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
                    raise RangeError("box regions need min < max per axis")

    def to_dict(self) -> dict:
        d = {
            "grid_resolution": self.grid_resolution,
            "dt": self.dt,
            "substeps_per_frame": self.substeps_per_frame,
            "frame_count": self.frame_count,
            "gravity": list(self.gravity),
            "density": self.density,
            "poisson": self.poisson,
            "boundary": {"kind": self.boundary_kind, "ground_height": self.ground_height},
            "fixed_region": None if self.fixed_region is None else
                {"min": list(self.fixed_region[0]), "max": list(self.fixed_region[1])},
            "initial_velocity": self.initial_velocity,
            "domain": None if self.domain is None else
                {"min": list(self.domain[0]), "max": list(self.domain[1])},
            "camera_path": self.camera_path,
            "image_size": list(self.image_size),
        }
        return d


_KEYS = {
    "grid_resolution", "dt", "substeps_per_frame", "frame_count", "gravity",
    "density", "poisson", "boundary", "fixed_region", "initial_velocity",
    "domain", "camera_path", "image_size",
}


def _box(obj, key) -> tuple:
    if not isinstance(obj, dict) or set(obj) != {"min", "max"}:
        raise SchemaError(f"{key} must be an object with 'min' and 'max'")
    return tuple(float(v) for v in obj["min"]), tuple(float(v) for v in obj["max"])


def config_from_dict(raw: dict) -> SimConfig:
    if not isinstance(raw, dict):
        raise SchemaError("config root must be a JSON object")
    unknown = set(raw) - _KEYS
    if unknown:
        raise SchemaError(f"unknown config keys: {sorted(unknown)}")

    kw = {}
    for key in ("grid_resolution", "substeps_per_frame", "frame_count"):
        if key in raw:
            kw[key] = int(raw[key])
    for key in ("dt", "density", "poisson"):
        if key in raw:
            kw[key] = float(raw[key])
    if "gravity" in raw:
        g = raw["gravity"]
        if len(g) != 3:
            raise SchemaError("gravity must be a 3-vector")
        kw["gravity"] = tuple(float(v) for v in g)
    if "boundary" in raw:
        b = raw["boundary"]
        if not isinstance(b, dict) or "kind" not in b:
            raise SchemaError("boundary must be an object with a 'kind'")
        extra = set(b) - {"kind", "ground_height"}
        if extra:
            raise SchemaError(f"unknown boundary keys: {sorted(extra)}")
        kw["boundary_kind"] = b["kind"]
        kw["ground_height"] = float(b.get("ground_height", 0.0))
    if raw.get("fixed_region") is not None:
        kw["fixed_region"] = _box(raw["fixed_region"], "fixed_region")
    if raw.get("domain") is not None:
        kw["domain"] = _box(raw["domain"], "domain")
    if "initial_velocity" in raw:
        iv = raw["initial_velocity"]
        if not isinstance(iv, dict) or "kind" not in iv:
            raise SchemaError("initial_velocity must be an object with a 'kind'")
        kw["initial_velocity"] = iv
    if raw.get("camera_path") is not None:
        cp = raw["camera_path"]
        if isinstance(cp, dict):
            cp = [cp]
        if not isinstance(cp, list) or not all(isinstance(p, dict) for p in cp):
            raise SchemaError("camera_path must be a pose or a list of poses")
        for p in cp:
            if "eye" not in p or "target" not in p:
                raise SchemaError("camera pose needs 'eye' and 'target'")
        kw["camera_path"] = cp
    if "image_size" in raw:
        sz = raw["image_size"]
        if len(sz) != 2:
            raise SchemaError("image_size must be [H, W]")
        kw["image_size"] = (int(sz[0]), int(sz[1]))

    try:
        return SimConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise SchemaError(str(exc)) from exc


def load_config(path) -> SimConfig:
    """Load and validate a simulation config JSON file."""
    with open(path, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)


def resolve_domain(config: SimConfig, bounds_min, bounds_max):
    """Grid box for a scene: explicit config domain, or padded scene bounds.

    The grid is cubic; dx = side / grid_resolution with side the largest
    domain extent, anchored at the domain minimum.
    """
    if config.domain is not None:
        lo = np.asarray(config.domain[0], dtype=np.float64)
        hi = np.asarray(config.domain[1], dtype=np.float64)
    else:
        lo = np.asarray(bounds_min, dtype=np.float64)
        hi = np.asarray(bounds_max, dtype=np.float64)
        extent = np.maximum(hi - lo, 1e-3)
        lo = lo - extent
        hi = hi + extent
    side = float(np.max(hi - lo))
    return lo, side / config.grid_resolution
