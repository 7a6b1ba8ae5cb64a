"""Hot-kernel backend selection.

The compiled extension (dreamphys._core) is preferred; the numpy fallback is
selected when the extension is missing or when DREAMPHYS_BACKEND=numpy.
Both expose the same functions: substep, substep_backward, composite,
composite_backward.
"""

from __future__ import annotations

import os

from . import numpy_impl

_requested = os.environ.get("DREAMPHYS_BACKEND", "auto")

compiled = None
if _requested in ("auto", "compiled"):
    try:
        from dreamphys import _core as compiled  # type: ignore
    except ImportError:
        compiled = None
        if _requested == "compiled":
            raise

_active = compiled if compiled is not None else numpy_impl


def get_backend():
    return _active


def set_backend(which: str):
    """Switch backend ('compiled' | 'numpy'); used by tests and benchmarks."""
    global _active
    if which == "numpy":
        _active = numpy_impl
    elif which == "compiled":
        if compiled is None:
            raise RuntimeError("compiled backend not available")
        _active = compiled
    else:
        raise ValueError(f"unknown backend {which!r}")
    return _active


def available_backends():
    out = ["numpy"]
    if compiled is not None:
        out.insert(0, "compiled")
    return out
