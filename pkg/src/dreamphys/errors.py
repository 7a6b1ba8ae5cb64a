"""Exception hierarchy for the dreamphys package."""


class DreamPhysError(Exception):
    """Base class for all dreamphys errors."""


# --- scene / config ---------------------------------------------------------

class MalformedPly(DreamPhysError):
    """PLY file is structurally invalid or misses a required 3DGS property."""


class EmptyScene(DreamPhysError):
    """PLY file contains zero vertices."""


class SchemaError(DreamPhysError):
    """Config JSON has an unknown or missing field."""


class RangeError(DreamPhysError):
    """A config or parameter value is outside its valid range."""


# --- simulation -------------------------------------------------------------

class OutOfGrid(DreamPhysError):
    """Particle sits within one cell of the grid boundary."""


class DegenerateF(DreamPhysError):
    """Deformation gradient determinant at or below the invertibility floor."""


# --- rendering --------------------------------------------------------------

class BehindCamera(DreamPhysError):
    """Kernel center is behind the near plane."""


class ShapeMismatch(DreamPhysError):
    """Tensor shapes disagree with each other or with a protocol header."""


class StaleRecord(DreamPhysError):
    """Backward pass invoked with a record that does not match its forward call."""


# --- material field ---------------------------------------------------------

class OutOfBounds(DreamPhysError):
    """Query position outside the padded scene bounds."""


# --- guidance / wire protocol -----------------------------------------------

class Transport(DreamPhysError):
    """Remote denoiser unreachable, timed out, or failed server-side."""


class ProtocolError(DreamPhysError):
    """Wire payload violates the denoise protocol framing."""


# --- optimizer --------------------------------------------------------------

class NotDivisible(DreamPhysError):
    """Frame count is not divisible by the group count."""
