"""Reference server for the dreamphys denoise wire protocol."""

from .model import ModelBackend, ModelNotLoaded
from .selftest import run_selftest
from .server import DenoiseServer
from .wire import BadFrame, BadShape, DenoiseRequest, build_response, parse_request

__version__ = "0.1.0"
