"""dreamphys: material-parameter estimation for Gaussian splat scenes.

Distills motion guidance from a video denoiser (analytic oracle or remote
service) through a differentiable MLS-MPM simulator and splat renderer into
a KAN tri-plane material field.
"""

from . import backends
from .cameras import Camera, default_camera, look_at
from .config import SimConfig, config_from_dict, load_config
from .field import MaterialField, field_backward, field_eval, kan_eval, triplane_sample
from .guidance import (AnalyticOracle, Condition, DiffusionSchedule,
                       RemoteDenoiser, add_noise, analytic_denoise, mds_score,
                       remote_denoise, sds_t_score)
from .mpm import (Engine, Grid, MpmState, StepTape, bspline_weights, g2p,
                  grid_update, kernel_deform, lame_params, p2g, stress,
                  stress_backward)
from .optimizer import (AnalyticGuidance, OptimizerConfig, RemoteGuidance,
                        check_convergence, iteration, optimize, split_groups)
from .ply import load_ply, save_ply
from .render import (KernelStates, VideoTensor, eval_color, project, render,
                     render_backward, render_video, rest_states)
from .scene import GaussianKernel, Scene

__version__ = "0.1.0"
