"""Deformable radial kernel splatting on the CPU."""
from .errors import *  # noqa: F401,F403
from .kernel import (DrkPrimitive, KernelConfig, PrimitiveSet, RawDrkParams, activate,  # noqa: F401
                     alpha, angle_activation, calibrated_endpoints, deactivate, eval_kernel,
                     gaussian_special_case, low_pass, sharpen, sharpen_inverse)
from .geometry import (Camera, Intersection, Ray, intersect_and_uv, pixel_ray,  # noqa: F401
                       project_point, quat_to_rotation, sh_eval)
from .raster import (FrameBuffers, SortCache, TileBinning, bin_primitives, cache_step,  # noqa: F401
                     eval_sorting, render)
from .grad import ParamGrads, backward_alpha, backward_render, finite_diff_check  # noqa: F401

__version__ = "0.1.0"
