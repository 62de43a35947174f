"""Differentiable Gaussian splatting: decoding, EWA projection, compositing."""
from .gaussians import (BETA_MIN, AffineDecoder, GaussianDecoder, GaussianPrimitive, GaussianSet, SkyDecoder,
                        assignment_weights, at_time, decode_gaussians, footprints, sky_color, sky_features)
from .raster import BACKEND, BACKENDS, composite, rasterize, set_backend
from .render import COV_EPS, RenderOutput, assignment_map, lifespan_map, project_gaussians, quat_to_rotmat, render

__all__ = [
    "BACKEND", "BACKENDS", "BETA_MIN", "COV_EPS", "AffineDecoder", "GaussianDecoder", "GaussianPrimitive",
    "GaussianSet", "RenderOutput", "SkyDecoder", "assignment_map", "assignment_weights", "at_time", "composite",
    "decode_gaussians", "footprints", "lifespan_map", "project_gaussians", "quat_to_rotmat", "rasterize", "render",
    "set_backend", "sky_color", "sky_features",
]
