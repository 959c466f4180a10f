"""Differentiable Gaussian splatting with score-distillation training and
text-to-3D evaluation metrics."""

from splatgen.gaussians import (
    CameraPose,
    GaussianCloud,
    build_covariance,
    eval_sh,
    project_gaussian,
)
from splatgen.rasterizer import RenderGrads, RenderOutput, render, render_backward

__all__ = [
    "CameraPose",
    "GaussianCloud",
    "build_covariance",
    "eval_sh",
    "project_gaussian",
    "RenderOutput",
    "RenderGrads",
    "render",
    "render_backward",
]
