"""
kinalign - kinematics correction and tool segmentation by render-and-compare

A rendered model of a robot tool (DH chain + link meshes, soft-rasterized) is
aligned with an observed image by gradient descent on a feature-space loss; the
aligned model gives both corrected kinematics and a segmentation mask.
"""

__version__ = "0.1.0"

from .exceptions import KinalignError
from .kinematics import DHChain, JointConfig, forward_kinematics, load_chain, pose_meshes
from .optimizer import AlignmentResult, KinematicState, OptimizeSpec, align, evaluate_loss, segment
from .rasterizer import SoftRenderConfig, hard_rasterize, render

__all__ = [
    "__version__",
    "AlignmentResult",
    "DHChain",
    "JointConfig",
    "KinalignError",
    "KinematicState",
    "OptimizeSpec",
    "SoftRenderConfig",
    "align",
    "evaluate_loss",
    "forward_kinematics",
    "hard_rasterize",
    "load_chain",
    "pose_meshes",
    "render",
    "segment",
]
