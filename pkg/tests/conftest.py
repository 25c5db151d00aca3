"""Shared fixtures: tiny cameras, meshes, a two-link planar arm and its observation."""

import json

import numpy as np
import pytest

from kinalign.features import MeanBackground
from kinalign.geomcore import PinholeCamera, PointLight, RigidTransform, TriangleMesh, box_mesh
from kinalign.kinematics import DHChain, DHRow, JointKind
from kinalign.optimizer import KinematicState
from kinalign.rasterizer import SoftRenderConfig
from kinalign.scenegen import render_observation, tissue_texture

ARM_WIDTH = 64
ARM_HEIGHT = 48


@pytest.fixture
def small_camera():
    """32x24 camera at the world origin; the principal point is off the pixel grid."""
    return PinholeCamera(fx=50.0, fy=50.0, cx=16.3, cy=12.2, width=32, height=24)


@pytest.fixture
def facing_triangle():
    """One triangle at depth 1 m, wound so its normal points back at the camera."""
    vertices = np.array([[-0.1, -0.1, 1.0], [0.0, 0.1, 1.0], [0.1, -0.1, 1.0]])
    return TriangleMesh(vertices, np.array([[0, 1, 2]]))


@pytest.fixture
def two_triangles():
    """Two overlapping camera-facing triangles at different depths."""
    vertices = np.array(
        [
            [-0.1, -0.1, 1.0],
            [0.0, 0.1, 1.0],
            [0.1, -0.1, 1.0],
            [-0.02, -0.05, 1.2],
            [0.06, 0.12, 1.2],
            [0.14, -0.03, 1.2],
        ]
    )
    return TriangleMesh(vertices, np.array([[0, 1, 2], [3, 4, 5]]))


@pytest.fixture
def planar_arm():
    """Two revolute links in the world xy plane, 20 mm and 15 mm long."""
    rows = (
        DHRow(a=0.02, alpha=0.0, d_offset=0.0, theta_offset=0.0, joint_kind=JointKind.REVOLUTE),
        DHRow(a=0.015, alpha=0.0, d_offset=0.0, theta_offset=0.0, joint_kind=JointKind.REVOLUTE),
    )
    links = (
        (0, box_mesh((-0.02, -0.003, -0.002), (0.0, 0.003, 0.002))),
        (1, box_mesh((-0.015, -0.0025, -0.002), (0.0, 0.0025, 0.002))),
    )
    return DHChain(rows, RigidTransform.identity(), links, ((-1.0, 1.0), (-1.0, 1.0)))


@pytest.fixture
def arm_camera():
    """Camera 0.1 m in front of the arm plane, looking along world +z."""
    extrinsics = RigidTransform(np.eye(3), (0.0, 0.0, 0.1))
    return PinholeCamera(
        fx=100.0, fy=100.0, cx=16.5, cy=24.5, width=ARM_WIDTH, height=ARM_HEIGHT, extrinsics=extrinsics
    )


@pytest.fixture
def arm_light():
    return PointLight((0.0, 0.0, 0.0), 1.0)


@pytest.fixture
def arm_render_config():
    return SoftRenderConfig(sigma=2.0, gamma=1e-3)


@pytest.fixture
def arm_background():
    return MeanBackground.from_image(tissue_texture(ARM_WIDTH, ARM_HEIGHT, seed=0))


@pytest.fixture
def arm_problem(planar_arm, arm_camera, arm_light, arm_render_config, arm_background):
    """Ground-truth state, a perturbed measured state and the observed image of the ground truth."""
    gt = KinematicState(planar_arm, planar_arm.config([0.2, -0.3]), arm_camera, arm_light)
    measured = gt.with_joints([0.23, -0.34])
    observed = render_observation(planar_arm, gt.joints, arm_camera, arm_light, arm_background, arm_render_config)
    return {"gt": gt, "measured": measured, "observed": observed, "background": arm_background}


@pytest.fixture
def small_run_config(tmp_path):
    """Config file for the demo tool at 64x48 with a short optimization budget."""
    path = tmp_path / "config.json"
    data = {
        "camera": {"fx": 56.0, "fy": 56.0, "width": 64, "height": 48},
        "optimizer": {"max_iters": 2},
        "parallel": {"threads": 2},
    }
    path.write_text(json.dumps(data), encoding="utf-8")
    return str(path)
