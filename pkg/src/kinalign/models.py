"""
Bundled fixtures: a 6-DOF PSM-shaped demo tool, camera and light.

The numbers are fixtures for tests and demos, not a model of any real manipulator.
The chain has two revolute joints about a remote centre, a prismatic insertion
joint along the shaft, and a three-joint wrist (roll, pitch, jaw yaw).
"""

import numpy as np
from scipy.spatial.transform import Rotation

from .geomcore import PinholeCamera, PointLight, RigidTransform, TriangleMesh, box_mesh, prism_mesh
from .kinematics import DHChain, DHRow, JointKind

DEMO_WIDTH = 320
DEMO_HEIGHT = 240
DEMO_FOCAL = 280.0
DEMO_CAMERA_DISTANCE = 0.16

# remote centre of motion in world coordinates; the shaft tip sits 0.10 m along the base x axis
_RCM = (-0.074, -0.050, -0.026)
_BASE_EULER_DEG = (35.0, -15.0, 45.0)

INSERTION_HOME = 0.10
WRIST_PITCH_LENGTH = 0.010
JAW_LENGTH = 0.016


def demo_base() -> RigidTransform:
    rotation = Rotation.from_euler("ZYX", _BASE_EULER_DEG, degrees=True).as_matrix()
    return RigidTransform(rotation, _RCM)


def demo_link_meshes():
    shaft = prism_mesh(0.004, -0.12, -0.003, sides=8)
    clevis = box_mesh((-0.0045, -0.004, -0.0025), (0.0045, 0.003, 0.0025))
    pitch_link = box_mesh((-WRIST_PITCH_LENGTH, -0.0035, -0.002), (0.0, 0.0035, 0.002))
    jaws = TriangleMesh.concatenate(
        [
            box_mesh((-JAW_LENGTH, 0.0005, -0.0015), (0.0, 0.003, 0.0015)),
            box_mesh((-JAW_LENGTH, -0.003, -0.0015), (0.0, -0.0005, 0.0015)),
        ]
    )
    return ((2, shaft), (3, clevis), (4, pitch_link), (5, jaws))


def demo_chain() -> DHChain:
    """The bundled PSM-shaped chain: yaw, pitch, insertion, roll, wrist pitch, jaw."""
    half_pi = np.pi / 2
    rows = (
        DHRow(a=0.0, alpha=-half_pi, d_offset=0.0, theta_offset=0.0, joint_kind=JointKind.REVOLUTE),
        DHRow(a=0.0, alpha=half_pi, d_offset=0.0, theta_offset=half_pi, joint_kind=JointKind.REVOLUTE),
        DHRow(a=0.0, alpha=0.0, d_offset=INSERTION_HOME, theta_offset=0.0, joint_kind=JointKind.PRISMATIC),
        DHRow(a=0.0, alpha=-half_pi, d_offset=0.0, theta_offset=0.0, joint_kind=JointKind.REVOLUTE),
        DHRow(a=WRIST_PITCH_LENGTH, alpha=half_pi, d_offset=0.0, theta_offset=-half_pi, joint_kind=JointKind.REVOLUTE),
        DHRow(a=JAW_LENGTH, alpha=0.0, d_offset=0.0, theta_offset=0.0, joint_kind=JointKind.REVOLUTE),
    )
    limits = (
        (-0.30, 0.30),
        (-0.30, 0.30),
        (-0.015, 0.015),
        (-1.0, 1.0),
        (-0.8, 0.8),
        (-0.8, 0.8),
    )
    return DHChain(rows, demo_base(), demo_link_meshes(), limits)


def demo_camera(width: int = DEMO_WIDTH, height: int = DEMO_HEIGHT) -> PinholeCamera:
    """Camera looking down world +z at the tool; intrinsics scale with the width."""
    scale = width / DEMO_WIDTH
    extrinsics = RigidTransform(np.eye(3), (0.0, 0.0, DEMO_CAMERA_DISTANCE))
    return PinholeCamera(
        fx=DEMO_FOCAL * scale,
        fy=DEMO_FOCAL * scale,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
        extrinsics=extrinsics,
    )


def demo_light() -> PointLight:
    """One point light centred behind the camera."""
    return PointLight(position=(0.0, 0.0, -0.05), intensity=1.0)
