"""
Foundational geometry: rigid transforms, triangle meshes, pinhole camera, point light.

Conventions used throughout the package:

* Camera frame is +z forward, +x right, +y down; pixel ``(row, col)`` samples the
  image-plane point ``u = col``, ``v = row`` so pixel (0, 0) is the top-left sample.
* Meters and degrees at API boundaries, radians internally.
* All value types are immutable once constructed (their arrays are read-only).
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.transform import Rotation

from .exceptions import (
    BehindCamera,
    DegenerateFace,
    IndexOutOfRange,
    IoError,
    ParseError,
    ValidationError,
)

logger = logging.getLogger(__name__)

NEAR_PLANE = 1e-6
ORTHONORMAL_TOL = 1e-6
MIN_FACE_AREA = 1e-12

PathLike = Union[str, "os.PathLike[str]"]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=np.float64, copy=True)
    array.setflags(write=False)
    return array


def skew(v: np.ndarray) -> np.ndarray:
    """Return the 3x3 cross-product matrix of ``v``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True)
class RigidTransform:
    """A proper rigid motion ``p -> R p + t``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.asarray(self.rotation, dtype=np.float64)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ValidationError(
                f"RigidTransform expects a 3x3 rotation and 3-vector translation, "
                f"got {rotation.shape} and {translation.shape}"
            )
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise ValidationError("RigidTransform entries must be finite")
        gram_error = np.max(np.abs(rotation.T @ rotation - np.eye(3)))
        det = np.linalg.det(rotation)
        if gram_error > ORTHONORMAL_TOL or abs(det - 1.0) > ORTHONORMAL_TOL:
            raise ValidationError(
                f"rotation is not orthonormal with det +1 (|R^T R - I| = {gram_error:.2e}, det = {det:.6f})"
            )
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, matrix: Union[np.ndarray, Sequence[float]]) -> "RigidTransform":
        """Build from a 4x4 homogeneous matrix (or its 16 row-major entries)."""
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.size != 16:
            raise ValidationError(f"expected 16 matrix entries, got {matrix.size}")
        matrix = matrix.reshape(4, 4)
        if not np.allclose(matrix[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValidationError(f"last matrix row must be [0, 0, 0, 1], got {matrix[3].tolist()}")
        return cls(matrix[:3, :3], matrix[:3, 3])

    @classmethod
    def from_axis_angle(
        cls, omega: Sequence[float], translation: Sequence[float] = (0.0, 0.0, 0.0)
    ) -> "RigidTransform":
        rotation = Rotation.from_rotvec(np.asarray(omega, dtype=np.float64)).as_matrix()
        return cls(rotation, translation)

    def as_matrix(self) -> np.ndarray:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix

    def to_axis_angle(self) -> np.ndarray:
        return Rotation.from_matrix(self.rotation).as_rotvec()

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one point (3,) or a stack of points (N, 3)."""
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def retract(self, delta: Sequence[float]) -> "RigidTransform":
        """Left-compose the increment ``(omega, translation)`` onto this transform."""
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (6,):
            raise ValidationError(f"retract expects a 6-vector, got shape {delta.shape}")
        return compose(RigidTransform.from_axis_angle(delta[:3], delta[3:]), self)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def to_list(self) -> List[float]:
        """Row-major 4x4 entries, the chain/config file representation."""
        return [float(x) for x in self.as_matrix().reshape(-1)]


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a ∘ b``: the transform that applies ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


@dataclass(frozen=True)
class PointLight:
    """Point light in the camera frame."""

    position: np.ndarray
    intensity: float = 1.0

    def __post_init__(self):
        position = np.asarray(self.position, dtype=np.float64).reshape(-1)
        if position.shape != (3,) or not np.all(np.isfinite(position)):
            raise ValidationError(f"light position must be a finite 3-vector, got {position}")
        if not np.isfinite(self.intensity) or self.intensity < 0:
            raise ValidationError(f"light intensity must be >= 0, got {self.intensity}")
        object.__setattr__(self, "position", _frozen(position))
        object.__setattr__(self, "intensity", float(self.intensity))

    def to_dict(self) -> Dict[str, Any]:
        return {"position": [float(x) for x in self.position], "intensity": self.intensity}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PointLight":
        return cls(position=data["position"], intensity=data.get("intensity", 1.0))


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole camera with world-to-camera extrinsics."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValidationError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        for name in ("fx", "fy", "cx", "cy"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.height, self.width

    @property
    def diagonal(self) -> float:
        return float(np.hypot(self.width, self.height))

    def intrinsics_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def with_extrinsics(self, extrinsics: RigidTransform) -> "PinholeCamera":
        return PinholeCamera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, extrinsics)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "extrinsics": self.extrinsics.to_list(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PinholeCamera":
        extrinsics = data.get("extrinsics")
        return cls(
            fx=data["fx"],
            fy=data["fy"],
            cx=data["cx"],
            cy=data["cy"],
            width=data["width"],
            height=data["height"],
            extrinsics=RigidTransform.from_matrix(extrinsics) if extrinsics is not None else RigidTransform.identity(),
        )

    def to_camera(self, points_world: np.ndarray) -> np.ndarray:
        return self.extrinsics.apply(points_world)

    def project_camera_points(self, points_cam: np.ndarray) -> np.ndarray:
        """Project camera-frame points (N, 3) without near-plane checks."""
        points_cam = np.asarray(points_cam, dtype=np.float64)
        z = points_cam[..., 2]
        u = self.fx * points_cam[..., 0] / z + self.cx
        v = self.fy * points_cam[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1)

    def project_points(self, points_world: np.ndarray) -> np.ndarray:
        """Project world points (N, 3); raises BehindCamera if any is not in front."""
        points_cam = self.to_camera(points_world)
        if np.any(points_cam[..., 2] <= NEAR_PLANE):
            raise BehindCamera("at least one point lies at or behind the camera near plane")
        return self.project_camera_points(points_cam)

    def project_jacobian(self, point_cam: np.ndarray) -> np.ndarray:
        """2x3 Jacobian of the pixel coordinates w.r.t. a camera-frame point."""
        x, y, z = np.asarray(point_cam, dtype=np.float64)
        if z <= NEAR_PLANE:
            raise BehindCamera(f"point depth {z:.3g} m is at or behind the near plane")
        return np.array(
            [
                [self.fx / z, 0.0, -self.fx * x / (z * z)],
                [0.0, self.fy / z, -self.fy * y / (z * z)],
            ]
        )


def project(cam: PinholeCamera, p: Sequence[float]) -> np.ndarray:
    """Project a single world point to pixel coordinates ``(u, v)``."""
    point_cam = cam.to_camera(np.asarray(p, dtype=np.float64))
    if point_cam[2] <= NEAR_PLANE:
        raise BehindCamera(f"point depth {point_cam[2]:.3g} m is at or behind the near plane")
    return cam.project_camera_points(point_cam)


def project_with_jacobian(cam: PinholeCamera, p: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Project a world point and return the Jacobian w.r.t. its camera-frame position."""
    point_cam = cam.to_camera(np.asarray(p, dtype=np.float64))
    return project(cam, p), cam.project_jacobian(point_cam)


@dataclass(frozen=True)
class TriangleMesh:
    """Indexed triangle mesh. Face indices are 0-based."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(vertices)):
            raise ValidationError("mesh vertices must be finite")
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            bad = int(faces.max()) if faces.max() >= len(vertices) else int(faces.min())
            raise IndexOutOfRange(f"face index {bad} outside [0, {len(vertices)})")
        object.__setattr__(self, "vertices", _frozen(vertices))
        faces = faces.copy()
        faces.setflags(write=False)
        object.__setattr__(self, "faces", faces)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def face_cross(self) -> np.ndarray:
        tri = self.vertices[self.faces]
        return np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_cross(), axis=1)

    def face_normals(self) -> np.ndarray:
        cross = self.face_cross()
        norms = np.linalg.norm(cross, axis=1, keepdims=True)
        return cross / np.where(norms > 0, norms, 1.0)

    def validate(self) -> "TriangleMesh":
        """Check that every face is non-degenerate; returns self for chaining."""
        if self.n_faces:
            areas = self.face_areas()
            bad = np.flatnonzero(areas <= MIN_FACE_AREA)
            if bad.size:
                raise DegenerateFace(f"face {int(bad[0])} has area {areas[bad[0]]:.3e} m^2")
        return self

    def transformed(self, transform: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(transform.apply(self.vertices), self.faces)

    @staticmethod
    def concatenate(meshes: Iterable["TriangleMesh"]) -> "TriangleMesh":
        vertices, faces, offset = [], [], 0
        for mesh in meshes:
            vertices.append(mesh.vertices)
            faces.append(mesh.faces + offset)
            offset += mesh.n_vertices
        if not vertices:
            return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        return TriangleMesh(np.concatenate(vertices), np.concatenate(faces))


_IGNORED_OBJ_RECORDS = {"vn", "vt", "o", "g", "s", "usemtl", "mtllib"}


def load_obj(path: PathLike) -> TriangleMesh:
    """Read the OBJ subset (``v``, triangular ``f``, ``#`` comments; 1-based indices)."""
    path = os.fspath(path)
    vertices: List[List[float]] = []
    faces: List[List[int]] = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise IoError(f"cannot read OBJ file {path}: {e}") from e

    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        record, args = tokens[0], tokens[1:]
        if record == "v":
            if len(args) != 3:
                raise ParseError(f"vertex record needs 3 coordinates, got {len(args)}", path, lineno)
            try:
                vertices.append([float(a) for a in args])
            except ValueError:
                raise ParseError(f"non-numeric vertex coordinate in {line!r}", path, lineno) from None
        elif record == "f":
            if len(args) != 3:
                raise ParseError(f"only triangular faces are supported, got {len(args)} indices", path, lineno)
            try:
                indices = [int(a.split("/", 1)[0]) for a in args]
            except ValueError:
                raise ParseError(f"non-integer face index in {line!r}", path, lineno) from None
            faces.append(indices)
        elif record in _IGNORED_OBJ_RECORDS:
            continue
        else:
            raise ParseError(f"unsupported record {record!r}", path, lineno)

    faces_arr = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if faces_arr.size and (faces_arr.min() < 1 or faces_arr.max() > len(vertices)):
        bad = faces_arr.min() if faces_arr.min() < 1 else faces_arr.max()
        raise IndexOutOfRange(f"{path}: face index {int(bad)} outside 1..{len(vertices)}")
    mesh = TriangleMesh(np.asarray(vertices, dtype=np.float64).reshape(-1, 3), faces_arr - 1)
    return mesh.validate()


def save_obj(mesh: TriangleMesh, path: PathLike) -> None:
    """Write the OBJ subset with round-trip exact float formatting."""
    path = os.fspath(path)
    lines = ["# written by kinalign"]
    lines += [f"v {float(x)!r} {float(y)!r} {float(z)!r}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    try:
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
    except OSError as e:
        raise IoError(f"cannot write OBJ file {path}: {e}") from e


def box_mesh(lo: Sequence[float], hi: Sequence[float]) -> TriangleMesh:
    """Axis-aligned box with outward-wound faces."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    corners = np.array(
        [[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]] for i in range(8)]
    )
    faces = [
        (0, 4, 6), (0, 6, 2),  # -x
        (1, 3, 7), (1, 7, 5),  # +x
        (0, 1, 5), (0, 5, 4),  # -y
        (2, 6, 7), (2, 7, 3),  # +y
        (0, 2, 3), (0, 3, 1),  # -z
        (4, 5, 7), (4, 7, 6),  # +z
    ]
    return TriangleMesh(corners, np.array(faces)).validate()


def prism_mesh(radius: float, z0: float, z1: float, sides: int = 8) -> TriangleMesh:
    """Closed regular prism along z, from ``z0`` to ``z1`` (z0 < z1)."""
    if sides < 3:
        raise ValidationError(f"a prism needs at least 3 sides, got {sides}")
    angles = 2.0 * np.pi * np.arange(sides) / sides
    ring = np.stack([radius * np.cos(angles), radius * np.sin(angles)], axis=1)
    bottom = np.column_stack([ring, np.full(sides, z0)])
    top = np.column_stack([ring, np.full(sides, z1)])
    vertices = np.concatenate([bottom, top, [[0.0, 0.0, z0], [0.0, 0.0, z1]]])
    cb, ct = 2 * sides, 2 * sides + 1
    faces = []
    for k in range(sides):
        k1 = (k + 1) % sides
        faces.append((k, k1, sides + k1))
        faces.append((k, sides + k1, sides + k))
        faces.append((cb, k1, k))
        faces.append((ct, sides + k, sides + k1))
    return TriangleMesh(vertices, np.array(faces)).validate()
