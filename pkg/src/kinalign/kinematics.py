"""
Denavit-Hartenberg serial-chain forward kinematics.

Classic (distal) DH: the transform contributed by row ``i`` is
``A_i = Rz(theta) Tz(d) Tx(a) Rx(alpha)``. The joint variable replaces ``theta``
for revolute rows and ``d`` for prismatic rows (added to the stored offset).

``forward_kinematics`` returns one frame per row; frame ``i`` is
``F_B · A_1 ⋯ A_{i+1}`` (0-based ``i``), i.e. the frame *after* joint ``i``. A link
mesh with index ``i`` is rigidly attached to frame ``i`` and therefore moves with
joints ``0..i``.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigError, IoError, LengthMismatch, ValidationError
from .geomcore import RigidTransform, TriangleMesh, load_obj, save_obj

logger = logging.getLogger(__name__)


class JointKind(str, Enum):
    REVOLUTE = "revolute"
    PRISMATIC = "prismatic"


@dataclass(frozen=True)
class DHRow:
    """One classic DH row. Angles in radians, lengths in meters."""

    a: float
    alpha: float
    d_offset: float
    theta_offset: float
    joint_kind: JointKind = JointKind.REVOLUTE

    def __post_init__(self):
        for name in ("a", "alpha", "d_offset", "theta_offset"):
            value = float(getattr(self, name))
            if not np.isfinite(value):
                raise ValidationError(f"DH row {name} must be finite, got {value}")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "joint_kind", JointKind(self.joint_kind))

    def transform(self, q: float) -> RigidTransform:
        theta, d = self.theta_offset, self.d_offset
        if self.joint_kind is JointKind.REVOLUTE:
            theta += q
        else:
            d += q
        ct, st = np.cos(theta), np.sin(theta)
        ca, sa = np.cos(self.alpha), np.sin(self.alpha)
        rotation = np.array([[ct, -st * ca, st * sa], [st, ct * ca, -ct * sa], [0.0, sa, ca]])
        return RigidTransform(rotation, [self.a * ct, self.a * st, d])


@dataclass(frozen=True)
class JointConfig:
    """Joint vector K: radians for revolute joints, meters for prismatic ones."""

    values: np.ndarray
    kinds: Tuple[JointKind, ...] = ()

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64).reshape(-1)
        kinds = tuple(JointKind(k) for k in self.kinds) or (JointKind.REVOLUTE,) * len(values)
        if len(kinds) != len(values):
            raise LengthMismatch(f"{len(values)} joint values but {len(kinds)} joint kinds")
        if not np.all(np.isfinite(values)):
            raise ValidationError("joint values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kinds", kinds)

    def __len__(self) -> int:
        return len(self.values)

    @property
    def revolute_mask(self) -> np.ndarray:
        return np.array([k is JointKind.REVOLUTE for k in self.kinds], dtype=bool)

    def with_values(self, values: Sequence[float]) -> "JointConfig":
        return JointConfig(values, self.kinds)

    def to_report_units(self) -> List[float]:
        """Revolute joints in degrees, prismatic joints in millimetres."""
        scale = np.where(self.revolute_mask, 180.0 / np.pi, 1000.0)
        return [float(v) for v in self.values * scale]


@dataclass(frozen=True)
class DHChain:
    """Robot model: DH rows, base frame F_B, per-link meshes M_B and joint limits."""

    rows: Tuple[DHRow, ...]
    base: RigidTransform = field(default_factory=RigidTransform.identity)
    link_meshes: Tuple[Tuple[int, TriangleMesh], ...] = ()
    joint_limits: Tuple[Tuple[float, float], ...] = ()

    def __post_init__(self):
        rows = tuple(self.rows)
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "link_meshes", tuple((int(i), m) for i, m in self.link_meshes))
        limits = tuple((float(lo), float(hi)) for lo, hi in self.joint_limits) or ((-np.inf, np.inf),) * len(rows)
        object.__setattr__(self, "joint_limits", limits)
        if len(limits) != len(rows):
            raise LengthMismatch(f"{len(limits)} joint limits for {len(rows)} DH rows")
        for j, (lo, hi) in enumerate(limits):
            if not lo < hi:
                raise ValidationError(f"joint {j}: lower limit {lo} must be below upper limit {hi}")
        for index, _ in self.link_meshes:
            if not 0 <= index < len(rows):
                raise ValidationError(f"link mesh index {index} outside [0, {len(rows)})")

    @property
    def dof(self) -> int:
        return len(self.rows)

    @property
    def kinds(self) -> Tuple[JointKind, ...]:
        return tuple(row.joint_kind for row in self.rows)

    def config(self, values: Sequence[float]) -> JointConfig:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if len(values) != self.dof:
            raise LengthMismatch(f"chain has {self.dof} joints, got {len(values)} values")
        return JointConfig(values, self.kinds)

    def home(self) -> JointConfig:
        return self.config(np.zeros(self.dof))

    def clamp(self, q: JointConfig) -> JointConfig:
        lo, hi = np.array(self.joint_limits).T
        return q.with_values(np.clip(q.values, lo, hi))

    def within_limits(self, q: JointConfig) -> bool:
        lo, hi = np.array(self.joint_limits).T
        return bool(np.all((q.values >= lo) & (q.values <= hi)))

    def with_base(self, base: RigidTransform) -> "DHChain":
        return DHChain(self.rows, base, self.link_meshes, self.joint_limits)


def _joint_values(chain: DHChain, q: Union[JointConfig, Sequence[float]]) -> np.ndarray:
    values = q.values if isinstance(q, JointConfig) else np.asarray(q, dtype=np.float64).reshape(-1)
    if len(values) != chain.dof:
        raise LengthMismatch(f"chain has {chain.dof} joints, got a configuration of length {len(values)}")
    return values


def forward_kinematics(chain: DHChain, q: Union[JointConfig, Sequence[float]]) -> List[RigidTransform]:
    """Return the world pose of every link frame for configuration ``q``."""
    values = _joint_values(chain, q)
    frames = []
    current = chain.base
    for row, value in zip(chain.rows, values):
        current = current @ row.transform(value)
        frames.append(current)
    return frames


def pose_meshes_with_links(chain: DHChain, q: Union[JointConfig, Sequence[float]]) -> Tuple[TriangleMesh, np.ndarray]:
    """Posed, merged mesh M plus the link index of every posed vertex."""
    frames = forward_kinematics(chain, q)
    meshes, links = [], []
    for index, mesh in chain.link_meshes:
        meshes.append(mesh.transformed(frames[index]))
        links.append(np.full(mesh.n_vertices, index, dtype=np.int64))
    merged = TriangleMesh.concatenate(meshes)
    vertex_links = np.concatenate(links) if links else np.zeros(0, dtype=np.int64)
    return merged, vertex_links


def pose_meshes(chain: DHChain, q: Union[JointConfig, Sequence[float]]) -> TriangleMesh:
    """Posed, merged mesh M = f_FK(DH, M_B, F_B, K)."""
    return pose_meshes_with_links(chain, q)[0]


def vertex_jacobian_vjp(
    chain: DHChain,
    q: Union[JointConfig, Sequence[float]],
    cotangent: np.ndarray,
) -> np.ndarray:
    """Pull per-vertex world-frame cotangents back to the joint vector.

    Joint ``j`` turns (or slides) about the z-axis of the frame preceding it; a
    vertex on link ``i`` depends on joints ``0..i`` only.
    """
    values = _joint_values(chain, q)
    mesh, links = pose_meshes_with_links(chain, values)
    cotangent = np.asarray(cotangent, dtype=np.float64).reshape(-1, 3)
    if len(cotangent) != mesh.n_vertices:
        raise LengthMismatch(f"cotangent has {len(cotangent)} rows for {mesh.n_vertices} posed vertices")

    dof = chain.dof
    # per-link sums of c and v x c, then suffix sums so entry j covers links >= j
    sum_c = np.zeros((dof, 3))
    sum_vc = np.zeros((dof, 3))
    np.add.at(sum_c, links, cotangent)
    np.add.at(sum_vc, links, np.cross(mesh.vertices, cotangent))
    sum_c = np.cumsum(sum_c[::-1], axis=0)[::-1]
    sum_vc = np.cumsum(sum_vc[::-1], axis=0)[::-1]

    frames = forward_kinematics(chain, values)
    parents = [chain.base] + frames[:-1]
    grad = np.zeros(dof)
    for j, (row, parent) in enumerate(zip(chain.rows, parents)):
        axis = parent.rotation[:, 2]
        if row.joint_kind is JointKind.REVOLUTE:
            grad[j] = axis @ (sum_vc[j] - np.cross(parent.translation, sum_c[j]))
        else:
            grad[j] = axis @ sum_c[j]
    return grad


def load_chain(path: Union[str, "os.PathLike[str]"]) -> DHChain:
    """Load a chain description JSON (angles in degrees, OBJ paths relative to the file)."""
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise IoError(f"cannot read chain file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"chain file {path} is not valid JSON: {e}") from e

    unknown = set(data) - {"rows", "base", "links", "limits"}
    if unknown:
        raise ConfigError(f"chain file {path}: unknown keys {sorted(unknown)}")
    try:
        rows = tuple(
            DHRow(
                a=row["a"],
                alpha=np.deg2rad(row["alpha"]),
                d_offset=row["d"],
                theta_offset=np.deg2rad(row["theta"]),
                joint_kind=JointKind(row.get("kind", "revolute")),
            )
            for row in data["rows"]
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"chain file {path}: malformed row ({e})") from e

    base = RigidTransform.from_matrix(data["base"]) if "base" in data else RigidTransform.identity()
    root = os.path.dirname(os.path.abspath(path))
    link_meshes = tuple(
        (int(index), load_obj(os.path.join(root, mesh_path))) for index, mesh_path in data.get("links", {}).items()
    )
    limits = []
    for row, (lo, hi) in zip(rows, data.get("limits", [])):
        if row.joint_kind is JointKind.REVOLUTE:
            lo, hi = np.deg2rad(lo), np.deg2rad(hi)
        limits.append((lo, hi))
    logger.debug(f"Loaded chain with {len(rows)} rows and {len(link_meshes)} link meshes from {path}")
    return DHChain(rows, base, link_meshes, tuple(limits))


def save_chain(chain: DHChain, path: Union[str, "os.PathLike[str]"]) -> str:
    """Write the chain JSON plus one OBJ per link next to it; returns the JSON path."""
    path = os.fspath(path)
    root = os.path.dirname(os.path.abspath(path))
    os.makedirs(root, exist_ok=True)
    by_link: Dict[int, List[TriangleMesh]] = {}
    for index, mesh in chain.link_meshes:
        by_link.setdefault(index, []).append(mesh)
    links = {}
    for index, meshes in sorted(by_link.items()):
        name = f"link{index}.obj"
        save_obj(TriangleMesh.concatenate(meshes), os.path.join(root, name))
        links[str(index)] = name

    limits = []
    for row, (lo, hi) in zip(chain.rows, chain.joint_limits):
        if row.joint_kind is JointKind.REVOLUTE:
            lo, hi = np.rad2deg(lo), np.rad2deg(hi)
        limits.append([float(lo), float(hi)])
    data = {
        "rows": [
            {
                "a": row.a,
                "alpha": float(np.rad2deg(row.alpha)),
                "d": row.d_offset,
                "theta": float(np.rad2deg(row.theta_offset)),
                "kind": row.joint_kind.value,
            }
            for row in chain.rows
        ],
        "base": chain.base.to_list(),
        "links": links,
        "limits": limits,
    }
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
    except OSError as e:
        raise IoError(f"cannot write chain file {path}: {e}") from e
    return path
