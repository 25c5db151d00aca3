"""
Differentiable soft rasterization of triangle meshes.

Each triangle ``j`` influences pixel ``p`` with probability
``D_j(p) = sigmoid(s_j(p) * d^2(p, tri_j) / sigma)`` where ``d`` is the screen-space
distance to the projected triangle and ``s_j`` is +1 inside, -1 outside. The soft
silhouette aggregates ``S(p) = 1 - prod_j (1 - D_j(p))``; the shaded image blends a
depth-softmax (temperature ``gamma``) of per-face Lambertian intensities with the
background value using ``S`` as alpha.

Influence is evaluated only inside each triangle's bounding box inflated by
``sqrt(20 * sigma)`` pixels and is exactly 0 elsewhere. Gradients are computed
analytically; ``SoftRenderOutput.vjp`` maps image / silhouette cotangents to
world-frame per-vertex cotangents.
"""

import logging
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
from scipy.special import expit

from .exceptions import AllBehindCamera, EmptyMesh, ValidationError
from .geomcore import NEAR_PLANE, PinholeCamera, PointLight, TriangleMesh

logger = logging.getLogger(__name__)

INFLUENCE_CUTOFF = 20.0
_TINY = 1e-12


@dataclass(frozen=True)
class SoftRenderConfig:
    """Soft rasterizer constants. ``sigma`` is in px^2, ``gamma`` in meters of depth."""

    sigma: float = 16.0
    gamma: float = 1e-4
    background_value: float = 0.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if not self.gamma > 0:
            raise ValidationError(f"gamma must be > 0, got {self.gamma}")
        if not 0.0 <= self.background_value <= 1.0:
            raise ValidationError(f"background_value must lie in [0, 1], got {self.background_value}")

    @classmethod
    def default_for(cls, width: int, height: int) -> "SoftRenderConfig":
        return cls(sigma=1e-4 * float(width * width + height * height))

    @property
    def radius(self) -> float:
        return float(np.sqrt(INFLUENCE_CUTOFF * self.sigma))


VjpFn = Callable[[Optional[np.ndarray], Optional[np.ndarray]], np.ndarray]


@dataclass(frozen=True)
class SoftRenderOutput:
    """Rendered image (H, W, 3), soft silhouette (H, W) and their VJP."""

    image: np.ndarray
    silhouette: np.ndarray
    vjp: VjpFn

    @property
    def shape(self) -> Tuple[int, int]:
        return self.silhouette.shape


@dataclass
class _FaceWindow:
    face: int
    rows: slice
    cols: slice
    x: np.ndarray  # signed scaled squared distance s * d^2 / sigma
    dx_duv: np.ndarray  # (h, w, 3, 2) derivative of x w.r.t. projected vertices


def _lambert(tri_cam: np.ndarray, light: PointLight) -> Tuple[np.ndarray, np.ndarray]:
    """Flat Lambertian intensity per face and its gradient w.r.t. the 3 camera-frame vertices."""
    e1 = tri_cam[:, 1] - tri_cam[:, 0]
    e2 = tri_cam[:, 2] - tri_cam[:, 0]
    u = np.cross(e1, e2)
    u_norm = np.maximum(np.linalg.norm(u, axis=1, keepdims=True), _TINY)
    n = u / u_norm
    w = light.position - tri_cam.mean(axis=1)
    w_norm = np.maximum(np.linalg.norm(w, axis=1, keepdims=True), _TINY)
    l_dir = w / w_norm
    cos = np.sum(n * l_dir, axis=1)
    lit = cos > 0
    shade = light.intensity * np.where(lit, cos, 0.0)

    a = (l_dir - cos[:, None] * n) / u_norm
    b = (n - cos[:, None] * l_dir) / w_norm
    grad_e1 = np.cross(e2, a)
    grad_e2 = np.cross(a, e1)
    grad = np.empty_like(tri_cam)
    grad[:, 0] = -(grad_e1 + grad_e2) - b / 3.0
    grad[:, 1] = grad_e1 - b / 3.0
    grad[:, 2] = grad_e2 - b / 3.0
    grad *= (light.intensity * lit)[:, None, None]
    return shade, grad


def _face_window(face: int, uv: np.ndarray, bounds: Tuple[int, int, int, int], sigma: float) -> _FaceWindow:
    r0, r1, c0, c1 = bounds
    vs = np.arange(r0, r1 + 1, dtype=np.float64)
    us = np.arange(c0, c1 + 1, dtype=np.float64)
    pu, pv = np.meshgrid(us, vs)
    shape = pu.shape

    d2 = np.full(shape, np.inf)
    d2_grad = np.zeros(shape + (3, 2))
    edge_fn = np.empty((3,) + shape)
    for e in range(3):
        a, b = uv[e], uv[(e + 1) % 3]
        ab = b - a
        len2 = float(ab @ ab)
        rel_u, rel_v = pu - a[0], pv - a[1]
        if len2 > _TINY:
            t = np.clip((rel_u * ab[0] + rel_v * ab[1]) / len2, 0.0, 1.0)
        else:
            t = np.zeros(shape)
        ru = rel_u - t * ab[0]
        rv = rel_v - t * ab[1]
        de = ru * ru + rv * rv
        closer = de < d2
        d2 = np.where(closer, de, d2)
        r_vec = np.stack([ru, rv], axis=-1)
        # envelope rule: d(d^2)/dA = -2 r (1 - t), d(d^2)/dB = -2 r t
        grad_a = -2.0 * r_vec * (1.0 - t)[..., None]
        grad_b = -2.0 * r_vec * t[..., None]
        d2_grad[closer] = 0.0
        d2_grad[..., e, :][closer] = grad_a[closer]
        d2_grad[..., (e + 1) % 3, :][closer] = grad_b[closer]
        edge_fn[e] = ab[0] * rel_v - ab[1] * rel_u

    area2 = (uv[1, 0] - uv[0, 0]) * (uv[2, 1] - uv[0, 1]) - (uv[1, 1] - uv[0, 1]) * (uv[2, 0] - uv[0, 0])
    if abs(area2) > _TINY:
        inside = np.all(edge_fn >= 0, axis=0) | np.all(edge_fn <= 0, axis=0)
    else:
        inside = np.zeros(shape, dtype=bool)
    sign = np.where(inside, 1.0, -1.0)
    x = sign * d2 / sigma
    dx_duv = d2_grad * (sign / sigma)[..., None, None]
    return _FaceWindow(face, slice(r0, r1 + 1), slice(c0, c1 + 1), x, dx_duv)


def _face_bounds(uv: np.ndarray, radius: float, width: int, height: int) -> Optional[Tuple[int, int, int, int]]:
    lo = np.floor(uv.min(axis=0) - radius)
    hi = np.ceil(uv.max(axis=0) + radius)
    c0, r0 = int(max(lo[0], 0)), int(max(lo[1], 0))
    c1, r1 = int(min(hi[0], width - 1)), int(min(hi[1], height - 1))
    if c0 > c1 or r0 > r1:
        return None
    return r0, r1, c0, c1


def _prepare(mesh: TriangleMesh, cam: PinholeCamera):
    if mesh.n_faces == 0:
        raise EmptyMesh("cannot render a mesh without faces")
    points_cam = cam.to_camera(mesh.vertices)
    in_front = points_cam[:, 2] > NEAR_PLANE
    if not np.any(in_front):
        raise AllBehindCamera(f"all {mesh.n_vertices} vertices lie at or behind the camera near plane")
    visible_faces = np.flatnonzero(np.all(in_front[mesh.faces], axis=1))
    safe = np.where(in_front[:, None], points_cam, [[0.0, 0.0, 1.0]])
    uv = cam.project_camera_points(safe)
    return points_cam, uv, visible_faces


def render(
    mesh: TriangleMesh,
    cam: PinholeCamera,
    light: PointLight,
    cfg: SoftRenderConfig,
    with_image: bool = True,
) -> SoftRenderOutput:
    """Soft-render ``mesh``: silhouette, Lambertian image and the VJP back to vertices."""
    points_cam, uv, visible_faces = _prepare(mesh, cam)
    height, width = cam.height, cam.width
    tri_cam = points_cam[mesh.faces]
    shade, shade_grad = _lambert(tri_cam, light)
    depth = tri_cam[:, :, 2].mean(axis=1)

    windows: List[_FaceWindow] = []
    for face in visible_faces:
        face_uv = uv[mesh.faces[face]]
        bounds = _face_bounds(face_uv, cfg.radius, width, height)
        if bounds is not None:
            windows.append(_face_window(face, face_uv, bounds, cfg.sigma))
    logger.debug(f"Soft render: {len(windows)}/{mesh.n_faces} faces touch the {width}x{height} image")

    log_empty = np.zeros((height, width))
    for win in windows:
        log_empty[win.rows, win.cols] -= np.logaddexp(0.0, win.x)
    silhouette = np.clip(-np.expm1(log_empty), 0.0, 1.0)

    aggregate = np.zeros((height, width))
    norm = np.zeros((height, width))
    max_logit = np.full((height, width), -np.inf)
    if with_image:
        for win in windows:
            logit = -np.logaddexp(0.0, -win.x) - depth[win.face] / cfg.gamma
            np.maximum(max_logit[win.rows, win.cols], logit, out=max_logit[win.rows, win.cols])
        for win in windows:
            logit = -np.logaddexp(0.0, -win.x) - depth[win.face] / cfg.gamma
            weight = np.exp(logit - max_logit[win.rows, win.cols])
            norm[win.rows, win.cols] += weight
            aggregate[win.rows, win.cols] += weight * shade[win.face]
        covered = norm > 0
        aggregate[covered] /= norm[covered]
    raw_gray = silhouette * aggregate + (1.0 - silhouette) * cfg.background_value
    gray = np.clip(raw_gray, 0.0, 1.0)
    unclipped = (raw_gray >= 0.0) & (raw_gray <= 1.0)
    image = np.repeat(gray[..., None], 3, axis=2)

    def vjp(d_image: Optional[np.ndarray] = None, d_silhouette: Optional[np.ndarray] = None) -> np.ndarray:
        d_sil = np.zeros((height, width)) if d_silhouette is None else np.asarray(d_silhouette, dtype=np.float64)
        d_agg = np.zeros((height, width))
        if d_image is not None:
            if not with_image:
                raise ValidationError("image cotangent given for a silhouette-only render")
            d_gray = np.asarray(d_image, dtype=np.float64).sum(axis=2) * unclipped
            d_sil = d_sil + d_gray * (aggregate - cfg.background_value)
            d_agg = d_gray * silhouette
        d_sil_x = d_sil * (1.0 - silhouette)

        grad_uv = np.zeros((mesh.n_faces, 3, 2))
        grad_depth = np.zeros(mesh.n_faces)
        grad_shade = np.zeros(mesh.n_faces)
        for win in windows:
            rows, cols = win.rows, win.cols
            gx = d_sil_x[rows, cols] * expit(win.x)
            if d_image is not None:
                logit = -np.logaddexp(0.0, -win.x) - depth[win.face] / cfg.gamma
                weight = np.zeros_like(logit)
                local_norm = norm[rows, cols]
                ok = local_norm > 0
                weight[ok] = np.exp(logit[ok] - max_logit[rows, cols][ok]) / local_norm[ok]
                d_logit = d_agg[rows, cols] * weight * (shade[win.face] - aggregate[rows, cols])
                gx = gx + d_logit * expit(-win.x)
                grad_depth[win.face] -= d_logit.sum() / cfg.gamma
                grad_shade[win.face] += np.sum(d_agg[rows, cols] * weight)
            grad_uv[win.face] += np.einsum("hw,hwkc->kc", gx, win.dx_duv)

        # pull pixel-space and shading gradients back to camera-frame vertices
        tri = tri_cam
        z = np.where(tri[:, :, 2] > NEAR_PLANE, tri[:, :, 2], 1.0)
        grad_tri = np.zeros_like(tri)
        grad_tri[:, :, 0] = grad_uv[:, :, 0] * cam.fx / z
        grad_tri[:, :, 1] = grad_uv[:, :, 1] * cam.fy / z
        grad_tri[:, :, 2] = -(
            grad_uv[:, :, 0] * cam.fx * tri[:, :, 0] + grad_uv[:, :, 1] * cam.fy * tri[:, :, 1]
        ) / (z * z)
        grad_tri[:, :, 2] += grad_depth[:, None] / 3.0
        grad_tri += grad_shade[:, None, None] * shade_grad

        grad_cam = np.zeros((mesh.n_vertices, 3))
        np.add.at(grad_cam, mesh.faces, grad_tri)
        return grad_cam @ cam.extrinsics.rotation

    return SoftRenderOutput(image=image, silhouette=silhouette, vjp=vjp)


def soft_silhouette(
    mesh: TriangleMesh, cam: PinholeCamera, cfg: SoftRenderConfig
) -> Tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Soft silhouette (H, W) and its VJP to world-frame vertex cotangents."""
    out = render(mesh, cam, PointLight((0.0, 0.0, 0.0), 0.0), cfg, with_image=False)
    return out.silhouette, lambda d_sil: out.vjp(None, d_sil)


def soft_shade(
    mesh: TriangleMesh, cam: PinholeCamera, light: PointLight, cfg: SoftRenderConfig
) -> Tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """Shaded image (H, W, 3) and its VJP to world-frame vertex cotangents."""
    out = render(mesh, cam, light, cfg)
    return out.image, lambda d_image: out.vjp(d_image, None)


def hard_rasterize(mesh: TriangleMesh, cam: PinholeCamera) -> np.ndarray:
    """Binary coverage mask: point-in-triangle at pixel samples, nearest depth wins."""
    points_cam, uv, visible_faces = _prepare(mesh, cam)
    height, width = cam.height, cam.width
    zbuffer = np.full((height, width), np.inf)
    for face in visible_faces:
        idx = mesh.faces[face]
        face_uv = uv[idx]
        area2 = (face_uv[1, 0] - face_uv[0, 0]) * (face_uv[2, 1] - face_uv[0, 1]) - (
            face_uv[1, 1] - face_uv[0, 1]
        ) * (face_uv[2, 0] - face_uv[0, 0])
        if abs(area2) <= _TINY:
            continue
        bounds = _face_bounds(face_uv, 0.0, width, height)
        if bounds is None:
            continue
        r0, r1, c0, c1 = bounds
        pu, pv = np.meshgrid(np.arange(c0, c1 + 1, dtype=np.float64), np.arange(r0, r1 + 1, dtype=np.float64))
        bary = np.empty((3,) + pu.shape)
        for e in range(3):
            a, b = face_uv[(e + 1) % 3], face_uv[(e + 2) % 3]
            bary[e] = ((b[0] - a[0]) * (pv - a[1]) - (b[1] - a[1]) * (pu - a[0])) / area2
        inside = np.all(bary >= 0.0, axis=0)
        if not np.any(inside):
            continue
        depth = np.tensordot(points_cam[idx, 2], bary, axes=1)
        window = zbuffer[r0 : r1 + 1, c0 : c1 + 1]
        nearer = inside & (depth < window)
        window[nearer] = depth[nearer]
    return np.isfinite(zbuffer)
