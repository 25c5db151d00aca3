"""
Analysis-by-synthesis alignment loop.

Starting from the measured kinematic state, each iteration poses the link meshes,
soft-renders them, composites the render over the mean background, extracts
features and scores them against the observed image's features. The gradient of
that loss w.r.t. the selected parameter block (joint values, robot base frame or
camera extrinsics) is assembled by chaining the per-stage VJPs, and a constant-size
gradient step is taken, with each component divided by a scale fixed at the first
iterate. The lowest-loss iterate is reported together with its exact mask.
"""

import hashlib
import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np

from .exceptions import ConfigError, DimensionMismatch, NonFiniteLoss
from .features import FeatureExtractorSpec, FeatureMap, MeanBackground, compose_hybrid, extract_features, features_vjp
from .geomcore import PinholeCamera, PointLight, RigidTransform
from .kinematics import DHChain, JointConfig, pose_meshes, pose_meshes_with_links, vertex_jacobian_vjp
from .losses import LossConfig, acs_loss, dilate_silhouette, smooth_l1_loss
from .rasterizer import SoftRenderConfig, hard_rasterize, render

logger = logging.getLogger(__name__)

CONVERGENCE_PATIENCE = 3
# below this the first gradient carries no direction and the component is left as it is
GRADIENT_FLOOR = 1e-10


class Target(str, Enum):
    JOINTS = "joints"
    BASE_FRAME = "base_frame"
    CAMERA_EXTRINSICS = "camera_extrinsics"


class LossKind(str, Enum):
    ACS = "acs"
    SMOOTH_L1 = "smooth_l1"


class GradientScale(str, Enum):
    """How raw gradients map to parameter steps.

    ``initial`` divides every component by the magnitude of the first gradient and
    caps the scaled value at 1, so ``step_size`` is the largest move per iteration
    and a component whose loss response is weak (a wrist behind a large shaft) moves
    as readily as a strong one. The scale is fixed for the whole run. ``none`` is the
    unscaled update ``-step_size * gradient``.
    """

    INITIAL = "initial"
    NONE = "none"


DEFAULT_STEP_SIZES = {
    Target.JOINTS: 2e-3,
    Target.BASE_FRAME: 1e-3,
    Target.CAMERA_EXTRINSICS: 1e-3,
}

# prismatic joints step 0.01 m per degree a revolute joint would take
PRISMATIC_STEP_PER_RADIAN = 0.01 * 180.0 / np.pi


@dataclass(frozen=True)
class KinematicState:
    """Everything the renderer needs: chain (DH, link meshes, base), joints, camera, light."""

    chain: DHChain
    joints: JointConfig
    camera: PinholeCamera
    light: PointLight

    def __post_init__(self):
        if len(self.joints) != self.chain.dof:
            raise DimensionMismatch(f"chain has {self.chain.dof} joints, state carries {len(self.joints)}")

    def with_joints(self, values) -> "KinematicState":
        return KinematicState(self.chain, self.joints.with_values(values), self.camera, self.light)

    def with_base(self, base: RigidTransform) -> "KinematicState":
        return KinematicState(self.chain.with_base(base), self.joints, self.camera, self.light)

    def with_camera_extrinsics(self, extrinsics: RigidTransform) -> "KinematicState":
        return KinematicState(self.chain, self.joints, self.camera.with_extrinsics(extrinsics), self.light)

    def block(self, target: "Target") -> np.ndarray:
        """The optimized parameter block as a flat vector (transforms as axis-angle + translation)."""
        target = Target(target)
        if target is Target.JOINTS:
            return np.array(self.joints.values)
        transform = self.chain.base if target is Target.BASE_FRAME else self.camera.extrinsics
        return np.concatenate([transform.to_axis_angle(), transform.translation])

    def error(self, reference: "KinematicState", target: "Target") -> np.ndarray:
        """Measurement error of this state w.r.t. ``reference`` on one block."""
        return self.block(target) - reference.block(target)


@dataclass(frozen=True)
class OptimizeSpec:
    """What to optimize and how. ``step_size=None`` picks the per-target default."""

    target: str = Target.JOINTS.value
    step_size: Optional[float] = None
    max_iters: int = 100
    loss: str = LossKind.ACS.value
    extractor: FeatureExtractorSpec = field(default_factory=FeatureExtractorSpec)
    convergence_eps: float = 1e-6
    clamp_to_limits: bool = True
    renderer: Optional[SoftRenderConfig] = None
    loss_params: LossConfig = field(default_factory=LossConfig)
    gradient_scale: str = GradientScale.INITIAL.value

    def __post_init__(self):
        try:
            target = Target(self.target)
            loss = LossKind(self.loss)
            scale = GradientScale(self.gradient_scale)
        except ValueError as e:
            raise ConfigError(f"optimizer: {e}") from None
        object.__setattr__(self, "target", target.value)
        object.__setattr__(self, "loss", loss.value)
        object.__setattr__(self, "gradient_scale", scale.value)
        if self.step_size is None:
            object.__setattr__(self, "step_size", DEFAULT_STEP_SIZES[target])
        if not self.step_size > 0:
            raise ConfigError(f"optimizer.step_size must be > 0, got {self.step_size}")
        if int(self.max_iters) < 1:
            raise ConfigError(f"optimizer.max_iters must be >= 1, got {self.max_iters}")
        if self.convergence_eps < 0:
            raise ConfigError(f"optimizer.convergence_eps must be >= 0, got {self.convergence_eps}")

    def render_config(self, camera: PinholeCamera) -> SoftRenderConfig:
        return self.renderer or SoftRenderConfig.default_for(camera.width, camera.height)


class ObservedFeatureCache:
    """F_I per (observed image content, extractor); computed once, shared across threads."""

    def __init__(self, max_entries: int = 64):
        self.max_entries = max_entries
        self._entries: Dict[Tuple[str, str], FeatureMap] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @staticmethod
    def image_key(image: np.ndarray) -> str:
        image = np.ascontiguousarray(image, dtype=np.float64)
        digest = hashlib.sha1(str(image.shape).encode("ascii"))
        digest.update(image.tobytes())
        return digest.hexdigest()

    def put(self, image: np.ndarray, extractor: FeatureExtractorSpec, features: FeatureMap) -> None:
        with self._lock:
            if len(self._entries) >= self.max_entries:
                self._entries.pop(next(iter(self._entries)))
            self._entries[(self.image_key(image), extractor.cache_key())] = features

    def get(self, image: np.ndarray, extractor: FeatureExtractorSpec) -> FeatureMap:
        key = (self.image_key(image), extractor.cache_key())
        with self._lock:
            cached = self._entries.get(key)
            if cached is not None:
                self.hits += 1
                return cached
            self.misses += 1
        features = extract_features(image, extractor)
        self.put(image, extractor, features)
        return features

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class _Evaluation:
    loss: float
    gradient: Optional[np.ndarray]


def _observed_features(
    observed: np.ndarray,
    camera: PinholeCamera,
    spec: OptimizeSpec,
    cache: Optional[ObservedFeatureCache],
    observed_features: Optional[FeatureMap],
) -> FeatureMap:
    """F_I for one run: a supplied stack wins (and seeds the cache), else the cache or the extractor."""
    observed = np.asarray(observed, dtype=np.float64)
    if observed.shape != (camera.height, camera.width, 3):
        raise DimensionMismatch(
            f"observed image {observed.shape} does not match camera {(camera.height, camera.width, 3)}"
        )
    if observed_features is not None:
        if observed_features.shape[1:] != (camera.height, camera.width):
            raise DimensionMismatch(
                f"observed features {observed_features.shape} do not match camera {(camera.height, camera.width)}"
            )
        if cache is not None:
            cache.put(observed, spec.extractor, observed_features)
        return observed_features
    if cache is None:
        return extract_features(observed, spec.extractor)
    return cache.get(observed, spec.extractor)


def _evaluate(
    state: KinematicState,
    f_obs: FeatureMap,
    bg: MeanBackground,
    spec: OptimizeSpec,
    with_gradient: bool = True,
) -> _Evaluation:
    camera = state.camera
    mesh, _ = pose_meshes_with_links(state.chain, state.joints)
    out = render(mesh, camera, state.light, spec.render_config(camera))
    hybrid, hybrid_vjp = compose_hybrid(out, bg)
    f_ren = extract_features(hybrid, spec.extractor)

    if spec.loss == LossKind.ACS.value:
        params = spec.loss_params
        att = dilate_silhouette(out.silhouette, params.threshold, params.radius_for(camera.width, camera.height))
        loss, loss_vjp = acs_loss(f_obs, f_ren, att)
    else:
        loss, loss_vjp = smooth_l1_loss(f_ren, f_obs, spec.loss_params.beta)

    if not with_gradient or not np.isfinite(loss):
        return _Evaluation(loss, None)

    d_hybrid = features_vjp(loss_vjp(1.0), spec.extractor)
    d_image, d_silhouette = hybrid_vjp(d_hybrid)
    d_vertices = out.vjp(d_image, d_silhouette)
    return _Evaluation(loss, _block_gradient(state, mesh.vertices, d_vertices, Target(spec.target)))


def _block_gradient(state: KinematicState, vertices: np.ndarray, d_vertices: np.ndarray, target: Target) -> np.ndarray:
    if target is Target.JOINTS:
        return vertex_jacobian_vjp(state.chain, state.joints, d_vertices)
    if target is Target.BASE_FRAME:
        # every posed vertex moves as v -> Exp(delta) v under a left increment of the base frame
        return np.concatenate([np.cross(vertices, d_vertices).sum(axis=0), d_vertices.sum(axis=0)])
    extrinsics = state.camera.extrinsics
    points_cam = extrinsics.apply(vertices)
    d_cam = d_vertices @ extrinsics.rotation.T
    return np.concatenate([np.cross(points_cam, d_cam).sum(axis=0), d_cam.sum(axis=0)])


def evaluate_loss(
    state: KinematicState,
    observed: np.ndarray,
    bg: MeanBackground,
    spec: OptimizeSpec,
    cache: Optional[ObservedFeatureCache] = None,
    observed_features: Optional[FeatureMap] = None,
) -> Tuple[float, np.ndarray]:
    """Loss of ``state`` against ``observed`` and its gradient w.r.t. ``spec.target``.

    ``observed_features`` replaces the extractor's output on ``observed``, for feature
    stacks computed outside kinalign.
    """
    f_obs = _observed_features(observed, state.camera, spec, cache, observed_features)
    evaluation = _evaluate(state, f_obs, bg, spec)
    return evaluation.loss, evaluation.gradient


def _step_sizes(state: KinematicState, spec: OptimizeSpec) -> np.ndarray:
    target = Target(spec.target)
    if target is not Target.JOINTS:
        return np.full(6, spec.step_size)
    mask = state.joints.revolute_mask
    return np.where(mask, spec.step_size, spec.step_size * PRISMATIC_STEP_PER_RADIAN)


def gradient_scale(gradient: np.ndarray, spec: OptimizeSpec) -> Optional[np.ndarray]:
    """Per-component divisor fixed from the first gradient, or ``None`` for unscaled steps."""
    if spec.gradient_scale == GradientScale.NONE.value:
        return None
    magnitude = np.abs(gradient)
    return np.where(magnitude > GRADIENT_FLOOR, magnitude, np.inf)


def _step(
    state: KinematicState, gradient: np.ndarray, spec: OptimizeSpec, scale: Optional[np.ndarray] = None
) -> KinematicState:
    target = Target(spec.target)
    if scale is None:
        delta = -spec.step_size * gradient
    else:
        delta = -_step_sizes(state, spec) * np.clip(gradient / scale, -1.0, 1.0)
    if target is Target.JOINTS:
        q = state.joints.with_values(state.joints.values + delta)
        if spec.clamp_to_limits:
            q = state.chain.clamp(q)
        return KinematicState(state.chain, q, state.camera, state.light)
    if target is Target.BASE_FRAME:
        return state.with_base(state.chain.base.retract(delta))
    return state.with_camera_extrinsics(state.camera.extrinsics.retract(delta))


@dataclass
class AlignmentResult:
    """Best iterate of one alignment run."""

    best_state: KinematicState
    best_loss: float
    loss_trace: List[float]
    mask: np.ndarray
    iterations_run: int
    initial_state: KinematicState
    best_iteration: int = 0
    converged: bool = False
    target: str = Target.JOINTS.value

    def to_dict(self, mask_path: Optional[str] = None) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "target": self.target,
            "best_loss": self.best_loss,
            "best_iteration": self.best_iteration,
            "iterations_run": self.iterations_run,
            "converged": self.converged,
            "loss_trace": [float(x) for x in self.loss_trace],
            "joint_units": ["deg" if k else "mm" for k in self.initial_state.joints.revolute_mask],
            "initial_joints": self.initial_state.joints.to_report_units(),
            "final_joints": self.best_state.joints.to_report_units(),
            "mask": mask_path,
        }
        if self.target == Target.BASE_FRAME.value:
            data["initial_base"] = self.initial_state.chain.base.to_list()
            data["final_base"] = self.best_state.chain.base.to_list()
        elif self.target == Target.CAMERA_EXTRINSICS.value:
            data["initial_extrinsics"] = self.initial_state.camera.extrinsics.to_list()
            data["final_extrinsics"] = self.best_state.camera.extrinsics.to_list()
        return data


IterationCallback = Callable[[int, KinematicState, float], None]


def align(
    measured: KinematicState,
    observed: np.ndarray,
    bg: MeanBackground,
    spec: OptimizeSpec,
    cache: Optional[ObservedFeatureCache] = None,
    on_iteration: Optional[IterationCallback] = None,
    observed_features: Optional[FeatureMap] = None,
) -> AlignmentResult:
    """Gradient descent from the measured state; returns the lowest-loss iterate.

    ``loss_trace[i]`` is the loss of iterate ``i`` (``loss_trace[0]`` is the measured
    state), so ``max_iters`` steps produce at most ``max_iters + 1`` entries. The
    reported mask is the exact rasterization of the best iterate.
    """
    f_obs = _observed_features(observed, measured.camera, spec, cache, observed_features)
    state = measured
    trace: List[float] = []
    best_state, best_loss, best_iteration = measured, np.inf, 0
    scale: Optional[np.ndarray] = None
    stalled = 0
    converged = False

    for i in range(spec.max_iters + 1):
        last = i == spec.max_iters
        evaluation = _evaluate(state, f_obs, bg, spec, with_gradient=not last)
        bad_gradient = evaluation.gradient is not None and not np.all(np.isfinite(evaluation.gradient))
        if not np.isfinite(evaluation.loss) or bad_gradient:
            raise NonFiniteLoss(f"non-finite loss or gradient at iteration {i}", trace + [evaluation.loss])
        trace.append(evaluation.loss)
        logger.debug(f"Iteration {i}: loss {evaluation.loss:.8f}")
        if on_iteration is not None:
            on_iteration(i, state, evaluation.loss)
        if evaluation.loss < best_loss:
            best_state, best_loss, best_iteration = state, evaluation.loss, i

        if i > 0 and abs(trace[-1] - trace[-2]) < spec.convergence_eps:
            stalled += 1
        else:
            stalled = 0
        if stalled >= CONVERGENCE_PATIENCE:
            converged = True
            break
        if last:
            break
        if i == 0:
            scale = gradient_scale(evaluation.gradient, spec)
        state = _step(state, evaluation.gradient, spec, scale)

    logger.debug(
        f"Alignment finished after {len(trace) - 1} steps, best loss {best_loss:.6f} at iteration {best_iteration}"
    )
    return AlignmentResult(
        best_state=best_state,
        best_loss=float(best_loss),
        loss_trace=trace,
        mask=segment(best_state),
        iterations_run=len(trace) - 1,
        initial_state=measured,
        best_iteration=best_iteration,
        converged=converged,
        target=spec.target,
    )


def segment(state: KinematicState) -> np.ndarray:
    """Hard mask of the posed tool at the given state, with no optimization."""
    return hard_rasterize(pose_meshes(state.chain, state.joints), state.camera)
