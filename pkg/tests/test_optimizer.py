"""Tests for loss evaluation, gradients and the alignment loop."""

import numpy as np
import pytest

from kinalign.exceptions import ConfigError, DimensionMismatch
from kinalign.features import FeatureExtractorSpec, FeatureMap, extract_features
from kinalign.kinematics import pose_meshes
from kinalign.losses import LossConfig
from kinalign.metrics import dice, joint_mae
from kinalign.optimizer import (
    ObservedFeatureCache,
    OptimizeSpec,
    Target,
    align,
    evaluate_loss,
    segment,
)
from kinalign.rasterizer import hard_rasterize
from kinalign.scenegen import perturb_joints


def _spec(render_config, **kwargs):
    return OptimizeSpec(renderer=render_config, **kwargs)


def _fd_gradient(loss_at, n, h):
    fd = np.zeros(n)
    for k in range(n):
        step = np.zeros(n)
        step[k] = h
        fd[k] = (loss_at(step) - loss_at(-step)) / (2 * h)
    return fd


def test_default_step_sizes():
    """Test the per-target default step sizes."""
    assert OptimizeSpec().step_size == pytest.approx(2e-3)
    assert OptimizeSpec(target="base_frame").step_size == pytest.approx(1e-3)
    assert OptimizeSpec(target="camera_extrinsics").step_size == pytest.approx(1e-3)
    assert OptimizeSpec(step_size=0.5).step_size == 0.5
    assert OptimizeSpec().gradient_scale == "initial"


@pytest.mark.parametrize(
    "kwargs",
    [
        {"target": "wrist"},
        {"loss": "l2"},
        {"step_size": 0.0},
        {"max_iters": 0},
        {"convergence_eps": -1.0},
        {"gradient_scale": "adam"},
    ],
)
def test_invalid_spec_rejected(kwargs):
    """Test that invalid optimizer settings are configuration errors."""
    with pytest.raises(ConfigError):
        OptimizeSpec(**kwargs)


def test_joint_gradient_smooth_l1_matches_finite_differences(arm_problem, arm_render_config):
    """Test the end-to-end joint gradient of the pixel-level loss."""
    spec = _spec(arm_render_config, loss="smooth_l1")
    state, observed, bg = arm_problem["measured"], arm_problem["observed"], arm_problem["background"]
    _, grad = evaluate_loss(state, observed, bg, spec)

    def loss_at(step):
        return evaluate_loss(state.with_joints(state.joints.values + step), observed, bg, spec)[0]

    fd = _fd_gradient(loss_at, 2, 1e-6)
    np.testing.assert_allclose(grad, fd, rtol=1e-3, atol=1e-3 * np.abs(fd).max())


def test_joint_gradient_acs_matches_finite_differences(arm_problem, arm_render_config):
    """Test the end-to-end joint gradient of the attention-masked cosine loss."""
    spec = _spec(arm_render_config)
    state, observed, bg = arm_problem["measured"], arm_problem["observed"], arm_problem["background"]
    loss, grad = evaluate_loss(state, observed, bg, spec)
    assert 0.0 <= loss <= 2.0

    def loss_at(step):
        return evaluate_loss(state.with_joints(state.joints.values + step), observed, bg, spec)[0]

    fd = _fd_gradient(loss_at, 2, 1e-6)
    np.testing.assert_allclose(grad, fd, rtol=1e-3, atol=1e-3 * np.abs(fd).max())


def test_base_frame_gradient_matches_finite_differences(arm_problem, arm_render_config):
    """Test the base-frame gradient under left retraction."""
    spec = _spec(arm_render_config, target="base_frame", loss="smooth_l1")
    state, observed, bg = arm_problem["measured"], arm_problem["observed"], arm_problem["background"]
    _, grad = evaluate_loss(state, observed, bg, spec)
    assert grad.shape == (6,)

    def loss_at(step):
        moved = state.with_base(state.chain.base.retract(step))
        return evaluate_loss(moved, observed, bg, spec)[0]

    fd = _fd_gradient(loss_at, 6, 1e-7)
    np.testing.assert_allclose(grad, fd, rtol=1e-3, atol=1e-3 * np.abs(fd).max())


def test_camera_gradient_matches_finite_differences(arm_problem, arm_render_config):
    """Test the camera-extrinsics gradient under left retraction."""
    spec = _spec(arm_render_config, target="camera_extrinsics", loss="smooth_l1")
    state, observed, bg = arm_problem["measured"], arm_problem["observed"], arm_problem["background"]
    _, grad = evaluate_loss(state, observed, bg, spec)

    def loss_at(step):
        moved = state.with_camera_extrinsics(state.camera.extrinsics.retract(step))
        return evaluate_loss(moved, observed, bg, spec)[0]

    fd = _fd_gradient(loss_at, 6, 1e-7)
    np.testing.assert_allclose(grad, fd, rtol=1e-3, atol=1e-3 * np.abs(fd).max())


def test_single_iteration_trace(arm_problem, arm_render_config):
    """Test that one step records the initial and the stepped loss."""
    spec = _spec(arm_render_config, max_iters=1)
    result = align(arm_problem["measured"], arm_problem["observed"], arm_problem["background"], spec)
    assert len(result.loss_trace) == 2
    assert result.iterations_run == 1
    assert result.best_loss == min(result.loss_trace)
    assert result.loss_trace[result.best_iteration] == result.best_loss


def test_best_iterate_is_reported(arm_problem, arm_render_config):
    """Test that the returned state and mask belong to the lowest loss in the trace."""
    seen = []
    spec = _spec(arm_render_config, max_iters=5)
    result = align(
        arm_problem["measured"], arm_problem["observed"], arm_problem["background"], spec,
        on_iteration=lambda i, state, loss: seen.append((i, state, loss)),
    )
    assert [i for i, _, _ in seen] == list(range(len(result.loss_trace)))
    assert [loss for _, _, loss in seen] == result.loss_trace
    best_state = seen[result.best_iteration][1]
    np.testing.assert_array_equal(result.best_state.joints.values, best_state.joints.values)
    assert result.best_loss <= result.loss_trace[0]
    assert result.mask.dtype == bool
    assert result.mask.shape == (48, 64)


def test_convergence_stops_after_three_flat_steps(arm_problem, arm_render_config):
    """Test the patience rule with a loose tolerance."""
    spec = _spec(arm_render_config, max_iters=50, convergence_eps=10.0)
    result = align(arm_problem["measured"], arm_problem["observed"], arm_problem["background"], spec)
    assert result.converged
    assert len(result.loss_trace) == 4


def test_joint_steps_respect_limits(arm_problem, arm_render_config):
    """Test that clamped joint updates never leave the limits."""
    spec = _spec(arm_render_config, max_iters=3, step_size=50.0)
    seen = []
    align(
        arm_problem["measured"], arm_problem["observed"], arm_problem["background"], spec,
        on_iteration=lambda i, state, loss: seen.append(state),
    )
    chain = arm_problem["measured"].chain
    assert all(chain.within_limits(state.joints) for state in seen)


def test_camera_target_leaves_joints_alone(arm_problem, arm_render_config):
    """Test that optimizing the camera only moves the extrinsics."""
    spec = _spec(arm_render_config, target="camera_extrinsics", max_iters=2)
    measured = arm_problem["measured"]
    result = align(measured, arm_problem["observed"], arm_problem["background"], spec)
    np.testing.assert_array_equal(result.best_state.joints.values, measured.joints.values)
    data = result.to_dict("masks/000000_mask.png")
    assert data["target"] == "camera_extrinsics"
    assert len(data["final_extrinsics"]) == 16
    assert data["mask"] == "masks/000000_mask.png"


def test_observed_shape_must_match_camera(arm_problem, arm_render_config):
    """Test that an observed image of the wrong size is rejected."""
    with pytest.raises(DimensionMismatch):
        evaluate_loss(
            arm_problem["measured"], np.zeros((10, 10, 3)), arm_problem["background"], _spec(arm_render_config)
        )


def test_observed_feature_cache(arm_problem):
    """Test that observed features are computed once per image and extractor."""
    cache = ObservedFeatureCache()
    spec = FeatureExtractorSpec()
    first = cache.get(arm_problem["observed"], spec)
    second = cache.get(arm_problem["observed"].copy(), spec)
    assert first is second
    assert (cache.hits, cache.misses) == (1, 1)
    cache.get(arm_problem["observed"], FeatureExtractorSpec("identity"))
    assert len(cache) == 2


def test_state_error_and_blocks(arm_problem):
    """Test the per-target parameter blocks and errors."""
    gt, measured = arm_problem["gt"], arm_problem["measured"]
    np.testing.assert_allclose(measured.error(gt, Target.JOINTS), [0.03, -0.04], atol=1e-12)
    assert gt.block(Target.BASE_FRAME).shape == (6,)


def test_segment_is_hard_mask(arm_problem):
    """Test that segmentation without optimization is the hard rasterization."""
    state = arm_problem["gt"]
    mask = segment(state)
    np.testing.assert_array_equal(mask, hard_rasterize(pose_meshes(state.chain, state.joints), state.camera))
    assert mask.any()



def test_mask_is_exact_rasterization_of_best_state(arm_problem, arm_render_config):
    """Test that the reported mask is the hard mask of the best iterate, not a thresholded soft render."""
    spec = _spec(arm_render_config, max_iters=4)
    result = align(arm_problem["measured"], arm_problem["observed"], arm_problem["background"], spec)
    np.testing.assert_array_equal(result.mask, segment(result.best_state))


def test_ground_truth_start_stays_put(arm_problem, arm_render_config):
    """Test that alignment started at the ground truth returns the ground truth."""
    gt = arm_problem["gt"]
    spec = _spec(arm_render_config, max_iters=10)
    result = align(gt, arm_problem["observed"], arm_problem["background"], spec)
    assert joint_mae(result.best_state.joints, gt.joints) < 1e-3
    assert dice(result.mask, segment(gt)) == 1.0


def test_ground_truth_has_the_lowest_loss(arm_problem, arm_render_config):
    """Test that every joint perturbation of at least half a degree scores worse than the ground truth."""
    gt, observed, bg = arm_problem["gt"], arm_problem["observed"], arm_problem["background"]
    spec = _spec(arm_render_config, loss_params=LossConfig(dilation_radius=200))
    loss_gt, _ = evaluate_loss(gt, observed, bg, spec)
    rng = np.random.default_rng(3)
    for _ in range(100):
        offset = np.deg2rad(rng.uniform(0.5, 3.0, 2) * rng.choice([-1.0, 1.0], 2))
        loss, _ = evaluate_loss(gt.with_joints(gt.joints.values + offset), observed, bg, spec)
        assert loss > loss_gt


@pytest.mark.parametrize("scale", ["none", "initial"])
def test_first_step(arm_problem, arm_render_config, scale):
    """Test the first update under both gradient scalings."""
    measured, observed, bg = arm_problem["measured"], arm_problem["observed"], arm_problem["background"]
    spec = _spec(arm_render_config, max_iters=1, gradient_scale=scale)
    _, grad = evaluate_loss(measured, observed, bg, spec)
    seen = []
    align(measured, observed, bg, spec, on_iteration=lambda i, state, loss: seen.append(state))
    expected = -spec.step_size * (grad if scale == "none" else np.sign(grad))
    np.testing.assert_allclose(seen[1].joints.values - measured.joints.values, expected, rtol=1e-12, atol=1e-15)


def test_base_target_leaves_joints_and_camera_alone(arm_problem, arm_render_config):
    """Test that optimizing the base frame only moves the base."""
    spec = _spec(arm_render_config, target="base_frame", max_iters=3)
    measured = arm_problem["measured"]
    seen = []
    align(
        measured, arm_problem["observed"], arm_problem["background"], spec,
        on_iteration=lambda i, state, loss: seen.append(state),
    )
    for state in seen:
        np.testing.assert_array_equal(state.joints.values, measured.joints.values)
        np.testing.assert_array_equal(state.camera.extrinsics.to_list(), measured.camera.extrinsics.to_list())
    assert not np.array_equal(seen[-1].chain.base.to_list(), measured.chain.base.to_list())


def test_supplied_observed_features(arm_problem, arm_render_config):
    """Test that a supplied feature stack replaces extraction on the observed image."""
    measured, observed, bg = arm_problem["measured"], arm_problem["observed"], arm_problem["background"]
    spec = _spec(arm_render_config)
    features = extract_features(observed, spec.extractor)
    loss, grad = evaluate_loss(measured, observed, bg, spec)
    loss_supplied, grad_supplied = evaluate_loss(measured, observed, bg, spec, observed_features=features)
    assert loss_supplied == loss
    np.testing.assert_array_equal(grad_supplied, grad)

    flipped = FeatureMap(features.data[::-1])
    assert evaluate_loss(measured, observed, bg, spec, observed_features=flipped)[0] != loss

    with pytest.raises(DimensionMismatch):
        evaluate_loss(measured, observed, bg, spec, observed_features=FeatureMap(np.ones((9, 10, 10))))


def test_supplied_features_seed_the_cache(arm_problem, arm_render_config):
    """Test that a supplied feature stack is what the cache later returns for that image."""
    spec = _spec(arm_render_config, max_iters=2)
    features = FeatureMap(np.ones((9, 48, 64)))
    cache = ObservedFeatureCache()
    align(
        arm_problem["measured"], arm_problem["observed"], arm_problem["background"], spec,
        cache=cache, observed_features=features,
    )
    assert (cache.hits, cache.misses) == (0, 0)
    assert cache.get(arm_problem["observed"], spec.extractor) is features


def test_observed_features_extracted_once_per_run(arm_problem, arm_render_config):
    """Test that a run looks up the observed features a single time."""
    spec = _spec(arm_render_config, max_iters=5)
    cache = ObservedFeatureCache()
    align(arm_problem["measured"], arm_problem["observed"], arm_problem["background"], spec, cache=cache)
    assert (cache.hits, cache.misses) == (0, 1)


def test_planar_arm_recovers_joint_error(arm_problem, arm_render_config):
    """Test that alignment at least halves the joint error of perturbed planar-arm states."""
    gt, observed, bg = arm_problem["gt"], arm_problem["observed"], arm_problem["background"]
    spec = _spec(arm_render_config, max_iters=60)
    starts = [arm_problem["measured"]]
    starts += [gt.with_joints(perturb_joints(gt.joints, 2.0, seed).values) for seed in range(3)]
    before, after = [], []
    for start in starts:
        result = align(start, observed, bg, spec)
        before.append(joint_mae(start.joints, gt.joints))
        after.append(joint_mae(result.best_state.joints, gt.joints))
    assert np.mean(after) < np.mean(before) / 2


def test_unscaled_steps_barely_move(arm_problem, arm_render_config):
    """Test that the unscaled update at the default step size stays far below the scaled one."""
    measured, observed, bg = arm_problem["measured"], arm_problem["observed"], arm_problem["background"]
    moved = {}
    for scale in ("none", "initial"):
        result = align(measured, observed, bg, _spec(arm_render_config, max_iters=5, gradient_scale=scale))
        moved[scale] = np.abs(result.loss_trace[-1] - result.loss_trace[0])
    assert moved["none"] < moved["initial"]
