"""Tests for Dice, joint errors, record files and summaries."""

import numpy as np
import pytest

from kinalign.exceptions import DimensionMismatch, EmptyList, IoError, LengthMismatch, ValidationError
from kinalign.kinematics import JointConfig, JointKind
from kinalign.metrics import (
    EvalRecord,
    aggregate,
    dice,
    initial_dice_bins,
    joint_mae,
    prismatic_mae_mm,
    read_records_csv,
    summary_to_text,
    write_records_csv,
)

R, P = JointKind.REVOLUTE, JointKind.PRISMATIC


def _record(frame_id, dice_initial, dice_final, domain="regular", iterations=10):
    return EvalRecord(
        frame_id=frame_id,
        dice_initial=dice_initial,
        dice_final=dice_final,
        mae_initial_deg=1.0,
        mae_final_deg=0.5,
        iterations=iterations,
        domain=domain,
    )


def test_dice_cases():
    """Test identical, disjoint, empty and half-overlapping masks."""
    a = np.zeros((4, 4), dtype=bool)
    a[:2] = True
    b = np.zeros((4, 4), dtype=bool)
    b[2:] = True
    assert dice(a, a) == 1.0
    assert dice(a, b) == 0.0
    assert dice(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    c = np.zeros((4, 4), dtype=bool)
    c[:1] = True
    assert dice(a, c) == pytest.approx(2 * 4 / (8 + 4))
    d = np.zeros((4, 4), dtype=bool)
    d[:1] = True
    d[2:3] = True
    assert dice(a, d) == pytest.approx(0.5)


def test_dice_shape_mismatch():
    """Test that masks must have the same shape."""
    with pytest.raises(DimensionMismatch):
        dice(np.zeros((3, 4)), np.zeros((4, 3)))


def test_joint_mae_excludes_prismatic():
    """Test that the degree MAE only averages revolute joints."""
    a = JointConfig(np.array([0.0, 0.0, 0.0]), (R, P, R))
    b = JointConfig(np.array([np.deg2rad(1.0), 0.5, np.deg2rad(-3.0)]), (R, P, R))
    assert joint_mae(a, b) == pytest.approx(2.0)
    assert prismatic_mae_mm(a, b) == pytest.approx(500.0)


def test_joint_mae_all_prismatic_and_length_mismatch():
    """Test chains without revolute joints and configurations of different length."""
    a = JointConfig(np.array([0.0]), (P,))
    b = JointConfig(np.array([0.002]), (P,))
    assert joint_mae(a, b) == 0.0
    assert prismatic_mae_mm(a, b) == pytest.approx(2.0)
    with pytest.raises(LengthMismatch):
        joint_mae(a, JointConfig(np.zeros(2), (P, P)))


def test_aggregate_mean_and_population_std():
    """Test per-domain mean and std with ddof=0."""
    records = [_record(0, 0.6, 0.8), _record(1, 0.8, 0.9), _record(0, 0.5, 0.7, domain="smoke")]
    summary = aggregate(records)
    assert sorted(summary) == ["regular", "smoke"]
    assert summary["regular"]["dice_final"]["mean"] == pytest.approx(0.85)
    assert summary["regular"]["dice_initial"]["std"] == pytest.approx(0.1)
    assert summary["smoke"]["dice_final"]["std"] == 0.0
    assert summary["regular"]["frames"]["mean"] == 2


def test_aggregate_empty():
    """Test that aggregating nothing is an error."""
    with pytest.raises(EmptyList):
        aggregate([])


def test_records_csv_round_trip(tmp_path):
    """Test writing and reading per-frame records."""
    records = [_record(1, 0.7, 0.9, domain="blood"), _record(0, 0.6, 0.8)]
    path = write_records_csv(records, str(tmp_path / "records.csv"))
    loaded = read_records_csv(path)
    assert [r.frame_id for r in loaded] == [1, 0]
    assert loaded[0].domain == "blood"
    assert loaded[1].dice_final == pytest.approx(0.8)


def test_read_missing_csv(tmp_path):
    """Test that a missing records file is an I/O error."""
    with pytest.raises(IoError):
        read_records_csv(str(tmp_path / "nope.csv"))


def test_initial_dice_bins():
    """Test binning by initial Dice (Dice 1.0 lands in the top bin) and the rank correlation."""
    records = [_record(0, 0.3, 0.6), _record(1, 0.55, 0.7), _record(2, 0.95, 0.97), _record(3, 1.0, 0.99)]
    result = initial_dice_bins(records)
    bins = result["bins"]
    assert [b["frames"] for b in bins] == [1, 1, 0, 0, 0, 2]
    assert bins[2]["dice_final_mean"] is None
    assert bins[-1]["dice_final_mean"] == pytest.approx(0.98)
    assert result["spearman"] == pytest.approx(1.0)


def test_initial_dice_bins_validation():
    """Test that bin edges must increase and a single record has no correlation."""
    with pytest.raises(ValidationError):
        initial_dice_bins([_record(0, 0.5, 0.5)], edges=(0.0, 0.5, 0.5, 1.0))
    assert initial_dice_bins([_record(0, 0.5, 0.5)])["spearman"] is None


def test_summary_text():
    """Test the printed summary table."""
    text = summary_to_text(aggregate([_record(0, 0.6, 0.8), _record(1, 0.8, 0.9)]))
    assert "| Domain" in text
    assert "regular" in text
    assert "85.0 ± 5.0" in text


def _brute_dice(pred, gt):
    inter = total = 0
    for p, g in zip(pred.ravel(), gt.ravel()):
        inter += int(p and g)
        total += int(p) + int(g)
    return 1.0 if total == 0 else 2.0 * inter / total


def test_dice_against_pixel_loop_on_random_masks():
    """Test Dice against an explicit pixel count, and its symmetry, on random masks."""
    rng = np.random.default_rng(30)
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, size=2))
        pred = rng.random(shape) < rng.random()
        gt = rng.random(shape) < rng.random()
        assert dice(pred, gt) == pytest.approx(_brute_dice(pred, gt), abs=1e-12)
        assert dice(pred, gt) == dice(gt, pred)
        assert 0.0 <= dice(pred, gt) <= 1.0


def test_joint_mae_against_loop_and_triangle_inequality():
    """Test the degree MAE against an explicit loop and check it behaves as a distance."""
    rng = np.random.default_rng(31)
    for _ in range(100):
        n = int(rng.integers(1, 7))
        kinds = (R,) + tuple(R if revolute else P for revolute in rng.random(n - 1) < 0.6)
        a, b, c = (JointConfig(rng.normal(size=n), kinds) for _ in range(3))
        diffs = [abs(x - y) * 180.0 / np.pi for x, y, k in zip(a.values, b.values, kinds) if k is R]
        assert joint_mae(a, b) == pytest.approx(sum(diffs) / len(diffs), rel=1e-12)
        assert joint_mae(a, b) == pytest.approx(joint_mae(b, a), rel=1e-12)
        assert joint_mae(a, c) <= joint_mae(a, b) + joint_mae(b, c) + 1e-9
        assert joint_mae(a, a) == 0.0
