"""
Segmentation and kinematics metrics, per-frame records and per-domain summaries.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd
from tabulate import tabulate

from .exceptions import DimensionMismatch, EmptyList, IoError, LengthMismatch, ValidationError
from .kinematics import JointConfig

logger = logging.getLogger(__name__)

SUMMARY_METRICS = ("dice_initial", "dice_final", "mae_initial_deg", "mae_final_deg", "iterations")
DEFAULT_DICE_BINS = (0.0, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)


@dataclass
class EvalRecord:
    """Per-frame evaluation outcome."""

    frame_id: int
    dice_initial: float
    dice_final: float
    mae_initial_deg: float
    mae_final_deg: float
    iterations: int
    domain: str
    prismatic_initial_mm: float = 0.0
    prismatic_final_mm: float = 0.0
    error_deg: float = 0.0


def dice(pred: np.ndarray, gt: np.ndarray) -> float:
    """2|P∩G| / (|P| + |G|), defined as 1.0 when both masks are empty."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    total = int(pred.sum()) + int(gt.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / total


def _joint_difference(a: JointConfig, b: JointConfig) -> np.ndarray:
    if len(a) != len(b):
        raise LengthMismatch(f"joint configurations differ in length: {len(a)} vs {len(b)}")
    return np.abs(np.asarray(a.values) - np.asarray(b.values))


def joint_mae(a: JointConfig, b: JointConfig) -> float:
    """Mean absolute revolute-joint difference in degrees (prismatic joints excluded)."""
    diff = _joint_difference(a, b)
    mask = a.revolute_mask
    if not mask.any():
        return 0.0
    return float(np.rad2deg(diff[mask]).mean())


def prismatic_mae_mm(a: JointConfig, b: JointConfig) -> float:
    """Mean absolute prismatic-joint difference in millimetres (0 when the chain has none)."""
    diff = _joint_difference(a, b)
    mask = ~a.revolute_mask
    if not mask.any():
        return 0.0
    return float(1000.0 * diff[mask].mean())


def records_to_frame(records: Sequence[EvalRecord]) -> pd.DataFrame:
    if not records:
        raise EmptyList("no evaluation records")
    return pd.DataFrame([asdict(r) for r in records])


def write_records_csv(records: Sequence[EvalRecord], path: str) -> str:
    try:
        records_to_frame(records).sort_values(["domain", "frame_id"]).to_csv(path, index=False)
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    return path


def read_records_csv(path: str) -> List[EvalRecord]:
    try:
        df = pd.read_csv(path)
    except (OSError, pd.errors.EmptyDataError) as e:
        raise IoError(f"cannot read {path}: {e}") from e
    names = [f.name for f in fields(EvalRecord)]
    df = df[[n for n in names if n in df.columns]].copy()
    df["domain"] = df["domain"].astype(str)
    return [EvalRecord(**row) for row in df.to_dict(orient="records")]


def aggregate(records: Sequence[EvalRecord]) -> Dict[str, Dict[str, Dict[str, float]]]:
    """Per-domain mean and population std of every metric: ``{domain: {metric: {mean, std}}}``."""
    df = records_to_frame(records)
    grouped = df.groupby("domain", sort=True)[list(SUMMARY_METRICS)]
    means = grouped.mean()
    stds = grouped.std(ddof=0)
    counts = grouped.size()
    summary: Dict[str, Dict[str, Dict[str, float]]] = {}
    for domain in means.index:
        summary[str(domain)] = {
            metric: {"mean": float(means.loc[domain, metric]), "std": float(stds.loc[domain, metric])}
            for metric in SUMMARY_METRICS
        }
        summary[str(domain)]["frames"] = {"mean": float(counts.loc[domain]), "std": 0.0}
    return summary


def format_mean_std(entry: Dict[str, float], scale: float = 1.0, digits: int = 1) -> str:
    return f"{entry['mean'] * scale:.{digits}f} ± {entry['std'] * scale:.{digits}f}"


def summary_rows(summary: Dict[str, Dict[str, Dict[str, float]]]) -> List[List[str]]:
    """Dice in percent and MAE in degrees, formatted ``mean ± std`` as benchmark tables print them."""
    rows = []
    for domain, metrics in summary.items():
        rows.append(
            [
                domain,
                str(int(metrics["frames"]["mean"])),
                format_mean_std(metrics["dice_initial"], 100.0),
                format_mean_std(metrics["dice_final"], 100.0),
                format_mean_std(metrics["mae_initial_deg"], digits=2),
                format_mean_std(metrics["mae_final_deg"], digits=2),
                format_mean_std(metrics["iterations"]),
            ]
        )
    return rows


SUMMARY_HEADERS = [
    "Domain",
    "Frames",
    "Dice initial",
    "Dice final",
    "MAE initial (deg)",
    "MAE final (deg)",
    "Iterations",
]


def summary_to_text(summary: Dict[str, Dict[str, Dict[str, float]]]) -> str:
    return tabulate(summary_rows(summary), headers=SUMMARY_HEADERS, tablefmt="github")


def initial_dice_bins(records: Sequence[EvalRecord], edges: Sequence[float] = DEFAULT_DICE_BINS) -> Dict[str, Any]:
    """Mean final Dice per initial-Dice bin, plus the Spearman correlation between the two.

    Bins are ``[lo, hi)`` except the last, which also holds ``hi`` so Dice = 1.0 is counted.
    """
    df = records_to_frame(records)
    edges = list(edges)
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValidationError(f"bin edges must be strictly increasing, got {edges}")
    df["bin"] = np.digitize(df["dice_initial"].to_numpy(), edges[1:-1])
    bins = []
    for k, (lo, hi) in enumerate(zip(edges, edges[1:])):
        group = df[df["bin"] == k]
        bins.append(
            {
                "lo": float(lo),
                "hi": float(hi),
                "frames": int(len(group)),
                "dice_final_mean": float(group["dice_final"].mean()) if len(group) else None,
            }
        )
    rho = df["dice_initial"].corr(df["dice_final"], method="spearman") if len(df) > 1 else float("nan")
    return {"bins": bins, "spearman": None if pd.isna(rho) else float(rho)}
