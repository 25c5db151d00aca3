"""
Similarity objectives between observed and rendered feature maps.

``acs_loss`` is the attention-masked channel-wise cosine similarity, normalized by
the full image area and subtracted from 1. ``smooth_l1_loss`` is the pixel-level
alternative. Both return the loss and a VJP w.r.t. the rendered side only; the
attention map is treated as a constant.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import DimensionMismatch, ValidationError
from .features import FeatureMap

logger = logging.getLogger(__name__)

NORM_EPS = 1e-12
DEFAULT_THRESHOLD = 0.5
DEFAULT_BETA = 1.0
_REFERENCE_DIAGONAL = 400.0  # 320×240
_REFERENCE_RADIUS = 11


@dataclass(frozen=True)
class AttentionMap:
    """Binary H×W region of interest, the dilated thresholded silhouette."""

    data: np.ndarray
    dilation_radius: int = 0

    def __post_init__(self):
        data = np.asarray(self.data).astype(bool)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def area(self) -> int:
        return int(self.data.sum())

    @classmethod
    def full(cls, height: int, width: int) -> "AttentionMap":
        return cls(np.ones((height, width), dtype=bool))


def default_dilation_radius(width: int, height: int) -> int:
    """11 px at 320×240, scaled with the image diagonal."""
    return int(round(_REFERENCE_RADIUS * np.hypot(width, height) / _REFERENCE_DIAGONAL))


def disc(radius: int) -> np.ndarray:
    """Euclidean disc structuring element of the given radius."""
    k = np.arange(-radius, radius + 1)
    return (k[:, None] ** 2 + k[None, :] ** 2) <= radius * radius


def dilate_silhouette(sil: np.ndarray, threshold: float = DEFAULT_THRESHOLD, radius: int = 0) -> AttentionMap:
    if radius < 0:
        raise ValidationError(f"dilation radius must be >= 0, got {radius}")
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {threshold}")
    mask = np.asarray(sil) >= threshold
    if radius > 0 and mask.any():
        mask = ndimage.binary_dilation(mask, structure=disc(radius))
    return AttentionMap(mask, radius)


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"shape mismatch: {a.shape} vs {b.shape}")


def acs_loss(
    f_obs: FeatureMap, f_ren: FeatureMap, att: AttentionMap
) -> Tuple[float, Callable[[float], np.ndarray]]:
    """``1 - sum(cos(F_I, F_R) * Att) / (w * h)``; the VJP maps d_loss to a C×H×W cotangent on ``f_ren``."""
    a, b = f_obs.data, f_ren.data
    _check_shapes(a, b)
    if att.data.shape != a.shape[1:]:
        raise DimensionMismatch(f"attention map {att.data.shape} vs feature maps {a.shape[1:]}")
    height, width = a.shape[1:]
    area = float(height * width)

    norm_a = np.linalg.norm(a, axis=0)
    norm_b = np.linalg.norm(b, axis=0)
    valid = (norm_a >= NORM_EPS) & (norm_b >= NORM_EPS)
    safe_a = np.where(valid, norm_a, 1.0)
    safe_b = np.where(valid, norm_b, 1.0)
    sim = np.where(valid, np.sum(a * b, axis=0) / (safe_a * safe_b), 0.0)
    weight = att.data * valid
    loss = 1.0 - float(np.sum(sim * weight)) / area

    def vjp(d_loss: float = 1.0) -> np.ndarray:
        grad = a / (safe_a * safe_b) - sim * b / (safe_b * safe_b)
        return -float(d_loss) * grad * (weight / area)

    return loss, vjp


def smooth_l1_loss(
    pred: np.ndarray, target: np.ndarray, beta: float = DEFAULT_BETA
) -> Tuple[float, Callable[[float], np.ndarray]]:
    """Mean Huber-style smooth-L1 of ``pred - target``; the VJP is w.r.t. ``pred``."""
    # the alignment loop passes C×H×W feature stacks here: the rendered stack stands in for a
    # per-pixel prediction map, and an H×W map is accepted unchanged
    if not beta > 0:
        raise ValidationError(f"beta must be > 0, got {beta}")
    pred = np.asarray(pred.data if isinstance(pred, FeatureMap) else pred, dtype=np.float64)
    target = np.asarray(target.data if isinstance(target, FeatureMap) else target, dtype=np.float64)
    _check_shapes(pred, target)
    e = pred - target
    abs_e = np.abs(e)
    quadratic = abs_e < beta
    per_element = np.where(quadratic, 0.5 * e * e / beta, abs_e - 0.5 * beta)
    loss = float(per_element.mean())

    def vjp(d_loss: float = 1.0) -> np.ndarray:
        grad = np.where(quadratic, e / beta, np.sign(e))
        return float(d_loss) * grad / e.size

    return loss, vjp


@dataclass(frozen=True)
class LossConfig:
    """Attention threshold, dilation radius (``None`` scales with the image) and smooth-L1 beta."""

    threshold: float = DEFAULT_THRESHOLD
    dilation_radius: Optional[int] = None
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValidationError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.dilation_radius is not None and self.dilation_radius < 0:
            raise ValidationError(f"dilation_radius must be >= 0, got {self.dilation_radius}")
        if not self.beta > 0:
            raise ValidationError(f"beta must be > 0, got {self.beta}")

    def radius_for(self, width: int, height: int) -> int:
        if self.dilation_radius is None:
            return default_dilation_radius(width, height)
        return int(self.dilation_radius)
