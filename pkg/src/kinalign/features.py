"""
Feature extraction for observed and rendered images, hybrid composition and the
dataset mean background.

All built-in extractors are linear in the image, so their VJP does not depend on
the image itself: :func:`features_vjp` is the exact adjoint of
:func:`extract_features` for a given :class:`FeatureExtractorSpec`.
"""

import logging
import os
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Iterable, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .exceptions import ConfigError, DimensionMismatch, EmptyList, UnknownExtractor, ValidationError
from .rasterizer import SoftRenderOutput
from .utils import read_json, read_pfm, write_json, write_pfm

logger = logging.getLogger(__name__)

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
DEFAULT_SCALES = (1.0, 2.0, 4.0)
GAUSSIAN_TRUNCATE = 4.0


class ExtractorKind(str, Enum):
    IDENTITY = "identity"
    FILTERBANK = "filterbank"
    EXTERNAL = "external"


@dataclass(frozen=True)
class FeatureExtractorSpec:
    """Which extractor to run. ``path`` names the kernel-bank sidecar JSON for ``external``."""

    kind: str = ExtractorKind.FILTERBANK.value
    path: Optional[str] = None
    scales: Tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self):
        try:
            kind = ExtractorKind(self.kind)
        except ValueError:
            valid = ", ".join(k.value for k in ExtractorKind)
            raise UnknownExtractor(f"unknown feature extractor {self.kind!r} (expected one of: {valid})") from None
        object.__setattr__(self, "kind", kind.value)
        scales = tuple(float(s) for s in self.scales)
        if not scales or any(s <= 0 for s in scales):
            raise ConfigError(f"filter bank scales must be positive, got {scales}")
        object.__setattr__(self, "scales", scales)
        if kind is ExtractorKind.EXTERNAL and not self.path:
            raise ConfigError("the external extractor needs a path to its kernel bank JSON")

    @property
    def channels(self) -> int:
        if self.kind == ExtractorKind.IDENTITY.value:
            return 3
        if self.kind == ExtractorKind.FILTERBANK.value:
            return 3 * len(self.scales)
        return len(load_kernel_bank(self.path))

    def cache_key(self) -> str:
        return f"{self.kind}:{self.path}:{','.join(repr(s) for s in self.scales)}"


@dataclass(frozen=True)
class FeatureMap:
    """C×H×W feature tensor."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] < 1:
            raise DimensionMismatch(f"feature maps are C×H×W with C >= 1, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.data.shape


@dataclass
class MeanBackground:
    """Pixel-wise running mean of background plates (BG_m)."""

    image: Optional[np.ndarray] = None
    count: int = 0
    _sum: Optional[np.ndarray] = field(default=None, repr=False)

    def add(self, image: np.ndarray) -> None:
        image = _as_rgb(image)
        if self._sum is None:
            self._sum = np.zeros_like(image)
        elif image.shape != self._sum.shape:
            raise DimensionMismatch(
                f"background image {self.count} has shape {image.shape}, expected {self._sum.shape}"
            )
        self._sum += image
        self.count += 1
        self.image = self._sum / self.count

    @classmethod
    def from_image(cls, image: np.ndarray) -> "MeanBackground":
        bg = cls()
        bg.add(image)
        return bg

    @property
    def shape(self) -> Tuple[int, int]:
        if self.image is None:
            raise EmptyList("mean background has no images")
        return self.image.shape[:2]


def _as_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionMismatch(f"expected an H×W×3 image, got shape {image.shape}")
    return image


def mean_background(images: Iterable[np.ndarray]) -> MeanBackground:
    """Per-pixel arithmetic mean of ``images`` (any iterable, consumed once)."""
    bg = MeanBackground()
    for image in images:
        bg.add(image)
    if bg.count == 0:
        raise EmptyList("mean_background needs at least one image")
    logger.debug(f"Mean background over {bg.count} images of shape {bg.image.shape}")
    return bg


def compose_hybrid(
    rendered: SoftRenderOutput, bg: MeanBackground
) -> Tuple[np.ndarray, Callable[[np.ndarray], Tuple[np.ndarray, np.ndarray]]]:
    """Soft alpha-composite of the rendered tool over BG_m.

    Returns the hybrid image and a VJP mapping its cotangent to
    ``(d_image, d_silhouette)``.
    """
    if bg.image is None:
        raise EmptyList("mean background has no images")
    if bg.image.shape != rendered.image.shape:
        raise DimensionMismatch(f"rendered image {rendered.image.shape} vs background {bg.image.shape}")
    alpha = rendered.silhouette[..., None]
    hybrid = alpha * rendered.image + (1.0 - alpha) * bg.image

    def vjp(d_hybrid: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        d_hybrid = np.asarray(d_hybrid, dtype=np.float64)
        d_image = alpha * d_hybrid
        d_silhouette = np.sum(d_hybrid * (rendered.image - bg.image), axis=2)
        return d_image, d_silhouette

    return hybrid, vjp


def gaussian_kernels(sigma: float) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized Gaussian and scale-normalized derivative-of-Gaussian correlation taps."""
    radius = int(np.ceil(GAUSSIAN_TRUNCATE * sigma))
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-0.5 * (k / sigma) ** 2)
    g /= g.sum()
    # correlation taps of d/dx, so a rising step gives a positive response
    dg = sigma * (k / sigma**2) * g
    return g, dg


def _reflect_index(n: int, radius: int) -> np.ndarray:
    return np.pad(np.arange(n), radius, mode="symmetric")


def _correlate1d(x: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    radius = len(taps) // 2
    n = x.shape[axis]
    padded = np.take(x, _reflect_index(n, radius), axis=axis)
    out = ndimage.correlate1d(padded, taps, axis=axis, mode="constant")
    return np.take(out, np.arange(radius, radius + n), axis=axis)


def _correlate1d_adjoint(y: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    radius = len(taps) // 2
    n = y.shape[axis]
    shape = list(y.shape)
    shape[axis] = n + 2 * radius
    embedded = np.zeros(shape)
    index = [slice(None)] * y.ndim
    index[axis] = slice(radius, radius + n)
    embedded[tuple(index)] = y
    spread = ndimage.correlate1d(embedded, taps[::-1], axis=axis, mode="constant")
    folded = np.zeros(np.moveaxis(y, axis, 0).shape)
    np.add.at(folded, _reflect_index(n, radius), np.moveaxis(spread, axis, 0))
    return np.moveaxis(folded, 0, axis)


def _correlate2d(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    ry, rx = kernel.shape[0] // 2, kernel.shape[1] // 2
    h, w = x.shape
    padded = x[np.ix_(_reflect_index(h, ry), _reflect_index(w, rx))]
    out = ndimage.correlate(padded, kernel, mode="constant")
    return out[ry : ry + h, rx : rx + w]


def _correlate2d_adjoint(y: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    ry, rx = kernel.shape[0] // 2, kernel.shape[1] // 2
    h, w = y.shape
    embedded = np.zeros((h + 2 * ry, w + 2 * rx))
    embedded[ry : ry + h, rx : rx + w] = y
    spread = ndimage.correlate(embedded, kernel[::-1, ::-1], mode="constant")
    folded = np.zeros((h, w))
    np.add.at(folded, np.ix_(_reflect_index(h, ry), _reflect_index(w, rx)), spread)
    return folded


def _filterbank(image: np.ndarray, scales: Tuple[float, ...]) -> np.ndarray:
    luma = image @ LUMA_WEIGHTS
    channels: List[np.ndarray] = []
    for sigma in scales:
        g, dg = gaussian_kernels(sigma)
        smooth_rows = _correlate1d(luma, g, axis=0)
        channels.append(_correlate1d(smooth_rows, g, axis=1))
        channels.append(_correlate1d(smooth_rows, dg, axis=1))
        channels.append(_correlate1d(_correlate1d(luma, dg, axis=0), g, axis=1))
    return np.stack(channels)


def _filterbank_adjoint(d_features: np.ndarray, scales: Tuple[float, ...]) -> np.ndarray:
    d_luma = np.zeros(d_features.shape[1:])
    for s, sigma in enumerate(scales):
        g, dg = gaussian_kernels(sigma)
        d_smooth, d_dx, d_dy = d_features[3 * s : 3 * s + 3]
        d_rows = _correlate1d_adjoint(d_smooth, g, axis=1) + _correlate1d_adjoint(d_dx, dg, axis=1)
        d_luma += _correlate1d_adjoint(d_rows, g, axis=0)
        d_luma += _correlate1d_adjoint(_correlate1d_adjoint(d_dy, g, axis=1), dg, axis=0)
    return d_luma[..., None] * LUMA_WEIGHTS


@lru_cache(maxsize=8)
def load_kernel_bank(path: str) -> Tuple[np.ndarray, ...]:
    """Load the external extractor's kernels: ``{"channels": C, "kernels": [k×k×3 PFM, ...]}``."""
    meta = read_json(path)
    root = os.path.dirname(os.path.abspath(path))
    try:
        channels = int(meta["channels"])
        kernel_paths = list(meta["kernels"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"kernel bank {path}: expected 'channels' and 'kernels' ({e})") from e
    if channels != len(kernel_paths) or channels < 1:
        raise ConfigError(f"kernel bank {path}: declares {channels} channels but lists {len(kernel_paths)} kernels")
    kernels = []
    for kernel_path in kernel_paths:
        kernel = read_pfm(os.path.join(root, kernel_path))
        if kernel.ndim == 2:
            kernel = np.repeat(kernel[..., None], 3, axis=2)
        if kernel.shape[0] % 2 == 0 or kernel.shape[1] % 2 == 0:
            raise ConfigError(f"kernel {kernel_path} must have odd size, got {kernel.shape[:2]}")
        kernels.append(kernel)
    return tuple(kernels)


def _external(image: np.ndarray, kernels: Tuple[np.ndarray, ...]) -> np.ndarray:
    return np.stack([sum(_correlate2d(image[..., c], kernel[..., c]) for c in range(3)) for kernel in kernels])


def _external_adjoint(d_features: np.ndarray, kernels: Tuple[np.ndarray, ...]) -> np.ndarray:
    d_image = np.zeros(d_features.shape[1:] + (3,))
    for d_channel, kernel in zip(d_features, kernels):
        for c in range(3):
            d_image[..., c] += _correlate2d_adjoint(d_channel, kernel[..., c])
    return d_image


def extract_features(image: np.ndarray, extractor: FeatureExtractorSpec) -> FeatureMap:
    """Run ``extractor`` on an H×W×3 image."""
    image = _as_rgb(image)
    if not np.all(np.isfinite(image)):
        raise ValidationError("cannot extract features from a non-finite image")
    if extractor.kind == ExtractorKind.IDENTITY.value:
        data = np.moveaxis(image, 2, 0).copy()
    elif extractor.kind == ExtractorKind.FILTERBANK.value:
        data = _filterbank(image, extractor.scales)
    elif extractor.kind == ExtractorKind.EXTERNAL.value:
        data = _external(image, load_kernel_bank(extractor.path))
    else:
        raise UnknownExtractor(f"unknown feature extractor {extractor.kind!r}")
    return FeatureMap(data)


def features_vjp(d_features: np.ndarray, extractor: FeatureExtractorSpec) -> np.ndarray:
    """Pull a C×H×W feature cotangent back to an H×W×3 image cotangent."""
    d_features = np.asarray(d_features, dtype=np.float64)
    if extractor.kind == ExtractorKind.IDENTITY.value:
        return np.moveaxis(d_features, 0, 2).copy()
    if extractor.kind == ExtractorKind.FILTERBANK.value:
        return _filterbank_adjoint(d_features, extractor.scales)
    if extractor.kind == ExtractorKind.EXTERNAL.value:
        return _external_adjoint(d_features, load_kernel_bank(extractor.path))
    raise UnknownExtractor(f"unknown feature extractor {extractor.kind!r}")


def load_external_features(path: str) -> FeatureMap:
    """Load an externally computed feature stack: ``{"channels": C, "maps": [H×W PFM, ...]}``."""
    meta = read_json(path)
    root = os.path.dirname(os.path.abspath(path))
    try:
        channels = int(meta["channels"])
        map_paths = list(meta["maps"])
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"feature stack {path}: expected 'channels' and 'maps' ({e})") from e
    if channels != len(map_paths):
        raise ConfigError(f"feature stack {path}: declares {channels} channels but lists {len(map_paths)} maps")
    maps = [read_pfm(os.path.join(root, p)) for p in map_paths]
    shapes = {m.shape for m in maps}
    if len(shapes) != 1 or maps[0].ndim != 2:
        raise DimensionMismatch(f"feature stack {path}: maps must share one H×W shape, got {sorted(shapes)}")
    return FeatureMap(np.stack(maps))


def save_external_features(features: FeatureMap, path: str) -> str:
    """Write ``features`` as one PFM per channel next to the sidecar JSON at ``path``."""
    root = os.path.dirname(os.path.abspath(path))
    stem = os.path.splitext(os.path.basename(path))[0]
    names = []
    for k, channel in enumerate(features.data):
        name = f"{stem}_c{k:02d}.pfm"
        write_pfm(channel, os.path.join(root, name))
        names.append(name)
    write_json({"channels": features.channels, "maps": names}, path)
    return path
