"""
Synthetic dataset generation.

A dataset is one procedural joint trajectory of the chain, replayed in front of a
fixed tissue-like background and optionally corrupted by a counterfactual domain
(low brightness, smoke, blood, altered background). Measured kinematics are the
ground truth plus bounded uniform noise. Every random draw is derived from the
dataset seed through ``numpy.random.SeedSequence`` so that two datasets with the
same seed share trajectories, perturbations and masks whatever their domain.
"""

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Any, Dict, Iterator, List, Optional, Sequence, Union

import numpy as np
from PIL import Image
from scipy import ndimage
from tqdm import tqdm

from .exceptions import ConfigError, DimensionMismatch, IoError, UnknownDomain, ValidationError
from .features import (
    FeatureMap,
    MeanBackground,
    compose_hybrid,
    load_external_features,
    mean_background,
    save_external_features,
)
from .geomcore import PinholeCamera, PointLight
from .kinematics import DHChain, JointConfig, JointKind, load_chain, pose_meshes, save_chain
from .rasterizer import SoftRenderConfig, hard_rasterize, render
from .utils import ensure_dir, load_mask, read_json, read_pfm, save_png, write_json, write_pfm

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
PERTURBATION_MODEL = "uniform"
TRAJECTORY_TIMEBASE = 300.0
PRISMATIC_M_PER_DEG = 0.01

# independent random streams per dataset seed
_TRAJECTORY, _PERTURBATION, _CORRUPTION, _TEXTURE = range(4)

SMOKE_COLOR = np.array([0.86, 0.86, 0.88])
BLOOD_COLOR = np.array([0.45, 0.02, 0.03])
BLOOD_ALPHA = 0.85
_TISSUE_DARK = np.array([0.52, 0.22, 0.22])
_TISSUE_LIGHT = np.array([0.88, 0.58, 0.52])
_ALT_DARK = np.array([0.20, 0.32, 0.18])
_ALT_LIGHT = np.array([0.75, 0.78, 0.52])


def derive_rng(seed: int, *stream: int) -> np.random.Generator:
    if int(seed) < 0:
        raise ValidationError(f"seeds must be non-negative, got {seed}")
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(s) for s in stream]]))


def derive_seed(seed: int, *stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), *[int(s) for s in stream]]).generate_state(1, dtype=np.uint64)[0])


def perturbation_seed(seed: int, frame_index: int) -> int:
    """Seed of the measured-kinematics perturbation of one frame."""
    return derive_seed(seed, _PERTURBATION, frame_index)


class DomainKind(str, Enum):
    REGULAR = "regular"
    LOW_BRIGHTNESS = "low_brightness"
    SMOKE = "smoke"
    BLOOD = "blood"
    BACKGROUND_CHANGE = "background_change"


@dataclass(frozen=True)
class DomainSpec:
    """Environment condition of a generated sequence."""

    kind: str = DomainKind.REGULAR.value
    brightness_scale: float = 0.5
    smoke_opacity: float = 0.6
    noise_octaves: int = 4
    blob_count: int = 6
    blob_radius_px: int = 12
    background_id: str = "alt-1"
    seed: int = 0

    def __post_init__(self):
        try:
            kind = DomainKind(self.kind)
        except ValueError:
            valid = ", ".join(k.value for k in DomainKind)
            raise UnknownDomain(f"domain.kind: unknown domain {self.kind!r} (expected one of: {valid})") from None
        object.__setattr__(self, "kind", kind.value)
        if not 0.0 < self.brightness_scale <= 1.0:
            raise ConfigError(f"domain.brightness_scale must lie in (0, 1], got {self.brightness_scale}")
        if not 0.0 <= self.smoke_opacity <= 1.0:
            raise ConfigError(f"domain.smoke_opacity must lie in [0, 1], got {self.smoke_opacity}")
        if self.noise_octaves < 1:
            raise ConfigError(f"domain.noise_octaves must be >= 1, got {self.noise_octaves}")
        if self.blob_count < 0 or self.blob_radius_px < 1:
            raise ConfigError(
                f"domain blood blobs need count >= 0 and radius >= 1, got {self.blob_count}, {self.blob_radius_px}"
            )
        if int(self.seed) < 0:
            raise ConfigError(f"domain.seed must be non-negative, got {self.seed}")
        if not self.background_id:
            raise ConfigError("domain.background_id must not be empty")

    @classmethod
    def regular(cls, seed: int = 0) -> "DomainSpec":
        return cls(DomainKind.REGULAR.value, seed=seed)

    @classmethod
    def default(cls, kind: str, seed: int = 0) -> "DomainSpec":
        return cls(kind, seed=seed)

    def with_kind(self, kind: str) -> "DomainSpec":
        data = asdict(self)
        data["kind"] = kind
        return DomainSpec(**data)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DomainSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"domain: unknown keys {sorted(unknown)}")
        return cls(**data)


@dataclass
class Frame:
    """One generated frame with its ground truth and measured kinematics."""

    index: int
    observed_image: np.ndarray
    gt_mask: np.ndarray
    gt_joints: JointConfig
    measured_joints: JointConfig
    domain: DomainSpec
    observed_features: Optional[FeatureMap] = None


def _joint_ranges(chain: DHChain):
    lo, hi = np.array(chain.joint_limits, dtype=np.float64).T
    fallback = np.where([k is JointKind.REVOLUTE for k in chain.kinds], np.pi / 4, 0.01)
    lo = np.where(np.isfinite(lo), lo, -fallback)
    hi = np.where(np.isfinite(hi), hi, fallback)
    return lo, hi


def generate_trajectory(chain: DHChain, n_frames: int, seed: int) -> List[JointConfig]:
    """Smooth per-joint sinusoids inside the joint limits, fully determined by ``seed``."""
    if n_frames < 1:
        raise ValidationError(f"n_frames must be >= 1, got {n_frames}")
    rng = derive_rng(seed, _TRAJECTORY)
    lo, hi = _joint_ranges(chain)
    centre = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    amplitude = rng.uniform(0.3, 0.9, chain.dof) * half
    phase = rng.uniform(0.0, 2.0 * np.pi, chain.dof)
    cycles = rng.uniform(0.5, 2.0, chain.dof)
    t = np.arange(n_frames)[:, None] / TRAJECTORY_TIMEBASE
    values = centre + amplitude * np.sin(2.0 * np.pi * cycles * t + phase)
    values = np.clip(values, lo, hi)
    return [chain.config(v) for v in values]


def perturb_joints(
    q: JointConfig,
    magnitude_deg: float,
    seed: Union[int, np.random.Generator],
    prismatic_m_per_deg: float = PRISMATIC_M_PER_DEG,
) -> JointConfig:
    """Add independent U(-m, m) noise: degrees for revolute joints, ``m * 0.01`` metres for prismatic ones."""
    if magnitude_deg < 0:
        raise ValidationError(f"magnitude_deg must be >= 0, got {magnitude_deg}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    unit = rng.uniform(-1.0, 1.0, len(q))
    bound = np.where(q.revolute_mask, np.deg2rad(magnitude_deg), magnitude_deg * prismatic_m_per_deg)
    return q.with_values(q.values + unit * bound)


def value_noise(height: int, width: int, cells: int, rng: np.random.Generator) -> np.ndarray:
    """Lattice noise in [0, 1] with ``cells`` lattice cells across the longer side, bilinear between nodes."""
    cells = max(int(cells), 1)
    span = max(height, width)
    lattice = rng.random((int(np.ceil(cells * height / span)) + 2, int(np.ceil(cells * width / span)) + 2))
    ys = np.arange(height) * cells / span
    xs = np.arange(width) * cells / span
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(lattice, [grid_y, grid_x], order=1, mode="nearest")


def fractal_noise(height: int, width: int, octaves: int, rng: np.random.Generator, base_cells: int = 4) -> np.ndarray:
    """Sum of ``octaves`` value-noise layers (doubling frequency, halving amplitude), rescaled to [0, 1]."""
    total = np.zeros((height, width))
    weight = 0.0
    for octave in range(octaves):
        amplitude = 0.5**octave
        total += amplitude * value_noise(height, width, base_cells * 2**octave, rng)
        weight += amplitude
    total /= weight
    lo, hi = total.min(), total.max()
    return (total - lo) / (hi - lo) if hi > lo else np.zeros_like(total)


def _palette(noise: np.ndarray, dark: np.ndarray, light: np.ndarray) -> np.ndarray:
    return dark + noise[..., None] * (light - dark)


def tissue_texture(width: int, height: int, seed: int) -> np.ndarray:
    """The fixed background of the observed scene: reddish multi-scale texture."""
    rng = derive_rng(seed, _TEXTURE)
    coarse = fractal_noise(height, width, 3, rng, base_cells=3)
    fine = fractal_noise(height, width, 2, rng, base_cells=24)
    return np.clip(_palette(0.75 * coarse + 0.25 * fine, _TISSUE_DARK, _TISSUE_LIGHT), 0.0, 1.0)


def background_texture(background_id: str, width: int, height: int) -> np.ndarray:
    """Alternate background: a PNG file if ``background_id`` names one, else a texture derived from the id."""
    if background_id.lower().endswith(".png"):
        if not os.path.isfile(background_id):
            raise ConfigError(f"domain.background_id: background image {background_id} does not exist")
        with Image.open(background_id) as img:
            resized = img.convert("RGB").resize((width, height), Image.BILINEAR)
            return np.asarray(resized, dtype=np.float64) / 255.0
    digest = hashlib.sha256(background_id.encode("utf-8")).digest()
    rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
    noise = fractal_noise(height, width, 4, rng, base_cells=6)
    return np.clip(_palette(noise, _ALT_DARK, _ALT_LIGHT), 0.0, 1.0)


def _smoke(image: np.ndarray, domain: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    if domain.smoke_opacity == 0.0:
        return image.copy()
    height, width = image.shape[:2]
    alpha = domain.smoke_opacity * fractal_noise(height, width, domain.noise_octaves, rng)[..., None]
    return (1.0 - alpha) * image + alpha * SMOKE_COLOR


def _blood(image: np.ndarray, domain: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    height, width = image.shape[:2]
    rows, cols = np.mgrid[0:height, 0:width]
    out = image.copy()
    for _ in range(domain.blob_count):
        cy, cx = rng.uniform(0, height), rng.uniform(0, width)
        radius = domain.blob_radius_px * rng.uniform(0.6, 1.4)
        inside = (rows - cy) ** 2 + (cols - cx) ** 2 <= radius * radius
        out[inside] = (1.0 - BLOOD_ALPHA) * out[inside] + BLOOD_ALPHA * BLOOD_COLOR
    return out


def corrupt(
    image: np.ndarray,
    domain: DomainSpec,
    gt_mask: Optional[np.ndarray] = None,
    alt_background: Optional[np.ndarray] = None,
    frame_index: int = 0,
) -> np.ndarray:
    """Apply the domain's condition to an observed image. ``regular`` returns an identical copy."""
    image = np.asarray(image, dtype=np.float64)
    kind = DomainKind(domain.kind)
    if kind is DomainKind.REGULAR:
        return image.copy()
    rng = derive_rng(domain.seed, _CORRUPTION, frame_index)
    if kind is DomainKind.LOW_BRIGHTNESS:
        out = image * domain.brightness_scale
    elif kind is DomainKind.SMOKE:
        out = _smoke(image, domain, rng)
    elif kind is DomainKind.BLOOD:
        out = _blood(image, domain, rng)
    elif kind is DomainKind.BACKGROUND_CHANGE:
        if gt_mask is None:
            raise ValidationError("background_change needs the ground-truth mask")
        gt_mask = np.asarray(gt_mask, dtype=bool)
        if gt_mask.shape != image.shape[:2]:
            raise DimensionMismatch(f"mask {gt_mask.shape} vs image {image.shape[:2]}")
        if alt_background is None:
            alt_background = background_texture(domain.background_id, image.shape[1], image.shape[0])
        out = np.where(gt_mask[..., None], image, alt_background)
    else:
        raise UnknownDomain(f"unknown domain {domain.kind!r}")
    return np.clip(out, 0.0, 1.0)


@dataclass
class FrameRecord:
    index: int
    observed: str
    observed_pfm: str
    mask: str
    gt_joints: List[float]
    measured_joints: List[float]
    domain: str
    # sidecar JSON of a precomputed observed feature stack, see load_external_features
    features: Optional[str] = None


@dataclass
class Manifest:
    """A generated dataset on disk. Paths in ``frames`` are relative to ``root``."""

    root: str
    chain_file: str
    camera: Dict[str, Any]
    light: Dict[str, Any]
    domain: DomainSpec
    seed: int
    error_deg: float
    mean_background: str
    frames: List[FrameRecord] = field(default_factory=list)
    perturbation_model: str = PERTURBATION_MODEL
    kinematics: str = "kinematics.json"

    @property
    def path(self) -> str:
        return os.path.join(self.root, "manifest.json")

    def resolve(self, relative: str) -> str:
        return os.path.join(self.root, relative)

    def load_chain(self) -> DHChain:
        return load_chain(self.resolve(self.chain_file))

    def load_camera(self) -> PinholeCamera:
        return PinholeCamera.from_dict(self.camera)

    def load_light(self) -> PointLight:
        return PointLight.from_dict(self.light)

    def load_background(self) -> MeanBackground:
        return MeanBackground.from_image(read_pfm(self.resolve(self.mean_background)))

    def load_frame(self, position: int, chain: Optional[DHChain] = None) -> Frame:
        record = self.frames[position]
        chain = chain or self.load_chain()
        return Frame(
            index=record.index,
            observed_image=read_pfm(self.resolve(record.observed_pfm)),
            gt_mask=load_mask(self.resolve(record.mask)),
            gt_joints=chain.config(record.gt_joints),
            measured_joints=chain.config(record.measured_joints),
            domain=self.domain,
            observed_features=load_external_features(self.resolve(record.features)) if record.features else None,
        )

    def attach_features(self, position: int, features: FeatureMap) -> str:
        """Store an externally computed feature stack for one frame and rewrite ``manifest.json``."""
        record = self.frames[position]
        camera = self.load_camera()
        if features.shape[1:] != (camera.height, camera.width):
            raise DimensionMismatch(f"features {features.shape} do not match camera {(camera.height, camera.width)}")
        relative = os.path.join("frames", f"{record.index:06d}_features.json")
        save_external_features(features, self.resolve(relative))
        record.features = relative
        write_json(self.to_dict(), self.path)
        return relative

    def to_dict(self) -> Dict[str, Any]:
        return {
            "version": MANIFEST_VERSION,
            "chain_file": self.chain_file,
            "camera": self.camera,
            "light": self.light,
            "domain": self.domain.to_dict(),
            "seed": self.seed,
            "error_deg": self.error_deg,
            "perturbation_model": self.perturbation_model,
            "mean_background": self.mean_background,
            "kinematics": self.kinematics,
            "frames": [asdict(f) for f in self.frames],
        }


def load_manifest(path: str) -> Manifest:
    """Read and validate ``manifest.json`` (or the directory holding it)."""
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    data = read_json(path)
    root = os.path.dirname(os.path.abspath(path))
    try:
        frames = [FrameRecord(**f) for f in data["frames"]]
        manifest = Manifest(
            root=root,
            chain_file=data["chain_file"],
            camera=data["camera"],
            light=data["light"],
            domain=DomainSpec.from_dict(data["domain"]),
            seed=int(data["seed"]),
            error_deg=float(data["error_deg"]),
            mean_background=data["mean_background"],
            frames=frames,
            perturbation_model=data.get("perturbation_model", PERTURBATION_MODEL),
            kinematics=data.get("kinematics", "kinematics.json"),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"manifest {path} is malformed: {e}") from e
    for relative in [manifest.chain_file, manifest.mean_background] + [
        p for f in frames for p in (f.observed, f.observed_pfm, f.mask, f.features) if p
    ]:
        if not os.path.isfile(manifest.resolve(relative)):
            raise IoError(f"manifest {path} references missing file {relative}")
    return manifest


def render_observation(
    chain: DHChain,
    q: JointConfig,
    cam: PinholeCamera,
    light: PointLight,
    background: MeanBackground,
    render_config: Optional[SoftRenderConfig] = None,
) -> np.ndarray:
    """Soft-render the tool at ``q`` and composite it over ``background``."""
    cfg = render_config or SoftRenderConfig.default_for(cam.width, cam.height)
    out = render(pose_meshes(chain, q), cam, light, cfg)
    hybrid, _ = compose_hybrid(out, background)
    return np.clip(hybrid, 0.0, 1.0)


def generate_dataset(
    chain: DHChain,
    cam: PinholeCamera,
    light: PointLight,
    n_frames: int,
    error_deg: float,
    domain: DomainSpec,
    seed: int,
    out_dir: str,
    render_config: Optional[SoftRenderConfig] = None,
    show_progress: bool = False,
) -> Manifest:
    """Generate a self-contained dataset under ``out_dir`` and return its manifest."""
    ensure_dir(out_dir)
    frames_dir = ensure_dir(os.path.join(out_dir, "frames"))
    chain_file = os.path.join("chain", "chain.json")
    ensure_dir(os.path.join(out_dir, "chain"))
    save_chain(chain, os.path.join(out_dir, chain_file))

    texture = tissue_texture(cam.width, cam.height, seed)
    plate = MeanBackground.from_image(texture)
    trajectory = generate_trajectory(chain, n_frames, seed)
    alt_background = None
    if domain.kind == DomainKind.BACKGROUND_CHANGE.value:
        alt_background = background_texture(domain.background_id, cam.width, cam.height)

    def regular_plates() -> Iterator[np.ndarray]:
        for _ in range(n_frames):
            yield texture

    bg = mean_background(regular_plates())
    write_pfm(bg.image, os.path.join(out_dir, "background.pfm"))
    save_png(bg.image, os.path.join(out_dir, "background.png"))

    records: List[FrameRecord] = []
    gt_all, measured_all = [], []
    for index, gt in enumerate(tqdm(trajectory, desc=f"Generating {domain.kind}", disable=not show_progress)):
        measured = perturb_joints(gt, error_deg, perturbation_seed(seed, index))
        gt_mask = hard_rasterize(pose_meshes(chain, gt), cam)
        clean = render_observation(chain, gt, cam, light, plate, render_config)
        observed = corrupt(clean, domain, gt_mask=gt_mask, alt_background=alt_background, frame_index=index)

        stem = f"{index:06d}"
        record = FrameRecord(
            index=index,
            observed=os.path.join("frames", f"{stem}_observed.png"),
            observed_pfm=os.path.join("frames", f"{stem}_observed.pfm"),
            mask=os.path.join("frames", f"{stem}_mask.png"),
            gt_joints=[float(v) for v in gt.values],
            measured_joints=[float(v) for v in measured.values],
            domain=domain.kind,
        )
        save_png(observed, os.path.join(frames_dir, f"{stem}_observed.png"))
        write_pfm(observed, os.path.join(frames_dir, f"{stem}_observed.pfm"))
        save_png(gt_mask, os.path.join(frames_dir, f"{stem}_mask.png"))
        records.append(record)
        gt_all.append(record.gt_joints)
        measured_all.append(record.measured_joints)

    write_json(
        {
            "units": "radians for revolute joints, metres for prismatic joints",
            "joint_kinds": [k.value for k in chain.kinds],
            "gt": gt_all,
            "measured": measured_all,
        },
        os.path.join(out_dir, "kinematics.json"),
    )
    manifest = Manifest(
        root=os.path.abspath(out_dir),
        chain_file=chain_file,
        camera=cam.to_dict(),
        light=light.to_dict(),
        domain=domain,
        seed=int(seed),
        error_deg=float(error_deg),
        mean_background="background.pfm",
        frames=records,
    )
    write_json(manifest.to_dict(), manifest.path)
    logger.info(f"Generated {n_frames} {domain.kind} frames at {error_deg} deg error in {out_dir}")
    return manifest


def frames_for(manifest: Manifest, positions: Optional[Sequence[int]] = None) -> Iterator[Frame]:
    """Lazily load frames from a manifest (all of them by default)."""
    chain = manifest.load_chain()
    for position in positions if positions is not None else range(len(manifest.frames)):
        yield manifest.load_frame(position, chain)
