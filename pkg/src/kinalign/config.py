"""
Run configuration.

A run is configured by one JSON document with the sections ``camera``, ``light``,
``renderer``, ``optimizer``, ``extractor``, ``losses`` and ``parallel`` plus the
top-level ``chain_file``. Omitted keys take their defaults; unknown keys and
out-of-range values are rejected with the dotted path of the offending key. The
effective configuration (defaults filled in) is what :meth:`RunConfig.to_dict`
emits.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Callable, Dict, Optional, Tuple, Type, TypeVar

from .exceptions import ConfigError, KinalignError, ParseError
from .features import FeatureExtractorSpec
from .geomcore import PinholeCamera, PointLight, RigidTransform
from .kinematics import DHChain, load_chain
from .losses import LossConfig
from .models import DEMO_CAMERA_DISTANCE, DEMO_FOCAL, DEMO_HEIGHT, DEMO_WIDTH, demo_chain
from .optimizer import OptimizeSpec
from .rasterizer import SoftRenderConfig
from .utils import read_json, write_json

logger = logging.getLogger(__name__)

THREADS_ENV = "KINALIGN_THREADS"

T = TypeVar("T")


def _demo_extrinsics() -> Tuple[float, ...]:
    return tuple(RigidTransform([[1, 0, 0], [0, 1, 0], [0, 0, 1]], (0.0, 0.0, DEMO_CAMERA_DISTANCE)).to_list())


@dataclass(frozen=True)
class CameraConfig:
    """Intrinsics in pixels; ``cx``/``cy`` default to the image centre."""

    fx: float = DEMO_FOCAL
    fy: float = DEMO_FOCAL
    cx: Optional[float] = None
    cy: Optional[float] = None
    width: int = DEMO_WIDTH
    height: int = DEMO_HEIGHT
    extrinsics: Tuple[float, ...] = field(default_factory=_demo_extrinsics)

    def build(self) -> PinholeCamera:
        return PinholeCamera(
            fx=self.fx,
            fy=self.fy,
            cx=self.width / 2.0 if self.cx is None else self.cx,
            cy=self.height / 2.0 if self.cy is None else self.cy,
            width=self.width,
            height=self.height,
            extrinsics=RigidTransform.from_matrix(self.extrinsics),
        )


@dataclass(frozen=True)
class LightConfig:
    position: Tuple[float, ...] = (0.0, 0.0, -0.05)
    intensity: float = 1.0

    def build(self) -> PointLight:
        return PointLight(self.position, self.intensity)


@dataclass(frozen=True)
class RendererConfig:
    """``sigma=None`` derives the edge sharpness from the image diagonal."""

    sigma: Optional[float] = None
    gamma: float = 1e-4
    background_value: float = 0.0

    def build(self, width: int, height: int) -> SoftRenderConfig:
        default = SoftRenderConfig.default_for(width, height)
        return SoftRenderConfig(
            sigma=default.sigma if self.sigma is None else self.sigma,
            gamma=self.gamma,
            background_value=self.background_value,
        )


@dataclass(frozen=True)
class OptimizerConfig:
    target: str = "joints"
    step_size: Optional[float] = None
    max_iters: int = 100
    loss: str = "acs"
    convergence_eps: float = 1e-6
    clamp_to_limits: bool = True
    gradient_scale: str = "initial"


@dataclass(frozen=True)
class ParallelConfig:
    threads: Optional[int] = None


def _optional(convert: Callable[[Any], T]) -> Callable[[Any], Optional[T]]:
    return lambda value: None if value is None else convert(value)


def _strict_bool(value: Any) -> bool:
    if not isinstance(value, bool):
        raise TypeError(f"expected true/false, got {value!r}")
    return value


def _number(value: Any) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"expected a number, got {value!r}")
    return float(value)


def _integer(value: Any) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError(f"expected an integer, got {value!r}")
    return value


def _string(value: Any) -> str:
    if not isinstance(value, str):
        raise TypeError(f"expected a string, got {value!r}")
    return value


def _numbers(length: Optional[int] = None) -> Callable[[Any], Tuple[float, ...]]:
    def convert(value: Any) -> Tuple[float, ...]:
        if not isinstance(value, (list, tuple)):
            raise TypeError(f"expected a list of numbers, got {value!r}")
        if length is not None and len(value) != length:
            raise TypeError(f"expected {length} numbers, got {len(value)}")
        return tuple(_number(v) for v in value)

    return convert


_CONVERTERS: Dict[type, Dict[str, Callable[[Any], Any]]] = {
    CameraConfig: {
        "fx": _number,
        "fy": _number,
        "cx": _optional(_number),
        "cy": _optional(_number),
        "width": _integer,
        "height": _integer,
        "extrinsics": _numbers(16),
    },
    LightConfig: {"position": _numbers(3), "intensity": _number},
    RendererConfig: {"sigma": _optional(_number), "gamma": _number, "background_value": _number},
    OptimizerConfig: {
        "target": _string,
        "step_size": _optional(_number),
        "max_iters": _integer,
        "loss": _string,
        "convergence_eps": _number,
        "clamp_to_limits": _strict_bool,
        "gradient_scale": _string,
    },
    FeatureExtractorSpec: {"kind": _string, "path": _optional(_string), "scales": _numbers()},
    LossConfig: {"threshold": _number, "dilation_radius": _optional(_integer), "beta": _number},
    ParallelConfig: {"threads": _optional(_integer)},
}


def _section(cls: Type[T], data: Any, name: str) -> T:
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object, got {type(data).__name__}")
    converters = _CONVERTERS[cls]
    kwargs = {}
    for key, value in data.items():
        if key not in converters:
            raise ConfigError(f"{name}.{key}: unknown key (expected one of: {', '.join(converters)})")
        try:
            kwargs[key] = converters[key](value)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"{name}.{key}: {e}") from None
    try:
        return cls(**kwargs)
    except (KinalignError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None


@dataclass(frozen=True)
class RunConfig:
    """Effective configuration of a kinalign run. ``chain_file=None`` selects the bundled demo chain."""

    chain_file: Optional[str] = None
    camera: CameraConfig = field(default_factory=CameraConfig)
    light: LightConfig = field(default_factory=LightConfig)
    renderer: RendererConfig = field(default_factory=RendererConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    extractor: FeatureExtractorSpec = field(default_factory=FeatureExtractorSpec)
    losses: LossConfig = field(default_factory=LossConfig)
    parallel: ParallelConfig = field(default_factory=ParallelConfig)

    _SECTIONS = {
        "camera": CameraConfig,
        "light": LightConfig,
        "renderer": RendererConfig,
        "optimizer": OptimizerConfig,
        "extractor": FeatureExtractorSpec,
        "losses": LossConfig,
        "parallel": ParallelConfig,
    }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], base_dir: Optional[str] = None) -> "RunConfig":
        """Validate ``data``; relative paths resolve against ``base_dir`` and must exist."""
        if not isinstance(data, dict):
            raise ConfigError(f"configuration must be a JSON object, got {type(data).__name__}")
        unknown = set(data) - set(cls._SECTIONS) - {"chain_file"}
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
        sections = {name: _section(section_cls, data.get(name), name) for name, section_cls in cls._SECTIONS.items()}

        chain_file = data.get("chain_file")
        if chain_file is not None:
            if not isinstance(chain_file, str):
                raise ConfigError(f"chain_file: expected a path or null, got {chain_file!r}")
            chain_file = _resolve(chain_file, base_dir, "chain_file")
        extractor = sections["extractor"]
        if extractor.path is not None:
            sections["extractor"] = FeatureExtractorSpec(
                extractor.kind, _resolve(extractor.path, base_dir, "extractor.path"), extractor.scales
            )
        config = cls(chain_file=chain_file, **sections)
        try:
            config.build_camera()
            config.optimize_spec()
        except KinalignError as e:
            raise ConfigError(str(e)) from None
        return config

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {"chain_file": self.chain_file}
        for name in self._SECTIONS:
            section = asdict(getattr(self, name))
            data[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return data

    def build_chain(self) -> DHChain:
        return demo_chain() if self.chain_file is None else load_chain(self.chain_file)

    def build_camera(self) -> PinholeCamera:
        return self.camera.build()

    def build_light(self) -> PointLight:
        return self.light.build()

    def build_renderer(self) -> SoftRenderConfig:
        return self.renderer.build(self.camera.width, self.camera.height)

    def optimize_spec(self, camera: Optional[PinholeCamera] = None, **overrides: Any) -> OptimizeSpec:
        """Assemble the optimizer settings; the renderer default follows ``camera`` (else the configured camera)."""
        params = asdict(self.optimizer)
        params.update(overrides)
        width, height = (camera.width, camera.height) if camera is not None else (self.camera.width, self.camera.height)
        try:
            return OptimizeSpec(
                extractor=self.extractor,
                renderer=self.renderer.build(width, height),
                loss_params=self.losses,
                **params,
            )
        except ConfigError:
            raise
        except KinalignError as e:
            raise ConfigError(f"optimizer: {e}") from None

    def threads(self, override: Optional[int] = None) -> int:
        """Worker count: explicit override, then ``KINALIGN_THREADS``, then config, then CPU count."""
        if override is not None:
            return max(1, int(override))
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                return max(1, int(env))
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        if self.parallel.threads is not None:
            return max(1, self.parallel.threads)
        return os.cpu_count() or 1


def _resolve(path: str, base_dir: Optional[str], key: str) -> str:
    resolved = path if os.path.isabs(path) or base_dir is None else os.path.join(base_dir, path)
    if not os.path.exists(resolved):
        raise ConfigError(f"{key}: file {resolved} does not exist")
    return os.path.abspath(resolved)


def load_config(path: Optional[str]) -> RunConfig:
    """Load a JSON config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    if not os.path.isfile(path):
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = read_json(path)
    except ParseError as e:
        raise ConfigError(str(e)) from None
    config = RunConfig.from_dict(data, base_dir=os.path.dirname(os.path.abspath(path)))
    logger.debug(f"Loaded configuration from {path}")
    return config


def save_config(config: RunConfig, path: str) -> str:
    return write_json(config.to_dict(), path)


def config_fields() -> Dict[str, Tuple[str, ...]]:
    """Section name -> accepted keys, for help output."""
    return {name: tuple(f.name for f in fields(cls)) for name, cls in RunConfig._SECTIONS.items()}
