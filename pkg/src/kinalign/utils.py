"""
Shared helpers: logging setup and image / JSON file I/O.
"""

import json
import logging
import os
from typing import Any, Dict, Optional, Union

import numpy as np
from PIL import Image
from rich.logging import RichHandler

from .exceptions import DimensionMismatch, IoError, ParseError

PathLike = Union[str, "os.PathLike[str]"]


def setup_logging(level: int = logging.INFO, quiet: bool = False, log_file: Optional[PathLike] = None) -> None:
    """Route all kinalign logging through a single rich handler (plus an optional run log)."""
    if quiet:
        level = max(level, logging.WARNING)
    handlers = [RichHandler(rich_tracebacks=True)]
    if log_file is not None:
        file_handler = logging.FileHandler(os.fspath(log_file), encoding="utf-8")
        file_handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        handlers.append(file_handler)
    logging.basicConfig(level=level, format="%(message)s", datefmt="[%X]", handlers=handlers, force=True)


def ensure_dir(path: PathLike) -> str:
    path = os.fspath(path)
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise IoError(f"cannot create directory {path}: {e}") from e
    return path


def write_json(data: Any, path: PathLike) -> str:
    path = os.fspath(path)
    try:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, sort_keys=False)
            f.write("\n")
    except OSError as e:
        raise IoError(f"cannot write {path}: {e}") from e
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as e:
        raise IoError(f"cannot read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON ({e})", path) from e


def to_uint8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == bool:
        return image.astype(np.uint8) * 255
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image: np.ndarray, path: PathLike) -> str:
    """Write a float image in [0, 1] (H×W or H×W×3) or a boolean mask as an 8-bit PNG."""
    path = os.fspath(path)
    try:
        Image.fromarray(to_uint8(image)).save(path, format="PNG")
    except OSError as e:
        raise IoError(f"cannot write PNG {path}: {e}") from e
    return path


def load_png(path: PathLike, mode: str = "RGB") -> np.ndarray:
    """Read a PNG as floats in [0, 1]; ``mode="L"`` returns H×W."""
    path = os.fspath(path)
    try:
        with Image.open(path) as img:
            data = np.asarray(img.convert(mode), dtype=np.float64)
    except OSError as e:
        raise IoError(f"cannot read image {path}: {e}") from e
    return data / 255.0


def load_mask(path: PathLike) -> np.ndarray:
    return load_png(path, mode="L") >= 0.5


def write_pfm(image: np.ndarray, path: PathLike) -> str:
    """Write H×W or H×W×3 floats as little-endian 32-bit PFM (rows stored bottom-up)."""
    path = os.fspath(path)
    image = np.asarray(image, dtype="<f4")
    if image.ndim == 2:
        header = "Pf"
    elif image.ndim == 3 and image.shape[2] == 3:
        header = "PF"
    else:
        raise DimensionMismatch(f"PFM holds H×W or H×W×3 data, got shape {image.shape}")
    height, width = image.shape[:2]
    try:
        with open(path, "wb") as f:
            f.write(f"{header}\n{width} {height}\n-1.0\n".encode("ascii"))
            f.write(np.ascontiguousarray(image[::-1]).tobytes())
    except OSError as e:
        raise IoError(f"cannot write PFM {path}: {e}") from e
    return path


def read_pfm(path: PathLike) -> np.ndarray:
    """Read a PFM file written by :func:`write_pfm` (either endianness)."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as f:
            header = f.readline().strip()
            dims = f.readline().split()
            scale = float(f.readline().strip())
            payload = f.read()
    except OSError as e:
        raise IoError(f"cannot read PFM {path}: {e}") from e
    except ValueError as e:
        raise ParseError(f"malformed PFM header ({e})", path) from e

    if header not in (b"PF", b"Pf") or len(dims) != 2:
        raise ParseError("not a PFM file", path)
    try:
        width, height = int(dims[0]), int(dims[1])
    except ValueError as e:
        raise ParseError(f"malformed PFM size ({e})", path) from e
    channels = 3 if header == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    expected = width * height * channels
    data = np.frombuffer(payload, dtype=dtype)
    if data.size != expected:
        raise ParseError(f"expected {expected} floats, found {data.size}", path)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return data.reshape(shape)[::-1].astype(np.float64)
