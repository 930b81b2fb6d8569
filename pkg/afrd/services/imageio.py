"""Binary PPM (P6) / PGM (P5) files, 8-bit, through Pillow."""

import logging
import os

import numpy as np
from PIL import Image, UnidentifiedImageError

from afrd.errors import DatasetError

logger = logging.getLogger(__name__)


def quantize(image: np.ndarray) -> np.ndarray:
    """[3, H, W] floats in [0, 1] -> [H, W, 3] uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def _open(path: str, mode: str) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.format != "PPM" or img.mode != mode:
                kind = "P6" if mode == "RGB" else "P5"
                raise DatasetError(f"expected an 8-bit {kind} file, got {img.format} {img.mode}", path=path)
            return np.asarray(img, dtype=np.uint8).copy()
    except FileNotFoundError:
        raise DatasetError("file not found", path=path) from None
    except (UnidentifiedImageError, SyntaxError, ValueError, OSError) as e:
        raise DatasetError(f"malformed image: {e}", path=path) from e


def read_ppm(path: str, dtype=np.float32) -> np.ndarray:
    """Decode to [3, H, W] floats in [0, 1]."""
    pixels = _open(path, "RGB")
    return (pixels.transpose(2, 0, 1) / 255.0).astype(dtype)


def read_ppm_bytes(path: str) -> np.ndarray:
    """Raw [H, W, 3] uint8 pixels."""
    return _open(path, "RGB")


def write_ppm(path: str, image: np.ndarray) -> None:
    pixels = image if image.dtype == np.uint8 else quantize(image)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"PPM needs [H, W, 3] pixels, got {pixels.shape}")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")


def read_pgm(path: str) -> np.ndarray:
    """[H, W] uint8."""
    return _open(path, "L")


def write_pgm(path: str, pixels: np.ndarray) -> None:
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError(f"PGM needs [H, W] uint8, got {pixels.dtype} {pixels.shape}")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    Image.fromarray(np.ascontiguousarray(pixels)).save(path, format="PPM")
