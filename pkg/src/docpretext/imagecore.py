"""Grayscale document rasters and the dihedral transforms built on them.

A gray image is a 2-D ``float32`` numpy array with values in ``[-0.5, 0.5]``.
All functions return fresh arrays and never modify their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import BoundsError, DecodeError, DomainError

GrayImage = np.ndarray

HORIZONTAL = "horizontal"
VERTICAL = "vertical"

# Rec. 601 luma weights, in thousandths so byte-valued inputs stay exact.
_LUMA = (299, 587, 114)


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        if self.x < 0 or self.y < 0 or self.w <= 0 or self.h <= 0:
            raise DomainError(f"invalid rect {self}")

    def offset(self, dx: int, dy: int) -> "Rect":
        return Rect(self.x + dx, self.y + dy, self.w, self.h)


def check_gray(img) -> GrayImage:
    arr = np.asarray(img)
    if arr.ndim != 2 or arr.size == 0:
        raise DomainError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if arr.min() < -0.5 or arr.max() > 0.5:
        raise DomainError("pixel values must lie in [-0.5, 0.5]")
    return arr


def normalize_pixels(raw) -> np.ndarray:
    """Map byte-scale intensities to ``raw / 255 - 0.5``."""
    arr = np.asarray(raw, dtype=np.float64)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise DomainError("pixel values must lie in 0..255")
    return arr / 255.0 - 0.5


def to_bytes(img: GrayImage) -> np.ndarray:
    """Inverse of :func:`normalize_pixels`, rounded to ``uint8``."""
    arr = np.asarray(img, dtype=np.float64)
    return np.clip(np.rint((arr + 0.5) * 255.0), 0, 255).astype(np.uint8)


def luminance(rgb: np.ndarray) -> np.ndarray:
    rgb = rgb.astype(np.int64)
    w = _LUMA
    return (w[0] * rgb[..., 0] + w[1] * rgb[..., 1] + w[2] * rgb[..., 2]) / 1000.0


def _resize_axis(arr: np.ndarray, n_out: int, axis: int) -> np.ndarray:
    n_in = arr.shape[axis]
    if n_in == n_out:
        return arr
    if n_out == 1 or n_in == 1:
        pos = np.zeros(n_out)
    else:
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    lo = np.clip(np.floor(pos).astype(np.int64), 0, n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    t = pos - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = n_out
    # a + t*(b - a) keeps constant regions exact
    return a + t.reshape(shape) * (b - a)


def resize_bilinear(arr: np.ndarray, height: int, width: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2-D float array."""
    if height <= 0 or width <= 0:
        raise DomainError("target dimensions must be positive")
    out = _resize_axis(np.asarray(arr, dtype=np.float64), height, 0)
    return _resize_axis(out, width, 1)


def decode_luminance(path) -> np.ndarray:
    """Read an image file as float luminance on the 0..255 scale."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such image: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("L", "1"):
                return np.asarray(im.convert("L"), dtype=np.float64)
            if im.mode.startswith("I"):
                # 16-bit PGM / PNG
                arr = np.asarray(im, dtype=np.float64)
                top = 65535.0 if arr.max() > 255 else 255.0
                return arr * (255.0 / top)
            return luminance(np.asarray(im.convert("RGB")))
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def load_grayscale(path, target_h: int = 384, target_w: int = 384) -> GrayImage:
    """Load an image as luminance, resize bilinearly, then normalize."""
    if target_h <= 0 or target_w <= 0:
        raise DomainError("target dimensions must be positive")
    lum = decode_luminance(path)
    resized = np.clip(resize_bilinear(lum, target_h, target_w), 0.0, 255.0)
    return normalize_pixels(resized).astype(np.float32)


def save_grayscale(img: GrayImage, path) -> None:
    Image.fromarray(to_bytes(img), mode="L").save(path, format="PNG")


def rotate90(img: GrayImage, k: int) -> GrayImage:
    """Rotate counter-clockwise by ``k`` quarter turns."""
    return np.rot90(np.asarray(img), k % 4).copy()


def flip(img: GrayImage, axis: str) -> GrayImage:
    arr = np.asarray(img)
    if axis == HORIZONTAL:
        return arr[:, ::-1].copy()
    if axis == VERTICAL:
        return arr[::-1, :].copy()
    raise DomainError(f"unknown flip axis {axis!r}")


def crop(img: GrayImage, r: Rect) -> GrayImage:
    arr = np.asarray(img)
    h, w = arr.shape
    if r.x + r.w > w or r.y + r.h > h:
        raise BoundsError(f"{r} exceeds image of size {h}x{w}")
    return arr[r.y:r.y + r.h, r.x:r.x + r.w].copy()
