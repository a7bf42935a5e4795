"""
Grayscale image loading, resampling and valid-mask computation
Defines the on-disk exchange formats: PNG/PGM, raw float32 + JSON sidecar
"""

import io
import json
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from common.config import ERROR_MESSAGES, IMAGE_CONFIG
from common.errors import DataError, ImageFormatError
from common.utils import (
    atomic_write_bytes, atomic_write_json, list_image_files, print_warning
)

logger = logging.getLogger(__name__)

GRAYSCALE_MODES = {"1", "L", "I", "I;16", "I;16B", "I;16L", "F"}

# 8-connectivity
COMPONENT_STRUCTURE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class GrayImage:
    """2D scalar intensity grid with (row_mm, col_mm) spacing"""
    pixels: np.ndarray
    spacing: Tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 2:
            raise ValueError(f"GrayImage needs a 2D array, got shape {pixels.shape}")
        min_size = IMAGE_CONFIG["min_size_px"]
        if pixels.shape[0] < min_size or pixels.shape[1] < min_size:
            raise ValueError(f"GrayImage must be at least {min_size}x{min_size}, got {pixels.shape}")
        spacing = (float(self.spacing[0]), float(self.spacing[1]))
        if spacing[0] <= 0 or spacing[1] <= 0:
            raise ValueError(f"Spacing must be strictly positive, got {spacing}")
        object.__setattr__(self, "pixels", pixels)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.pixels.shape

    @property
    def max_intensity(self) -> float:
        return float(self.pixels.max())


@dataclass(frozen=True)
class BinaryMask:
    """{0,1} foreground mask, same shape as its image"""
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise ValueError(f"BinaryMask needs a 2D array, got shape {values.shape}")
        if not np.isin(values, (0, 1)).all():
            raise ValueError("BinaryMask values must be exactly 0 or 1")
        object.__setattr__(self, "values", values.astype(np.uint8))

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @classmethod
    def full(cls, shape: Tuple[int, int]) -> "BinaryMask":
        return cls(np.ones(shape, dtype=np.uint8))


def sidecar_path(path: str) -> str:
    return os.path.splitext(path)[0] + ".json"


def _read_sidecar(path: str) -> Optional[dict]:
    meta_path = sidecar_path(path)
    if not os.path.exists(meta_path):
        return None
    try:
        with open(meta_path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Unreadable sidecar {meta_path}: {e}") from e


def load_grayscale(path: str) -> GrayImage:
    """Load a PNG/PGM or raw float32 image; spacing from the sidecar if present"""
    if not os.path.isfile(path):
        raise DataError(f"File not found: {path}")

    ext = os.path.splitext(path)[1].lower()
    if ext not in IMAGE_CONFIG["supported_extensions"]:
        raise ImageFormatError(f"Unsupported file type: {ext}")

    meta = _read_sidecar(path)
    spacing = tuple(meta["spacing"]) if meta and "spacing" in meta else IMAGE_CONFIG["default_spacing"]

    if ext == ".raw":
        if meta is None or "shape" not in meta:
            raise ImageFormatError(f"Raw image {path} needs a sidecar with 'shape'")
        dtype = np.dtype(meta.get("dtype", "<f4"))
        try:
            data = np.fromfile(path, dtype=dtype)
        except OSError as e:
            raise DataError(f"Error reading {path}: {e}") from e
        shape = tuple(int(s) for s in meta["shape"])
        if data.size != shape[0] * shape[1]:
            raise DataError(f"Raw image {path} holds {data.size} values, sidecar says {shape}")
        pixels = data.reshape(shape).astype(np.float64)
    else:
        try:
            with Image.open(path) as im:
                if im.mode not in GRAYSCALE_MODES:
                    raise ImageFormatError(f"{path} is not grayscale (mode {im.mode})")
                pixels = np.asarray(im, dtype=np.float64)
        except (UnidentifiedImageError, OSError) as e:
            raise DataError(f"Error reading {path}: {e}") from e

    logger.debug("Loaded %s: shape=%s spacing=%s", path, pixels.shape, spacing)
    return GrayImage(pixels, spacing)


def save_grayscale(path: str, img: GrayImage):
    """Write PNG/PGM (8-bit when values fit, else 16-bit) or raw float32 + sidecar"""
    ext = os.path.splitext(path)[1].lower()
    if ext == ".raw":
        atomic_write_bytes(path, img.pixels.astype("<f4").tobytes())
        atomic_write_json(sidecar_path(path), {
            "shape": list(img.shape), "spacing": list(img.spacing), "dtype": "<f4"
        })
        return

    if ext not in (".png", ".pgm"):
        raise ImageFormatError(f"Unsupported file type: {ext}")

    values = np.clip(np.rint(img.pixels), 0, 65535)
    if values.max() <= 255:
        im = Image.fromarray(values.astype(np.uint8))
    else:
        im = Image.fromarray(values.astype(np.uint16))
    buffer = io.BytesIO()
    im.save(buffer, format="PNG" if ext == ".png" else "PPM")
    atomic_write_bytes(path, buffer.getvalue())

    if img.spacing != tuple(IMAGE_CONFIG["default_spacing"]):
        atomic_write_json(sidecar_path(path), {"shape": list(img.shape), "spacing": list(img.spacing)})


def save_mask(path: str, mask: BinaryMask):
    """Masks are persisted as 8-bit PNG with values 0/255"""
    buffer = io.BytesIO()
    Image.fromarray((mask.values * 255).astype(np.uint8)).save(buffer, format="PNG")
    atomic_write_bytes(path, buffer.getvalue())


def load_mask(path: str) -> BinaryMask:
    try:
        with Image.open(path) as im:
            values = np.asarray(im.convert("L"))
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"Error reading mask {path}: {e}") from e
    return BinaryMask((values > 127).astype(np.uint8))


def resample_to_isotropic(img: GrayImage, target_mm: float) -> GrayImage:
    """Bilinear resampling to (target_mm, target_mm) spacing"""
    if target_mm <= 0:
        raise ValueError(f"target_mm must be positive, got {target_mm}")

    if img.spacing == (target_mm, target_mm):
        return GrayImage(img.pixels.copy(), img.spacing)

    out_shape = tuple(
        max(1, int(round(n * s / target_mm))) for n, s in zip(img.shape, img.spacing)
    )
    rows = np.arange(out_shape[0], dtype=np.float64) * (target_mm / img.spacing[0])
    cols = np.arange(out_shape[1], dtype=np.float64) * (target_mm / img.spacing[1])
    grid = np.meshgrid(rows, cols, indexing="ij")
    pixels = ndimage.map_coordinates(img.pixels, grid, order=1, mode="nearest")

    logger.debug("Resampled %s @ %s mm -> %s @ %s mm", img.shape, img.spacing, out_shape, target_mm)
    return GrayImage(pixels, (target_mm, target_mm))


def compute_valid_mask(img: GrayImage, intensity_thresh: Optional[float] = None,
                       min_component_px: Optional[int] = None) -> BinaryMask:
    """Threshold the image and drop 8-connected components smaller than min_component_px"""
    if intensity_thresh is None:
        intensity_thresh = IMAGE_CONFIG["mask_threshold_fraction"] * img.max_intensity
    if min_component_px is None:
        min_component_px = IMAGE_CONFIG["min_component_px"]
    if min_component_px < 0:
        raise ValueError(f"min_component_px must be >= 0, got {min_component_px}")

    binary = img.pixels >= intensity_thresh
    labels, count = ndimage.label(binary, structure=COMPONENT_STRUCTURE)
    if count == 0:
        return BinaryMask(np.zeros(img.shape, dtype=np.uint8))

    sizes = np.bincount(labels.ravel())
    keep = sizes >= min_component_px
    keep[0] = False
    return BinaryMask(keep[labels].astype(np.uint8))


def rescale_intensity(pixels: np.ndarray) -> np.ndarray:
    """Linear rescale to [0, 1]; constant images map to zeros"""
    lo, hi = float(pixels.min()), float(pixels.max())
    if hi - lo <= 0:
        return np.zeros_like(pixels, dtype=np.float64)
    return (pixels - lo) / (hi - lo)


def load_image_directory(directory: str, target_mm: Optional[float] = None) -> List[Tuple[str, GrayImage]]:
    """Load every supported image in a directory, resampled to isotropic spacing; unreadable files are skipped"""
    paths = list_image_files(directory)
    if paths is None:
        raise DataError(ERROR_MESSAGES["no_images"] + f" ({directory})")
    target_mm = target_mm or IMAGE_CONFIG["target_spacing_mm"]

    loaded = []
    for path in paths:
        try:
            image = load_grayscale(path)
        except DataError as e:
            print_warning(f"Skipping {os.path.basename(path)}: {e}")
            continue
        loaded.append((path, resample_to_isotropic(image, target_mm)))

    if not loaded:
        raise DataError(ERROR_MESSAGES["no_images"] + f" ({directory})")
    logger.info("Loaded %d images from %s", len(loaded), directory)
    return loaded
