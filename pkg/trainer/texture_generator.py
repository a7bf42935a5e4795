"""
Procedural textured images for desk-scale training runs
"""

import logging
import os
from typing import List, Optional, Tuple

import numpy as np
from scipy import ndimage

from common.config import DATASET_CONFIG
from common.image_io import GrayImage, save_grayscale

logger = logging.getLogger(__name__)


def generate_texture(shape: Tuple[int, int], rng: np.random.Generator,
                     blob_range: Optional[Tuple[int, int]] = None,
                     noise_sigma: Optional[float] = None) -> GrayImage:
    """
    Gaussian blobs plus a linear gradient plus smoothed noise inside a bright
    disc, on a dark background. Values span [0, 255].
    """
    blob_range = blob_range or DATASET_CONFIG["blobs"]
    noise_sigma = DATASET_CONFIG["noise_sigma"] if noise_sigma is None else noise_sigma
    height, width = shape
    rows, cols = np.meshgrid(np.arange(height, dtype=np.float64),
                             np.arange(width, dtype=np.float64), indexing="ij")
    size = float(min(shape))

    angle = rng.uniform(0.0, 2.0 * np.pi)
    gradient = (np.cos(angle) * rows + np.sin(angle) * cols) / size
    texture = 0.3 * (gradient - gradient.min())

    for _ in range(int(rng.integers(blob_range[0], blob_range[1] + 1))):
        center_r = rng.uniform(0.0, height - 1)
        center_c = rng.uniform(0.0, width - 1)
        sigma = rng.uniform(size / 40.0, size / 10.0)
        amplitude = rng.uniform(-0.6, 1.0)
        texture += amplitude * np.exp(-((rows - center_r) ** 2 + (cols - center_c) ** 2) / (2.0 * sigma ** 2))

    noise = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=1.0)
    texture += noise_sigma * noise / (noise.std() + 1e-12)

    texture = (texture - texture.min()) / (texture.max() - texture.min() + 1e-12)

    # Foreground disc; the background stays below the valid-mask threshold
    center = np.array([(height - 1) / 2.0, (width - 1) / 2.0]) + rng.uniform(-0.05, 0.05, size=2) * size
    radius = rng.uniform(0.40, 0.48) * size
    inside = np.hypot(rows - center[0], cols - center[1]) <= radius
    pixels = np.where(inside, 40.0 + 215.0 * texture, 0.0)
    return GrayImage(pixels)


def generate_dataset(count: int, shape: Tuple[int, int], seed: int) -> List[GrayImage]:
    rng = np.random.default_rng(seed)
    return [generate_texture(shape, rng) for _ in range(count)]


def write_dataset(images: List[GrayImage], directory: str) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for index, image in enumerate(images):
        path = os.path.join(directory, f"texture_{index:04d}.png")
        save_grayscale(path, GrayImage(np.rint(image.pixels), image.spacing))
        paths.append(path)
    logger.info("Wrote %d textures to %s", len(paths), directory)
    return paths
