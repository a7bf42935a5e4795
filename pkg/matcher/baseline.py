"""
Classical keypoint baseline: a simplified difference-of-Gaussians detector with
gradient-histogram descriptors, matched either with the ratio test or with
mutual-best (inverse-consistent) matching on descriptor distance.
"""

import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial.distance import cdist

from common.config import BASELINE_CONFIG
from common.errors import DataError
from common.image_io import GrayImage, rescale_intensity
from common.utils import atomic_write_text
from matcher.inference import MatchPair, MatchSet, inverse_consistent_match

logger = logging.getLogger(__name__)

DESCRIPTOR_DIM = 128
SPATIAL_BINS = 4
ORIENTATION_BINS = 8
SAMPLES_PER_SIDE = 16
ORIENTATION_HISTOGRAM_BINS = 36
MIN_OCTAVE_SIZE = 8

# 26-neighborhood without the center
NEIGHBORHOOD = np.ones((3, 3, 3), dtype=bool)
NEIGHBORHOOD[1, 1, 1] = False


@dataclass(frozen=True, eq=False)
class ClassicKeypoint:
    row: float
    col: float
    scale: float
    orientation: float  # radians, atan2(d_row, d_col) convention
    descriptor: Optional[np.ndarray] = None

    @property
    def location(self) -> Tuple[float, float]:
        return self.row, self.col


@dataclass
class DogOctave:
    factor: int
    sigmas: List[float]
    gaussians: np.ndarray  # (S + 3, h, w)
    dogs: np.ndarray       # (S + 2, h, w)


def octave_sigmas(sigma: float, scales_per_octave: int) -> List[float]:
    return [sigma * 2.0 ** (k / scales_per_octave) for k in range(scales_per_octave + 3)]


def build_dog_pyramid(pixels: np.ndarray, octaves: int, scales_per_octave: int, sigma: float) -> List[DogOctave]:
    """Absolute-sigma Gaussian stacks per octave; each octave halves the previous one"""
    if octaves < 1 or scales_per_octave < 1:
        raise ValueError("octaves and scales_per_octave must be >= 1")
    smallest = min(pixels.shape) // 2 ** (octaves - 1)
    if smallest < MIN_OCTAVE_SIZE:
        raise ValueError(f"Image {pixels.shape} is too small for {octaves} octaves")

    sigmas = octave_sigmas(sigma, scales_per_octave)
    pyramid = []
    base = np.asarray(pixels, dtype=np.float64)
    for octave in range(octaves):
        gaussians = np.stack([ndimage.gaussian_filter(base, s, mode="nearest") for s in sigmas])
        pyramid.append(DogOctave(2 ** octave, sigmas, gaussians, gaussians[1:] - gaussians[:-1]))
        base = gaussians[scales_per_octave][::2, ::2]
    return pyramid


def find_dog_extrema(dogs: np.ndarray, contrast_thresh: float, border_px: int) -> List[Tuple[int, int, int]]:
    """(layer, row, col) strictly above or below all 26 neighbors with |DoG| > contrast_thresh"""
    border = max(1, border_px)
    neighbor_max = ndimage.maximum_filter(dogs, footprint=NEIGHBORHOOD, mode="nearest")
    neighbor_min = ndimage.minimum_filter(dogs, footprint=NEIGHBORHOOD, mode="nearest")
    extremum = ((dogs > neighbor_max) | (dogs < neighbor_min)) & (np.abs(dogs) > contrast_thresh)

    extremum[0] = extremum[-1] = False
    extremum[:, :border] = extremum[:, -border:] = False
    extremum[:, :, :border] = extremum[:, :, -border:] = False
    return [(int(l), int(r), int(c)) for l, r, c in zip(*np.nonzero(extremum))]


def _gradients(smoothed: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    d_row, d_col = np.gradient(smoothed)
    return d_row, d_col


def dominant_orientation(smoothed: np.ndarray, row: float, col: float, scale: float) -> float:
    """Peak of a smoothed 36-bin magnitude-weighted gradient histogram"""
    d_row, d_col = _gradients(smoothed)
    radius = max(1, int(round(3.0 * 1.5 * scale)))
    r0, c0 = int(round(row)), int(round(col))
    rows = np.arange(max(0, r0 - radius), min(smoothed.shape[0], r0 + radius + 1))
    cols = np.arange(max(0, c0 - radius), min(smoothed.shape[1], c0 + radius + 1))
    rr, cc = np.meshgrid(rows, cols, indexing="ij")

    weight = np.exp(-((rr - row) ** 2 + (cc - col) ** 2) / (2.0 * (1.5 * scale) ** 2))
    magnitude = np.hypot(d_row[rr, cc], d_col[rr, cc]) * weight
    angle = np.mod(np.arctan2(d_row[rr, cc], d_col[rr, cc]), 2.0 * math.pi)
    bins = np.round(angle * ORIENTATION_HISTOGRAM_BINS / (2.0 * math.pi)).astype(int) % ORIENTATION_HISTOGRAM_BINS
    histogram = np.bincount(bins.ravel(), weights=magnitude.ravel(), minlength=ORIENTATION_HISTOGRAM_BINS)

    smooth = (6 * histogram + 4 * (np.roll(histogram, 1) + np.roll(histogram, -1))
              + np.roll(histogram, 2) + np.roll(histogram, -2)) / 16.0
    return float(np.argmax(smooth)) * 2.0 * math.pi / ORIENTATION_HISTOGRAM_BINS


def detect_keypoints_dog(img: GrayImage, octaves: Optional[int] = None, scales_per_octave: Optional[int] = None,
                         contrast_thresh: Optional[float] = None, sigma: Optional[float] = None,
                         border_px: Optional[int] = None) -> List[ClassicKeypoint]:
    """DoG scale-space extrema on the [0, 1]-rescaled image, one dominant orientation each"""
    octaves = octaves or BASELINE_CONFIG["octaves"]
    scales_per_octave = scales_per_octave or BASELINE_CONFIG["scales_per_octave"]
    contrast_thresh = BASELINE_CONFIG["contrast_thresh"] if contrast_thresh is None else contrast_thresh
    sigma = sigma or BASELINE_CONFIG["sigma"]
    border_px = BASELINE_CONFIG["border_px"] if border_px is None else border_px

    pixels = rescale_intensity(img.pixels)
    if not pixels.any():
        return []

    keypoints = []
    for octave in build_dog_pyramid(pixels, octaves, scales_per_octave, sigma):
        for layer, row, col in find_dog_extrema(octave.dogs, contrast_thresh, border_px):
            local_scale = octave.sigmas[layer]
            orientation = dominant_orientation(octave.gaussians[layer], row, col, local_scale)
            keypoints.append(ClassicKeypoint(
                row=float(row * octave.factor),
                col=float(col * octave.factor),
                scale=float(local_scale * octave.factor),
                orientation=orientation
            ))
    logger.debug("DoG detector: %d keypoints", len(keypoints))
    return keypoints


def _sample_frame(kp: ClassicKeypoint) -> Tuple[np.ndarray, np.ndarray, float]:
    """Sample positions (S*S, 2) in the keypoint's rotated frame, grid offsets, window radius"""
    step = 0.75 * kp.scale
    offsets = (np.arange(SAMPLES_PER_SIDE) - (SAMPLES_PER_SIDE - 1) / 2.0) * step
    a, b = np.meshgrid(offsets, offsets, indexing="ij")
    direction = np.array([math.sin(kp.orientation), math.cos(kp.orientation)])
    perpendicular = np.array([math.cos(kp.orientation), -math.sin(kp.orientation)])
    positions = (np.array([kp.row, kp.col])[None, :]
                 + a.reshape(-1, 1) * direction[None, :]
                 + b.reshape(-1, 1) * perpendicular[None, :])
    radius = math.sqrt(2.0) * (SAMPLES_PER_SIDE / 2.0) * step
    return positions, direction, radius


def _descriptor(d_row: np.ndarray, d_col: np.ndarray, kp: ClassicKeypoint, clip: float) -> Optional[np.ndarray]:
    height, width = d_row.shape
    positions, _, radius = _sample_frame(kp)
    if (kp.row - radius < 0 or kp.row + radius > height - 1
            or kp.col - radius < 0 or kp.col + radius > width - 1):
        return None

    coords = positions.T
    g_row = ndimage.map_coordinates(d_row, coords, order=1)
    g_col = ndimage.map_coordinates(d_col, coords, order=1)
    magnitude = np.hypot(g_row, g_col)
    relative = np.mod(np.arctan2(g_row, g_col) - kp.orientation, 2.0 * math.pi)

    index = np.arange(SAMPLES_PER_SIDE * SAMPLES_PER_SIDE)
    grid_a, grid_b = np.divmod(index, SAMPLES_PER_SIDE)
    center = (SAMPLES_PER_SIDE - 1) / 2.0
    weight = np.exp(-((grid_a - center) ** 2 + (grid_b - center) ** 2) / (2.0 * (SAMPLES_PER_SIDE / 2.0) ** 2))
    magnitude = magnitude * weight

    cell = (grid_a // (SAMPLES_PER_SIDE // SPATIAL_BINS)) * SPATIAL_BINS + grid_b // (SAMPLES_PER_SIDE // SPATIAL_BINS)
    position = relative * ORIENTATION_BINS / (2.0 * math.pi)
    lower = np.floor(position).astype(int) % ORIENTATION_BINS
    upper = (lower + 1) % ORIENTATION_BINS
    fraction = position - np.floor(position)

    histogram = np.zeros(SPATIAL_BINS * SPATIAL_BINS * ORIENTATION_BINS)
    np.add.at(histogram, cell * ORIENTATION_BINS + lower, magnitude * (1.0 - fraction))
    np.add.at(histogram, cell * ORIENTATION_BINS + upper, magnitude * fraction)

    norm = np.linalg.norm(histogram)
    if norm <= 0:
        return None
    histogram = np.minimum(histogram / norm, clip)
    return histogram / np.linalg.norm(histogram)


def compute_descriptors(img: GrayImage, kps: Sequence[ClassicKeypoint],
                        clip: Optional[float] = None) -> List[ClassicKeypoint]:
    """
    Orientation-normalized 4x4x8 gradient histograms, L2-normalized, clipped,
    renormalized. Keypoints whose window leaves the image are dropped.
    """
    clip = clip or BASELINE_CONFIG["descriptor_clip"]
    pixels = rescale_intensity(img.pixels)
    gradients: Dict[float, Tuple[np.ndarray, np.ndarray]] = {}

    described = []
    for kp in kps:
        if kp.scale <= 0:
            raise ValueError(f"Keypoint scale must be positive, got {kp.scale}")
        if kp.scale not in gradients:
            gradients[kp.scale] = _gradients(ndimage.gaussian_filter(pixels, kp.scale, mode="nearest"))
        descriptor = _descriptor(*gradients[kp.scale], kp, clip)
        if descriptor is not None:
            described.append(replace(kp, descriptor=descriptor))

    logger.debug("Described %d of %d keypoints", len(described), len(kps))
    return described


def descriptor_matrix(kps: Sequence[ClassicKeypoint]) -> np.ndarray:
    if not kps:
        return np.zeros((0, DESCRIPTOR_DIM))
    return np.stack([kp.descriptor for kp in kps])


def match_ratio_test(D1: np.ndarray, D2: np.ndarray, ratio: Optional[float] = None) -> List[Tuple[int, int]]:
    """One-directional I1 -> I2: accept i's nearest j iff d_nearest < ratio * d_second"""
    ratio = ratio or BASELINE_CONFIG["ratio"]
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    D1 = np.asarray(D1, dtype=np.float64).reshape(-1, DESCRIPTOR_DIM) if np.size(D1) else np.zeros((0, DESCRIPTOR_DIM))
    D2 = np.asarray(D2, dtype=np.float64).reshape(-1, DESCRIPTOR_DIM) if np.size(D2) else np.zeros((0, DESCRIPTOR_DIM))
    if D1.shape[0] == 0 or D2.shape[0] < 2:
        return []

    distances = cdist(D1, D2)
    order = np.argsort(distances, axis=1, kind="stable")[:, :2]
    rows = np.arange(D1.shape[0])
    nearest = distances[rows, order[:, 0]]
    second = distances[rows, order[:, 1]]
    accepted = nearest < ratio * second
    return [(int(i), int(order[i, 0])) for i in rows[accepted]]


def match_inverse_consistent(D1: np.ndarray, D2: np.ndarray) -> List[Tuple[int, int]]:
    """Mutual nearest neighbors; with no probability channel both criteria use the distance"""
    if np.size(D1) == 0 or np.size(D2) == 0:
        return []
    d2 = cdist(D1, D2, "sqeuclidean")
    return inverse_consistent_match(-d2, d2)


def baseline_match(kps1: Sequence[ClassicKeypoint], kps2: Sequence[ClassicKeypoint],
                   method: str, ratio: Optional[float] = None) -> MatchSet:
    """method: 'ratio-test' or 'inverse-consistency'; match_prob is NaN for baseline rows"""
    D1, D2 = descriptor_matrix(kps1), descriptor_matrix(kps2)
    if method == "ratio-test":
        indices = match_ratio_test(D1, D2, ratio)
    elif method == "inverse-consistency":
        indices = match_inverse_consistent(D1, D2)
    else:
        raise ValueError(f"Unknown baseline matching method '{method}'")

    pairs = []
    for i, j in indices:
        pairs.append(MatchPair(
            pt1=kps1[i].location, pt2=kps2[j].location, match_prob=float("nan"),
            desc_dist2=float(np.sum((D1[i] - D2[j]) ** 2)), index1=i, index2=j
        ))
    return MatchSet(pairs)


def keypoint_csv_header() -> str:
    return ",".join(["row", "col", "scale", "orientation"] + [f"d{k}" for k in range(DESCRIPTOR_DIM)])


def export_keypoints_csv(path: str, kps: Sequence[ClassicKeypoint]):
    rows = [[kp.row, kp.col, kp.scale, kp.orientation] + list(kp.descriptor) for kp in kps]
    lines = [keypoint_csv_header()]
    lines.extend(",".join(repr(float(v)) for v in row) for row in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def import_keypoints_csv(path: str) -> List[ClassicKeypoint]:
    """Externally computed keypoints; descriptors are renormalized to unit length"""
    try:
        with open(path, "r", encoding="utf-8") as f:
            header = f.readline().strip()
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as e:
        raise DataError(f"Error reading keypoints {path}: {e}") from e
    if header != keypoint_csv_header():
        raise DataError(f"{path}: expected header row,col,scale,orientation,d0..d{DESCRIPTOR_DIM - 1}")
    if table.size == 0:
        return []

    keypoints = []
    for row in table:
        descriptor = row[4:]
        norm = np.linalg.norm(descriptor)
        if norm <= 0:
            logger.warning("Dropping keypoint with zero descriptor in %s", path)
            continue
        keypoints.append(ClassicKeypoint(float(row[0]), float(row[1]), float(row[2]), float(row[3]),
                                         descriptor / norm))
    return keypoints
