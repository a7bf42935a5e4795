"""
Intensity, affine and elastic transformations for self-supervised training pairs

Every geometric transform is stored as its backward map phi: target -> reference,
so warping samples the reference at phi(x) and point projection is exact.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from common.config import IMAGE_CONFIG, TRANSFORM_CONFIG
from common.image_io import BinaryMask, GrayImage

logger = logging.getLogger(__name__)

INTENSITY_FAMILIES = ("brightness", "contrast", "intensity")
AFFINE_FAMILIES = ("rotation", "scaling", "shearing", "affine")
FAMILIES = INTENSITY_FAMILIES + AFFINE_FAMILIES + ("elastic",)

Range = Tuple[float, float]


@dataclass(frozen=True)
class TransformSpec:
    """A transformation family plus the parameter ranges to draw from"""
    family: str
    intensity_range: Range = TRANSFORM_CONFIG["intensity_range"]
    intensity_cap: float = TRANSFORM_CONFIG["intensity_cap"]
    rotation_deg: Range = TRANSFORM_CONFIG["rotation_deg"]
    scale: Range = TRANSFORM_CONFIG["scale"]
    shear: Range = TRANSFORM_CONFIG["shear"]
    translation_fraction: Range = TRANSFORM_CONFIG["translation_fraction"]
    elastic_blobs: int = TRANSFORM_CONFIG["elastic_blobs"]
    elastic_sigma_fraction: Range = TRANSFORM_CONFIG["elastic_sigma_fraction"]
    elastic_amplitude_px: Range = TRANSFORM_CONFIG["elastic_amplitude_px"]

    def validate(self):
        if self.family not in FAMILIES:
            raise ValueError(f"Unknown transform family '{self.family}'; valid: {', '.join(FAMILIES)}")
        for name in ("intensity_range", "rotation_deg", "scale", "shear",
                     "translation_fraction", "elastic_sigma_fraction", "elastic_amplitude_px"):
            lo, hi = getattr(self, name)
            if not (math.isfinite(lo) and math.isfinite(hi)) or lo > hi:
                raise ValueError(f"Invalid range for {name}: ({lo}, {hi})")
        if max(abs(v) for v in self.intensity_range) > self.intensity_cap:
            raise ValueError(f"intensity_range {self.intensity_range} exceeds cap {self.intensity_cap}")
        if self.scale[0] <= 0:
            raise ValueError(f"scale range must be positive, got {self.scale}")
        if self.elastic_sigma_fraction[0] <= 0:
            raise ValueError(f"elastic_sigma_fraction must be positive, got {self.elastic_sigma_fraction}")
        if self.elastic_amplitude_px[0] < 0:
            raise ValueError(f"elastic_amplitude_px must be >= 0, got {self.elastic_amplitude_px}")
        if self.elastic_blobs < 0:
            raise ValueError(f"elastic_blobs must be >= 0, got {self.elastic_blobs}")


@dataclass(frozen=True)
class IntensityJitter:
    mode: str
    magnitude: float
    cap: float = TRANSFORM_CONFIG["intensity_cap"]
    family: str = "intensity"

    is_geometric = False

    def __post_init__(self):
        if self.mode not in ("brightness", "contrast"):
            raise ValueError(f"Unknown intensity mode '{self.mode}'")
        if abs(self.magnitude) > self.cap + 1e-12:
            raise ValueError(f"|magnitude| {self.magnitude} exceeds cap {self.cap}")

    def apply(self, pixels: np.ndarray, max_intensity: float) -> np.ndarray:
        if self.mode == "brightness":
            return pixels + self.magnitude * max_intensity
        mean = pixels.mean()
        return mean + (1.0 + self.magnitude) * (pixels - mean)

    def map_points(self, points: np.ndarray) -> np.ndarray:
        return np.array(points, dtype=np.float64, copy=True)

    def to_dict(self) -> Dict:
        return {"type": "intensity", "family": self.family, "mode": self.mode,
                "magnitude": self.magnitude, "cap": self.cap}


@dataclass(frozen=True)
class AffineTransform2D:
    """phi(x) = matrix @ x + translation, x in (row, col) pixels"""
    matrix: Tuple[Tuple[float, float], Tuple[float, float]]
    translation: Tuple[float, float]
    params: Dict = field(default_factory=dict, compare=False)
    family: str = "affine"

    is_geometric = True

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=np.float64)
        if A.shape != (2, 2) or np.asarray(self.translation).shape != (2,):
            raise ValueError("AffineTransform2D needs a 2x2 matrix and a 2-vector translation")
        if abs(np.linalg.det(A)) <= 1e-6:
            raise ValueError(f"Singular affine matrix (det={np.linalg.det(A):.3g})")

    @property
    def A(self) -> np.ndarray:
        return np.asarray(self.matrix, dtype=np.float64)

    @property
    def b(self) -> np.ndarray:
        return np.asarray(self.translation, dtype=np.float64)

    def map_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        return points @ self.A.T + self.b

    def compose(self, inner: "AffineTransform2D") -> "AffineTransform2D":
        """self(inner(x))"""
        A = self.A @ inner.A
        b = self.A @ inner.b + self.b
        return AffineTransform2D(_as_matrix(A), (float(b[0]), float(b[1])), family="affine")

    def to_dict(self) -> Dict:
        return {"type": "affine", "family": self.family, "matrix": [list(r) for r in self.matrix],
                "translation": list(self.translation), "params": dict(self.params)}


@dataclass(frozen=True)
class ElasticField:
    """phi(x) = x + u(x), u a sum of Gaussian blobs rasterized on the target grid"""
    shape: Tuple[int, int]
    # (center_row, center_col, amplitude_row, amplitude_col, sigma)
    blobs: Tuple[Tuple[float, float, float, float, float], ...]
    params: Dict = field(default_factory=dict, compare=False)
    family: str = "elastic"

    is_geometric = True

    def __post_init__(self):
        displacement = gaussian_blob_field(self.shape, self.blobs)
        if not np.isfinite(displacement).all():
            raise ValueError("Elastic displacement field is not finite")
        displacement.setflags(write=False)
        object.__setattr__(self, "_displacement", displacement)

    @property
    def displacement(self) -> np.ndarray:
        """(2, H, W) array of (row, col) displacement in pixels"""
        return self._displacement

    def map_points(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        coords = points.T
        du = ndimage.map_coordinates(self._displacement[0], coords, order=1, mode="nearest")
        dv = ndimage.map_coordinates(self._displacement[1], coords, order=1, mode="nearest")
        return points + np.stack([du, dv], axis=1)

    def grid_map(self) -> np.ndarray:
        """phi on the full target grid; exact on grid nodes"""
        rows, cols = np.meshgrid(np.arange(self.shape[0]), np.arange(self.shape[1]), indexing="ij")
        return np.stack([rows + self._displacement[0], cols + self._displacement[1]])

    def to_dict(self) -> Dict:
        return {"type": "elastic", "family": self.family, "shape": list(self.shape),
                "blobs": [list(b) for b in self.blobs], "params": dict(self.params)}


@dataclass(frozen=True)
class ComposedTransform:
    """Transforms applied in order to the reference; the target is the last output"""
    parts: Tuple
    family: str = "composed"

    def __post_init__(self):
        if not self.parts:
            raise ValueError("ComposedTransform needs at least one part")

    @property
    def is_geometric(self) -> bool:
        return any(p.is_geometric for p in self.parts)

    @property
    def geometric_parts(self) -> List:
        return [p for p in self.parts if p.is_geometric]

    @property
    def intensity_parts(self) -> List:
        return [p for p in self.parts if not p.is_geometric]

    def map_points(self, points: np.ndarray) -> np.ndarray:
        mapped = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        for part in reversed(self.geometric_parts):
            mapped = part.map_points(mapped)
        return mapped

    def to_dict(self) -> Dict:
        return {"type": "composed", "family": self.family, "parts": [p.to_dict() for p in self.parts]}


Transform = Union[IntensityJitter, AffineTransform2D, ElasticField, ComposedTransform]


def _as_matrix(A: np.ndarray) -> Tuple[Tuple[float, float], Tuple[float, float]]:
    return ((float(A[0, 0]), float(A[0, 1])), (float(A[1, 0]), float(A[1, 1])))


def gaussian_blob_field(shape: Tuple[int, int], blobs: Sequence) -> np.ndarray:
    rows, cols = np.meshgrid(np.arange(shape[0], dtype=np.float64),
                             np.arange(shape[1], dtype=np.float64), indexing="ij")
    field_ = np.zeros((2,) + tuple(shape), dtype=np.float64)
    for center_r, center_c, amp_r, amp_c, sigma in blobs:
        weight = np.exp(-((rows - center_r) ** 2 + (cols - center_c) ** 2) / (2.0 * sigma ** 2))
        field_[0] += amp_r * weight
        field_[1] += amp_c * weight
    return field_


def affine_about_center(shape: Tuple[int, int], rotation_deg: float = 0.0, scale: float = 1.0,
                        shear: float = 0.0, translation: Tuple[float, float] = (0.0, 0.0),
                        family: str = "affine") -> AffineTransform2D:
    """Rotation, isotropic scale and shear about the image center, then translation"""
    theta = math.radians(rotation_deg)
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    S = np.array([[scale, 0.0], [0.0, scale]])
    Sh = np.array([[1.0, shear], [0.0, 1.0]])
    M = R @ S @ Sh
    center = np.array([(shape[0] - 1) / 2.0, (shape[1] - 1) / 2.0])
    b = center - M @ center + np.asarray(translation, dtype=np.float64)
    params = {"rotation_deg": rotation_deg, "scale": scale, "shear": shear,
              "translation": [float(translation[0]), float(translation[1])]}
    return AffineTransform2D(_as_matrix(M), (float(b[0]), float(b[1])), params=params, family=family)


def _sample_elastic(spec: TransformSpec, rng: np.random.Generator, shape: Tuple[int, int]) -> ElasticField:
    size = float(min(shape))
    raw = []
    for _ in range(spec.elastic_blobs):
        center_r = rng.uniform(0.0, shape[0] - 1)
        center_c = rng.uniform(0.0, shape[1] - 1)
        sigma = rng.uniform(spec.elastic_sigma_fraction[0] * size, spec.elastic_sigma_fraction[1] * size)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        magnitude = rng.uniform(0.5, 1.0)
        raw.append((center_r, center_c, magnitude * math.sin(angle), magnitude * math.cos(angle), sigma))
    target_median = rng.uniform(*spec.elastic_amplitude_px)

    # Scale blob amplitudes so the median displacement magnitude hits the drawn target
    gain = 0.0
    if raw and target_median > 0:
        unit = gaussian_blob_field(shape, raw)
        median = float(np.median(np.hypot(unit[0], unit[1])))
        gain = target_median / median if median > 0 else 0.0
    blobs = tuple((r, c, a_r * gain, a_c * gain, s) for r, c, a_r, a_c, s in raw)
    return ElasticField(tuple(shape), blobs, params={"target_median_px": target_median})


def sample_transform(spec: TransformSpec, rng: np.random.Generator, shape: Tuple[int, int]) -> Transform:
    """Draw one transform of spec.family; deterministic given (spec, rng state, shape)"""
    spec.validate()
    family = spec.family

    if family in INTENSITY_FAMILIES:
        mode = family
        if family == "intensity":
            mode = ("brightness", "contrast")[int(rng.integers(0, 2))]
        magnitude = rng.uniform(*spec.intensity_range)
        t = IntensityJitter(mode, float(magnitude), cap=spec.intensity_cap, family=family)
    elif family == "rotation":
        t = affine_about_center(shape, rotation_deg=rng.uniform(*spec.rotation_deg), family=family)
    elif family == "scaling":
        t = affine_about_center(shape, scale=rng.uniform(*spec.scale), family=family)
    elif family == "shearing":
        t = affine_about_center(shape, shear=rng.uniform(*spec.shear), family=family)
    elif family == "affine":
        rotation = rng.uniform(*spec.rotation_deg)
        scale = rng.uniform(*spec.scale)
        shear = rng.uniform(*spec.shear)
        translation = (rng.uniform(*spec.translation_fraction) * shape[0],
                       rng.uniform(*spec.translation_fraction) * shape[1])
        t = affine_about_center(shape, rotation, scale, shear, translation, family=family)
    else:
        t = _sample_elastic(spec, rng, shape)

    logger.debug("Sampled %s transform: %s", family, t.to_dict())
    return t


def compose(first: Transform, second: Transform) -> Transform:
    """Apply first to the reference, then second; affine pairs fold into one affine"""
    if isinstance(first, AffineTransform2D) and isinstance(second, AffineTransform2D):
        # target(x) = ref(phi1(phi2(x)))
        return first.compose(second)
    parts = []
    for t in (first, second):
        parts.extend(t.parts if isinstance(t, ComposedTransform) else [t])
    return ComposedTransform(tuple(parts))


def reference_coordinates(t: Transform, shape: Tuple[int, int]) -> np.ndarray:
    """phi evaluated on every target pixel: (2, H, W) reference (row, col) coordinates"""
    if isinstance(t, ElasticField) and tuple(t.shape) == tuple(shape):
        return t.grid_map()
    rows, cols = np.meshgrid(np.arange(shape[0], dtype=np.float64),
                             np.arange(shape[1], dtype=np.float64), indexing="ij")
    points = np.stack([rows.ravel(), cols.ravel()], axis=1)
    return t.map_points(points).T.reshape(2, *shape)


def _intensity_parts(t: Transform) -> List[IntensityJitter]:
    if isinstance(t, IntensityJitter):
        return [t]
    if isinstance(t, ComposedTransform):
        return t.intensity_parts
    return []


def warp_image(img: GrayImage, t: Transform, background: Optional[float] = None) -> GrayImage:
    """Backward warp: target(x) = reference(phi(x)), bilinear, out-of-domain = background"""
    background = IMAGE_CONFIG["background_value"] if background is None else background
    pixels = img.pixels
    if t.is_geometric:
        coords = reference_coordinates(t, img.shape)
        pixels = ndimage.map_coordinates(img.pixels, coords, order=1, mode="constant", cval=background)
    max_intensity = img.max_intensity
    for jitter in _intensity_parts(t):
        pixels = jitter.apply(pixels, max_intensity)
    return GrayImage(pixels, img.spacing)


def warp_mask(mask: BinaryMask, t: Transform) -> BinaryMask:
    """Same phi as warp_image with nearest-neighbor sampling"""
    if not t.is_geometric:
        return BinaryMask(mask.values.copy())
    coords = reference_coordinates(t, mask.shape)
    values = ndimage.map_coordinates(mask.values, coords, order=0, mode="constant", cval=0)
    return BinaryMask(values.astype(np.uint8))


def project_points(points: np.ndarray, t: Transform) -> np.ndarray:
    """Vectorized project_to_reference for an (N, 2) array of target points"""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if not t.is_geometric:
        return points.copy()
    return t.map_points(points)


def project_to_reference(pt_target: Tuple[float, float], t: Transform) -> Tuple[float, float]:
    """phi(pt); points may land outside the reference domain"""
    mapped = project_points(np.asarray([pt_target], dtype=np.float64), t)[0]
    return float(mapped[0]), float(mapped[1])


@dataclass(frozen=True)
class DisplacementStats:
    median_mm: float
    iqr_mm: Tuple[float, float]


def displacement_stats(t: Transform, mask: BinaryMask,
                       spacing: Tuple[float, float] = (1.0, 1.0)) -> DisplacementStats:
    """Median and (Q1, Q3) of |phi(x) - x| in mm over mask pixels"""
    rows, cols = np.nonzero(mask.values)
    if rows.size == 0:
        raise ValueError("displacement_stats needs a non-empty mask")
    points = np.stack([rows, cols], axis=1).astype(np.float64)
    delta = project_points(points, t) - points
    distances = np.hypot(delta[:, 0] * spacing[0], delta[:, 1] * spacing[1])
    q1, median, q3 = np.percentile(distances, [25, 50, 75])
    return DisplacementStats(float(median), (float(q1), float(q3)))


def transform_to_dict(t: Transform) -> Dict:
    return t.to_dict()


def transform_from_dict(record: Dict) -> Transform:
    kind = record.get("type")
    family = record.get("family")
    if kind == "intensity":
        return IntensityJitter(record["mode"], float(record["magnitude"]),
                               cap=float(record.get("cap", TRANSFORM_CONFIG["intensity_cap"])),
                               family=family or "intensity")
    if kind == "affine":
        A = np.asarray(record["matrix"], dtype=np.float64)
        b = record["translation"]
        return AffineTransform2D(_as_matrix(A), (float(b[0]), float(b[1])),
                                 params=record.get("params", {}), family=family or "affine")
    if kind == "elastic":
        blobs = tuple(tuple(float(v) for v in blob) for blob in record["blobs"])
        return ElasticField(tuple(int(s) for s in record["shape"]), blobs,
                            params=record.get("params", {}), family=family or "elastic")
    if kind == "composed":
        return ComposedTransform(tuple(transform_from_dict(p) for p in record["parts"]))
    raise ValueError(f"Unknown transform record type '{kind}'")


def spec_for_family(family: str, **overrides) -> TransformSpec:
    spec = replace(TransformSpec(family=family), **overrides)
    spec.validate()
    return spec


def specs_from_config(section, families: Sequence[str]) -> Dict[str, TransformSpec]:
    """One TransformSpec per family from a run config `transforms` section"""
    ranges = {}
    for name in ("intensity_range", "rotation_deg", "scale", "shear", "translation_fraction",
                 "elastic_sigma_fraction", "elastic_amplitude_px"):
        values = getattr(section, name)
        if len(values) != 2:
            raise ValueError(f"transforms.{name} must have exactly two entries, got {values}")
        ranges[name] = (float(values[0]), float(values[1]))
    return {
        family: spec_for_family(family, intensity_cap=section.intensity_cap,
                                elastic_blobs=section.elastic_blobs, **ranges)
        for family in families
    }
