"""Raster primitives and slide-style preprocessing.

Covers grayscale conversion, Otsu tissue detection, micrometer-calibrated
tessellation into fixed-size patches, and the paired geometric/photometric
augmentation used during translation training. All operations are pure:
randomness comes in through an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import cv2
import numpy as np
from PIL import Image as PILImage

GRAY_WEIGHTS = (0.299, 0.587, 0.114)  # ITU-R 601 luma

DEFAULT_MPP = 0.44  # µm/px fallback for uncalibrated slides (20x-class scanner)


class ImagingError(ValueError):
    """Base class for raster contract violations."""


class DegenerateHistogramError(ImagingError):
    """Raised when an intensity histogram admits no foreground/background split."""


class CalibrationRequiredError(ImagingError):
    """Raised when an operation needs µm-per-pixel metadata that is missing."""


@dataclass
class Image:
    """H x W x C float raster with a declared value range.

    ``values`` is float32/float64, shaped (H, W) for single channel or
    (H, W, 3) for RGB. ``value_range`` declares the storage interval,
    (0, 1) on disk and (-1, 1) at network boundaries.
    """

    values: np.ndarray
    value_range: tuple[float, float] = (0.0, 1.0)
    mpp: Optional[float] = None

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim == 2:
            pass
        elif v.ndim == 3 and v.shape[2] in (1, 3):
            if v.shape[2] == 1:
                v = v[:, :, 0]
        else:
            raise ImagingError(f"expected 1 or 3 channels, got shape {v.shape}")
        lo, hi = self.value_range
        if v.size and (v.min() < lo - 1e-6 or v.max() > hi + 1e-6):
            raise ImagingError(
                f"values [{v.min():.4f}, {v.max():.4f}] outside declared range {self.value_range}"
            )
        if self.mpp is not None and self.mpp <= 0:
            raise ImagingError(f"mpp must be positive, got {self.mpp}")
        self.values = v

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.values.ndim == 2 else self.values.shape[2]


@dataclass(frozen=True)
class ClassSchema:
    """Ordered class inventory with background/border conventions.

    ``composites`` maps a derived class name to the set of base class
    indices whose union forms it (e.g. a full structure = core + rim).
    """

    class_names: tuple[str, ...]
    background_index: int = 0
    border_index: Optional[int] = None
    composites: dict[str, frozenset[int]] = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.class_names)
        if len(set(self.class_names)) != n:
            raise ImagingError("class names must be unique")
        if not (0 <= self.background_index < n):
            raise ImagingError("background_index out of range")
        for name, members in self.composites.items():
            if not members:
                raise ImagingError(f"composite {name!r} is empty")
            if self.border_index is not None and self.border_index in members:
                raise ImagingError(f"composite {name!r} contains the border class")
            if any(m < 0 or m >= n for m in members):
                raise ImagingError(f"composite {name!r} has out-of-range members")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def index_of(self, name: str) -> int:
        return self.class_names.index(name)

    def class_support(self, name: str) -> frozenset[int]:
        """Base indices forming the named class (singleton for base classes)."""
        if name in self.composites:
            return self.composites[name]
        return frozenset({self.index_of(name)})


@dataclass
class LabelMap:
    """Per-pixel class indices under a ClassSchema."""

    labels: np.ndarray
    schema: ClassSchema

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2:
            raise ImagingError(f"label map must be 2-D, got shape {lab.shape}")
        if lab.size and lab.max() >= self.schema.num_classes:
            raise ImagingError(
                f"label {lab.max()} exceeds schema size {self.schema.num_classes}"
            )
        self.labels = lab.astype(np.int64)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class TilingSpec:
    """Physical-units tiling grid.

    Defaults: 216 µm square patches resampled to 640 px, non-overlapping
    stride, and at least half the window covered by tissue.
    """

    patch_physical_size: float = 216.0
    output_px: int = 640
    tissue_fraction_min: float = 0.5
    stride: Optional[float] = None  # µm; None = patch_physical_size

    def __post_init__(self):
        if self.output_px <= 0:
            raise ImagingError("output_px must be positive")
        if not (0.0 <= self.tissue_fraction_min <= 1.0):
            raise ImagingError("tissue_fraction_min must lie in [0, 1]")

    @property
    def stride_um(self) -> float:
        return self.patch_physical_size if self.stride is None else self.stride


def rgb_to_gray(img: Image) -> Image:
    """Luminance conversion with ITU-R 601 weights."""
    if img.channels != 3:
        raise ImagingError(f"rgb_to_gray needs 3 channels, got {img.channels}")
    r, g, b = GRAY_WEIGHTS
    gray = r * img.values[:, :, 0] + g * img.values[:, :, 1] + b * img.values[:, :, 2]
    lo, hi = img.value_range
    return Image(np.clip(gray, lo, hi), value_range=img.value_range, mpp=img.mpp)


def otsu_threshold(gray: Image, bins: int = 256) -> float:
    """Bin boundary maximizing between-class variance; ties pick the lowest.

    Raises DegenerateHistogramError on constant images, where no split exists.
    """
    if gray.channels != 1:
        raise ImagingError("otsu_threshold needs a single-channel image")
    lo, hi = gray.value_range
    counts, edges = np.histogram(gray.values, bins=bins, range=(lo, hi))
    total = counts.sum()
    if total == 0 or np.count_nonzero(counts) < 2:
        raise DegenerateHistogramError("histogram has fewer than two occupied bins")

    centers = (edges[:-1] + edges[1:]) / 2.0
    w0 = np.cumsum(counts)[:-1].astype(np.float64)
    w1 = total - w0
    sum0 = np.cumsum(counts * centers)[:-1]
    sum_all = (counts * centers).sum()
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = sum0 / w0
        mu1 = (sum_all - sum0) / w1
        var_between = w0 * w1 * (mu0 - mu1) ** 2
    var_between = np.where((w0 > 0) & (w1 > 0), var_between, -np.inf)
    best = int(np.argmax(var_between))  # argmax takes the first (lowest) maximizer
    return float(edges[best + 1])


def tissue_mask(gray: Image, bins: int = 256, dark_tissue: bool = True) -> np.ndarray:
    """Boolean mask of tissue pixels via Otsu splitting.

    Stained tissue is darker than the bright glass background, so tissue is
    the below-threshold class by default; set dark_tissue=False for
    inverted-contrast inputs.
    """
    thr = otsu_threshold(gray, bins=bins)
    if dark_tissue:
        return gray.values < thr
    return gray.values >= thr


def tessellate(
    img: Image, mask: np.ndarray, spec: TilingSpec
) -> list[tuple[Image, tuple[int, int]]]:
    """Grid-walk the slide and emit resampled patches with enough tissue.

    Windows are ``patch_physical_size / mpp`` pixels, emitted in row-major
    scan order when their tissue fraction meets the spec, and bilinearly
    resampled to ``output_px``. Origins (x, y) in pixels are kept for
    spatial traceability.
    """
    if img.mpp is None:
        raise CalibrationRequiredError("tessellate requires mpp calibration")
    if mask.shape[:2] != (img.height, img.width):
        raise ImagingError("mask shape does not match image")

    win = int(round(spec.patch_physical_size / img.mpp))
    step = int(round(spec.stride_um / img.mpp))
    if win <= 0 or step <= 0:
        raise ImagingError("tiling window collapsed to zero pixels")

    patches: list[tuple[Image, tuple[int, int]]] = []
    for y in range(0, img.height - win + 1, step):
        for x in range(0, img.width - win + 1, step):
            frac = float(mask[y : y + win, x : x + win].mean())
            if frac < spec.tissue_fraction_min:
                continue
            window = img.values[y : y + win, x : x + win]
            if win != spec.output_px:
                window = cv2.resize(
                    window.astype(np.float32),
                    (spec.output_px, spec.output_px),
                    interpolation=cv2.INTER_LINEAR,
                )
            lo, hi = img.value_range
            window = np.clip(window, lo, hi)
            patches.append((Image(window, value_range=img.value_range, mpp=img.mpp), (x, y)))
    return patches


@dataclass(frozen=True)
class AugmentParams:
    flip_h: bool
    flip_v: bool
    k_rot90: int
    gamma: float


def sample_augment_params(
    rng: np.random.Generator, gamma_range: tuple[float, float] = (0.7, 1.5)
) -> AugmentParams:
    return AugmentParams(
        flip_h=bool(rng.integers(0, 2)),
        flip_v=bool(rng.integers(0, 2)),
        k_rot90=int(rng.integers(0, 4)),
        gamma=float(rng.uniform(*gamma_range)),
    )


def apply_geometric(arr: np.ndarray, params: AugmentParams) -> np.ndarray:
    out = arr
    if params.flip_h:
        out = out[:, ::-1]
    if params.flip_v:
        out = out[::-1, :]
    if params.k_rot90:
        out = np.rot90(out, k=params.k_rot90, axes=(0, 1))
    return np.ascontiguousarray(out)


def augment_pair(
    img: Image,
    label: Optional[LabelMap],
    rng: np.random.Generator,
    gamma_range: tuple[float, float] = (0.7, 1.5),
) -> tuple[Image, Optional[LabelMap]]:
    """Flip / rotate / gamma-correct an image and co-transform its label map.

    Geometry is sampled once and applied identically to image and label;
    gamma touches intensities only. Requires a square image so 90-degree
    rotations preserve shape.
    """
    if img.height != img.width:
        raise ImagingError("augment_pair requires a square image")
    params = sample_augment_params(rng, gamma_range)
    out = apply_geometric(img.values, params)
    lo, hi = img.value_range
    if (lo, hi) != (0.0, 1.0):
        raise ImagingError("gamma correction expects [0, 1] intensities")
    out = np.power(out, params.gamma)
    aug_img = Image(out, value_range=img.value_range, mpp=img.mpp)
    aug_label = None
    if label is not None:
        aug_label = LabelMap(apply_geometric(label.labels, params), label.schema)
    return aug_img, aug_label


def normalize(img: Image) -> Image:
    """Affine [0,1] -> [-1,1] map used at the network boundary."""
    if img.value_range != (0.0, 1.0):
        raise ImagingError(f"normalize expects [0,1] input, got {img.value_range}")
    return Image(2.0 * img.values - 1.0, value_range=(-1.0, 1.0), mpp=img.mpp)


def denormalize(img: Image) -> Image:
    """Inverse of normalize: [-1,1] -> [0,1]."""
    if img.value_range != (-1.0, 1.0):
        raise ImagingError(f"denormalize expects [-1,1] input, got {img.value_range}")
    return Image((img.values + 1.0) / 2.0, value_range=(0.0, 1.0), mpp=img.mpp)


# -- PNG / CSV interchange ---------------------------------------------------


def save_png(img: Image, path: Path | str) -> None:
    lo, hi = img.value_range
    arr = (img.values - lo) / (hi - lo)
    arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path)


def load_png(path: Path | str, mpp: Optional[float] = None) -> Image:
    arr = np.asarray(PILImage.open(path))
    if arr.ndim == 3 and arr.shape[2] == 4:
        arr = arr[:, :, :3]
    return Image(arr.astype(np.float32) / 255.0, value_range=(0.0, 1.0), mpp=mpp)


def save_label_png(label: LabelMap, path: Path | str) -> None:
    if label.schema.num_classes > 256:
        raise ImagingError("8-bit label PNG supports at most 256 classes")
    PILImage.fromarray(label.labels.astype(np.uint8)).save(path)


def load_label_png(path: Path | str, schema: ClassSchema) -> LabelMap:
    arr = np.asarray(PILImage.open(path))
    return LabelMap(arr.astype(np.int64), schema)


PATCH_MANIFEST_FIELDS = ("path", "origin_x_px", "origin_y_px", "slide_id", "domain", "mpp")


def write_patch_manifest(path: Path | str, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=PATCH_MANIFEST_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
