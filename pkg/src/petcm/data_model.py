"""Image containers, joint [-1, 1] normalization and background masking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Tuple

import numpy as np

from .errors import DegenerateRange, ShapeMismatch

DEFAULT_BACKGROUND_THRESHOLD = 0.05


@dataclass(frozen=True)
class NormParams:
    src_min: float
    src_max: float

    def __post_init__(self):
        if not (np.isfinite(self.src_min) and np.isfinite(self.src_max)):
            raise DegenerateRange("normalization range must be finite")
        if not self.src_max > self.src_min:
            raise DegenerateRange(
                f"src_max ({self.src_max}) must exceed src_min ({self.src_min})")

    def to_dict(self):
        return {"src_min": float(self.src_min), "src_max": float(self.src_max)}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["src_min"]), float(d["src_max"]))


@dataclass(frozen=True, eq=False)
class ImageGrid:
    """A 2D activity image with pixel spacing.

    ``data`` is stored as a read-only float64 array of shape (height, width).
    """

    data: np.ndarray
    spacing_mm: Tuple[float, float] = (1.0, 1.0)
    norm_params: Optional[NormParams] = None

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise ShapeMismatch(f"ImageGrid needs a non-empty 2D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("ImageGrid values must be finite")
        sp = tuple(float(s) for s in self.spacing_mm)
        if len(sp) != 2 or min(sp) <= 0:
            raise ValueError(f"spacing_mm must be two positive reals, got {self.spacing_mm}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing_mm", sp)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data, norm_params=None) -> "ImageGrid":
        return ImageGrid(data, self.spacing_mm, norm_params)

    def __eq__(self, other):
        if not isinstance(other, ImageGrid):
            return NotImplemented
        return (self.spacing_mm == other.spacing_mm and self.shape == other.shape
                and np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class PairedSlice:
    full: ImageGrid
    low: ImageGrid
    dose_fraction: float
    roi: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        check_same_geometry(self.full, self.low)
        if not 0.0 < self.dose_fraction <= 1.0:
            raise ValueError(f"dose_fraction must lie in (0, 1], got {self.dose_fraction}")


@dataclass(frozen=True)
class BackgroundMask:
    mask: np.ndarray
    threshold_used: float

    @property
    def fraction(self) -> float:
        return float(self.mask.mean())


def check_same_geometry(a: ImageGrid, b: ImageGrid) -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {a.shape} != {b.shape}")
    if a.spacing_mm != b.spacing_mm:
        raise ShapeMismatch(f"spacing {a.spacing_mm} != {b.spacing_mm}")


def joint_range(grids: Iterable[ImageGrid]) -> NormParams:
    """Shared (min, max) over the union of ``grids``."""
    lo, hi = np.inf, -np.inf
    for g in grids:
        lo = min(lo, float(g.data.min()))
        hi = max(hi, float(g.data.max()))
    if not hi > lo:
        raise DegenerateRange(f"joint max equals joint min ({lo})")
    return NormParams(lo, hi)


def apply_norm(grid: ImageGrid, params: NormParams) -> ImageGrid:
    lo, hi = params.src_min, params.src_max
    out = 2.0 * (grid.data - lo) / (hi - lo) - 1.0
    return grid.with_data(out, params)


def normalize_joint(full: ImageGrid, low: ImageGrid):
    """Map both images onto [-1, 1] with the min/max of their union.

    Returns the normalized pair and the shared :class:`NormParams`.
    """
    check_same_geometry(full, low)
    params = joint_range((full, low))
    return apply_norm(full, params), apply_norm(low, params), params


def denormalize(grid: ImageGrid, params: NormParams) -> ImageGrid:
    lo, hi = params.src_min, params.src_max
    out = (grid.data + 1.0) * (0.5 * (hi - lo)) + lo
    return ImageGrid(out, grid.spacing_mm, None)


def background_mask(grid: ImageGrid, rel_threshold: float = DEFAULT_BACKGROUND_THRESHOLD) -> BackgroundMask:
    """Foreground = pixels strictly above ``min + rel_threshold * (max - min)``."""
    if not 0.0 <= rel_threshold < 1.0:
        raise ValueError(f"rel_threshold must lie in [0, 1), got {rel_threshold}")
    lo, hi = float(grid.data.min()), float(grid.data.max())
    if not hi > lo:
        raise DegenerateRange("cannot mask a constant image")
    thr = lo + rel_threshold * (hi - lo)
    return BackgroundMask(grid.data > thr, thr)
