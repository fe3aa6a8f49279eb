"""Image-quality metrics: NMAE, PSNR, 3-scale MS-SSIM, NCC and SUV error.

All functions take ImageGrids or plain 2D arrays in activity units. Masked
metrics use the foreground of a :class:`BackgroundMask` (or a boolean array);
``mask=None`` means every pixel.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.ndimage import correlate1d

from .data_model import BackgroundMask, ImageGrid, background_mask
from .errors import ConstantImage, DegenerateRange, EmptyRoi, ShapeMismatch, TooSmallForScales

PSNR_CAP_DB = 99.0
# Wang et al. 5-scale weights; the first three are renormalized for 3 scales
MS_SSIM_WEIGHTS_5 = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class MetricReport:
    nmae_pct: float
    psnr_db: float
    ms_ssim: float
    ncc: float
    suv_error_pct: Optional[float]
    mask_fraction: float
    per_slice: List[dict] = field(default_factory=list)

    FIELDS = ("nmae_pct", "psnr_db", "ms_ssim", "ncc", "suv_error_pct", "mask_fraction")

    def row(self) -> dict:
        return {k: getattr(self, k) for k in self.FIELDS}


@dataclass(frozen=True)
class RoiSpec:
    mask: np.ndarray
    label: str = "lesion"

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if not m.any():
            raise EmptyRoi(f"ROI {self.label!r} is empty")
        object.__setattr__(self, "mask", m)


def _arr(x) -> np.ndarray:
    if isinstance(x, ImageGrid):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _pair(pred, ref):
    p, r = _arr(pred), _arr(ref)
    if p.shape != r.shape:
        raise ShapeMismatch(f"pred {p.shape} vs ref {r.shape}")
    return p, r


def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    m = mask.mask if isinstance(mask, BackgroundMask) else np.asarray(mask, dtype=bool)
    if m.shape != shape:
        raise ShapeMismatch(f"mask {m.shape} vs image {shape}")
    if not m.any():
        raise ValueError("mask selects no pixels")
    return m


def nmae(pred, ref, mask=None) -> float:
    """Masked mean absolute error as a percentage of the reference range."""
    p, r = _pair(pred, ref)
    m = _mask(mask, r.shape)
    rng = float(r.max() - r.min())
    if not rng > 0:
        raise DegenerateRange("reference image is constant")
    return 100.0 * float(np.mean(np.abs(p[m] - r[m]))) / rng


def psnr(pred, ref, mask=None) -> float:
    """10 log10(max(ref)^2 / masked MSE), capped at 99 dB."""
    p, r = _pair(pred, ref)
    m = _mask(mask, r.shape)
    peak = float(r.max())
    if not peak > 0:
        raise DegenerateRange("reference peak must be positive")
    mse = float(np.mean((p[m] - r[m]) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / mse))


def ncc(pred, ref, mask=None) -> float:
    """Zero-shift Pearson correlation over the foreground."""
    p, r = _pair(pred, ref)
    m = _mask(mask, r.shape)
    dp = p[m] - p[m].mean()
    dr = r[m] - r[m].mean()
    spp, srr = float(np.dot(dp, dp)), float(np.dot(dr, dr))
    if spp == 0.0 or srr == 0.0:
        raise ConstantImage("NCC undefined for an image constant over the mask")
    return float(np.clip(np.dot(dp, dr) / math.sqrt(spp * srr), -1.0, 1.0))


def suv_error(pred, ref, roi) -> float:
    """|mean_roi(pred) - mean_roi(ref)| as a percentage of max(ref)."""
    p, r = _pair(pred, ref)
    m = roi.mask if isinstance(roi, RoiSpec) else np.asarray(roi, dtype=bool)
    if m.shape != r.shape:
        raise ShapeMismatch(f"roi {m.shape} vs image {r.shape}")
    if not m.any():
        raise EmptyRoi("ROI is empty")
    peak = float(r.max())
    if not peak > 0:
        raise DegenerateRange("reference peak must be positive")
    return 100.0 * abs(float(p[m].mean()) - float(r[m].mean())) / peak


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter(img, w):
    # separable Gaussian, reflected borders, output the same size as the input
    out = correlate1d(img, w, axis=0, mode="reflect")
    return correlate1d(out, w, axis=1, mode="reflect")


def _ssim_terms(x, y, w, c1, c2):
    mx, my = _filter(x, w), _filter(y, w)
    sxx = _filter(x * x, w) - mx * mx
    syy = _filter(y * y, w) - my * my
    sxy = _filter(x * y, w) - mx * my
    lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1)
    cs = (2.0 * sxy + c2) / (sxx + syy + c2)
    return float(np.mean(lum)), float(np.mean(cs))


def _pool2(x):
    h, w = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _signed_pow(v, e):
    return math.copysign(abs(v) ** e, v)


def ms_ssim_weights(scales: int) -> np.ndarray:
    w = np.asarray(MS_SSIM_WEIGHTS_5[:scales], dtype=np.float64)
    return w / w.sum()


def ms_ssim(pred, ref, scales: int = 3, win_size: int = 11, sigma: float = 1.5,
            data_range: Optional[float] = None) -> float:
    """Multi-scale SSIM over ``scales`` dyadic levels.

    Contrast-structure means at every level, luminance mean at the coarsest,
    combined with renormalized standard weights. Terms are raised to their
    weight sign-preservingly so anti-correlated images score below zero.
    """
    p, r = _pair(pred, ref)
    if scales < 1 or min(r.shape) < 2 ** (scales - 1):
        raise TooSmallForScales(f"{r.shape} too small for {scales} scales")
    if data_range is None:
        data_range = float(r.max() - r.min()) or 1.0
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    w = gaussian_window(win_size, sigma)
    weights = ms_ssim_weights(scales)
    value = 1.0
    for s in range(scales):
        lum, cs = _ssim_terms(p, r, w, c1, c2)
        value *= _signed_pow(cs, weights[s])
        if s == scales - 1:
            value *= _signed_pow(lum, weights[s])
        else:
            p, r = _pool2(p), _pool2(r)
    return float(np.clip(value, -1.0, 1.0))


def evaluate_pair(pred, ref, mask=None, roi=None, rel_threshold: float = 0.05) -> MetricReport:
    """Every metric for one (prediction, reference) pair in activity units.

    Without an explicit mask the foreground of ``ref`` at ``rel_threshold``
    is used.
    """
    p, r = _pair(pred, ref)
    if mask is None:
        mask = background_mask(ImageGrid(r), rel_threshold)
    m = _mask(mask, r.shape)
    suv = None
    if roi is not None and np.asarray(getattr(roi, "mask", roi)).any():
        suv = suv_error(p, r, roi)
    return MetricReport(
        nmae_pct=nmae(p, r, m),
        psnr_db=psnr(p, r, m),
        ms_ssim=ms_ssim(p, r),
        ncc=ncc(p, r, m),
        suv_error_pct=suv,
        mask_fraction=float(m.mean()),
    )


def aggregate(reports: Sequence[MetricReport], labels: Optional[Sequence[str]] = None) -> MetricReport:
    """Mean of each metric across slices, keeping the per-slice rows."""
    if not reports:
        raise ValueError("no reports to aggregate")
    labels = labels or [str(i) for i in range(len(reports))]
    rows = [dict(slice=lab, **rep.row()) for lab, rep in zip(labels, reports)]
    suvs = [rep.suv_error_pct for rep in reports if rep.suv_error_pct is not None]
    return MetricReport(
        nmae_pct=float(np.mean([x.nmae_pct for x in reports])),
        psnr_db=float(np.mean([x.psnr_db for x in reports])),
        ms_ssim=float(np.mean([x.ms_ssim for x in reports])),
        ncc=float(np.mean([x.ncc for x in reports])),
        suv_error_pct=float(np.mean(suvs)) if suvs else None,
        mask_fraction=float(np.mean([x.mask_fraction for x in reports])),
        per_slice=rows,
    )
