"""Synthetic paired full-/low-dose phantoms.

Full-dose images are smoothed ellipse phantoms; low-dose partners come from
Poisson count thinning, which keeps the mean and scales the variance by
1 / dose_fraction.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .data_model import ImageGrid, NormParams, PairedSlice, apply_norm, joint_range
from .errors import NegativeActivity


@dataclass(frozen=True)
class PhantomSpec:
    size: Tuple[int, int] = (64, 64)
    n_ellipses: int = 3
    lesion_count: int = 2
    background_level: float = 1.0
    organ_level: float = 2.5
    lesion_level: float = 6.0
    counts_scale: float = 50.0
    seed: int = 0
    blur_px: float = 0.8
    spacing_mm: Tuple[float, float] = (3.65, 3.65)

    def __post_init__(self):
        if not self.lesion_level > self.organ_level > self.background_level >= 0:
            raise ValueError("need lesion_level > organ_level > background_level >= 0")
        if self.counts_scale <= 0:
            raise ValueError("counts_scale must be positive")

    def to_dict(self):
        d = asdict(self)
        d["size"] = list(self.size)
        d["spacing_mm"] = list(self.spacing_mm)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["size"] = tuple(d["size"])
        d["spacing_mm"] = tuple(d.get("spacing_mm", (3.65, 3.65)))
        return cls(**d)


def _ellipse(yy, xx, cy, cx, ry, rx, angle):
    c, s = np.cos(angle), np.sin(angle)
    dy, dx = yy - cy, xx - cx
    u = (dx * c + dy * s) / rx
    v = (-dx * s + dy * c) / ry
    return u * u + v * v <= 1.0


def make_phantom(spec: PhantomSpec):
    """Return ``(image, roi)``; ``roi`` is the boolean lesion mask or None."""
    rng = np.random.default_rng(spec.seed)
    h, w = spec.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    body = _ellipse(yy, xx, h / 2 + rng.uniform(-1, 1), w / 2 + rng.uniform(-1, 1),
                    h * rng.uniform(0.36, 0.44), w * rng.uniform(0.40, 0.46), rng.uniform(-0.2, 0.2))
    img = np.where(body, spec.background_level, 0.0)
    for _ in range(spec.n_ellipses):
        cy, cx = h / 2 + rng.uniform(-0.2, 0.2) * h, w / 2 + rng.uniform(-0.22, 0.22) * w
        organ = _ellipse(yy, xx, cy, cx, h * rng.uniform(0.06, 0.14), w * rng.uniform(0.06, 0.14),
                         rng.uniform(0, np.pi)) & body
        img[organ] = spec.organ_level * rng.uniform(0.8, 1.2)
    roi = np.zeros((h, w), dtype=bool)
    for _ in range(spec.lesion_count):
        cy, cx = h / 2 + rng.uniform(-0.25, 0.25) * h, w / 2 + rng.uniform(-0.25, 0.25) * w
        r = rng.uniform(1.5, 3.0)
        lesion = _ellipse(yy, xx, cy, cx, r, r, 0.0) & body
        roi |= lesion
    img[roi] = spec.lesion_level
    if spec.blur_px > 0:
        img = gaussian_filter(img, spec.blur_px)
    img = np.clip(img, 0.0, None)
    return ImageGrid(img, spec.spacing_mm), (roi if roi.any() else None)


def reduce_dose(full: ImageGrid, fraction: float, counts_scale: float = 50.0, seed=0) -> ImageGrid:
    """Poisson thinning: k ~ Poisson(v * s * f), returned as k / (s * f)."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    if np.any(full.data < 0):
        raise NegativeActivity("activity values must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    scale = counts_scale * fraction
    counts = rng.poisson(full.data * scale)
    return full.with_data(counts / scale)


def pair_seed(seed: int, index: int, fraction: float) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(index), int(round(fraction * 1e6))])


def make_raw_pairs(n: int, fractions: Sequence[float], spec: Optional[PhantomSpec] = None):
    """Yield ``(index, fraction, full, low, roi)`` in activity units.

    The full-dose phantom for a given index is shared across fractions.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    spec = spec or PhantomSpec()
    for frac in fractions:
        for i in range(n):
            full, roi = make_phantom(replace(spec, seed=int(spec.seed) * 1_000_003 + i))
            rng = np.random.default_rng(pair_seed(spec.seed, i, frac))
            yield i, frac, full, reduce_dose(full, frac, spec.counts_scale, rng), roi


def norm_params_for(raw, norm_scope: str = "pair"):
    """One NormParams per (full, low) pair; ``raw`` holds (full, low) tuples."""
    if norm_scope == "dataset":
        shared = joint_range(g for pair in raw for g in pair)
        return [shared] * len(raw)
    if norm_scope == "pair":
        return [joint_range(pair) for pair in raw]
    raise ValueError(f"unknown norm_scope {norm_scope!r}")


def make_dataset(n: int, fractions: Sequence[float], spec: Optional[PhantomSpec] = None,
                 norm_scope: str = "pair"):
    """``n`` phantoms per dose fraction, each normalized to [-1, 1].

    ``norm_scope="pair"`` uses the shared range of each (full, low) pair;
    ``"dataset"`` uses one range over every image in the set.
    Returns ``(pairs, norm_params)`` where ``norm_params[i]`` belongs to ``pairs[i]``.
    """
    raw = list(make_raw_pairs(n, fractions, spec))
    params = norm_params_for([(f, l) for _, _, f, l, _ in raw], norm_scope)
    pairs = [PairedSlice(apply_norm(f, p), apply_norm(l, p), frac, roi)
             for (_, frac, f, l, roi), p in zip(raw, params)]
    return pairs, params
