"""Boundary padding, sliding-window tiling and stitched reconstruction."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from .data_model import ImageGrid
from .errors import LayoutMismatch, PatchTooLarge, TargetTooSmall


@dataclass(frozen=True)
class TileLayout:
    padded_h: int
    padded_w: int
    patch: int
    stride: int
    origins: Tuple[Tuple[int, int], ...]
    original_h: int
    original_w: int
    pad_top: int = 0
    pad_left: int = 0

    def to_dict(self):
        return {"padded_h": self.padded_h, "padded_w": self.padded_w, "patch": self.patch,
                "stride": self.stride, "origins": [list(o) for o in self.origins],
                "original_h": self.original_h, "original_w": self.original_w,
                "pad_top": self.pad_top, "pad_left": self.pad_left}


def pad_offsets(h, w, target_h, target_w):
    """(top, left) offsets; odd remainders put the extra pixel bottom/right."""
    return (target_h - h) // 2, (target_w - w) // 2


def pad_to(grid: ImageGrid, target_h: int, target_w: int) -> ImageGrid:
    h, w = grid.shape
    if target_h < h or target_w < w:
        raise TargetTooSmall(f"cannot pad {h}x{w} to {target_h}x{target_w}")
    if (target_h, target_w) == (h, w):
        return grid
    top, left = pad_offsets(h, w, target_h, target_w)
    out = np.zeros((target_h, target_w))
    out[top:top + h, left:left + w] = grid.data
    return grid.with_data(out, grid.norm_params)


def crop_to(grid: ImageGrid, h: int, w: int, top: int = None, left: int = None) -> ImageGrid:
    """Inverse of :func:`pad_to`; offsets default to the centered padding."""
    H, W = grid.shape
    if top is None or left is None:
        top, left = pad_offsets(h, w, H, W)
    return grid.with_data(grid.data[top:top + h, left:left + w], grid.norm_params)


def _anchors(size, patch, stride):
    pos = list(range(0, size - patch + 1, stride))
    if pos[-1] != size - patch:
        pos.append(size - patch)  # flush final patch to the edge
    return pos


def tile(grid: ImageGrid, patch: int = 64, stride: int = 64):
    """Cut ``grid`` into ``patch`` x ``patch`` tiles in row-major origin order."""
    h, w = grid.shape
    if patch > h or patch > w:
        raise PatchTooLarge(f"patch {patch} exceeds grid {h}x{w}")
    if not 1 <= stride <= patch:
        raise ValueError(f"stride must lie in [1, {patch}], got {stride}")
    origins = tuple((r, c) for r in _anchors(h, patch, stride) for c in _anchors(w, patch, stride))
    patches = [grid.with_data(grid.data[r:r + patch, c:c + patch]) for r, c in origins]
    return patches, TileLayout(h, w, patch, stride, origins, h, w)


def stitch(patches: Sequence, layout: TileLayout) -> ImageGrid:
    """Average overlapping patches with equal weights, then crop to the original size."""
    if len(patches) != len(layout.origins):
        raise LayoutMismatch(f"{len(patches)} patches for {len(layout.origins)} origins")
    acc = np.zeros((layout.padded_h, layout.padded_w))
    cnt = np.zeros_like(acc)
    spacing = (1.0, 1.0)
    for p, (r, c) in zip(patches, layout.origins):
        data = p.data if isinstance(p, ImageGrid) else np.asarray(p, dtype=np.float64)
        if data.shape != (layout.patch, layout.patch):
            raise LayoutMismatch(f"patch shape {data.shape} != {layout.patch}")
        if isinstance(p, ImageGrid):
            spacing = p.spacing_mm
        acc[r:r + layout.patch, c:c + layout.patch] += data
        cnt[r:r + layout.patch, c:c + layout.patch] += 1.0
    out = ImageGrid(acc / cnt, spacing)
    if (layout.original_h, layout.original_w) != (layout.padded_h, layout.padded_w):
        out = crop_to(out, layout.original_h, layout.original_w, layout.pad_top, layout.pad_left)
    return out


def padded_size(h: int, w: int, multiple: int) -> Tuple[int, int]:
    return -(-h // multiple) * multiple, -(-w // multiple) * multiple


def sliding_window(grid: ImageGrid, fn: Callable[[ImageGrid, int], np.ndarray], patch: int = 64,
                   stride: int = 64, target: Tuple[int, int] = None):
    """Pad, tile, apply ``fn(patch, index)`` per patch, stitch and crop back.

    ``target`` defaults to the next multiple of ``patch`` in each direction.
    Returns the processed grid and its layout.
    """
    h, w = grid.shape
    th, tw = target or padded_size(h, w, patch)
    padded = pad_to(grid, th, tw)
    top, left = pad_offsets(h, w, th, tw)
    patches, layout = tile(padded, patch, stride)
    layout = TileLayout(th, tw, patch, stride, layout.origins, h, w, top, left)
    done = [fn(p, i) for i, p in enumerate(patches)]
    return stitch(done, layout), layout
