"""On-disk formats: raw float32 images, checkpoints and run manifests.

Image: ``<stem>.f32`` (little-endian float32, row-major) plus ``<stem>.json``
with height, width, spacing_mm, units and optional norm_params.

Checkpoint: ``<stem>.bin`` holding every parameter as little-endian float32,
concatenated in manifest order, plus ``<stem>.json`` with config, names,
shapes, dtype, step, EMA flag and the sha256 of the blob file.
"""
from __future__ import annotations

import datetime as _dt
import hashlib
import json
import os
import tempfile
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from . import __version__
from .data_model import ImageGrid, NormParams
from .denoiser import Denoiser, DenoiserConfig
from .errors import ChecksumMismatch

MANIFEST_NAME = "manifest.json"


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_json(path, obj) -> None:
    _atomic_write(Path(path), (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_image(stem, grid: ImageGrid, units: str = "activity") -> None:
    stem = Path(stem)
    _atomic_write(stem.with_suffix(".f32"), grid.data.astype("<f4").tobytes())
    meta = {"height": grid.height, "width": grid.width, "spacing_mm": list(grid.spacing_mm),
            "units": units}
    if grid.norm_params is not None:
        meta["norm_params"] = grid.norm_params.to_dict()
    write_json(stem.with_suffix(".json"), meta)


def read_image(stem) -> ImageGrid:
    stem = Path(stem)
    meta = read_json(stem.with_suffix(".json"))
    data = np.fromfile(stem.with_suffix(".f32"), dtype="<f4")
    h, w = int(meta["height"]), int(meta["width"])
    if data.size != h * w:
        raise ValueError(f"{stem}: payload has {data.size} values, manifest says {h}x{w}")
    norm = NormParams.from_dict(meta["norm_params"]) if "norm_params" in meta else None
    return ImageGrid(data.reshape(h, w).astype(np.float64), tuple(meta["spacing_mm"]), norm)


def list_images(directory) -> list:
    """Sorted image stems (without suffix) in ``directory``."""
    d = Path(directory)
    return sorted(p.with_suffix("") for p in d.glob("*.f32") if p.with_suffix(".json").exists())


def _tensor_blob(tensors: Dict[str, torch.Tensor]) -> bytes:
    return b"".join(t.detach().cpu().numpy().astype("<f4").tobytes() for t in tensors.values())


def save_tensors(stem, tensors: Dict[str, torch.Tensor], meta: dict) -> str:
    """Write a blob + manifest pair; returns the blob's sha256."""
    stem = Path(stem)
    blob = _tensor_blob(tensors)
    digest = hashlib.sha256(blob).hexdigest()
    _atomic_write(stem.with_suffix(".bin"), blob)
    meta = dict(meta)
    meta.update({
        "names": list(tensors),
        "shapes": [list(t.shape) for t in tensors.values()],
        "dtype": "float32-le",
        "sha256": digest,
    })
    write_json(stem.with_suffix(".json"), meta)
    return digest


def load_tensors(stem):
    stem = Path(stem)
    meta = read_json(stem.with_suffix(".json"))
    blob = stem.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta["sha256"]:
        raise ChecksumMismatch(f"{stem}.bin does not match its manifest checksum")
    flat = np.frombuffer(blob, dtype="<f4")
    out, pos = {}, 0
    for name, shape in zip(meta["names"], meta["shapes"]):
        n = int(np.prod(shape)) if shape else 1
        out[name] = torch.from_numpy(flat[pos:pos + n].reshape(shape).astype(np.float32))
        pos += n
    if pos != flat.size:
        raise ValueError(f"{stem}.bin has {flat.size - pos} trailing values")
    return out, meta


def save_checkpoint(stem, model: Denoiser, step: int, ema: bool, extra: Optional[dict] = None) -> str:
    meta = {"config": model.cfg.to_dict(), "step": int(step), "ema": bool(ema)}
    meta.update(extra or {})
    return save_tensors(stem, dict(model.named_parameters()), meta)


def load_checkpoint(stem):
    """Rebuild a float32 :class:`Denoiser` from a checkpoint; returns (model, meta)."""
    tensors, meta = load_tensors(stem)
    model = Denoiser(DenoiserConfig.from_dict(meta["config"]))
    with torch.no_grad():
        for name, p in model.named_parameters():
            p.copy_(tensors[name])
    model.eval()
    return model, meta


def append_manifest(directory, record: dict) -> dict:
    """Append one run record to ``<directory>/manifest.json``."""
    path = Path(directory) / MANIFEST_NAME
    manifest = read_json(path) if path.exists() else {"runs": []}
    record = dict(record)
    record.setdefault("timestamp", _dt.datetime.now(_dt.timezone.utc).isoformat())
    record.setdefault("software_version", __version__)
    manifest["runs"].append(record)
    write_json(path, manifest)
    return manifest


def read_manifest(directory) -> dict:
    return read_json(Path(directory) / MANIFEST_NAME)
