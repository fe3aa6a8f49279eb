"""Few-step consistency sampling with Monte-Carlo averaging."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np
import torch

from .denoiser import consistency_apply, is_untrained
from .errors import EmptyList, InvalidPlan, ShapeMismatch
from .schedule import KarrasSchedule

MASK64 = (1 << 64) - 1


def _evenly_spaced(n_evals: int, top: int = 150) -> Tuple[int, ...]:
    return tuple(int(round(v)) for v in np.linspace(top, 1, n_evals + 1))


PRESETS = {
    "1step": (150,),
    "2step": (150, 75, 1),
    "5step": _evenly_spaced(5),
    "10step": _evenly_spaced(10),
}


@dataclass(frozen=True)
class SamplePlan:
    indices: Tuple[int, ...] = PRESETS["2step"]
    mc_runs: int = 3
    seed: int = 0
    label: str = field(default="", compare=False)

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if not idx:
            raise InvalidPlan("plan has no indices")
        if any(b >= a for a, b in zip(idx, idx[1:])):
            raise InvalidPlan(f"plan indices must be strictly decreasing: {idx}")
        if idx[-1] < 1:
            raise InvalidPlan(f"plan indices must be >= 1: {idx}")
        if self.mc_runs < 1:
            raise InvalidPlan("mc_runs must be >= 1")

    @property
    def n_evals(self) -> int:
        """Network evaluations per run."""
        return max(1, len(self.indices) - 1)

    def validate(self, schedule: KarrasSchedule) -> None:
        if self.indices[0] > schedule.steps_j:
            raise InvalidPlan(f"index {self.indices[0]} exceeds J={schedule.steps_j}")

    def to_dict(self):
        return {"indices": list(self.indices), "mc_runs": self.mc_runs, "seed": self.seed,
                "label": self.label}


def parse_plan(text: str, mc_runs: int = 3, seed: int = 0) -> SamplePlan:
    """Parse a preset name (``"2step"``) or a comma list (``"150,75,1"``)."""
    text = text.strip()
    if text in PRESETS:
        return SamplePlan(PRESETS[text], mc_runs, seed, text)
    try:
        idx = tuple(int(tok) for tok in text.split(","))
    except ValueError:
        raise InvalidPlan(f"cannot parse plan {text!r}") from None
    return SamplePlan(idx, mc_runs, seed, text.replace(",", "-"))


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & MASK64
    return x ^ (x >> 31)


def sub_seed(seed: int, index: int) -> int:
    """Mix ``index`` into ``seed``; used for MC runs, images and patches."""
    return splitmix64((int(seed) & MASK64) ^ splitmix64(int(index)))


def _generator(seed):
    g = torch.Generator()
    g.manual_seed(seed & ((1 << 63) - 1))
    return g


@torch.no_grad()
def consistency_sample(model, z, plan: SamplePlan, schedule: KarrasSchedule, seed: int = None):
    """One stochastic multistep run. ``z`` is a normalized (H, W) or NCHW tensor/array.

    Starts from t_J * noise, applies c_theta at each plan level and re-noises
    to the next level with std sqrt(t'^2 - eps^2); no noise after the last
    evaluation.
    """
    plan.validate(schedule)
    if is_untrained(model):
        warnings.warn("sampling with an untrained denoiser (zero output projection)", stacklevel=2)
    dtype = next(model.parameters()).dtype
    z = z.to(dtype) if torch.is_tensor(z) else torch.tensor(np.asarray(z), dtype=dtype)
    squeeze = z.ndim == 2
    if squeeze:
        z = z[None, None]
    g = _generator(plan.seed if seed is None else seed)
    levels = plan.indices if len(plan.indices) == 1 else plan.indices[:-1]
    x = schedule.t(schedule.steps_j) * torch.randn(z.shape, generator=g, dtype=dtype)
    for k, j in enumerate(levels):
        x = consistency_apply(model, x, z, schedule.t(j))
        if k + 1 < len(levels):
            t_next = schedule.t(plan.indices[k + 1])
            std = math.sqrt(max(t_next ** 2 - schedule.eps ** 2, 0.0))
            x = x + std * torch.randn(z.shape, generator=g, dtype=dtype)
    return x[0, 0] if squeeze else x


def mc_average(runs: Sequence):
    """Per-pixel mean of equally shaped runs, reduced in list order."""
    if len(runs) == 0:
        raise EmptyList("no runs to average")
    shape = tuple(runs[0].shape)
    for r in runs[1:]:
        if tuple(r.shape) != shape:
            raise ShapeMismatch(f"run shape {tuple(r.shape)} != {shape}")
    # shifted mean: exact when all runs agree
    base = runs[0]
    offset = base * 0.0
    for r in runs[1:]:
        offset = offset + (r - base)
    return base + offset / len(runs)


def generate(model, z, plan: SamplePlan, schedule: KarrasSchedule, clamp: bool = True):
    """Average ``plan.mc_runs`` independent runs; optionally clamp to [-1, 1]."""
    runs = [consistency_sample(model, z, plan, schedule, seed=sub_seed(plan.seed, r))
            for r in range(plan.mc_runs)]
    out = mc_average(runs)
    return out.clamp(-1.0, 1.0) if clamp else out
