"""Karras noise-level grid, forward noising and the unbiased score estimate.

The forward SDE is the variance-exploding one with drift f(x, t) = 0 and
diffusion g(t) = sqrt(2 t); its probability-flow ODE is dx/dt = -t * score.
Everything below specializes to that case.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidSchedule, ShapeMismatch, ZeroTimestep

DRIFT = 0.0


def diffusion_coefficient(t):
    return np.sqrt(2.0 * t)


@dataclass(frozen=True, eq=False)
class KarrasSchedule:
    eps: float
    t_max: float
    steps_j: int
    rho: float
    grid: np.ndarray

    def t(self, j: int) -> float:
        """Noise level for the 1-based grid index ``j``."""
        if not 1 <= j <= self.steps_j:
            raise IndexError(f"grid index {j} outside [1, {self.steps_j}]")
        return float(self.grid[j - 1])

    def __len__(self):
        return self.steps_j

    def to_dict(self):
        return {"eps": self.eps, "t_max": self.t_max, "steps": self.steps_j, "rho": self.rho}

    @classmethod
    def from_dict(cls, d):
        return build_grid(d["eps"], d["t_max"], d["steps"], d["rho"])


def build_grid(eps: float = 0.001, t_max: float = 100.0, steps_j: int = 150, rho: float = 7.0) -> KarrasSchedule:
    """Interpolate between ``eps`` and ``t_max`` linearly in t**(1/rho) space."""
    if not (0 < eps < t_max) or int(steps_j) != steps_j or steps_j < 2 or not rho > 0:
        raise InvalidSchedule(f"invalid schedule eps={eps} t_max={t_max} J={steps_j} rho={rho}")
    steps_j = int(steps_j)
    lo, hi = eps ** (1.0 / rho), t_max ** (1.0 / rho)
    frac = np.arange(steps_j, dtype=np.float64) / (steps_j - 1)
    grid = (lo + frac * (hi - lo)) ** rho
    # pin the endpoints; the power round-trip can drift by an ulp
    grid[0], grid[-1] = eps, t_max
    grid.flags.writeable = False
    if not np.all(np.diff(grid) > 0):
        raise InvalidSchedule("grid is not strictly increasing")
    return KarrasSchedule(float(eps), float(t_max), steps_j, float(rho), grid)


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ShapeMismatch(f"shape {tuple(a.shape)} != {tuple(b.shape)}")


def add_noise(x0, t, noise):
    """X_t = X_0 + t * noise. Works on numpy arrays and torch tensors."""
    _check_shapes(x0, noise)
    return x0 + t * noise


def score_estimate(x_t, x0, t):
    """Single-sample unbiased score estimate -(X_t - X_0) / t**2."""
    _check_shapes(x_t, x0)
    if np.any(np.asarray(t) == 0):
        raise ZeroTimestep("score estimate undefined at t = 0")
    return -(x_t - x0) / (t * t)
