"""Consistency training: Heun back-step targets, EMA teacher, AdamW."""
from __future__ import annotations

import copy
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import torch

from .denoiser import Denoiser, DenoiserConfig, backprop, consistency_apply
from .errors import (EmptyDataset, IndexOutOfGrid, NonFiniteGradient, ShapeMismatch,
                     ZeroDenominator)
from .schedule import KarrasSchedule, add_noise, build_grid

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


@dataclass
class TrainConfig:
    gamma: float = 0.5
    lr: float = 2e-5
    weight_decay: float = 1e-4
    ema_decay: float = 0.99
    epochs: int = 200
    batch: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.batch < 1 or self.epochs < 0:
            raise ValueError("batch must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def desk(cls, **kw):
        """Settings for the 200-pair, 200-epoch phantom experiment on one CPU.

        The default learning rate needs far more optimizer steps than a desk
        run affords, so this preset raises it and uses single-image batches.
        """
        base = dict(lr=1e-3, batch=1, epochs=200)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainState:
    student: Denoiser
    teacher: Denoiser
    exp_avg: Dict[str, torch.Tensor]
    exp_avg_sq: Dict[str, torch.Tensor]
    step: int = 0
    epoch: int = 0
    history: List[dict] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: DenoiserConfig, seed: int = 0, dtype=torch.float32):
        torch.manual_seed(seed)
        student = Denoiser(cfg).to(dtype)
        teacher = copy.deepcopy(student)
        teacher.requires_grad_(False)
        zeros = {n: torch.zeros_like(p) for n, p in student.named_parameters()}
        return cls(student, teacher, zeros, {n: z.clone() for n, z in zeros.items()})


def heun_backstep(x_tj, x0, t, dt):
    """One Heun step of the PF-ODE from t to t - dt using the x0-based slope."""
    if tuple(x_tj.shape) != tuple(x0.shape):
        raise ShapeMismatch(f"shape {tuple(x_tj.shape)} != {tuple(x0.shape)}")
    if t == 0 or t - dt == 0:
        raise ZeroDenominator(f"t={t}, dt={dt}")
    d = (x_tj - x0) / t
    d_prime = (x_tj - d * dt - x0) / (t - dt)
    return x_tj - (d + d_prime) / 2 * dt


def ct_targets(x0, noise, j: int, schedule: KarrasSchedule):
    """Adjacent points (X_{t_j}, X_{t_{j-1}}) on one PF-ODE trajectory."""
    if not 2 <= j <= schedule.steps_j:
        raise IndexOutOfGrid(f"j={j} outside [2, {schedule.steps_j}]")
    t_j, t_prev = schedule.t(j), schedule.t(j - 1)
    x_tj = add_noise(x0, t_j, noise)
    x_prev = heun_backstep(x_tj, x0, t_j, t_j - t_prev)
    return x_tj, x_prev, t_j, t_prev


def ct_loss(student, teacher, x0, z, j: int, schedule: KarrasSchedule, noise, gamma: float = 0.5):
    """MAE(c_student(X_tj), c_teacher(X_tj-1)) + gamma * MAE(c_student(X_tj), X_0).

    The teacher branch is evaluated without gradient tracking.
    """
    x_tj, x_prev, t_j, t_prev = ct_targets(x0, noise, j, schedule)
    pred = consistency_apply(student, x_tj, z, t_j)
    with torch.no_grad():
        target = consistency_apply(teacher, x_prev, z, t_prev)
    x0 = x0.reshape(pred.shape)
    return (pred - target).abs().mean() + gamma * (pred - x0).abs().mean()


@torch.no_grad()
def ema_update(teacher, student, mu: float) -> None:
    """teacher <- mu * teacher + (1 - mu) * student, elementwise."""
    if not 0.0 <= mu <= 1.0:
        raise ValueError(f"mu must lie in [0, 1], got {mu}")
    t_params = dict(teacher.named_parameters())
    for name, p in student.named_parameters():
        tp = t_params[name]
        if tp.shape != p.shape:
            raise ShapeMismatch(f"{name}: {tuple(tp.shape)} vs {tuple(p.shape)}")
        if mu == 1.0:
            continue
        if mu == 0.0:
            tp.copy_(p)
        else:
            tp.mul_(mu).add_(p, alpha=1.0 - mu)


@torch.no_grad()
def adamw_step(state: TrainState, cfg: TrainConfig) -> None:
    """Decoupled weight decay followed by a bias-corrected Adam update."""
    params = list(state.student.named_parameters())
    for name, p in params:
        if p.grad is None:
            raise NonFiniteGradient(name)
        if not bool(torch.isfinite(p.grad).all()):
            raise NonFiniteGradient(name)
    step = state.step + 1
    bc1 = 1.0 - BETA1 ** step
    bc2 = 1.0 - BETA2 ** step
    for name, p in params:
        g = p.grad
        m, v = state.exp_avg[name], state.exp_avg_sq[name]
        p.mul_(1.0 - cfg.lr * cfg.weight_decay)
        m.mul_(BETA1).add_(g, alpha=1.0 - BETA1)
        v.mul_(BETA2).addcmul_(g, g, value=1.0 - BETA2)
        denom = (v / bc2).sqrt_().add_(ADAM_EPS)
        p.addcdiv_(m / bc1, denom, value=-cfg.lr)
    state.step = step


def epoch_generator(seed: int, epoch: int) -> torch.Generator:
    # epoch-keyed streams make a resumed run identical to an uninterrupted one
    g = torch.Generator()
    g.manual_seed((int(seed) * 1_000_033 + int(epoch) * 7919 + 1) % (2 ** 63))
    return g


def _stack(pairs, dtype):
    full = torch.as_tensor(np.stack([p.full.data for p in pairs]), dtype=dtype)[:, None]
    low = torch.as_tensor(np.stack([p.low.data for p in pairs]), dtype=dtype)[:, None]
    return full, low


def train_epoch(state: TrainState, full, low, cfg: TrainConfig, schedule: KarrasSchedule) -> float:
    g = epoch_generator(cfg.seed, state.epoch)
    n = full.shape[0]
    order = torch.randperm(n, generator=g)
    losses = []
    state.student.train()
    for start in range(0, n, cfg.batch):
        idx = order[start:start + cfg.batch]
        x0, z = full[idx], low[idx]
        j = int(torch.randint(2, schedule.steps_j + 1, (1,), generator=g))
        noise = torch.randn(x0.shape, generator=g, dtype=x0.dtype)
        loss = ct_loss(state.student, state.teacher, x0, z, j, schedule, noise, cfg.gamma)
        if not torch.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {state.step}")
        backprop(state.student, loss)
        adamw_step(state, cfg)
        ema_update(state.teacher, state.student, cfg.ema_decay)
        losses.append(float(loss.detach()))
    state.epoch += 1
    return float(np.mean(losses))


def fit(dataset: Sequence, cfg: TrainConfig, schedule: Optional[KarrasSchedule] = None,
        denoiser_cfg: Optional[DenoiserConfig] = None, state: Optional[TrainState] = None,
        dtype=torch.float32, on_epoch: Optional[Callable[[TrainState], None]] = None) -> TrainState:
    """Consistency-train on normalized pairs; continues ``state`` if given."""
    if len(dataset) == 0:
        raise EmptyDataset("no training pairs")
    schedule = schedule or build_grid()
    if state is None:
        denoiser_cfg = denoiser_cfg or DenoiserConfig(eps=schedule.eps)
        state = TrainState.create(denoiser_cfg, cfg.seed, dtype)
    dtype = next(state.student.parameters()).dtype
    full, low = _stack(dataset, dtype)
    while state.epoch < cfg.epochs:
        t0 = time.perf_counter()
        mean_loss = train_epoch(state, full, low, cfg, schedule)
        rec = {"epoch": state.epoch, "mean_loss": mean_loss,
               "wall_seconds": time.perf_counter() - t0}
        state.history.append(rec)
        log.info("epoch %d loss %.5f (%.1fs)", rec["epoch"], mean_loss, rec["wall_seconds"])
        if on_epoch is not None:
            on_epoch(state)
    return state
