"""Conditional consistency denoiser c_theta(x_t, t, z).

A small encoder-decoder: residual conv blocks with adaptive group norm on
the time embedding, windowed multi-head self-attention at the downsampled
levels, and shortcut connections between matching encoder/decoder levels.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field
from typing import Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (IndivisibleSize, NoRecordedGraph, OddDimension, ShapeMismatch,
                     TimestepBelowEps)


@dataclass
class DenoiserConfig:
    levels: int = 3
    channels_per_level: Tuple[int, ...] = (16, 32, 64)
    window_size: int = 4
    attn_heads: int = 2
    embed_dim: int = 128
    embed_max_period: float = 1e6
    sigma_data: float = 0.5
    eps: float = 0.001
    # the embedding sees time_scale * 0.25 * ln(t) ("log") or time_scale * t ("linear")
    time_scale: float = 1000.0
    time_input: str = "log"
    patch: int = 64

    def __post_init__(self):
        self.channels_per_level = tuple(int(c) for c in self.channels_per_level)
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if len(self.channels_per_level) != self.levels or min(self.channels_per_level) <= 0:
            raise ValueError("channels_per_level must have one positive entry per level")
        if self.time_input not in ("log", "linear"):
            raise ValueError(f"time_input must be 'log' or 'linear', got {self.time_input!r}")
        if self.embed_dim % 2:
            raise OddDimension(f"embed_dim must be even, got {self.embed_dim}")
        for c in self.channels_per_level[1:]:
            if c % self.attn_heads:
                raise ValueError(f"{c} channels not divisible by {self.attn_heads} heads")
        if self.patch // 2 ** (self.levels - 1) < self.window_size:
            raise ValueError("deepest feature map is smaller than the attention window")

    def to_dict(self):
        d = asdict(self)
        d["channels_per_level"] = list(self.channels_per_level)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    @classmethod
    def tiny(cls, **kw):
        """2-level, 8-channel network used for gradient checks on 16x16 inputs."""
        base = dict(levels=2, channels_per_level=(4, 8), window_size=4, attn_heads=2,
                    embed_dim=16, patch=16)
        base.update(kw)
        return cls(**base)

    @classmethod
    def large(cls, **kw):
        """Closer to the full-size layout: five levels, 256 channels at the bottom."""
        base = dict(levels=5, channels_per_level=(64, 64, 128, 192, 256), window_size=4,
                    attn_heads=8, embed_dim=128, patch=64)
        base.update(kw)
        return cls(**base)


def _frequencies(dim, max_period):
    half = dim // 2
    if half == 1:
        return np.ones(1)
    # geometric from 1 down to exactly 1/max_period
    return max_period ** (-np.arange(half, dtype=np.float64) / (half - 1))


def time_embed(t: float, dim: int = 128, max_period: float = 1e6) -> np.ndarray:
    """Sinusoidal embedding [sin(t w_k), cos(t w_k)] for dim/2 frequencies w_k."""
    if dim % 2 or dim <= 0:
        raise OddDimension(f"embedding dim must be even and positive, got {dim}")
    if not max_period > 0:
        raise ValueError("max_period must be positive")
    arg = float(t) * _frequencies(dim, max_period)
    return np.concatenate([np.sin(arg), np.cos(arg)])


def _torch_time_embed(t, dim, max_period):
    freqs = torch.as_tensor(_frequencies(dim, max_period), dtype=t.dtype, device=t.device)
    arg = t[:, None] * freqs[None]
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=1)


def _groups(ch):
    return max(g for g in range(1, 9) if ch % g == 0)


class AdaGroupNorm(nn.Module):
    def __init__(self, ch, emb_dim):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(ch), ch, affine=False)
        self.proj = nn.Linear(emb_dim, 2 * ch)

    def forward(self, h, emb):
        scale, shift = self.proj(emb)[:, :, None, None].chunk(2, dim=1)
        return self.norm(h) * (1 + scale) + shift


class ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm2 = AdaGroupNorm(out_ch, emb_dim)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h, emb)))
        return self.skip(x) + h


def window_partition(x, ws):
    b, c, h, w = x.shape
    x = x.view(b, c, h // ws, ws, w // ws, ws)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(-1, ws * ws, c)


def window_reverse(win, ws, b, h, w):
    c = win.shape[-1]
    x = win.view(b, h // ws, w // ws, ws, ws, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside non-overlapping ws x ws windows."""

    def __init__(self, ch, window_size, heads, emb_dim):
        super().__init__()
        self.ws = window_size
        self.heads = heads
        self.norm = AdaGroupNorm(ch, emb_dim)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x, emb):
        b, c, h, w = x.shape
        ws = math.gcd(self.ws, math.gcd(h, w))
        win = window_partition(self.norm(x, emb), ws)
        n = win.shape[1]
        qkv = self.qkv(win).view(-1, n, 3, self.heads, c // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = torch.softmax(q @ k.transpose(-2, -1) * (c // self.heads) ** -0.5, dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(-1, n, c)
        return x + window_reverse(self.proj(out), ws, b, h, w)


class SwinBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim, window_size, heads):
        super().__init__()
        self.res = ResBlock(in_ch, out_ch, emb_dim)
        self.attn = WindowAttention(out_ch, window_size, heads, emb_dim)

    def forward(self, x, emb):
        return self.attn(self.res(x, emb), emb)


class Denoiser(nn.Module):
    """The raw network F_theta; see :func:`consistency_apply` for c_theta."""

    def __init__(self, cfg: DenoiserConfig = None):
        super().__init__()
        cfg = cfg or DenoiserConfig()
        self.cfg = cfg
        ch = cfg.channels_per_level
        emb = 4 * ch[0]
        self.time_mlp = nn.Sequential(nn.Linear(cfg.embed_dim, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.in_conv = nn.Conv2d(2, ch[0], 1)
        self.enc0 = ResBlock(ch[0], ch[0], emb)
        self.downs = nn.ModuleList(nn.Conv2d(ch[i - 1], ch[i], 3, stride=2, padding=1)
                                   for i in range(1, cfg.levels))
        self.encs = nn.ModuleList(SwinBlock(ch[i], ch[i], emb, cfg.window_size, cfg.attn_heads)
                                  for i in range(1, cfg.levels))
        self.mid = nn.ModuleList(SwinBlock(ch[-1], ch[-1], emb, cfg.window_size, cfg.attn_heads)
                                 for _ in range(2))
        self.decs = nn.ModuleList(SwinBlock(2 * ch[i], ch[i], emb, cfg.window_size, cfg.attn_heads)
                                  for i in range(1, cfg.levels))
        self.ups = nn.ModuleList(nn.Conv2d(ch[i], ch[i - 1], 3, padding=1)
                                 for i in range(1, cfg.levels))
        self.dec0 = ResBlock(2 * ch[0], ch[0], emb)
        self.out_norm = nn.GroupNorm(_groups(ch[0]), ch[0])
        self.out_conv = nn.Conv2d(ch[0], 1, 1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)
        # sampler bookkeeping: number of forward passes since last reset
        self.n_evals = 0

    def forward(self, x_t, z, t):
        cfg = self.cfg
        if x_t.shape != z.shape:
            raise ShapeMismatch(f"x_t {tuple(x_t.shape)} vs z {tuple(z.shape)}")
        factor = 2 ** (cfg.levels - 1)
        if x_t.shape[-1] % factor or x_t.shape[-2] % factor:
            raise IndivisibleSize(f"spatial size {tuple(x_t.shape[-2:])} not divisible by {factor}")
        self.n_evals += 1
        t = _as_batch_t(t, x_t)
        emb = self.time_mlp(_torch_time_embed(time_argument(t, cfg), cfg.embed_dim, cfg.embed_max_period))
        c_in = (t * t + cfg.sigma_data ** 2).rsqrt()[:, None, None, None]
        h = self.in_conv(torch.cat([x_t * c_in, z], dim=1))
        h = self.enc0(h, emb)
        skips = [h]
        for down, enc in zip(self.downs, self.encs):
            h = enc(down(h), emb)
            skips.append(h)
        for blk in self.mid:
            h = blk(h, emb)
        for i in reversed(range(len(self.decs))):
            h = self.decs[i](torch.cat([h, skips[i + 1]], dim=1), emb)
            h = self.ups[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.dec0(torch.cat([h, skips[0]], dim=1), emb)
        return self.out_conv(F.silu(self.out_norm(h)))


def time_argument(t, cfg: DenoiserConfig):
    """Scalar fed to the sinusoidal embedding for noise level ``t``."""
    if cfg.time_input == "log":
        return cfg.time_scale * 0.25 * (torch.log(t) if torch.is_tensor(t) else math.log(t))
    return cfg.time_scale * t


def _as_batch_t(t, x):
    t = torch.as_tensor(t, dtype=x.dtype, device=x.device)
    if t.ndim == 0:
        t = t.expand(x.shape[0])
    return t


def _as_nchw(x):
    """Accept (H, W), (B, H, W) or (B, 1, H, W) arrays/tensors."""
    x = torch.as_tensor(x)
    if x.ndim == 2:
        return x[None, None]
    if x.ndim == 3:
        return x[:, None]
    return x


def boundary_scalings(t, sigma_data, eps):
    """(c_skip, c_out) with c_skip(eps) = 1 and c_out(eps) = 0 exactly."""
    c_skip = sigma_data ** 2 / ((t - eps) ** 2 + sigma_data ** 2)
    c_out = sigma_data * (t - eps) / (sigma_data ** 2 + t ** 2) ** 0.5
    return c_skip, c_out


def raw_forward(model: Denoiser, x_t, z, t):
    return model(_as_nchw(x_t), _as_nchw(z), t)


def consistency_apply(model: Denoiser, x_t, z, t):
    """c_theta(x_t, t, z) = c_skip(t) x_t + c_out(t) F_theta(x_t, t, z)."""
    cfg = model.cfg
    x_t, z = _as_nchw(x_t), _as_nchw(z)
    if torch.is_tensor(t) and t.ndim > 0:
        if bool((t < cfg.eps).any()):
            raise TimestepBelowEps(f"t below eps={cfg.eps}")
        c_skip, c_out = boundary_scalings(t.to(x_t.dtype), cfg.sigma_data, cfg.eps)
        c_skip, c_out = c_skip[:, None, None, None], c_out[:, None, None, None]
    else:
        t = float(t)
        if t < cfg.eps:
            raise TimestepBelowEps(f"t={t} below eps={cfg.eps}")
        c_skip, c_out = boundary_scalings(t, cfg.sigma_data, cfg.eps)
    return c_skip * x_t + c_out * model(x_t, z, t)


def backprop(model: nn.Module, loss: torch.Tensor) -> None:
    """Fill every parameter's ``.grad`` with d loss / d param (zeros if unused)."""
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None:
        raise NoRecordedGraph("loss carries no recorded graph")
    for p in model.parameters():
        p.grad = None
    loss.backward()
    for p in model.parameters():
        if p.grad is None:
            p.grad = torch.zeros_like(p)


def param_checksum(model: nn.Module) -> str:
    """sha256 over the float32 little-endian parameter bytes in name order."""
    h = hashlib.sha256()
    for name, p in model.named_parameters():
        h.update(name.encode())
        h.update(p.detach().cpu().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def is_untrained(model: Denoiser) -> bool:
    return not any(bool(p.detach().any()) for p in model.out_conv.parameters())
