"""Gaussian-windowed SSIM and the similarity regulator loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data import FaceImage
from .errors import InvalidConfig, ShapeMismatch


@dataclass(frozen=True)
class SsimConfig:
    window_size: int = 11
    sigma: float = 1.5
    alpha: float = 1.0  # luminance exponent
    beta: float = 1.0  # contrast exponent
    gamma: float = 1.0  # structure exponent
    k1: float = 0.01
    k2: float = 0.03
    dynamic_range: float = 1.0

    def __post_init__(self):
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise InvalidConfig("window_size must be a positive odd integer")
        if self.sigma <= 0 or min(self.alpha, self.beta, self.gamma) <= 0:
            raise InvalidConfig("sigma and exponents must be positive")
        if self.k1 <= 0 or self.k2 <= 0 or self.dynamic_range <= 0:
            raise InvalidConfig("stability constants and dynamic range must be positive")

    @property
    def c1(self):
        return (self.k1 * self.dynamic_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.dynamic_range) ** 2

    @property
    def c3(self):
        return self.c2 / 2

    def window(self, dtype=torch.float64) -> torch.Tensor:
        r = np.arange(self.window_size) - self.window_size // 2
        g = np.exp(-(r**2) / (2 * self.sigma**2))
        g /= g.sum()
        return torch.as_tensor(np.outer(g, g), dtype=dtype)


DEFAULT = SsimConfig()


def _to_batch(x) -> torch.Tensor:
    if isinstance(x, FaceImage):
        return x.tensor(torch.float64)
    t = torch.as_tensor(x) if not isinstance(x, torch.Tensor) else x
    if not t.is_floating_point():
        t = t.double()
    while t.ndim < 4:
        t = t.unsqueeze(0)
    return t


def _moments(x, y, cfg):
    if x.shape != y.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(y.shape)}")
    if x.shape[-1] < cfg.window_size or x.shape[-2] < cfg.window_size:
        raise ShapeMismatch("image smaller than the SSIM window")
    dtype = torch.promote_types(x.dtype, y.dtype)
    x, y = x.to(dtype), y.to(dtype)
    w = cfg.window(dtype)[None, None]
    n, c = x.shape[0], x.shape[1]
    xs, ys = x.reshape(n * c, 1, *x.shape[-2:]), y.reshape(n * c, 1, *y.shape[-2:])

    def blur(t):
        return F.conv2d(t, w)

    mx, my = blur(xs), blur(ys)
    vx = blur(xs * xs) - mx * mx
    vy = blur(ys * ys) - my * my
    cxy = blur(xs * ys) - mx * my
    return mx, my, vx, vy, cxy


def _spow(t, p):
    return t if p == 1.0 else torch.sign(t) * torch.abs(t) ** p


def components(x, y, cfg: SsimConfig = DEFAULT):
    """Luminance, contrast and structure maps over the valid windows."""
    mx, my, vx, vy, cxy = _moments(_to_batch(x), _to_batch(y), cfg)
    sx, sy = torch.sqrt(torch.clamp(vx, min=0)), torch.sqrt(torch.clamp(vy, min=0))
    lum = (2 * mx * my + cfg.c1) / (mx**2 + my**2 + cfg.c1)
    con = (2 * sx * sy + cfg.c2) / (vx + vy + cfg.c2)
    struct = (cxy + cfg.c3) / (sx * sy + cfg.c3)
    return lum, con, struct


def ssim_map(x, y, cfg: SsimConfig = DEFAULT) -> torch.Tensor:
    x, y = _to_batch(x), _to_batch(y)
    mx, my, vx, vy, cxy = _moments(x, y, cfg)
    lum = _spow((2 * mx * my + cfg.c1) / (mx**2 + my**2 + cfg.c1), cfg.alpha)
    if cfg.beta == cfg.gamma:
        # with C3 = C2/2 the contrast and structure terms collapse to one ratio
        # free of square roots, so gradients stay finite on flat regions
        cs = (2 * cxy + cfg.c2) / (vx + vy + cfg.c2)
        return lum * _spow(cs, cfg.beta)
    _, con, struct = components(x, y, cfg)
    return lum * _spow(con, cfg.beta) * _spow(struct, cfg.gamma)


def ssim(x, y, cfg: SsimConfig = DEFAULT, reduction: str = "mean"):
    """Mean SSIM over all valid windows.

    FaceImage / numpy inputs give a Python float; tensor inputs give a tensor
    (per image when ``reduction="none"``) that is differentiable in both arguments.
    """
    m = ssim_map(x, y, cfg)
    per_image = m.flatten(1).mean(1)
    if isinstance(x, torch.Tensor) or isinstance(y, torch.Tensor):
        return per_image if reduction == "none" else per_image.mean()
    return float(per_image.mean())


def sim_loss(x, x_hat, cfg: SsimConfig = DEFAULT, reduction: str = "mean"):
    """Regulator loss (1 - SSIM) / 2."""
    s = ssim(x, x_hat, cfg, reduction)
    return 0.5 * (1.0 - s)
