"""U-Net generator: 128x128 face in, 128x128 face out, dropout as the noise source."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import IMAGE_SIZE, FaceImage, unstack
from .errors import ShapeMismatch

ENCODER_CHANNELS = (64, 128, 256, 512, 512, 512)
BOTTLENECK = 256
DROPOUT_P = 0.5
INIT_STD = 0.02


def channel_schedule(width: float = 1.0) -> tuple[int, ...]:
    """Encoder widths for the six blocks above the bottleneck, scaled by ``width``."""
    return tuple(max(4, int(round(c * width))) for c in ENCODER_CHANNELS)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            with torch.no_grad():
                m.weight.copy_(torch.randn(m.weight.shape, generator=generator) * INIT_STD)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            with torch.no_grad():
                m.weight.copy_(1.0 + torch.randn(m.weight.shape, generator=generator) * INIT_STD)
                m.bias.zero_()


class Down(nn.Module):
    def __init__(self, cin, cout, norm=True, act=True):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 4, 2, 1, bias=not norm)
        self.norm = nn.BatchNorm2d(cout) if norm else nn.Identity()
        self.act = act

    def forward(self, x):
        if self.act:
            x = F.leaky_relu(x, 0.2)
        return self.norm(self.conv(x))


class Up(nn.Module):
    def __init__(self, cin, cout, norm=True):
        super().__init__()
        self.conv = nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=not norm)
        self.norm = nn.BatchNorm2d(cout) if norm else nn.Identity()

    def forward(self, x):
        return self.norm(self.conv(F.relu(x)))


class UNetGenerator(nn.Module):
    """Seven stride-2 encoder blocks (128 -> 1) and a mirrored decoder.

    Encoder output ``k`` is concatenated onto the decoder input at the same
    resolution. The first two decoder blocks carry dropout, which is the only
    source of randomness ``z``; whether it fires is chosen per call rather than
    by ``train()``/``eval()``, which only govern batch-norm statistics.
    """

    def __init__(self, width: float = 1.0):
        super().__init__()
        ch = channel_schedule(width)
        self.width = width
        self.channels = ch + (BOTTLENECK,)
        enc = [Down(1, ch[0], norm=False, act=False)]
        for cin, cout in zip(ch[:-1], ch[1:]):
            enc.append(Down(cin, cout))
        # no norm at 1x1: batch statistics over one spatial cell are degenerate
        enc.append(Down(ch[-1], BOTTLENECK, norm=False))
        self.down = nn.ModuleList(enc)

        skips = list(reversed(ch))  # 512@2, 512@4, 512@8, 256@16, 128@32, 64@64
        dec = [Up(BOTTLENECK, skips[0])]
        for i in range(1, len(skips)):
            dec.append(Up(skips[i - 1] * 2, skips[i]))
        self.up = nn.ModuleList(dec)
        self.out = nn.ConvTranspose2d(skips[-1] * 2, 1, 4, 2, 1)
        self.dropout_blocks = (0, 1)

    def forward(self, x, stochastic=False, generator=None, drop_skips: Sequence[int] = ()):
        """Map (N, 1, 128, 128) in [0, 1] to the same shape in [0, 1].

        ``drop_skips`` zeroes the listed skip connections (0 = outermost), for
        wiring diagnostics.
        """
        if x.shape[-3:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeMismatch(f"generator expects (N, 1, 128, 128), got {tuple(x.shape)}")
        h = x * 2.0 - 1.0
        feats = []
        for block in self.down:
            h = block(h)
            feats.append(h)
        skips = feats[:-1][::-1]  # innermost first
        n_skip = len(skips)
        for i, block in enumerate(self.up):
            h = block(h)
            if stochastic and i in self.dropout_blocks:
                keep = torch.rand(h.shape, generator=generator, dtype=h.dtype) >= DROPOUT_P
                h = h * keep / (1.0 - DROPOUT_P)
            s = skips[i]
            if (n_skip - 1 - i) in drop_skips:
                s = torch.zeros_like(s)
            h = torch.cat([h, s], dim=1)
        h = self.out(F.relu(h))
        return (torch.tanh(h) + 1.0) / 2.0


def build_generator(seed: int = 0, width: float = 1.0) -> UNetGenerator:
    torch_gen = torch.Generator().manual_seed(int(seed))
    g = UNetGenerator(width)
    init_weights(g, torch_gen)
    return g


def generate(params: UNetGenerator, x, noise_mode: str = "deterministic", generator=None):
    """De-identify one FaceImage (or a batch tensor).

    ``deterministic`` disables dropout and uses running batch-norm statistics,
    so the call is a pure function of (params, x). ``stochastic`` samples fresh
    dropout masks; pass a seeded ``torch.Generator`` for reproducibility.
    """
    if noise_mode not in ("deterministic", "stochastic"):
        raise ValueError(f"unknown noise_mode {noise_mode!r}")
    was_training = params.training
    params.eval()
    try:
        if isinstance(x, FaceImage):
            with torch.no_grad():
                out = params(x.tensor(), noise_mode == "stochastic", generator)
            return unstack(out, [x])[0]
        return params(x, noise_mode == "stochastic", generator)
    finally:
        params.train(was_training)
