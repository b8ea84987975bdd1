"""Unconditional patch discriminator with a 30x30 score grid over 34x34 windows."""

from __future__ import annotations

import torch
import torch.nn as nn

from .data import IMAGE_SIZE, FaceImage
from .errors import ShapeMismatch
from .generator import init_weights

GRID = 30
RECEPTIVE_FIELD = 34


class PatchDiscriminator(nn.Module):
    """k4/s2 -> k4/s2 -> k4/s1 -> k4/s1 (1 channel), all with padding 1.

    Spatial sizes 128 -> 64 -> 32 -> 31 -> 30; receptive field 4 -> 10 -> 22 -> 34.
    """

    def __init__(self, width: float = 1.0):
        super().__init__()
        c1, c2, c3 = (max(4, int(round(c * width))) for c in (64, 128, 256))
        self.width = width
        self.net = nn.Sequential(
            nn.Conv2d(1, c1, 4, 2, 1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c1, c2, 4, 2, 1, bias=False),
            nn.BatchNorm2d(c2),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c2, c3, 4, 1, 1, bias=False),
            nn.BatchNorm2d(c3),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c3, 1, 4, 1, 1),
        )

    def logits(self, x):
        if x.shape[-3:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeMismatch(f"discriminator expects (N, 1, 128, 128), got {tuple(x.shape)}")
        return self.net(x * 2.0 - 1.0)

    def forward(self, x):
        return torch.sigmoid(self.logits(x))


def build_discriminator(seed: int = 0, width: float = 1.0) -> PatchDiscriminator:
    d = PatchDiscriminator(width)
    init_weights(d, torch.Generator().manual_seed(int(seed)))
    return d


def discriminate(params: PatchDiscriminator, image) -> torch.Tensor:
    """Patch scores in (0, 1): (1, 30, 30) for a FaceImage, (N, 1, 30, 30) for a batch."""
    if isinstance(image, FaceImage):
        return params(image.tensor())[0]
    return params(image)


def receptive_window(i: int, j: int) -> tuple[slice, slice]:
    """Input rows/cols (clipped to the image) seen by output cell (i, j)."""
    # cell k spans [4k - 11, 4k + 22] in input coordinates
    def span(k):
        lo = 4 * k - 11
        return slice(max(lo, 0), min(lo + RECEPTIVE_FIELD, IMAGE_SIZE))

    return span(i), span(j)
