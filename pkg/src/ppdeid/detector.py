"""Face detector adapters.

An adapter exposes ``detect(pixels) -> bool`` for a 2-D float array in [0, 1]
of any size. Three implementations: a wrapped callable, an external process
speaking the one-line JSON protocol, and a small learned face/non-face net.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import tempfile
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .data import to_uint8
from .errors import AdapterFailure

ENV_VAR = "PPDEID_DETECTOR"


class DetectorAdapter(Protocol):
    def detect(self, pixels: np.ndarray) -> bool: ...


def _key(pixels: np.ndarray) -> str:
    a = to_uint8(pixels)
    return hashlib.sha256(a.tobytes() + str(a.shape).encode()).hexdigest()


class CallableDetector:
    def __init__(self, fn: Callable[[np.ndarray], bool]):
        self.fn = fn

    def detect(self, pixels):
        return bool(self.fn(pixels))


class ProcessDetector:
    """Runs ``executable <png path>``; expects a last stdout line ``{"face": true|false}``.

    Verdicts are cached by the hash of the 8-bit image, so repeated or
    reordered queries cannot change outcomes.
    """

    def __init__(self, executable, timeout: float = 60.0):
        self.cmd = [str(c) for c in (executable if isinstance(executable, (list, tuple)) else [executable])]
        self.timeout = timeout
        self._cache: dict[str, bool] = {}

    def detect(self, pixels):
        key = _key(pixels)
        if key in self._cache:
            return self._cache[key]
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "query.png"
            Image.fromarray(to_uint8(pixels)).save(path)
            try:
                proc = subprocess.run(self.cmd + [str(path)], capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise AdapterFailure(f"detector process failed: {exc}") from exc
        lines = [ln for ln in proc.stdout.strip().splitlines() if ln.strip()]
        if proc.returncode != 0 or not lines:
            raise AdapterFailure(f"detector exited {proc.returncode}: {proc.stderr.strip()[:200]}")
        try:
            verdict = json.loads(lines[-1])["face"]
        except (ValueError, KeyError, TypeError) as exc:
            raise AdapterFailure(f"bad detector response {lines[-1]!r}") from exc
        if not isinstance(verdict, bool):
            raise AdapterFailure(f"'face' must be a JSON boolean, got {verdict!r}")
        self._cache[key] = verdict
        return verdict


class FaceNet(nn.Module):
    """Fully convolutional face/non-face scorer, global max pooled (any input size).

    Five stride-2 convs and a 3x3 head give a 129 px receptive field, so a
    score needs the whole face layout rather than a single part.
    """

    def __init__(self, width: int = 8):
        super().__init__()
        layers, c = [], 1
        for i, out in enumerate((width, 2 * width, 4 * width, 4 * width, 4 * width)):
            layers += [nn.Conv2d(c, out, 5 if i == 0 else 3, 2, 2 if i == 0 else 1), nn.ReLU()]
            c = out
        layers.append(nn.Conv2d(c, 1, 3, 1, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x).amax(dim=(1, 2, 3))


class LearnedDetector:
    def __init__(self, net: FaceNet, threshold: float = 0.0):
        self.net = net.eval()
        self.threshold = threshold

    def detect(self, pixels):
        x = torch.as_tensor(np.asarray(pixels, dtype=np.float32))[None, None]
        with torch.no_grad():
            return bool(self.net(x)[0] > self.threshold)


def shuffle_tiles(pixels: np.ndarray, rng: np.random.Generator, tile: int = 16) -> np.ndarray:
    h, w = pixels.shape
    tiles = pixels.reshape(h // tile, tile, w // tile, tile).transpose(0, 2, 1, 3).reshape(-1, tile, tile)
    tiles = tiles[rng.permutation(len(tiles))]
    return tiles.reshape(h // tile, w // tile, tile, tile).transpose(0, 2, 1, 3).reshape(h, w)


def train_learned_detector(faces, seed: int = 0, epochs: int = 12, paddings=(0, 50)) -> LearnedDetector:
    """Faces are positives, tile-shuffled faces are negatives; trained at each padding."""
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    net = FaceNet()
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    pos = [np.asarray(f.pixels if hasattr(f, "pixels") else f, dtype=np.float32) for f in faces]
    for _ in range(epochs):
        for pad in paddings:
            neg = [shuffle_tiles(p, rng) for p in pos]
            x = np.stack([np.pad(a, pad) for a in pos + neg])[:, None]
            y = np.r_[np.ones(len(pos)), np.zeros(len(neg))].astype(np.float32)
            order = rng.permutation(len(x))
            for idx in np.array_split(order, max(1, len(x) // 16)):
                logits = net(torch.from_numpy(x[idx]))
                loss = F.binary_cross_entropy_with_logits(logits, torch.from_numpy(y[idx]))
                opt.zero_grad()
                loss.backward()
                opt.step()
    return LearnedDetector(net)


def adapter_from_env(default: Callable[[], DetectorAdapter] | None = None) -> DetectorAdapter:
    exe = os.environ.get(ENV_VAR)
    if exe:
        return ProcessDetector(exe.split())
    if default is None:
        raise AdapterFailure(f"no detector configured; set {ENV_VAR}")
    return default()
