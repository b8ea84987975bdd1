"""Light-CNN-9 style identity embedder, contrastive loss and Siamese pretraining."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import IMAGE_SIZE, FaceImage, stack
from .errors import DimensionMismatch, Diverged, ShapeMismatch

log = logging.getLogger(__name__)

EMBED_DIM = 256
# output channels (after MFM) of conv1 and the four NIN+conv groups
CONV_CHANNELS = (48, 96, 192, 128, 128)


def mfm(x: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Max-Feature-Map: split ``dim`` in half and keep the elementwise max."""
    a, b = torch.chunk(x, 2, dim=dim)
    return torch.maximum(a, b)


class MFMConv(nn.Module):
    def __init__(self, cin, cout, k, pad=0):
        super().__init__()
        self.conv = nn.Conv2d(cin, 2 * cout, k, 1, pad)

    def forward(self, x):
        return mfm(self.conv(x))


class Group(nn.Module):
    """1x1 network-in-network MFM conv followed by a 3x3 MFM conv."""

    def __init__(self, cin, cout):
        super().__init__()
        self.nin = MFMConv(cin, cin, 1)
        self.conv = MFMConv(cin, cout, 3, pad=1)

    def forward(self, x):
        return self.conv(self.nin(x))


class LightCNN9(nn.Module):
    """5 conv layers, 4 NIN layers, 4 max-pools, MFM fully connected to 256."""

    def __init__(self, width: float = 1.0):
        super().__init__()
        c = [max(2, int(round(ch * width))) for ch in CONV_CHANNELS]
        self.width = width
        self.conv1 = MFMConv(1, c[0], 5, pad=2)
        self.groups = nn.ModuleList([Group(c[0], c[1]), Group(c[1], c[2]), Group(c[2], c[3]), Group(c[3], c[4])])
        # pools after conv1, group1, group2, group4: 128 -> 64 -> 32 -> 16 -> 8
        self.pool_after = (0, 1, 2, 4)
        self.fc = nn.Linear(c[4] * 8 * 8, 2 * EMBED_DIM)
        self.frozen = False

    def forward(self, x):
        if x.shape[-3:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeMismatch(f"verificator expects (N, 1, 128, 128), got {tuple(x.shape)}")
        h = self.conv1(x)
        h = F.max_pool2d(h, 2, 2)
        for i, g in enumerate(self.groups, start=1):
            h = g(h)
            if i in self.pool_after:
                h = F.max_pool2d(h, 2, 2)
        return mfm(self.fc(h.flatten(1)))

    def freeze(self) -> "LightCNN9":
        self.frozen = True
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.state_dict().items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()


def build_verificator(seed: int = 0, width: float = 1.0) -> LightCNN9:
    """He-initialized (no batch norm to rescue a 0.02 init through nine layers)."""
    v = LightCNN9(width)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in v.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen) * np.sqrt(2.0 / fan_in))
                m.bias.zero_()
    return v


def embed_batch(params: LightCNN9, x: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    e = params(x)
    return F.normalize(e, dim=1, eps=1e-12) if normalize else e


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    normalized: bool

    def __len__(self):
        return len(self.values)


def embed(params: LightCNN9, x, normalize: bool = True):
    """Embed a FaceImage (returns Embedding) or a batch tensor (returns a tensor)."""
    if isinstance(x, FaceImage):
        with torch.no_grad():
            e = embed_batch(params, x.tensor(next(params.parameters()).dtype), normalize)[0]
        return Embedding(e.numpy().astype(np.float64), normalize)
    return embed_batch(params, x, normalize)


def _as_tensor(e):
    if isinstance(e, Embedding):
        return torch.from_numpy(np.asarray(e.values, dtype=np.float64))
    if isinstance(e, torch.Tensor):
        return e
    return torch.as_tensor(np.asarray(e, dtype=np.float64))


def contrastive_loss(e_i, e_j, eta, alpha: float = 2.0):
    """Per-pair contrastive loss.

    eta = 0 (same subject): d^2 / 2; eta = 1 (different): max(0, alpha - d)^2 / 2,
    with d the Euclidean distance. Accepts single vectors or (N, D) batches with
    an (N,) indicator; returns a float for single vectors.
    """
    a, b = _as_tensor(e_i), _as_tensor(e_j)
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatch(f"{a.shape[-1]} vs {b.shape[-1]}")
    if alpha <= 0:
        raise ValueError("margin must be positive")
    d = torch.linalg.vector_norm(a - b, dim=-1)
    eta_t = torch.as_tensor(eta, dtype=d.dtype)
    loss = 0.5 * ((1 - eta_t) * d**2 + eta_t * torch.clamp(alpha - d, min=0.0) ** 2)
    if not isinstance(e_i, torch.Tensor) and not isinstance(e_j, torch.Tensor) and loss.ndim == 0:
        return float(loss)
    return loss


def verify(params: LightCNN9, x_a: FaceImage, x_b: FaceImage, threshold: float):
    """(same, distance): same iff the normalized-embedding distance is below threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    ea, eb = embed(params, x_a), embed(params, x_b)
    d = float(np.linalg.norm(ea.values - eb.values))
    return d < threshold, d


def pair_distances(params: LightCNN9, a, b, batch_size: int = 64) -> np.ndarray:
    """Distances between normalized embeddings of two equal-length image lists."""
    out = []
    with torch.no_grad():
        for s in range(0, len(a), batch_size):
            ea = embed_batch(params, stack(a[s : s + batch_size]))
            eb = embed_batch(params, stack(b[s : s + batch_size]))
            out.append(torch.linalg.vector_norm(ea.double() - eb.double(), dim=1).numpy())
    return np.concatenate(out) if out else np.zeros(0)


def embed_all(params: LightCNN9, images, batch_size: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(embed_batch(params, stack(images[s : s + batch_size])).double().numpy())
    return np.concatenate(out) if out else np.zeros((0, EMBED_DIM))


@dataclass
class PretrainResult:
    params: LightCNN9
    history: list[float] = field(default_factory=list)


def pretrain_verificator(
    train_pairs,
    lr: float = 1e-4,
    margin: float = 2.0,
    epochs: int = 1,
    batch_size: int = 32,
    seed: int = 0,
    width: float = 1.0,
    params: LightCNN9 | None = None,
    betas=(0.9, 0.999),
) -> PretrainResult:
    """Siamese contrastive training with Adam; returns frozen params and per-epoch mean loss.

    ``train_pairs`` is a list of PairSample over FaceImages, or a callable
    ``epoch -> list of PairSample`` to resample pairs every epoch.
    """
    torch.manual_seed(seed)
    net = params if params is not None else build_verificator(seed, width)
    net.train()
    history: list[float] = []
    if epochs > 0:
        opt = torch.optim.Adam(net.parameters(), lr=lr, betas=betas)
        rng = np.random.default_rng(seed)
        for epoch in range(epochs):
            pairs = train_pairs(epoch) if callable(train_pairs) else train_pairs
            order = rng.permutation(len(pairs))
            total, count = 0.0, 0
            for s in range(0, len(order), batch_size):
                batch = [pairs[i] for i in order[s : s + batch_size]]
                xa = stack([p.a for p in batch])
                xb = stack([p.b for p in batch])
                eta = torch.tensor([p.indicator for p in batch], dtype=torch.float32)
                loss = contrastive_loss(embed_batch(net, xa), embed_batch(net, xb), eta, margin).mean()
                if not torch.isfinite(loss):
                    raise Diverged(f"non-finite contrastive loss at epoch {epoch}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += float(loss.detach()) * len(batch)
                count += len(batch)
            history.append(total / max(count, 1))
            log.info("verificator epoch %d loss %.4f", epoch, history[-1])
    net.eval()
    return PretrainResult(net.freeze(), history)


def to_checkpoint(params: LightCNN9, config: dict | None = None, step: int = 0):
    from .checkpoint import Checkpoint

    cfg = dict(config or {})
    cfg.setdefault("width", params.width)
    arrays = {k: v.detach().cpu().numpy() for k, v in params.state_dict().items()}
    return Checkpoint("verificator", cfg, step, arrays, frozen=params.frozen)


def from_checkpoint(ck) -> LightCNN9:
    if ck.module_name != "verificator":
        raise ValueError(f"checkpoint holds {ck.module_name!r}, not a verificator")
    v = LightCNN9(float(ck.config.get("width", 1.0)))
    ref = v.state_dict()
    v.load_state_dict({k: torch.from_numpy(np.array(ck.arrays[k])).reshape(ref[k].shape) for k in ref})
    v.eval()
    return v.freeze() if ck.frozen else v
