"""Privacy and utility measurements: threshold calibration, de-identification
rate, identity switches, detection rate, attribute preservation, trade-off
tables and montages."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .data import IMAGE_SIZE, FaceImage, stack, to_uint8, unstack
from .errors import EmptyInput, LabelMismatch, TooFewPairs, UnbalancedPairs
from .generator import UNetGenerator
from .ssim import ssim
from .verificator import embed_all, pair_distances

CALIBRATION_PROTOCOL = (
    "10-fold contiguous; per fold pick the midpoint threshold maximizing accuracy on the "
    "other folds (ties -> smallest); same iff distance < threshold; threshold = mean over folds"
)


@dataclass
class ThresholdCalibration:
    threshold: float
    fold_accuracies: list[float]
    pair_count: int
    fold_thresholds: list[float] = field(default_factory=list)
    protocol: str = CALIBRATION_PROTOCOL

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))


def candidate_thresholds(distances) -> np.ndarray:
    u = np.unique(np.asarray(distances, dtype=np.float64))
    if len(u) < 2:
        return u.copy()
    return (u[:-1] + u[1:]) / 2.0


def best_threshold(distances, same) -> tuple[float, float]:
    """Threshold among candidate midpoints with the highest accuracy (first on ties)."""
    d = np.asarray(distances, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    cands = candidate_thresholds(d)
    pos = np.sort(d[same])
    neg = np.sort(d[~same])
    correct = np.searchsorted(pos, cands, side="left") + (len(neg) - np.searchsorted(neg, cands, side="left"))
    k = int(np.argmax(correct))
    return float(cands[k]), float(correct[k] / len(d))


def accuracy_at(distances, same, threshold: float) -> float:
    d = np.asarray(distances, dtype=np.float64)
    return float(np.mean((d < threshold) == np.asarray(same, dtype=bool)))


def calibrate_from_distances(distances, indicators, folds: int = 10) -> ThresholdCalibration:
    """Cross-validated threshold from pair distances and indicators (0 = same subject)."""
    d = np.asarray(distances, dtype=np.float64)
    eta = np.asarray(indicators)
    if len(d) != len(eta):
        raise ValueError("distances and indicators differ in length")
    if len(d) < folds:
        raise TooFewPairs(f"{len(d)} pairs for {folds} folds")
    n_pos = int(np.sum(eta == 0))
    if n_pos * 2 != len(eta):
        raise UnbalancedPairs(f"{n_pos} positives of {len(eta)} pairs")
    same = eta == 0
    accs, ths = [], []
    for held in np.array_split(np.arange(len(d)), folds):
        mask = np.ones(len(d), dtype=bool)
        mask[held] = False
        t, _ = best_threshold(d[mask], same[mask])
        ths.append(t)
        accs.append(accuracy_at(d[held], same[held], t))
    return ThresholdCalibration(sum(ths) / len(ths), accs, len(d), ths)


def calibrate_threshold(verificator, pairs, folds: int = 10) -> ThresholdCalibration:
    d = pair_distances(verificator, [p.a for p in pairs], [p.b for p in pairs])
    return calibrate_from_distances(d, [p.indicator for p in pairs], folds)


def as_deidentifier(generator) -> Callable[[torch.Tensor], torch.Tensor]:
    """Wrap a generator module (deterministic mode) or pass a batch callable through."""
    if isinstance(generator, UNetGenerator):
        def run(x):
            generator.eval()
            with torch.no_grad():
                return generator(x)

        return run
    return generator


def deidentify(generator, images: Sequence[FaceImage], batch_size: int = 32) -> list[FaceImage]:
    fn = as_deidentifier(generator)
    out = []
    for s in range(0, len(images), batch_size):
        chunk = list(images[s : s + batch_size])
        out.extend(unstack(fn(stack(chunk)), chunk))
    return out


def deid_rate_from_distances(distances, threshold: float) -> float:
    d = np.asarray(distances, dtype=np.float64)
    if len(d) == 0:
        return 0.0
    return float(100.0 * np.mean(d >= threshold))


def deid_rate(verificator, originals: Sequence[FaceImage], generator, threshold: float, generated=None) -> float:
    """Percent of (x, G(x)) pairs the verificator calls different people."""
    generated = generated if generated is not None else deidentify(generator, originals)
    return deid_rate_from_distances(pair_distances(verificator, list(originals), list(generated)), threshold)


def original_pair_rate(verificator, pairs, threshold: float) -> float:
    """Same quantity on genuine positive pairs of originals: the floor reference."""
    pos = [p for p in pairs if p.indicator == 0]
    d = pair_distances(verificator, [p.a for p in pos], [p.b for p in pos])
    return deid_rate_from_distances(d, threshold)


def ids_count(generated, gallery, verificator, threshold: float) -> int:
    """Number of (generated_i, gallery_j) pairs of different subjects closer than threshold."""
    if not gallery:
        raise EmptyInput("gallery is empty")
    if not generated:
        return 0
    eg = embed_all(verificator, [im for _, im in generated])
    ea = embed_all(verificator, [im for _, im in gallery])
    return ids_count_from_embeddings(eg, [s for s, _ in generated], ea, [s for s, _ in gallery], threshold)


def ids_count_from_embeddings(eg, gen_ids, ea, gal_ids, threshold: float) -> int:
    d = np.linalg.norm(eg[:, None, :] - ea[None, :, :], axis=-1)
    differ = np.asarray(gen_ids)[:, None] != np.asarray(gal_ids)[None, :]
    return int(np.sum((d < threshold) & differ))


def mean_ssim(originals: Sequence[FaceImage], generated: Sequence[FaceImage]) -> float:
    if not originals:
        return float("nan")
    x = stack(originals, torch.float64)
    y = stack(generated, torch.float64)
    with torch.no_grad():
        return float(ssim(x, y, reduction="none").mean())


# ---------------------------------------------------------------- detection


def pad_image(pixels: np.ndarray, padding: int) -> np.ndarray:
    if padding < 0:
        raise ValueError("padding must be non-negative")
    return np.pad(np.asarray(pixels, dtype=np.float32), padding, mode="constant", constant_values=0.0)


def detection_rate(adapter, images, padding: int = 0) -> float:
    """Fraction of images (zero-padded on every side) in which the adapter finds a face."""
    if not images:
        raise EmptyInput("no images")
    hits = 0
    for im in images:
        px = im.pixels if isinstance(im, FaceImage) else np.asarray(im)
        hits += bool(adapter.detect(pad_image(px, padding)))
    return hits / len(images)


# ---------------------------------------------------------------- attributes


class AttributeClassifier(nn.Module):
    """Small conv net: four stride-2 conv+BN layers, mean and max pooling, linear head."""

    def __init__(self, n_classes: int, width: int = 16):
        super().__init__()
        self.n_classes = n_classes
        layers, c = [], 1
        for out in (width, 2 * width, 2 * width, 4 * width):
            layers += [nn.Conv2d(c, out, 3, 2, 1), nn.BatchNorm2d(out), nn.ReLU()]
            c = out
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(2 * c, n_classes)

    def forward(self, x):
        h = self.features(x * 2 - 1)
        pooled = torch.cat([h.mean(dim=(2, 3)), h.amax(dim=(2, 3))], dim=1)
        return self.head(pooled)


def train_attribute_classifier(images, labels, n_classes: int, seed: int = 0, epochs: int = 15, lr: float = 3e-3):
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise LabelMismatch("images and labels differ in length")
    torch.manual_seed(seed)
    clf = AttributeClassifier(n_classes)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    x = stack(images)
    y = torch.as_tensor(labels, dtype=torch.long)
    rng = np.random.default_rng(seed)
    clf.train()
    for _ in range(epochs):
        for idx in np.array_split(rng.permutation(len(x)), max(1, len(x) // 16)):
            if len(idx) < 2:
                continue
            loss = F.cross_entropy(clf(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    clf.eval()
    return clf


def predict_attributes(classifier: AttributeClassifier, images, batch_size: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(classifier(stack(images[s : s + batch_size])).argmax(1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=int)


def attribute_accuracy(classifier, images, labels) -> float:
    """Fraction of images classified into the class of their source image."""
    labels = np.asarray(labels)
    if len(images) != len(labels):
        raise LabelMismatch("images and labels differ in length")
    if len(labels) == 0:
        raise EmptyInput("no images")
    n_classes = getattr(classifier, "n_classes", None)
    if n_classes is not None and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelMismatch("label outside the classifier's classes")
    preds = predict_attributes(classifier, list(images)) if isinstance(classifier, nn.Module) else np.array(
        [classifier(im) for im in images]
    )
    return float(np.mean(preds == labels))


# ---------------------------------------------------------------- reports


@dataclass
class EvalReport:
    group: str
    ablation: str
    config_hash: str
    deid_rate_train: float
    deid_rate_test: float
    original_rate_test: float
    ids_count: int
    detection_rate_original: float
    detection_rate_deid: float
    detection_rate_original_padded: float
    detection_rate_deid_padded: float
    attribute_accuracy: dict[str, float]
    mean_ssim: float
    threshold: float
    calibration_accuracy: float
    calibration_protocol: str = CALIBRATION_PROTOCOL

    def __post_init__(self):
        for name in ("deid_rate_train", "deid_rate_test", "original_rate_test"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if self.ids_count < 0:
            raise ValueError("ids_count must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def flat(self) -> dict:
        d = self.to_dict()
        for k, v in d.pop("attribute_accuracy").items():
            d[f"attribute_accuracy_{k}"] = v
        return d

    def write_csv(self, path) -> None:
        row = self.flat()
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row), lineterminator="\n")
            w.writeheader()
            w.writerow(row)


TRADEOFF_FIELDS = ("group", "ablation", "mean_ssim", "deid_rate")


def tradeoff_report(runs) -> list[dict]:
    """One row per run; accepts (ablation, deid, ssim) or (group, ablation, deid, ssim) tuples or dicts."""
    rows = []
    for r in runs:
        if isinstance(r, dict):
            row = {"group": r.get("group", ""), "ablation": r["ablation"], "mean_ssim": r["mean_ssim"], "deid_rate": r["deid_rate"]}
        elif len(r) == 3:
            row = {"group": "", "ablation": r[0], "deid_rate": r[1], "mean_ssim": r[2]}
        else:
            row = {"group": r[0], "ablation": r[1], "deid_rate": r[2], "mean_ssim": r[3]}
        rows.append({k: row[k] for k in TRADEOFF_FIELDS})
    return rows


def write_tradeoff_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRADEOFF_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(r[k])) if k in ("mean_ssim", "deid_rate") else r[k]) for k in TRADEOFF_FIELDS})


def read_tradeoff_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {**r, "mean_ssim": float(r["mean_ssim"]), "deid_rate": float(r["deid_rate"])}
            for r in csv.DictReader(fh)
        ]


def plot_tradeoff(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for abl in dict.fromkeys(r["ablation"] for r in rows):
        pts = [r for r in rows if r["ablation"] == abl]
        ax.scatter([r["mean_ssim"] for r in pts], [r["deid_rate"] for r in pts], label=abl)
    ax.set_xlabel("SSIM")
    ax.set_ylabel("de-identification rate (%)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def montage(originals, generated, path) -> Path:
    """Two-row PNG grid: originals on top, de-identified below."""
    if len(originals) != len(generated):
        raise ValueError("originals and generated differ in length")
    if not originals:
        raise EmptyInput("no images to tile")
    n = len(originals)
    grid = np.zeros((2 * IMAGE_SIZE, n * IMAGE_SIZE), dtype=np.uint8)
    for k, (a, b) in enumerate(zip(originals, generated)):
        cols = slice(k * IMAGE_SIZE, (k + 1) * IMAGE_SIZE)
        grid[:IMAGE_SIZE, cols] = to_uint8(a.pixels if isinstance(a, FaceImage) else a)
        grid[IMAGE_SIZE:, cols] = to_uint8(b.pixels if isinstance(b, FaceImage) else b)
    path = Path(path)
    Image.fromarray(grid).save(path)
    return path
