"""Manifest ingestion, demographic grouping, splits and verification pairs."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from .errors import (
    DecodeError,
    EmptyGroupWarning,
    EmptyManifest,
    InfeasiblePositives,
    MissingFile,
    SchemaMismatch,
    ShapeMismatch,
    TooFewSubjects,
)

log = logging.getLogger(__name__)

IMAGE_SIZE = 128
MANIFEST_COLUMNS = ("image_path", "subject_id", "gender", "race", "age")
GENDERS = ("male", "female")
RACES = ("black", "white", "other")
AGE_BANDS = ("youth", "middle", "senior", "all")


@dataclass(frozen=True, eq=False)
class FaceImage:
    """A single-channel 128x128 face crop with values in [0, 1]."""

    pixels: np.ndarray
    source_path: str = ""
    subject_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 3 and px.shape[0] == 1:
            px = px[0]
        if px.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ShapeMismatch(f"expected {IMAGE_SIZE}x{IMAGE_SIZE}, got {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return (1, IMAGE_SIZE, IMAGE_SIZE)

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        """(1, 1, 128, 128) tensor view for the networks."""
        return torch.from_numpy(np.array(self.pixels)).to(dtype)[None, None]

    def with_pixels(self, pixels) -> "FaceImage":
        return FaceImage(pixels, self.source_path, self.subject_id)


def stack(images: Sequence[FaceImage], dtype=torch.float32) -> torch.Tensor:
    """Batch FaceImages into an (N, 1, 128, 128) tensor."""
    return torch.from_numpy(np.stack([im.pixels for im in images])).to(dtype)[:, None]


def unstack(batch: torch.Tensor, like: Sequence[FaceImage] | None = None) -> list[FaceImage]:
    arr = batch.detach().cpu().to(torch.float32).numpy()[:, 0]
    arr = np.clip(arr, 0.0, 1.0)
    if like is None:
        return [FaceImage(a) for a in arr]
    return [src.with_pixels(a) for src, a in zip(like, arr)]


@dataclass(frozen=True)
class ManifestRecord:
    image_path: str
    subject_id: str
    gender: str
    race: str
    age: int

    def __post_init__(self):
        if not self.subject_id:
            raise SchemaMismatch("subject_id must be non-empty")
        if self.age < 0:
            raise SchemaMismatch(f"negative age for {self.image_path}")
        if self.gender not in GENDERS:
            raise SchemaMismatch(f"unknown gender {self.gender!r}")
        if self.race not in RACES:
            raise SchemaMismatch(f"unknown race {self.race!r}")


@dataclass
class Manifest:
    """Loaded manifest: valid records plus rows whose image could not be resolved."""

    records: list[ManifestRecord]
    failures: list[tuple[int, str]] = field(default_factory=list)

    def __iter__(self):
        return iter(self.records)

    def __len__(self):
        return len(self.records)

    def __getitem__(self, i):
        return self.records[i]


def load_manifest(path) -> Manifest:
    """Parse a ``image_path,subject_id,gender,race,age`` CSV.

    Relative image paths resolve against the manifest's directory. Rows whose
    image is missing are collected in ``Manifest.failures`` as (line, path).
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    root = path.parent
    records, failures = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(c.strip() for c in (reader.fieldnames or ()))
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise SchemaMismatch(f"manifest missing columns {missing}; header={header}")
        for lineno, row in enumerate(reader, start=2):
            row = {k.strip(): (v or "").strip() for k, v in row.items() if k}
            img = Path(row["image_path"])
            if not img.is_absolute():
                img = root / img
            if not img.is_file():
                failures.append((lineno, row["image_path"]))
                log.warning("manifest line %d: unresolvable image %s", lineno, row["image_path"])
                continue
            try:
                age = int(row["age"])
            except ValueError as exc:
                raise SchemaMismatch(f"line {lineno}: bad age {row['age']!r}") from exc
            records.append(
                ManifestRecord(str(img), row["subject_id"], row["gender"].lower(), row["race"].lower(), age)
            )
    if not records and not failures:
        raise EmptyManifest(str(path))
    return Manifest(records, failures)


def write_manifest(records: Iterable[ManifestRecord], path, relative_to=None) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for r in records:
            p = r.image_path
            if relative_to is not None:
                p = Path(p).relative_to(relative_to).as_posix()
            w.writerow([p, r.subject_id, r.gender, r.race, r.age])


@dataclass(frozen=True)
class GroupKey:
    race: str
    age_band: str = "all"

    @property
    def name(self) -> str:
        return self.race if self.age_band == "all" else f"{self.race}_{self.age_band}"

    @classmethod
    def parse(cls, name: str) -> "GroupKey":
        parts = name.lower().replace("-", "_").split("_")
        if len(parts) == 1:
            parts.append("all")
        race, band = parts
        if race not in RACES or band not in AGE_BANDS:
            raise ValueError(f"unknown group {name!r}")
        return cls(race, band)

    def __str__(self):
        return self.name


def age_band(age: int) -> str:
    # 25 is youth, 40 is senior
    if age <= 25:
        return "youth"
    if age < 40:
        return "middle"
    return "senior"


GROUPS = tuple(
    GroupKey(race, band) for race in ("black", "white") for band in ("all", "youth", "middle", "senior")
)


def partition_groups(records: Sequence[ManifestRecord]) -> dict[GroupKey, list[ManifestRecord]]:
    """Assign male records to the eight race / race-age groups."""
    if not records:
        raise EmptyManifest("no records to partition")
    groups: dict[GroupKey, list[ManifestRecord]] = {g: [] for g in GROUPS}
    for r in records:
        if r.gender != "male" or r.race not in ("black", "white"):
            continue
        groups[GroupKey(r.race)].append(r)
        groups[GroupKey(r.race, age_band(r.age))].append(r)
    for key, members in groups.items():
        if len({m.subject_id for m in members}) < 2:
            warnings.warn(f"group {key.name} has fewer than 2 subjects", EmptyGroupWarning, stacklevel=2)
    return groups


def _by_subject(items) -> dict[str, list]:
    out: dict[str, list] = {}
    for it in items:
        out.setdefault(it.subject_id, []).append(it)
    return out


def split_train_test(group, fraction: float = 0.9, seed: int = 0, by: str = "subject"):
    """Deterministic train/test split.

    ``by="subject"`` keeps every subject on one side. ``by="image"`` splits each
    subject's images instead, so every identity appears in both halves (used
    for toy runs too small to hold out whole identities).
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    if not group:
        raise ValueError("empty group")
    subjects = _by_subject(group)
    ids = sorted(subjects)
    rng = np.random.default_rng(seed)
    if by == "subject":
        if len(ids) < 2:
            raise TooFewSubjects(f"{len(ids)} subject(s) cannot be split")
        order = rng.permutation(len(ids))
        n_train = min(max(int(round(fraction * len(ids))), 1), len(ids) - 1)
        train_ids = {ids[i] for i in order[:n_train]}
        train = [r for r in group if r.subject_id in train_ids]
        test = [r for r in group if r.subject_id not in train_ids]
        return train, test
    if by == "image":
        train, test = [], []
        for sid in ids:
            items = subjects[sid]
            order = rng.permutation(len(items))
            k = int(round(fraction * len(items)))
            if len(items) > 1:
                k = min(max(k, 1), len(items) - 1)
            train.extend(items[i] for i in sorted(order[:k]))
            test.extend(items[i] for i in sorted(order[k:]))
        return train, test
    raise ValueError(f"unknown split mode {by!r}")


@dataclass(frozen=True)
class PairSample:
    """Two items with indicator 0 (same subject) or 1 (different subjects)."""

    a: object
    b: object
    indicator: int

    def __post_init__(self):
        same = self.a.subject_id == self.b.subject_id
        if self.indicator not in (0, 1) or same != (self.indicator == 0):
            raise ValueError("pair indicator inconsistent with subject ids")


def sample_pairs(records, n: int, positive_fraction: float = 0.5, seed: int = 0) -> list[PairSample]:
    """Draw ``n`` pairs, exactly ``floor(n * positive_fraction)`` of them positive.

    Works on anything with a ``subject_id`` (records or FaceImages).
    """
    subjects = _by_subject(records)
    ids = sorted(subjects)
    n_pos = int(np.floor(n * positive_fraction))
    n_neg = n - n_pos
    multi = [s for s in ids if len(subjects[s]) >= 2]
    if n_pos and not multi:
        raise InfeasiblePositives("no subject has two images")
    if n_neg and len(ids) < 2:
        raise TooFewSubjects("negative pairs need two subjects")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pos):
        items = subjects[multi[rng.integers(len(multi))]]
        i, j = rng.choice(len(items), size=2, replace=False)
        pairs.append(PairSample(items[i], items[j], 0))
    for _ in range(n_neg):
        s, t = rng.choice(len(ids), size=2, replace=False)
        a, b = subjects[ids[s]], subjects[ids[t]]
        pairs.append(PairSample(a[rng.integers(len(a))], b[rng.integers(len(b))], 1))
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def _resize_center_crop(arr: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    h, w = arr.shape
    if (h, w) == (size, size):
        return arr
    scale = size / min(h, w)
    nh, nw = max(size, int(round(h * scale))), max(size, int(round(w * scale)))
    resized = np.asarray(Image.fromarray(arr.astype(np.float32)).resize((nw, nh), Image.BILINEAR))
    top, left = (nh - size) // 2, (nw - size) // 2
    return resized[top : top + size, left : left + size]


def load_image(path, subject_id: str = "") -> FaceImage:
    """Read an 8-bit grayscale face crop, rescaled to [0, 1] and fitted to 128x128."""
    path = Path(path)
    if not path.is_file():
        raise MissingFile(str(path))
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode not in ("L", "1", "I;16", "I", "F"):
                warnings.warn(f"{path.name}: {mode} input converted to grayscale", stacklevel=2)
                log.warning("%s: converting %s to grayscale", path, mode)
                im = im.convert("L")  # ITU-R 601 luma weights
            elif mode == "1":
                im = im.convert("L")
            arr = np.asarray(im, dtype=np.float32)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc
    arr = arr / 255.0
    arr = np.clip(_resize_center_crop(arr), 0.0, 1.0)
    return FaceImage(arr, str(path), subject_id)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(image: FaceImage | np.ndarray, path) -> None:
    px = image.pixels if isinstance(image, FaceImage) else image
    Image.fromarray(to_uint8(px)).save(path)


def load_record(record: ManifestRecord) -> FaceImage:
    return load_image(record.image_path, record.subject_id)
