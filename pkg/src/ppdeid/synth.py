"""Procedural synthetic-identity face fixtures.

Each subject gets a fixed facial geometry (head shape, eye spacing, nose and
mouth size) drawn from a generator keyed on (seed, subject index); each image
of that subject adds small jitter (shift, lighting, expression, sensor noise).
Race sets the skin tone and age band sets the number of forehead lines, so the
attribute classifiers have something to learn.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import IMAGE_SIZE, FaceImage, ManifestRecord, age_band, save_image, write_manifest

AGES = {"youth": 22, "middle": 32, "senior": 52}
WRINKLES = {"youth": 0, "middle": 2, "senior": 4}
# hair greys with age: the main age cue at 128x128
HAIR = {"youth": 0.10, "middle": 0.45, "senior": 0.85}
TONES = {"black": (0.30, 0.42), "white": (0.68, 0.80), "other": (0.50, 0.60)}


@dataclass(frozen=True)
class Identity:
    subject_id: str
    race: str
    age: int
    head_w: float
    head_h: float
    tone: float
    eye_sep: float
    eye_y: float
    eye_r: float
    brow_tilt: float
    nose_len: float
    nose_w: float
    mouth_y: float
    mouth_w: float
    mouth_curve: float
    hair_tone: float = 0.1
    hair_line: float = 0.7


def make_identity(seed: int, index: int, race: str = "black", band: str = "youth") -> Identity:
    rng = np.random.default_rng([seed, index, 7919])
    lo, hi = TONES[race]
    return Identity(
        subject_id=f"s{index:03d}",
        race=race,
        age=AGES[band] + int(rng.integers(-2, 3)),
        head_w=rng.uniform(36, 50),
        head_h=rng.uniform(46, 58),
        tone=rng.uniform(lo, hi),
        eye_sep=rng.uniform(13, 24),
        eye_y=rng.uniform(-16, -6),
        eye_r=rng.uniform(3.5, 7.5),
        brow_tilt=rng.uniform(-0.35, 0.35),
        nose_len=rng.uniform(8, 22),
        nose_w=rng.uniform(3, 8),
        mouth_y=rng.uniform(18, 30),
        mouth_w=rng.uniform(8, 20),
        mouth_curve=rng.uniform(-5, 5),
        hair_tone=HAIR[band] + rng.uniform(-0.04, 0.04),
        hair_line=rng.uniform(0.6, 0.75),
    )


def _soft(d, width=1.0):
    """Antialiased indicator of d < 0."""
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def render(ident: Identity, rng: np.random.Generator, size: int = IMAGE_SIZE) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cx = size / 2 + rng.uniform(-3, 3)
    cy = size / 2 + 2 + rng.uniform(-3, 3)
    light = rng.uniform(-0.05, 0.05)
    img = np.full((size, size), 0.08 + light / 2)

    head = ((xx - cx) / ident.head_w) ** 2 + ((yy - cy) / ident.head_h) ** 2
    face = _soft((np.sqrt(head) - 1.0) * 20)
    shade = 1.0 - 0.15 * np.clip((xx - cx) / ident.head_w, -1, 1) * rng.uniform(-1, 1)
    img = img * (1 - face) + face * (ident.tone + light) * shade

    crown = _soft((np.sqrt(((xx - cx) / (ident.head_w * 1.06)) ** 2 + ((yy - cy) / (ident.head_h * 1.06)) ** 2) - 1.0) * 20)
    hair = crown * _soft((yy - (cy - ident.hair_line * ident.head_h)) / 2.0)
    img = img * (1 - hair) + hair * ident.hair_tone

    ink = 0.05
    for k in range(WRINKLES[age_band(ident.age)]):
        y0 = cy - ident.head_h * 0.62 + 4 * k
        line = _soft(np.abs(yy - y0) - 0.6, 0.5) * _soft(np.abs(xx - cx) - ident.head_w * 0.45)
        img = img * (1 - 0.5 * line * face) + 0.5 * line * face * (ident.tone * 0.6)

    openness = rng.uniform(0.7, 1.0)
    for side in (-1, 1):
        ex, ey = cx + side * ident.eye_sep, cy + ident.eye_y
        eye = ((xx - ex) / ident.eye_r) ** 2 + ((yy - ey) / (ident.eye_r * 0.6 * openness)) ** 2
        m = _soft((np.sqrt(eye) - 1.0) * 4)
        img = img * (1 - m) + m * 0.95
        pupil = _soft(np.hypot(xx - ex, yy - ey) - ident.eye_r * 0.45)
        img = img * (1 - pupil) + pupil * ink
        by = ey - ident.eye_r - 3 + side * ident.brow_tilt * (xx - ex)
        brow = _soft(np.abs(yy - by) - 1.2) * _soft(np.abs(xx - ex) - ident.eye_r * 1.3)
        img = img * (1 - brow) + brow * ink * 2

    ny0, ny1 = cy + ident.eye_y + 2, cy + ident.eye_y + 2 + ident.nose_len
    nose = _soft(np.abs(xx - cx) - ident.nose_w * np.clip((yy - ny0) / max(ny1 - ny0, 1), 0.2, 1)) * _soft(
        np.maximum(ny0 - yy, yy - ny1)
    )
    img = img * (1 - 0.35 * nose) + 0.35 * nose * ident.tone * 0.55

    my = cy + ident.mouth_y + ident.mouth_curve * (1 - ((xx - cx) / ident.mouth_w) ** 2) * rng.uniform(0.6, 1.2)
    mouth = _soft(np.abs(yy - my) - 1.6) * _soft(np.abs(xx - cx) - ident.mouth_w)
    img = img * (1 - mouth) + mouth * 0.15

    img = img + rng.normal(0, 0.015, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def demographics_for(index: int, spec: str) -> tuple[str, str]:
    if spec == "mixed":
        race = ("black", "white")[index % 2]
        band = ("youth", "middle", "senior")[(index // 2) % 3]
        return race, band
    race, _, band = spec.partition("_")
    return race, band or "youth"


def synth_images(subjects: int, per_subject: int, seed: int = 0, demographics: str = "mixed"):
    """In-memory fixture: list of (FaceImage, ManifestRecord-without-path fields)."""
    out = []
    for s in range(subjects):
        race, band = demographics_for(s, demographics)
        ident = make_identity(seed, s, race, band)
        for k in range(per_subject):
            rng = np.random.default_rng([seed, s, k])
            out.append((FaceImage(render(ident, rng), f"{ident.subject_id}_{k:03d}", ident.subject_id), ident))
    return out


def synth_fixture(out_dir, subjects: int = 10, per_subject: int = 20, seed: int = 0, demographics: str = "mixed"):
    """Write PNGs under ``out_dir/images`` and a ``manifest.csv``; return the records.

    Pixels are quantized to 8 bits on write, exactly as a real dataset would be.
    """
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for face, ident in synth_images(subjects, per_subject, seed, demographics):
        p = img_dir / f"{face.source_path}.png"
        save_image(face, p)
        records.append(ManifestRecord(str(p), ident.subject_id, "male", ident.race, ident.age))
    write_manifest(records, out_dir / "manifest.csv", relative_to=out_dir)
    return records
