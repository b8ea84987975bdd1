"""End-to-end workflow shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .config import TrainConfig
from .data import FaceImage, sample_pairs, split_train_test
from .evaluation import (
    ThresholdCalibration,
    calibrate_threshold,
    deid_rate_from_distances,
    deidentify,
    ids_count,
    mean_ssim,
    original_pair_rate,
)
from .synth import synth_images
from .training import generator_from_checkpoint, train
from .verificator import LightCNN9, pair_distances, pretrain_verificator

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 1000

# 10 identities cannot spare whole subjects for testing, so the toy split is per image
TOY_CONFIG = TrainConfig(
    gen_width=0.25,
    disc_width=0.25,
    verif_width=0.125,
    lambda_verif=5.0,
    lambda_sim=10.0,
    lr_system=1e-3,
    batch_size=8,
    epochs=6,
    pretrain_epochs=4,
    pretrain_pairs=400,
    split_by="image",
    split_fraction=0.75,
)


@dataclass(frozen=True)
class ToySetup:
    subjects: int = 10
    per_subject: int = 20
    verif_batch: int = 16
    train: TrainConfig = field(default_factory=lambda: TOY_CONFIG)


@dataclass
class Prepared:
    seed: int
    train_images: list[FaceImage]
    test_images: list[FaceImage]
    train_verificator: LightCNN9
    eval_verificator: LightCNN9
    train_calibration: ThresholdCalibration
    eval_calibration: ThresholdCalibration
    calib_pairs: list


def pretrain(images, cfg: TrainConfig, seed: int, n_pairs: int, epochs: int, batch_size: int = 16) -> LightCNN9:
    """Pretrain and freeze a verificator on fresh balanced pairs every epoch."""
    res = pretrain_verificator(
        lambda e: sample_pairs(images, n_pairs, 0.5, seed * 7919 + e),
        lr=cfg.lr_pretrain,
        margin=cfg.margin,
        epochs=epochs,
        batch_size=batch_size,
        seed=seed,
        width=cfg.verif_width,
    )
    return res.params


def prepare(images: list[FaceImage], cfg: TrainConfig, seed: int, verif_batch: int = 16) -> Prepared:
    train_imgs, test_imgs = split_train_test(images, cfg.split_fraction, seed, by=cfg.split_by)
    v_train = pretrain(train_imgs, cfg, seed, cfg.pretrain_pairs, cfg.pretrain_epochs, verif_batch)
    # independent evaluation verificator: different init and different pair draws
    v_eval = pretrain(train_imgs, cfg, seed + EVAL_SEED_OFFSET, cfg.pretrain_pairs, cfg.pretrain_epochs, verif_batch)
    pairs = calibration_pairs(test_imgs, cfg, seed)
    return Prepared(
        seed,
        train_imgs,
        test_imgs,
        v_train,
        v_eval,
        calibrate_threshold(v_train, pairs),
        calibrate_threshold(v_eval, pairs),
        pairs,
    )


def prepare_toy(seed: int, setup: ToySetup = ToySetup()) -> Prepared:
    faces = [f for f, _ in synth_images(setup.subjects, setup.per_subject, seed)]
    return prepare(faces, setup.train, seed, setup.verif_batch)


def calibration_pairs(test_images, cfg: TrainConfig, seed: int):
    return sample_pairs(test_images, cfg.calibration_pairs, 0.5, seed + 31)


@dataclass
class RunResult:
    ablation: str
    deid_rate_test: float
    deid_rate_train: float
    original_rate_test: float
    mean_ssim: float
    ids: int
    checkpoint: object
    history: list
    generated: list[FaceImage]


def run_ablation(prep: Prepared, ablation: str, cfg: TrainConfig | None = None) -> RunResult:
    cfg = replace(cfg or ToySetup().train, ablation=ablation, seed=prep.seed)
    verif = prep.train_verificator if cfg.effective_lambdas[0] else None
    ck, history = train(prep.train_images, cfg, verificator=verif)
    gen = generator_from_checkpoint(ck)
    return evaluate_generator(prep, gen, ablation, ck, history)


def evaluate_generator(prep: Prepared, gen, ablation: str, ck=None, history=None) -> RunResult:
    v, thr = prep.eval_verificator, prep.eval_calibration.threshold
    out_test = deidentify(gen, prep.test_images)
    out_train = deidentify(gen, prep.train_images)
    d_test = pair_distances(v, prep.test_images, out_test)
    d_train = pair_distances(v, prep.train_images, out_train)
    ids = ids_count(
        [(x.subject_id, g) for x, g in zip(prep.test_images, out_test)],
        [(x.subject_id, x) for x in prep.test_images],
        v,
        thr,
    )
    res = RunResult(
        ablation,
        deid_rate_from_distances(d_test, thr),
        deid_rate_from_distances(d_train, thr),
        original_pair_rate(v, prep.calib_pairs, thr),
        mean_ssim(prep.test_images, out_test),
        ids,
        ck,
        history or [],
        out_test,
    )
    log.info(
        "%s: deid test %.1f%% train %.1f%% ssim %.3f ids %d",
        ablation,
        res.deid_rate_test,
        res.deid_rate_train,
        res.mean_ssim,
        res.ids,
    )
    return res


def summary(res: RunResult) -> dict:
    return {
        "ablation": res.ablation,
        "deid_rate_test": res.deid_rate_test,
        "deid_rate_train": res.deid_rate_train,
        "mean_ssim": res.mean_ssim,
        "ids": res.ids,
        "final_losses": res.history[-1] if res.history else None,
    }


def median_distance(prep: Prepared) -> float:
    d = pair_distances(prep.eval_verificator, [p.a for p in prep.calib_pairs], [p.b for p in prep.calib_pairs])
    return float(np.median(d))


def toy_experiment(seed: int, ablations=("cgan_sim", "cgan_verif", "cgan_sim_verif"), setup: ToySetup = ToySetup()) -> dict:
    """Prepare the toy fixture for ``seed`` and train/evaluate each ablation on it."""
    prep = prepare_toy(seed, setup)
    out = {
        "seed": seed,
        "verificator_accuracy": prep.train_calibration.accuracy,
        "eval_verificator_accuracy": prep.eval_calibration.accuracy,
        "threshold": prep.eval_calibration.threshold,
        "runs": {},
    }
    for ablation in ablations:
        res = run_ablation(prep, ablation, setup.train)
        out["runs"][ablation] = {k: v for k, v in summary(res).items() if k != "final_losses"}
    return out


def toy_checks(results: list[dict]) -> dict[str, int]:
    """Number of seeds in which each toy-run claim holds."""

    def holds(fn):
        return sum(bool(fn(r["runs"], r)) for r in results)

    return {
        "verificator_accuracy>=0.9": holds(lambda runs, r: r["verificator_accuracy"] >= 0.9),
        "deid>=90": holds(lambda runs, r: runs["cgan_sim_verif"]["deid_rate_test"] >= 90),
        "ssim>=0.5": holds(lambda runs, r: runs["cgan_sim_verif"]["mean_ssim"] >= 0.5),
        "ids==0": holds(lambda runs, r: runs["cgan_sim_verif"]["ids"] == 0),
        "deid(verif)>=deid(sim)": holds(
            lambda runs, r: runs["cgan_verif"]["deid_rate_test"] >= runs["cgan_sim"]["deid_rate_test"]
        ),
        "ssim(sim)>=ssim(verif)": holds(lambda runs, r: runs["cgan_sim"]["mean_ssim"] >= runs["cgan_verif"]["mean_ssim"]),
    }
