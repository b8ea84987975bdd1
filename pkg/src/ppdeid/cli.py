"""Command-line entry point: ``ppdeid <subcommand> [flags]``.

Every subcommand writes a ``run_manifest.json`` next to its outputs. That file
is the only place a timestamp appears, so all other artifacts are byte-identical
across runs with the same seed, config and inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from .config import ABLATIONS, TrainConfig, load_config
from .data import (
    GroupKey,
    age_band,
    load_image,
    load_manifest,
    load_record,
    partition_groups,
    save_image,
    split_train_test,
)
from .detector import adapter_from_env, train_learned_detector
from .errors import EmptyInput, MissingFile, PPDeidError
from .evaluation import (
    EvalReport,
    attribute_accuracy,
    calibrate_threshold,
    deidentify,
    detection_rate,
    montage,
    plot_tradeoff,
    read_tradeoff_csv,
    tradeoff_report,
    train_attribute_classifier,
    write_tradeoff_csv,
)
from .pipeline import EVAL_SEED_OFFSET, Prepared, calibration_pairs, evaluate_generator, pretrain
from .synth import synth_fixture
from .training import generator_from_checkpoint, train, write_history
from .verificator import from_checkpoint as verificator_from_checkpoint
from .verificator import to_checkpoint as verificator_to_checkpoint

log = logging.getLogger("ppdeid")

DETECTION_PADDING = 50


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_manifest(out_dir: Path, args, cfg: TrainConfig | None, inputs, outputs, precedence=None) -> Path:
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = sorted(Path(p) for p in outputs)
    manifest = {
        "command": args.command,
        "argv": getattr(args, "argv", []),
        "config_path": getattr(args, "config", None),
        "config_hash": cfg.hash() if cfg else None,
        "config": cfg.to_dict() if cfg else None,
        "config_precedence": precedence or {},
        "seed": getattr(args, "seed", None),
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "checksums": {str(p): _sha256(p) for p in outputs if p.is_file()},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    path = out_dir / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def resolve_config(args, **extra) -> tuple[TrainConfig, dict]:
    """CLI flag > config file > default; returns the config and where each non-default came from."""
    overrides = {"seed": getattr(args, "seed", None), "ablation": getattr(args, "ablation", None), **extra}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    from_file = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    cfg = from_file.with_overrides(**overrides)
    default = TrainConfig().to_dict()
    file_vals = from_file.to_dict()
    precedence = {}
    for k, v in cfg.to_dict().items():
        if k in overrides:
            precedence[k] = "flag"
        elif file_vals[k] != default[k]:
            precedence[k] = "file"
    return cfg, precedence


def group_records(manifest_path, group: str | None):
    manifest = load_manifest(manifest_path)
    if manifest.failures:
        log.warning("%d manifest rows skipped (missing files)", len(manifest.failures))
    records = list(manifest)
    if group:
        key = GroupKey.parse(group)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            records = partition_groups(records)[key]
        # only the requested group matters here
        for w in caught:
            if str(w.message).startswith(f"group {key.name} "):
                warnings.warn_explicit(w.message, w.category, w.filename, w.lineno)
    if not records:
        raise EmptyInput(f"no records for group {group!r}")
    return records


def split_records(records, cfg: TrainConfig):
    train_recs, test_recs = split_train_test(records, cfg.split_fraction, cfg.seed, by=cfg.split_by)
    return train_recs, test_recs


def load_faces(records):
    return [load_record(r) for r in records]


def image_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise MissingFile(f"input directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".pgm"))
    if not files:
        raise EmptyInput(f"no images in {d}")
    return files


def load_verificator(path):
    return verificator_from_checkpoint(ckpt_io.load(path))


# ---------------------------------------------------------------- subcommands


def cmd_synth_fixture(args) -> list[Path]:
    out = Path(args.out)
    records = synth_fixture(out, args.subjects, args.per_subject, args.seed, args.demographics)
    log.info("wrote %d images", len(records))
    return [out / "manifest.csv", *(Path(r.image_path) for r in records)]


def cmd_pretrain_verificator(args, cfg: TrainConfig) -> list[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_recs, test_recs = split_records(group_records(args.manifest, args.group), cfg)
    train_faces, test_faces = load_faces(train_recs), load_faces(test_recs)
    pairs = calibration_pairs(test_faces, cfg, cfg.seed)
    written = []
    for name, seed in (("verificator", cfg.seed), ("eval_verificator", cfg.seed + EVAL_SEED_OFFSET)):
        v = pretrain(train_faces, cfg, seed, cfg.pretrain_pairs, cfg.pretrain_epochs)
        cal = calibrate_threshold(v, pairs)
        ck_path = ckpt_io.save(verificator_to_checkpoint(v, cfg.to_dict()), out / f"{name}.ppgn")
        cal_path = out / f"{name}_calibration.json"
        cal_path.write_text(
            json.dumps(
                {
                    "threshold": cal.threshold,
                    "accuracy": cal.accuracy,
                    "fold_accuracies": cal.fold_accuracies,
                    "fold_thresholds": cal.fold_thresholds,
                    "pair_count": cal.pair_count,
                    "protocol": cal.protocol,
                },
                indent=2,
            )
            + "\n"
        )
        log.info("%s: calibrated accuracy %.3f at threshold %.4f", name, cal.accuracy, cal.threshold)
        written += [ck_path, cal_path]
    return written


def cmd_train(args, cfg: TrainConfig) -> list[Path]:
    out = Path(args.out)
    train_recs, _ = split_records(group_records(args.manifest, args.group), cfg)
    verif = load_verificator(args.checkpoint) if args.checkpoint else None
    if verif is None and cfg.effective_lambdas[0]:
        verif = pretrain(load_faces(train_recs), cfg, cfg.seed, cfg.pretrain_pairs, cfg.pretrain_epochs)
    _, history = train(load_faces(train_recs), cfg, verificator=verif, checkpoint_dir=out)
    write_history(history, out / "history.csv")
    return sorted(out.glob("*.ppgn")) + [out / "history.csv"]


def cmd_deidentify(args) -> list[Path]:
    gen = generator_from_checkpoint(ckpt_io.load(args.checkpoint))
    files = image_files(args.inp)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    faces = [load_image(p) for p in files]
    written = []
    for path, face in zip(files, deidentify(gen, faces)):
        target = out / (path.stem + ".png")
        save_image(face, target)
        written.append(target)
    return written


def _attribute_labels(records):
    bands = ("youth", "middle", "senior")
    races = ("black", "white")
    return {
        "age_band": (np.array([bands.index(age_band(r.age)) for r in records]), len(bands)),
        "race": (np.array([races.index(r.race) if r.race in races else -1 for r in records]), len(races)),
    }


def cmd_evaluate(args) -> list[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ck = ckpt_io.load(args.checkpoint)
    gen = generator_from_checkpoint(ck)
    # the split and pair draws follow the run that produced the checkpoint
    run_cfg = TrainConfig.from_dict(ck.config)
    seed = args.seed if args.seed is not None else run_cfg.seed
    train_recs, test_recs = split_records(group_records(args.manifest, args.group), run_cfg)
    train_faces, test_faces = load_faces(train_recs), load_faces(test_recs)
    if args.verificator:
        v_eval = load_verificator(args.verificator)
    else:
        v_eval = pretrain(train_faces, run_cfg, seed + EVAL_SEED_OFFSET, run_cfg.pretrain_pairs, run_cfg.pretrain_epochs)
    pairs = calibration_pairs(test_faces, run_cfg, run_cfg.seed)
    cal = calibrate_threshold(v_eval, pairs)
    prep = Prepared(run_cfg.seed, train_faces, test_faces, v_eval, v_eval, cal, cal, pairs)
    res = evaluate_generator(prep, gen, run_cfg.ablation, ck)

    adapter = adapter_from_env(lambda: train_learned_detector(train_faces, seed=seed))
    det = {
        (src, pad): detection_rate(adapter, imgs, pad)
        for src, imgs in (("original", test_faces), ("deid", res.generated))
        for pad in (0, DETECTION_PADDING)
    }
    attrs = {}
    train_labels, test_labels = _attribute_labels(train_recs), _attribute_labels(test_recs)
    for name, (y_train, k) in train_labels.items():
        y_test = test_labels[name][0]
        if len(set(y_train.tolist())) < 2 or (y_train < 0).any() or (y_test < 0).any():
            continue
        clf = train_attribute_classifier(train_faces, y_train, k, seed=seed)
        attrs[name] = attribute_accuracy(clf, res.generated, y_test)

    report = EvalReport(
        group=args.group or "all",
        ablation=run_cfg.ablation,
        config_hash=ck.config_hash,
        deid_rate_train=res.deid_rate_train,
        deid_rate_test=res.deid_rate_test,
        original_rate_test=res.original_rate_test,
        ids_count=res.ids,
        detection_rate_original=det["original", 0],
        detection_rate_deid=det["deid", 0],
        detection_rate_original_padded=det["original", DETECTION_PADDING],
        detection_rate_deid_padded=det["deid", DETECTION_PADDING],
        attribute_accuracy=attrs,
        mean_ssim=res.mean_ssim,
        threshold=cal.threshold,
        calibration_accuracy=cal.accuracy,
    )
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    return [out / "report.json", out / "report.csv"]


def cmd_ablate(args, cfg: TrainConfig) -> list[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    manifest = args.manifest
    if manifest is None:
        fixture = out / "fixture"
        demographics = args.group or "mixed"
        records = synth_fixture(fixture, args.subjects, args.per_subject, cfg.seed, demographics)
        manifest = fixture / "manifest.csv"
        written += [manifest, *(Path(r.image_path) for r in records)]
    train_recs, test_recs = split_records(group_records(manifest, args.group), cfg)
    train_faces, test_faces = load_faces(train_recs), load_faces(test_recs)
    if args.checkpoint:
        v_train = load_verificator(args.checkpoint)
    else:
        v_train = pretrain(train_faces, cfg, cfg.seed, cfg.pretrain_pairs, cfg.pretrain_epochs)
    v_eval = pretrain(train_faces, cfg, cfg.seed + EVAL_SEED_OFFSET, cfg.pretrain_pairs, cfg.pretrain_epochs)
    pairs = calibration_pairs(test_faces, cfg, cfg.seed)
    cal = calibrate_threshold(v_eval, pairs)
    prep = Prepared(cfg.seed, train_faces, test_faces, v_train, v_eval, calibrate_threshold(v_train, pairs), cal, pairs)
    rows = []
    for ablation in ABLATIONS:
        run_cfg = replace(cfg, ablation=ablation)
        run_dir = out / ablation
        verif = v_train if run_cfg.effective_lambdas[0] else None
        ck, history = train(train_faces, run_cfg, verificator=verif, checkpoint_dir=run_dir)
        write_history(history, run_dir / "history.csv")
        res = evaluate_generator(prep, generator_from_checkpoint(ck), ablation, ck, history)
        rows.append({"group": args.group or "all", "ablation": ablation, "deid_rate": res.deid_rate_test, "mean_ssim": res.mean_ssim})
        written += sorted(run_dir.glob("*.ppgn")) + [run_dir / "history.csv"]
    write_tradeoff_csv(tradeoff_report(rows), out / "tradeoff.csv")
    return written + [out / "tradeoff.csv"]


def _collect_rows(paths) -> list[dict]:
    rows = []
    for p in map(Path, paths):
        if p.is_dir():
            found = sorted(p.rglob("tradeoff.csv")) + sorted(p.rglob("report.json"))
            rows += _collect_rows(found)
        elif p.suffix == ".csv":
            rows += read_tradeoff_csv(p)
        elif p.suffix == ".json":
            d = json.loads(p.read_text())
            rows.append({"group": d["group"], "ablation": d["ablation"], "deid_rate": d["deid_rate_test"], "mean_ssim": d["mean_ssim"]})
        else:
            raise MissingFile(f"cannot read {p}")
    return rows


def cmd_report(args) -> list[Path]:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = tradeoff_report(_collect_rows(args.inp))
    if not rows:
        raise EmptyInput("no trade-off rows found")
    write_tradeoff_csv(rows, out / "tradeoff.csv")
    plot_tradeoff(rows, out / "tradeoff.png")
    return [out / "tradeoff.csv", out / "tradeoff.png"]


def cmd_montage(args) -> list[Path]:
    files = image_files(args.inp)[: args.limit]
    originals = [load_image(p) for p in files]
    if args.checkpoint:
        generated = deidentify(generator_from_checkpoint(ckpt_io.load(args.checkpoint)), originals)
    elif args.deid:
        generated = [load_image(Path(args.deid) / (p.stem + ".png")) for p in files]
    else:
        raise MissingFile("montage needs --checkpoint or --deid")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return [montage(originals, generated, out)]


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ppdeid", description="Face de-identification toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", help="key = value config file")
        if seed:
            sp.add_argument("--seed", type=int)
        return sp

    s = common(sub.add_parser("synth-fixture", help="write a synthetic-identity dataset"), config=False, seed=False)
    s.add_argument("--out", required=True)
    s.add_argument("--subjects", type=int, default=10)
    s.add_argument("--per-subject", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--demographics", default="mixed", help="'mixed' or a group name such as black_youth")

    s = common(sub.add_parser("pretrain-verificator", help="pretrain training and evaluation verificators"))
    s.add_argument("--manifest", required=True)
    s.add_argument("--group")
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("train", help="train a de-identification generator"))
    s.add_argument("--manifest", required=True)
    s.add_argument("--group")
    s.add_argument("--ablation", choices=ABLATIONS)
    s.add_argument("--checkpoint", help="pretrained verificator checkpoint")
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("deidentify", help="de-identify a directory of images"), config=False, seed=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("evaluate", help="measure a trained generator"), config=False)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--group")
    s.add_argument("--verificator", help="evaluation verificator checkpoint")
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("ablate", help="train and evaluate all four objective settings"))
    s.add_argument("--manifest", help="defaults to a synthetic fixture for --group")
    s.add_argument("--group")
    s.add_argument("--checkpoint", help="pretrained verificator checkpoint")
    s.add_argument("--subjects", type=int, default=10)
    s.add_argument("--per-subject", type=int, default=20)
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("report", help="merge trade-off tables and plot them"), config=False, seed=False)
    s.add_argument("--in", dest="inp", nargs="+", required=True)
    s.add_argument("--out", required=True)

    s = common(sub.add_parser("montage", help="originals above de-identified images"), config=False, seed=False)
    s.add_argument("--in", dest="inp", required=True)
    s.add_argument("--checkpoint")
    s.add_argument("--deid", help="directory of de-identified images with matching names")
    s.add_argument("--limit", type=int, default=8)
    s.add_argument("--out", required=True)
    return p


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, precedence = None, None
        plain = {
            "synth-fixture": cmd_synth_fixture,
            "deidentify": cmd_deidentify,
            "evaluate": cmd_evaluate,
            "report": cmd_report,
            "montage": cmd_montage,
        }
        configured = {"pretrain-verificator": cmd_pretrain_verificator, "train": cmd_train, "ablate": cmd_ablate}
        if args.command in plain:
            outputs = plain[args.command](args)
        else:
            cfg, precedence = resolve_config(args)
            outputs = configured[args.command](args, cfg)
        inputs = []
        for name in ("manifest", "checkpoint", "verificator", "inp", "deid"):
            v = getattr(args, name, None)
            inputs += v if isinstance(v, list) else [v] if v else []
        out_dir = Path(args.out).parent if args.command == "montage" else Path(args.out)
        write_run_manifest(out_dir, args, cfg, inputs, outputs, precedence)
    except (PPDeidError, FileNotFoundError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
