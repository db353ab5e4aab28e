"""Command-line pipeline driver.

Commands: extract, train, predict, evaluate, aggregate, fingerprint,
synth. Exit codes: 0 ok, 2 config error, 3 data error, 4 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field, asdict, fields as dc_fields
from pathlib import Path

import numpy as np

from . import aggregate as agg
from . import classify, fingerprint, pipeline, synth
from .cell import CellFormatError
from .classify import ModelError, TrainConfig
from .ingest import (DatasetManifest, LandmarkError, ManifestError,
                     load_landmarks, load_manifest, split_train_test)
from .rectify import GeometryError

log = logging.getLogger("ppgcell")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_INTERNAL = 4

OMEGA_MIN, OMEGA_MAX = 16, 4096


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    omega: int = 64
    psd_enabled: bool = True
    scheme: str = agg.DEFAULT_SCHEME
    workers: int = 1
    seed: int = 0
    train_fraction: float = 0.7
    classifier: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if not OMEGA_MIN <= self.omega <= OMEGA_MAX:
            raise ConfigError(f"omega must lie in [{OMEGA_MIN}, {OMEGA_MAX}]")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.scheme not in agg.SCHEMES:
            raise ConfigError(f"unknown scheme {self.scheme!r}; choose from {agg.SCHEMES}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError("train_fraction must lie in (0, 1)")


def load_config(args: argparse.Namespace) -> PipelineConfig:
    """Config file (JSON) first, then flag overrides."""
    doc: dict = {}
    if getattr(args, "config", None):
        try:
            doc = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load config {args.config}: {exc}") from exc
    known = {f.name for f in dc_fields(PipelineConfig)} - {"classifier"}
    unknown = set(doc) - known - {"classifier"}
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cls_doc = doc.pop("classifier", {})
    bad = set(cls_doc) - {f.name for f in dc_fields(TrainConfig)}
    if bad:
        raise ConfigError(f"unknown classifier config keys: {sorted(bad)}")
    if getattr(args, "omega", None) is not None:
        doc["omega"] = args.omega
    if getattr(args, "no_psd", False):
        doc["psd_enabled"] = False
    if getattr(args, "scheme", None) is not None:
        doc["scheme"] = args.scheme
    if getattr(args, "workers", None) is not None:
        doc["workers"] = args.workers
    if getattr(args, "seed", None) is not None:
        doc["seed"] = args.seed
    try:
        cfg = PipelineConfig(classifier=TrainConfig(**cls_doc), **doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    if "seed" in doc:
        cfg.classifier.seed = doc["seed"]
    return cfg


def _write_history_csv(history: list[dict], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        writer.writeheader()
        writer.writerows(history)


def cmd_extract(args) -> int:
    cfg = load_config(args)
    manifest = load_manifest(args.manifest)
    summary = pipeline.extract_dataset(
        manifest, cfg.omega, cfg.psd_enabled, args.out,
        workers=cfg.workers, dump_dir=args.dump_rectified)
    print(json.dumps({k: summary[k] for k in
                      ("cells_written", "cells_skipped_existing", "cells_per_class")},
                     sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args)
    manifest = load_manifest(args.manifest)
    train_manifest, _ = split_train_test(manifest, cfg.train_fraction)
    ids = {v.id for v in train_manifest.videos}
    cells = pipeline.load_cells(args.cells, manifest=manifest, video_ids=ids)
    if not cells:
        raise ManifestError(f"no cells for the training split under {args.cells}")
    model, history = classify.train(cells, cfg.classifier, classes=manifest.classes)
    out = Path(args.out)
    classify.save_model(model, out)
    _write_history_csv(history, out.with_suffix(".log.csv"))
    last = history[-1]
    print(json.dumps({"model": str(out), "epochs": len(history),
                      "train_loss": last["train_loss"],
                      "train_acc": last["train_acc"],
                      "cells": len(cells)}, sort_keys=True))
    return EXIT_OK


def _verdicts_for_cells(model, cells, scheme):
    preds = classify.predict_batch(model, cells)
    groups = pipeline.group_by_face(preds)
    return [agg.build_verdict(groups[key]) for key in sorted(groups)]


def cmd_predict(args) -> int:
    cfg = load_config(args)
    model = classify.load_model(args.model)
    if args.cells:
        cells = pipeline.load_cells(args.cells)
    else:
        if not (args.frames and args.landmarks):
            raise ConfigError("predict needs --cells or --frames plus --landmarks")
        from .ingest import VideoEntry
        video = VideoEntry(id=args.video_id, class_label="",
                           frames_path=Path(args.frames),
                           landmarks_path=Path(args.landmarks), fps=args.fps)
        import tempfile
        with tempfile.TemporaryDirectory() as td:
            summary = pipeline.extract_dataset(
                DatasetManifest(videos=[video], classes=[""], split_seed=0),
                cfg.omega, cfg.psd_enabled, td, workers=1)
            if summary["failed_videos"]:
                raise LandmarkError(summary["failed_videos"][0]["error"])
            cells = pipeline.load_cells(td)
    if not cells:
        raise ManifestError("no cells to predict on")
    verdicts = _verdicts_for_cells(model, cells, cfg.scheme)
    doc = [agg.verdict_to_dict(v) for v in verdicts]
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    if args.dump_predictions:
        preds = classify.predict_batch(model, cells)
        with open(args.dump_predictions, "w") as fh:
            for p in preds:
                fh.write(json.dumps({
                    "video": p.meta.video_id, "face_id": p.meta.face_id,
                    "window_start": p.meta.window_start,
                    "classes": p.classes,
                    "rho": [float(x) for x in p.probs]}, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    manifest = load_manifest(args.manifest)
    model = classify.load_model(args.model, expected_classes=manifest.classes)
    part = args.split
    if part == "all":
        subset = manifest
    else:
        train_m, test_m = split_train_test(manifest, cfg.train_fraction)
        subset = train_m if part == "train" else test_m
    ids = {v.id for v in subset.videos}
    cells = pipeline.load_cells(args.cells, manifest=manifest, video_ids=ids)
    if not cells:
        raise ManifestError(f"no cells for split {part!r} under {args.cells}")
    verdicts = _verdicts_for_cells(model, cells, cfg.scheme)
    report = agg.evaluate(verdicts, manifest, scheme=cfg.scheme)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    agg.write_confusion_csv(report, out / "confusion.csv")
    agg.write_summary_json(report, out / "summary.json")
    (out / "verdicts.json").write_text(
        json.dumps([agg.verdict_to_dict(v) for v in verdicts], indent=2, sort_keys=True))
    print(json.dumps({"macro_accuracy": report.macro_accuracy,
                      "binary_accuracy": report.binary_accuracy,
                      "videos": report.video_count,
                      "scheme": report.scheme}, sort_keys=True))
    return EXIT_OK


def cmd_aggregate(args) -> int:
    cfg = load_config(args)
    preds = []
    with open(args.predictions) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            from .cell import CellMeta
            preds.append(classify.CellPrediction(
                classes=rec["classes"], probs=np.asarray(rec["rho"], dtype=np.float64),
                meta=CellMeta(video_id=rec["video"], face_id=rec["face_id"],
                              window_start=rec["window_start"])))
    if not preds:
        raise ManifestError("prediction file is empty")
    groups = pipeline.group_by_face(preds)
    verdicts = [agg.build_verdict(groups[k]) for k in sorted(groups)]
    text = json.dumps([agg.verdict_to_dict(v) for v in verdicts], indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    return EXIT_OK


def cmd_fingerprint(args) -> int:
    cfg = load_config(args)
    manifest = load_manifest(args.manifest)
    wanted = args.classes.split(",") if args.classes else [
        c for c in manifest.classes if c != agg.REAL_CLASS]
    for c in wanted:
        if c not in manifest.classes:
            raise ManifestError(f"unknown class {c!r}")
    if agg.REAL_CLASS not in manifest.classes:
        raise ManifestError(
            f"fingerprinting needs a {agg.REAL_CLASS!r} class for the baseline")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    by_class = manifest.by_class()
    accumulators: dict[str, fingerprint.ResidualAccumulator] = {}
    for cls in set(wanted) | {agg.REAL_CLASS}:
        acc = fingerprint.ResidualAccumulator(cls)
        for video in by_class[cls]:
            pair = fingerprint.residual_for_video(
                video, omega=cfg.omega, stack_size=args.stack, h=args.strength)
            if pair is None:
                log.warning("video %s has no valid window; skipped", video.id)
                continue
            fingerprint.accumulate_residual(acc, pair[0], pair[1])
        accumulators[cls] = acc

    real_acc = accumulators[agg.REAL_CLASS]
    results = {}
    targets = list(wanted) + ([agg.REAL_CLASS] if agg.REAL_CLASS not in wanted else [])
    for cls in targets:
        baseline = None if cls == agg.REAL_CLASS else real_acc
        fp = fingerprint.finalize_fingerprint(accumulators[cls], baseline)
        fingerprint.write_fingerprint(fp, out / f"{cls}.ppgf")
        fingerprint.write_fingerprint_png(fp, out / f"{cls}.png")
        results[cls] = accumulators[cls].count
    print(json.dumps({"fingerprints": results, "out": str(out)}, sort_keys=True))
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = load_config(args)
    kwargs: dict = {}
    if args.synth_config:
        try:
            doc = json.loads(Path(args.synth_config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot load synth config: {exc}") from exc
        sigs = {name: synth.ClassSignature(**sig)
                for name, sig in doc.pop("signatures", {}).items()}
        kwargs = dict(doc, signatures=sigs)
    kwargs.setdefault("seed", cfg.seed)
    if args.frames is not None:
        kwargs["duration_frames"] = args.frames
    if args.fps is not None:
        kwargs["fps"] = args.fps
    try:
        sc = synth.SynthConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad synth config: {exc}") from exc
    classes = args.classes.split(",")
    manifest_path = synth.generate_dataset(
        sc, classes, args.videos_per_class, args.out, workers=cfg.workers)
    print(json.dumps({"manifest": str(manifest_path),
                      "videos": len(classes) * args.videos_per_class}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ppgcell",
        description="Biological-signal cells for video source attribution")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON pipeline config file")
        p.add_argument("--omega", type=int, help="window length in frames")
        p.add_argument("--no-psd", action="store_true",
                       help="build 32-row cells without the PSD half")
        p.add_argument("--scheme", choices=agg.SCHEMES)
        p.add_argument("--workers", type=int)
        p.add_argument("--seed", type=int)

    p = sub.add_parser("extract", help="extract PPG cells from a dataset")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="cell output directory")
    p.add_argument("--dump-rectified", help="also dump rectified face PNGs here")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="train the built-in classifier on cells")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cells", required=True)
    p.add_argument("--out", required=True, help="model output path (.ppgm)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict verdicts for cells or one video")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--cells")
    p.add_argument("--frames", help="frame directory of a single video")
    p.add_argument("--landmarks", help="landmark JSONL of a single video")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--video-id", default="video")
    p.add_argument("--out")
    p.add_argument("--dump-predictions", help="write per-cell predictions JSONL here")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="evaluate a model against a manifest")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--cells", required=True)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("aggregate", help="re-aggregate dumped cell predictions")
    common(p)
    p.add_argument("--predictions", required=True, help="JSONL from predict --dump-predictions")
    p.add_argument("--out")
    p.set_defaults(func=cmd_aggregate)

    p = sub.add_parser("fingerprint", help="accumulate residual fingerprints per class")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", help="comma-separated; default: all non-real classes")
    p.add_argument("--stack", type=int, default=fingerprint.DEFAULT_STACK)
    p.add_argument("--strength", type=float, default=fingerprint.DEFAULT_H,
                   help="NLM filtering strength h")
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", required=True, help="comma-separated class names")
    p.add_argument("--videos-per-class", type=int, required=True)
    p.add_argument("--frames", type=int, help="frames per video")
    p.add_argument("--fps", type=float)
    p.add_argument("--synth-config", help="JSON SynthConfig (signatures etc.)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError,) as exc:
        print(json.dumps({"error": {"type": "config", "message": str(exc)}}),
              file=sys.stderr)
        return EXIT_CONFIG
    except (ManifestError, LandmarkError, GeometryError, CellFormatError,
            ModelError, FileNotFoundError) as exc:
        print(json.dumps({"error": {"type": "data", "message": str(exc)}}),
              file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error")
        print(json.dumps({"error": {"type": "internal", "message": str(exc)}}),
              file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
