"""Per-video verdicts from per-cell predictions: five voting schemes.

Schemes over the cell probabilities rho, per class:
  majority     mode of per-cell argmaxes (scores = vote counts)
  mean-thresh  mean of rho restricted to cells where rho > 0.5 (else 0)
  max          max of rho over cells
  top2         mean of the two largest rho (single one if one cell)
  logodds      mean of logit(clip(rho, eps, 1-eps))   [default]

Mean log-odds uses every cell's confidence for every class, which makes
it robust to a few confident outlier cells.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .classify import CellPrediction
from .ingest import DatasetManifest

SCHEMES = ("majority", "mean-thresh", "max", "top2", "logodds")
DEFAULT_SCHEME = "logodds"
LOGIT_EPS = 1e-6

REAL_CLASS = "real"


@dataclass
class SchemeResult:
    scheme: str
    predicted: str
    scores: np.ndarray  # (K,), argmax = predicted (ties -> lowest index)
    tie: bool


@dataclass
class TimelineEntry:
    window_start: int
    predicted: str
    confidence: float


@dataclass
class VideoVerdict:
    video_id: str
    face_id: int
    classes: list[str]
    scheme_results: dict[str, SchemeResult]
    timeline: list[TimelineEntry]

    @property
    def cell_count(self) -> int:
        return len(self.timeline)

    def predicted(self, scheme: str = DEFAULT_SCHEME) -> str:
        return self.scheme_results[scheme].predicted


def _check_preds(preds: list[CellPrediction]) -> np.ndarray:
    if not preds:
        raise ValueError("cannot aggregate an empty prediction list")
    classes = preds[0].classes
    for p in preds:
        if p.classes != classes:
            raise ValueError("predictions span different class lists")
    return np.stack([p.probs for p in preds])


def _scores(p: np.ndarray, scheme: str) -> np.ndarray:
    n, k = p.shape
    if scheme == "majority":
        return np.bincount(p.argmax(axis=1), minlength=k).astype(np.float64)
    if scheme == "mean-thresh":
        qualifying = p > 0.5
        counts = qualifying.sum(axis=0)
        sums = (p * qualifying).sum(axis=0)
        scores = np.divide(sums, counts, out=np.zeros(k), where=counts > 0)
        if not scores.any():
            # no class clears 0.5 in any cell; fall back to the plain mean
            return p.mean(axis=0)
        return scores
    if scheme == "max":
        return p.max(axis=0)
    if scheme == "top2":
        if n == 1:
            return p[0].astype(np.float64)
        top2 = np.sort(p, axis=0)[-2:]
        return top2.mean(axis=0)
    if scheme == "logodds":
        clipped = np.clip(p, LOGIT_EPS, 1.0 - LOGIT_EPS)
        return np.log(clipped / (1.0 - clipped)).mean(axis=0)
    raise ValueError(f"unknown aggregation scheme {scheme!r}")


def aggregate(preds: list[CellPrediction], scheme: str = DEFAULT_SCHEME) -> SchemeResult:
    """Reduce cell predictions to one scheme's class decision and scores."""
    p = _check_preds(preds)
    scores = _scores(p, scheme)
    best = scores.max()
    winners = np.flatnonzero(scores == best)
    return SchemeResult(scheme=scheme,
                        predicted=preds[0].classes[int(winners[0])],
                        scores=scores,
                        tie=len(winners) > 1)


def build_verdict(preds: list[CellPrediction], video_id: str | None = None,
                  face_id: int | None = None) -> VideoVerdict:
    """Verdict carrying all five schemes plus the per-window timeline."""
    _check_preds(preds)
    ordered = sorted(preds, key=lambda p: p.meta.window_start)
    timeline = [TimelineEntry(p.meta.window_start, p.argmax, p.confidence)
                for p in ordered]
    return VideoVerdict(
        video_id=video_id if video_id is not None else preds[0].meta.video_id,
        face_id=face_id if face_id is not None else preds[0].meta.face_id,
        classes=list(preds[0].classes),
        scheme_results={s: aggregate(preds, s) for s in SCHEMES},
        timeline=timeline,
    )


def verdict_to_dict(v: VideoVerdict) -> dict:
    return {
        "video": v.video_id,
        "face_id": v.face_id,
        "scheme_results": {
            s: {
                "class": r.predicted,
                "scores": {c: float(x) for c, x in zip(v.classes, r.scores)},
                "tie": r.tie,
            }
            for s, r in v.scheme_results.items()
        },
        "timeline": [
            {"window_start": t.window_start, "class": t.predicted,
             "confidence": t.confidence}
            for t in v.timeline
        ],
    }


@dataclass
class EvaluationReport:
    classes: list[str]
    scheme: str
    confusion: np.ndarray        # (K, K) counts, rows = true class
    per_class_accuracy: dict[str, float]
    macro_accuracy: float
    binary_accuracy: float | None  # fake-vs-real, None without a "real" class
    video_count: int
    any_fake_flags: dict[str, bool] = field(default_factory=dict)

    def normalized_confusion(self) -> np.ndarray:
        totals = self.confusion.sum(axis=1, keepdims=True)
        return np.divide(self.confusion, totals,
                         out=np.zeros_like(self.confusion, dtype=np.float64),
                         where=totals > 0)


def evaluate(verdicts: list[VideoVerdict], manifest: DatasetManifest,
             scheme: str = DEFAULT_SCHEME) -> EvaluationReport:
    """Confusion matrix and accuracies of verdicts against manifest labels.

    Each (video, face) verdict counts as one sample. Binary accuracy
    collapses every non-"real" class to "fake" when a "real" class exists.
    """
    classes = manifest.classes
    index = {c: i for i, c in enumerate(classes)}
    labels = {v.id: v.class_label for v in manifest.videos}
    confusion = np.zeros((len(classes), len(classes)), dtype=np.int64)
    binary_hits = 0
    any_fake: dict[str, bool] = {}
    for v in verdicts:
        if v.video_id not in labels:
            raise ValueError(f"verdict for unknown video {v.video_id!r}")
        truth = labels[v.video_id]
        pred = v.predicted(scheme)
        confusion[index[truth], index[pred]] += 1
        any_fake[v.video_id] = any_fake.get(v.video_id, False) or (pred != REAL_CLASS)
        if REAL_CLASS in index:
            binary_hits += int((truth == REAL_CLASS) == (pred == REAL_CLASS))

    per_class: dict[str, float] = {}
    accs = []
    for c in classes:
        row = confusion[index[c]]
        total = row.sum()
        if total > 0:
            acc = row[index[c]] / total
            per_class[c] = float(acc)
            accs.append(acc)
    n = int(confusion.sum())
    return EvaluationReport(
        classes=list(classes),
        scheme=scheme,
        confusion=confusion,
        per_class_accuracy=per_class,
        macro_accuracy=float(np.mean(accs)) if accs else 0.0,
        binary_accuracy=(binary_hits / n) if (REAL_CLASS in index and n) else None,
        video_count=n,
        any_fake_flags=any_fake,
    )


def write_confusion_csv(report: EvaluationReport, path: str | Path) -> None:
    norm = report.normalized_confusion()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + report.classes)
        for i, c in enumerate(report.classes):
            writer.writerow([c] + [f"{x:.6f}" for x in norm[i]])


def write_summary_json(report: EvaluationReport, path: str | Path) -> None:
    doc = {
        "scheme": report.scheme,
        "classes": report.classes,
        "video_count": report.video_count,
        "per_class_accuracy": report.per_class_accuracy,
        "macro_accuracy": report.macro_accuracy,
        "binary_accuracy": report.binary_accuracy,
        "confusion_counts": report.confusion.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True))
