"""Dataset manifests, landmark streams, and detection-window enumeration.

A dataset is a JSON manifest listing videos; each video is a directory of
numbered PNG frames plus a JSON-lines landmark file produced by an external
face detector (68-point layout, one record per detected face per frame).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

FRAME_PATTERN = "%06d.png"
LANDMARK_POINTS = 68

# Records below this detector confidence count as detection interruptions.
CONFIDENCE_FLOOR = 0.5


class ManifestError(ValueError):
    """Raised for unparseable or internally inconsistent manifests."""


class LandmarkError(ValueError):
    """Raised for malformed landmark files."""


@dataclass(frozen=True)
class VideoEntry:
    id: str
    class_label: str
    frames_path: Path
    landmarks_path: Path
    fps: float

    def frame_file(self, index: int) -> Path:
        return self.frames_path / (FRAME_PATTERN % index)

    def count_frames(self) -> int:
        return sum(1 for _ in self.frames_path.glob("*.png"))


@dataclass(frozen=True)
class DatasetManifest:
    videos: list[VideoEntry]
    classes: list[str]
    split_seed: int

    def by_class(self) -> dict[str, list[VideoEntry]]:
        groups: dict[str, list[VideoEntry]] = {c: [] for c in self.classes}
        for v in self.videos:
            groups[v.class_label].append(v)
        return groups

    def entry(self, video_id: str) -> VideoEntry:
        for v in self.videos:
            if v.id == video_id:
                return v
        raise KeyError(video_id)


@dataclass(frozen=True)
class LandmarkRecord:
    frame: int
    face_id: int
    confidence: float
    points: np.ndarray  # (68, 2) float64, pixel coordinates


@dataclass
class LandmarkSet:
    records: list[LandmarkRecord]
    _index: dict[tuple[int, int], LandmarkRecord] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._index = {(r.face_id, r.frame): r for r in self.records}

    def face_ids(self) -> list[int]:
        return sorted({r.face_id for r in self.records})

    def get(self, frame: int, face_id: int) -> LandmarkRecord | None:
        return self._index.get((face_id, frame))

    def frames_for(self, face_id: int) -> list[int]:
        return sorted(r.frame for r in self.records if r.face_id == face_id)

    def max_frame(self) -> int:
        return max((r.frame for r in self.records), default=-1)

    def check_bounds(self, width: int, height: int) -> None:
        """Reject records whose points leave the frame by more than 10%."""
        pad_x, pad_y = 0.1 * width, 0.1 * height
        for r in self.records:
            x, y = r.points[:, 0], r.points[:, 1]
            if (x.min() < -pad_x or x.max() > width + pad_x
                    or y.min() < -pad_y or y.max() > height + pad_y):
                raise LandmarkError(
                    f"landmarks for frame {r.frame} face {r.face_id} fall outside "
                    f"the {width}x{height} frame (10% pad)")


@dataclass(frozen=True)
class FrameWindow:
    start: int
    length: int
    face_id: int

    @property
    def stop(self) -> int:
        return self.start + self.length

    def frames(self) -> range:
        return range(self.start, self.stop)


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load and validate a dataset manifest.

    Relative frame/landmark paths are resolved against the manifest's
    directory. Every referenced path must exist.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read manifest: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}") from exc

    for key in ("classes", "videos", "split_seed"):
        if key not in raw:
            raise ManifestError(f"manifest missing required key {key!r}")
    classes = list(raw["classes"])
    if len(set(classes)) != len(classes):
        raise ManifestError("duplicate class names in manifest")

    base = path.parent
    videos: list[VideoEntry] = []
    seen_ids: set[str] = set()
    for entry in raw["videos"]:
        vid = str(entry["id"])
        if vid in seen_ids:
            raise ManifestError(f"duplicate video id {vid!r}")
        seen_ids.add(vid)
        label = entry["class_label"]
        if label not in classes:
            raise ManifestError(f"video {vid!r} has unknown class {label!r}")
        frames = (base / entry["frames_path"]).resolve()
        landmarks = (base / entry["landmarks_path"]).resolve()
        if not frames.is_dir():
            raise ManifestError(f"frames path does not exist: {frames}")
        if not landmarks.is_file():
            raise ManifestError(f"landmarks path does not exist: {landmarks}")
        fps = float(entry["fps"])
        if fps <= 0:
            raise ManifestError(f"video {vid!r} has non-positive fps")
        videos.append(VideoEntry(vid, label, frames, landmarks, fps))

    return DatasetManifest(videos=videos, classes=classes, split_seed=int(raw["split_seed"]))


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: Path) -> str:
        try:
            return str(p.resolve().relative_to(base))
        except ValueError:
            return str(p.resolve())

    doc = {
        "classes": manifest.classes,
        "split_seed": manifest.split_seed,
        "videos": [
            {
                "id": v.id,
                "class_label": v.class_label,
                "frames_path": rel(v.frames_path),
                "landmarks_path": rel(v.landmarks_path),
                "fps": v.fps,
            }
            for v in manifest.videos
        ],
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def load_landmarks(path: str | Path) -> LandmarkSet:
    """Parse a JSON-lines landmark file (one record per face per frame)."""
    records: list[LandmarkRecord] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LandmarkError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
            pts = np.asarray(rec["points"], dtype=np.float64)
            if pts.shape != (LANDMARK_POINTS, 2):
                raise LandmarkError(
                    f"{path}:{lineno}: expected {LANDMARK_POINTS} points, got shape {pts.shape}")
            conf = float(rec.get("confidence", 1.0))
            if not 0.0 <= conf <= 1.0:
                raise LandmarkError(f"{path}:{lineno}: confidence {conf} outside [0,1]")
            frame = int(rec["frame"])
            if frame < 0:
                raise LandmarkError(f"{path}:{lineno}: negative frame index")
            records.append(LandmarkRecord(frame, int(rec.get("face_id", 0)), conf, pts))
    return LandmarkSet(records)


def save_landmarks(records: list[LandmarkRecord], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps({
                "frame": r.frame,
                "face_id": r.face_id,
                "confidence": r.confidence,
                "points": [[float(x), float(y)] for x, y in r.points],
            }) + "\n")


def load_frame(video: VideoEntry, index: int) -> np.ndarray:
    """Load one frame as an (H, W, 3) uint8 RGB array."""
    path = video.frame_file(index)
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"cannot read frame {path}")
    return bgr[:, :, ::-1]


def split_train_test(
    manifest: DatasetManifest, train_fraction: float
) -> tuple[DatasetManifest, DatasetManifest]:
    """Stratified per-class split, deterministic given the manifest's seed.

    The per-class shuffle is seeded by (split_seed, class name), so the
    split does not depend on the order videos appear in the manifest.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    train: list[VideoEntry] = []
    test: list[VideoEntry] = []
    for cls, vids in manifest.by_class().items():
        if len(vids) < 2:
            raise ManifestError(f"class {cls!r} has fewer than 2 videos; cannot split")
        vids = sorted(vids, key=lambda v: v.id)
        rng = np.random.default_rng([manifest.split_seed, zlib.crc32(cls.encode())])
        order = rng.permutation(len(vids))
        n_train = int(round(train_fraction * len(vids)))
        n_train = min(max(n_train, 1), len(vids) - 1)
        for pos, idx in enumerate(order):
            (train if pos < n_train else test).append(vids[idx])
    key = {v.id: i for i, v in enumerate(manifest.videos)}
    train.sort(key=lambda v: key[v.id])
    test.sort(key=lambda v: key[v.id])
    common = dict(classes=manifest.classes, split_seed=manifest.split_seed)
    return (DatasetManifest(videos=train, **common),
            DatasetManifest(videos=test, **common))


def enumerate_windows(video: VideoEntry, landmarks: LandmarkSet, omega: int) -> list[FrameWindow]:
    """Enumerate non-overlapping omega-frame windows per face.

    A window is emitted only where the face is detected (confidence >=
    CONFIDENCE_FLOOR) in every one of its omega consecutive frames; after
    an interruption, windowing restarts at the next detected frame.
    """
    if omega < 16:
        raise ValueError("window length must be at least 16 frames")
    windows: list[FrameWindow] = []
    for face_id in landmarks.face_ids():
        valid = sorted(
            r.frame for r in landmarks.records
            if r.face_id == face_id and r.confidence >= CONFIDENCE_FLOOR
        )
        run_start: int | None = None
        prev = None
        runs: list[tuple[int, int]] = []  # [start, stop) of consecutive detections
        for f in valid:
            if run_start is None:
                run_start = f
            elif f != prev + 1:
                runs.append((run_start, prev + 1))
                run_start = f
            prev = f
        if run_start is not None:
            runs.append((run_start, prev + 1))
        for start, stop in runs:
            s = start
            while s + omega <= stop:
                windows.append(FrameWindow(start=s, length=omega, face_id=face_id))
                s += omega
    windows.sort(key=lambda w: (w.face_id, w.start))
    return windows
