"""Residual fingerprints: temporal NLM denoising and accumulation.

Per video, a short stack of aligned (rectified) faces around the center
of the first valid window is denoised; the original-minus-denoised
residual is accumulated per class. Subtracting the real-class baseline
cancels content artifacts shared by all classes and leaves the
generator-specific pattern.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np
from PIL import Image

from . import cell as cellmod
from .cell import CellFormatError, FINGERPRINT_MAGIC
from .ingest import LandmarkSet, VideoEntry, enumerate_windows, load_landmarks
from .pipeline import rectify_window, window_meshes
from .rectify import RECT_H, RECT_W

DEFAULT_STACK = 5
DEFAULT_H = 3.0
DEFAULT_PATCH = 7
DEFAULT_SEARCH = 21


def temporal_nlm_denoise(frames: Sequence[np.ndarray], h: float = DEFAULT_H,
                         patch: int = DEFAULT_PATCH,
                         search: int = DEFAULT_SEARCH) -> np.ndarray:
    """Denoise the center frame of an odd-length aligned stack.

    Non-local means with the search window extended across the temporal
    stack (OpenCV's multi-frame variant); h is the filtering strength on
    the 0-255 scale.
    """
    n = len(frames)
    if n < 3:
        raise ValueError("temporal stack needs at least 3 frames")
    if n % 2 == 0:
        raise ValueError("temporal stack size must be odd")
    shape = frames[0].shape
    for f in frames:
        if f.shape != shape or f.dtype != np.uint8:
            raise ValueError("all stack frames must be identical uint8 arrays")
    stack = [np.ascontiguousarray(f) for f in frames]
    return cv2.fastNlMeansDenoisingMulti(stack, n // 2, n, None, h, patch, search)


@dataclass
class ResidualAccumulator:
    class_label: str
    total: np.ndarray = field(
        default_factory=lambda: np.zeros((RECT_H, RECT_W, 3), dtype=np.float64))
    count: int = 0

    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("empty accumulator")
        return self.total / self.count


def accumulate_residual(acc: ResidualAccumulator, original: np.ndarray,
                        denoised: np.ndarray) -> ResidualAccumulator:
    if original.shape != acc.total.shape or denoised.shape != acc.total.shape:
        raise ValueError("residual shape does not match accumulator")
    acc.total += original.astype(np.float64) - denoised.astype(np.float64)
    acc.count += 1
    return acc


def merge(a: ResidualAccumulator, b: ResidualAccumulator) -> ResidualAccumulator:
    if a.class_label != b.class_label:
        raise ValueError("cannot merge accumulators of different classes")
    return ResidualAccumulator(a.class_label, a.total + b.total, a.count + b.count)


@dataclass
class Fingerprint:
    values: np.ndarray  # (RECT_H, RECT_W, 3) float32 in [-1, 1]
    class_label: str
    provenance: dict = field(default_factory=dict)


def finalize_fingerprint(acc_class: ResidualAccumulator,
                         acc_real: ResidualAccumulator | None) -> Fingerprint:
    """Mean residual, minus the real baseline, scaled to [-1, 1].

    Pass acc_real=None for the real class itself: its fingerprint is the
    plain normalized noise accumulation with nothing subtracted.
    """
    if acc_class.count < 1:
        raise ValueError("class accumulator is empty")
    residual = acc_class.mean()
    if acc_real is not None:
        if acc_real.count < 1:
            raise ValueError("real-baseline accumulator is empty")
        residual = residual - acc_real.mean()
    peak = np.abs(residual).max()
    if peak > 0:
        residual = residual / peak
    values = np.clip(residual, -1.0, 1.0).astype(np.float32)
    return Fingerprint(values=values, class_label=acc_class.class_label,
                       provenance={"videos": acc_class.count,
                                   "baseline_videos": acc_real.count if acc_real else 0})


def residual_for_video(video: VideoEntry, omega: int = 64,
                       stack_size: int = DEFAULT_STACK, h: float = DEFAULT_H,
                       patch: int = DEFAULT_PATCH, search: int = DEFAULT_SEARCH,
                       landmarks: LandmarkSet | None = None,
                       ) -> tuple[np.ndarray, np.ndarray] | None:
    """(original, denoised) rectified center frame of the first valid window.

    Returns None when the video has no uninterrupted window. Only the
    stack frames around the window center are rectified.
    """
    if landmarks is None:
        landmarks = load_landmarks(video.landmarks_path)
    windows = enumerate_windows(video, landmarks, omega)
    if not windows:
        return None
    window = windows[0]
    meshes = window_meshes(landmarks, window)
    center = window.start + window.length // 2
    k = stack_size // 2
    sub = type(window)(start=center - k, length=stack_size, face_id=window.face_id)
    if sub.start < window.start or sub.stop > window.stop:
        raise ValueError(f"stack of {stack_size} does not fit window length {window.length}")
    faces = rectify_window(video, landmarks, type(meshes)(
        window=sub, mesh_tgt=meshes.mesh_tgt, vertex_indices=meshes.vertex_indices))
    rasters = [f.raster for f in faces]
    denoised = temporal_nlm_denoise(rasters, h=h, patch=patch, search=search)
    return rasters[stack_size // 2], denoised


def write_fingerprint(fp: Fingerprint, path: str | Path) -> None:
    meta = {"class_label": fp.class_label, "provenance": fp.provenance}
    Path(path).write_bytes(cellmod._pack_block(FINGERPRINT_MAGIC, 0, fp.values, meta))


def read_fingerprint(path: str | Path) -> Fingerprint:
    data = Path(path).read_bytes()
    _, values, meta = cellmod._unpack_block(data, FINGERPRINT_MAGIC, str(path))
    if values.ndim != 3:
        raise CellFormatError(f"{path}: fingerprint payload must be HxWx3")
    return Fingerprint(values=values, class_label=meta.get("class_label", ""),
                       provenance=meta.get("provenance", {}))


def write_fingerprint_png(fp: Fingerprint, path: str | Path) -> None:
    """Signed residual rendered as value*127.5 + 127.5."""
    img = np.clip(np.rint(fp.values.astype(np.float64) * 127.5 + 127.5),
                  0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)
