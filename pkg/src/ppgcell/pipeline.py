"""Window-level orchestration: landmarks -> rectified faces -> cells.

The per-window target mesh is the window's mean landmark positions
normalized to fill the rectified raster, which pins each grid square to
the same piece of skin across the window despite head motion.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import cell as cellmod
from . import ppg
from .cell import CellFormatError, CellMeta, PpgCell
from .ingest import (DatasetManifest, FrameWindow, LandmarkError, LandmarkSet,
                     VideoEntry, enumerate_windows, load_frame, load_landmarks)
from .rectify import (GeometryError, PiecewiseAffineWarper, RectifiedFace,
                      TriangleMesh, build_roi, fill_rect, triangulate)

log = logging.getLogger("ppgcell")


@dataclass
class WindowMeshes:
    window: FrameWindow
    mesh_tgt: TriangleMesh
    vertex_indices: tuple[int, ...]  # into the 68-point record


def window_meshes(landmarks: LandmarkSet, window: FrameWindow) -> WindowMeshes:
    """Target mesh for a window: mean landmarks, ROI, fill, triangulate."""
    stack = []
    for f in window.frames():
        rec = landmarks.get(f, window.face_id)
        if rec is None:
            raise LandmarkError(
                f"window [{window.start},{window.stop}) face {window.face_id} "
                f"missing landmarks at frame {f}")
        stack.append(rec.points)
    mean_pts = np.mean(stack, axis=0)
    roi = build_roi(mean_pts)
    tgt_vertices = fill_rect(roi.vertices)
    tgt_roi_boundary = tgt_vertices[:len(roi.boundary)]
    mesh = triangulate(type(roi)(boundary=tgt_roi_boundary,
                                 interior=tgt_vertices[len(roi.boundary):],
                                 boundary_indices=roi.boundary_indices,
                                 interior_indices=roi.interior_indices))
    return WindowMeshes(window=window, mesh_tgt=mesh,
                        vertex_indices=roi.vertex_indices)


def rectify_window(video: VideoEntry, landmarks: LandmarkSet, meshes: WindowMeshes,
                   dump_dir: Path | None = None) -> list[RectifiedFace]:
    warper = PiecewiseAffineWarper(meshes.mesh_tgt)
    idx = list(meshes.vertex_indices)
    faces = []
    for f in meshes.window.frames():
        frame = load_frame(video, f)
        rec = landmarks.get(f, meshes.window.face_id)
        face = warper.warp(frame, rec.points[idx], frame_index=f,
                           face_id=meshes.window.face_id)
        faces.append(face)
        if dump_dir is not None:
            from PIL import Image
            Image.fromarray(face.raster).save(
                dump_dir / (f"%06d_face%d.png" % (f, face.face_id)))
    return faces


def window_cell(faces: list[RectifiedFace], omega: int, psd_enabled: bool,
                meta: CellMeta) -> PpgCell:
    grid = ppg.grid_means(faces)
    raw = ppg.raw_ppg_matrix(grid)
    if psd_enabled:
        spectra = ppg.psd_matrix(raw)
        return cellmod.assemble(raw.values, spectra.values, mode="with_psd", meta=meta)
    return cellmod.assemble(raw.values, None, mode="raw_only", meta=meta)


def cell_filename(video_id: str, face_id: int, window_start: int, omega: int) -> str:
    safe = video_id.replace("/", "_")
    return f"{safe}_{face_id}_{window_start}_{omega}.ppgc"


def is_valid_cell_file(path: Path) -> bool:
    try:
        cellmod.read_cell(path)
        return True
    except (CellFormatError, OSError):
        return False


@dataclass
class VideoExtractSummary:
    video_id: str
    class_label: str
    cells_written: int
    cells_skipped_existing: int
    windows_skipped: list[dict]
    error: str | None = None


def extract_video(video: VideoEntry, omega: int, psd_enabled: bool, out_dir: Path,
                  dump_dir: Path | None = None) -> VideoExtractSummary:
    """Extract every window cell of one video; resumable per cell file."""
    summary = VideoExtractSummary(video.id, video.class_label, 0, 0, [])
    try:
        landmarks = load_landmarks(video.landmarks_path)
        frame_count = video.count_frames()
        if landmarks.max_frame() >= frame_count:
            raise LandmarkError(
                f"landmark record references frame {landmarks.max_frame()} "
                f"but only {frame_count} frames exist")
        probe = load_frame(video, 0)
        landmarks.check_bounds(probe.shape[1], probe.shape[0])
        windows = enumerate_windows(video, landmarks, omega)
        if not windows:
            summary.windows_skipped.append(
                {"window": None, "reason": "no uninterrupted window of length "
                                           f"{omega} for any face"})
        for window in windows:
            name = cell_filename(video.id, window.face_id, window.start, omega)
            path = out_dir / name
            if path.exists() and is_valid_cell_file(path):
                summary.cells_skipped_existing += 1
                continue
            try:
                meshes = window_meshes(landmarks, window)
                faces = rectify_window(video, landmarks, meshes, dump_dir=dump_dir)
                meta = CellMeta(video_id=video.id, face_id=window.face_id,
                                window_start=window.start,
                                class_label=video.class_label)
                written = window_cell(faces, omega, psd_enabled, meta)
                cellmod.write_cell(written, path)
                summary.cells_written += 1
            except (GeometryError, LandmarkError, OSError) as exc:
                summary.windows_skipped.append(
                    {"window": [window.start, window.stop, window.face_id],
                     "reason": str(exc)})
    except (LandmarkError, GeometryError, OSError, ValueError) as exc:
        summary.error = str(exc)
    return summary


def _extract_job(args) -> VideoExtractSummary:
    video, omega, psd_enabled, out_dir, dump_dir = args
    return extract_video(video, omega, psd_enabled, out_dir, dump_dir)


def extract_dataset(manifest: DatasetManifest, omega: int, psd_enabled: bool,
                    out_dir: str | Path, workers: int = 1,
                    dump_dir: str | Path | None = None) -> dict:
    """Extract cells for every video; returns the run summary dict."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if dump_dir is not None:
        dump_dir = Path(dump_dir)
        dump_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(v, omega, psd_enabled, out_dir, dump_dir) for v in manifest.videos]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(_extract_job, jobs, chunksize=1))
    else:
        summaries = [_extract_job(j) for j in jobs]

    cells_per_class: dict[str, int] = {}
    skipped = []
    failed = []
    for s in summaries:
        if s.error:
            failed.append({"video": s.video_id, "error": s.error})
            log.warning("video %s failed: %s", s.video_id, s.error)
            continue
        n = s.cells_written + s.cells_skipped_existing
        cells_per_class[s.class_label] = cells_per_class.get(s.class_label, 0) + n
        for w in s.windows_skipped:
            skipped.append({"video": s.video_id, **w})
    summary = {
        "omega": omega,
        "psd_enabled": psd_enabled,
        "videos": len(manifest.videos),
        "cells_written": sum(s.cells_written for s in summaries),
        "cells_skipped_existing": sum(s.cells_skipped_existing for s in summaries),
        "cells_per_class": cells_per_class,
        "skipped_windows": skipped,
        "failed_videos": failed,
    }
    (out_dir / "extract_summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True))
    return summary


def load_cells(cells_dir: str | Path, manifest: DatasetManifest | None = None,
               video_ids: set[str] | None = None) -> list[PpgCell]:
    """Read cells from a directory, optionally restricted to given videos.

    When a manifest is passed, class labels are taken from it (overriding
    whatever the cell files carry) and unknown videos are rejected.
    """
    cells_dir = Path(cells_dir)
    labels = {v.id: v.class_label for v in manifest.videos} if manifest else None
    out = []
    for path in sorted(cells_dir.glob("*.ppgc")):
        c = cellmod.read_cell(path)
        if video_ids is not None and c.meta.video_id not in video_ids:
            continue
        if labels is not None:
            if c.meta.video_id not in labels:
                raise ValueError(f"cell {path.name} references unknown video "
                                 f"{c.meta.video_id!r}")
            c.meta.class_label = labels[c.meta.video_id]
        out.append(c)
    return out


def group_by_face(preds) -> dict[tuple[str, int], list]:
    groups: dict[tuple[str, int], list] = {}
    for p in preds:
        groups.setdefault((p.meta.video_id, p.meta.face_id), []).append(p)
    return groups
