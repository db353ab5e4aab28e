"""Synthetic labeled face videos with known pulse and per-class noise.

Every video is a procedurally rendered face with 68 template landmarks,
a chrominance pulse at a known heart rate, optional per-class additive
noise signatures (band-limited plane waves with a temporal envelope,
static in frame space while the face drifts), plus sensor noise and slow
illumination drift. Ground truth (pulse waveform, signature descriptor,
motion path) is emitted per video so downstream stages can be checked
against known answers.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import cv2
import numpy as np

from .ingest import (DatasetManifest, LandmarkRecord, VideoEntry,
                     FRAME_PATTERN, save_landmarks, save_manifest)

REAL_CLASS = "real"

PULSE_BAND_HZ = (0.65, 4.0)

_SKIN = np.array([196.0, 144.0, 120.0])
_BACKGROUND = np.array([40.0, 42.0, 46.0])


def _build_template() -> np.ndarray:
    """Canonical frontal 68-point layout in unit coordinates (y down)."""
    pts = np.zeros((68, 2))
    t = np.linspace(0.0, math.pi, 17)
    pts[0:17, 0] = 0.5 - 0.42 * np.cos(t)          # jaw, subject right -> left
    pts[0:17, 1] = 0.35 + 0.63 * np.sin(t)
    pts[17:22] = [(0.18, 0.31), (0.24, 0.29), (0.30, 0.28), (0.36, 0.29), (0.42, 0.31)]
    pts[22:27] = [(0.58, 0.31), (0.64, 0.29), (0.70, 0.28), (0.76, 0.29), (0.82, 0.31)]
    pts[27:31] = [(0.50, 0.38), (0.50, 0.445), (0.50, 0.51), (0.50, 0.575)]
    pts[31:36] = [(0.42, 0.635), (0.46, 0.650), (0.50, 0.655), (0.54, 0.650), (0.58, 0.635)]
    pts[36:42] = [(0.22, 0.38), (0.27, 0.36), (0.33, 0.36),
                  (0.38, 0.38), (0.33, 0.40), (0.27, 0.40)]
    pts[42:48] = [(0.62, 0.38), (0.67, 0.36), (0.73, 0.36),
                  (0.78, 0.38), (0.73, 0.40), (0.67, 0.40)]
    pts[48:60] = [(0.35, 0.800), (0.41, 0.770), (0.46, 0.755), (0.50, 0.750),
                  (0.54, 0.755), (0.59, 0.770), (0.65, 0.800), (0.59, 0.840),
                  (0.54, 0.860), (0.50, 0.870), (0.46, 0.860), (0.41, 0.840)]
    pts[60:68] = [(0.38, 0.800), (0.46, 0.790), (0.50, 0.785), (0.54, 0.790),
                  (0.62, 0.800), (0.54, 0.815), (0.50, 0.820), (0.46, 0.815)]
    return pts


TEMPLATE_LANDMARKS = _build_template()


@dataclass
class ClassSignature:
    """Additive spatiotemporal noise descriptor for one generator class.

    The pattern is a plane wave at a fixed spatial period, multiplied by a
    temporal envelope oscillating at the class frequency; channel weights
    skew it across RGB the way generator residuals are color-biased
    (which is also what lets it project into the chrominance plane).
    """

    pattern_seed: int
    amplitude: float = 6.0
    spatial_period_px: float = 8.0
    orientation_deg: float | None = None  # derived from pattern_seed when None
    temporal_freq_hz: float | None = None
    channel_weights: tuple[float, float, float] | None = None

    def resolved(self) -> "ClassSignature":
        rng = np.random.default_rng(self.pattern_seed)
        orient = self.orientation_deg
        if orient is None:
            orient = float(rng.uniform(0.0, 180.0))
        tfreq = self.temporal_freq_hz
        if tfreq is None:
            tfreq = float(rng.uniform(1.8, 3.8))
        weights = self.channel_weights
        if weights is None:
            w = rng.uniform(0.2, 1.0, size=3)
            weights = tuple(float(x) for x in w / w.max())
        return ClassSignature(self.pattern_seed, self.amplitude,
                              self.spatial_period_px, orient, tfreq,
                              tuple(float(x) for x in weights))


def signature_pattern(sig: ClassSignature, size: int) -> np.ndarray:
    """Unit-amplitude plane wave of the signature, (size, size) float."""
    sig = sig.resolved()
    theta = math.radians(sig.orientation_deg)
    phase = float(np.random.default_rng(sig.pattern_seed).uniform(0.0, 2 * math.pi))
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    arg = 2 * math.pi * (math.cos(theta) * xs + math.sin(theta) * ys) / sig.spatial_period_px
    return np.cos(arg + phase)


@dataclass
class SynthConfig:
    fps: float = 30.0
    duration_frames: int = 300
    heart_rate_hz: float = 1.2
    pulse_amplitude: float = 0.01
    signatures: dict[str, ClassSignature] = field(default_factory=dict)
    landmark_jitter_px: float = 0.05
    face_motion_px: float = 0.8
    illumination_drift: float = 0.02
    sensor_noise_sigma: float = 1.0
    frame_size: int = 160
    seed: int = 0

    def __post_init__(self):
        if not PULSE_BAND_HZ[0] <= self.heart_rate_hz <= PULSE_BAND_HZ[1]:
            raise ValueError(
                f"heart rate {self.heart_rate_hz} Hz outside the human band {PULSE_BAND_HZ}")
        for name, value in (("pulse_amplitude", self.pulse_amplitude),
                            ("landmark_jitter_px", self.landmark_jitter_px),
                            ("face_motion_px", self.face_motion_px),
                            ("illumination_drift", self.illumination_drift),
                            ("sensor_noise_sigma", self.sensor_noise_sigma)):
            if value < 0:
                raise ValueError(f"{name} must be non-negative")
        for sig in self.signatures.values():
            if sig.amplitude < 0:
                raise ValueError("signature amplitudes must be non-negative")


def _ellipse_mask(size: int, cx: float, cy: float, rx: float, ry: float) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return ((xs - cx * size) / (rx * size)) ** 2 + ((ys - cy * size) / (ry * size)) ** 2 <= 1.0


def _base_face(size: int) -> tuple[np.ndarray, np.ndarray]:
    """Static face raster (float64 HxWx3) and its skin mask."""
    img = np.tile(_BACKGROUND, (size, size, 1))
    face = _ellipse_mask(size, 0.5, 0.46, 0.45, 0.40) | _ellipse_mask(size, 0.5, 0.60, 0.42, 0.38)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    shade = 1.0 - 0.15 * ((ys / size - 0.46) ** 2 + (xs / size - 0.5) ** 2) * 2.0
    img[face] = _SKIN * shade[face][:, None]
    for cx, cy in ((0.30, 0.38), (0.70, 0.38)):
        img[_ellipse_mask(size, cx, cy, 0.075, 0.028)] = (70.0, 60.0, 60.0)
        img[_ellipse_mask(size, cx, cy, 0.028, 0.022)] = (30.0, 25.0, 25.0)
    for cx, cy in ((0.30, 0.295), (0.70, 0.295)):
        img[_ellipse_mask(size, cx, cy, 0.11, 0.016)] = (60.0, 45.0, 40.0)
    img[_ellipse_mask(size, 0.5, 0.81, 0.14, 0.045)] = (140.0, 70.0, 70.0)
    for cx in (0.465, 0.535):
        img[_ellipse_mask(size, cx, 0.645, 0.016, 0.012)] = (90.0, 60.0, 55.0)
    return img, face


@dataclass
class GroundTruth:
    video_id: str
    class_label: str
    fps: float
    pulse_waveform: list[float]
    signature: dict | None
    motion: list[list[float]]  # per-frame (dx, dy)

    def save(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), sort_keys=True))


def generate_video(config: SynthConfig, class_label: str, out_dir: str | Path,
                   video_id: str, video_seed: int = 0) -> GroundTruth:
    """Render one video: frame PNGs, a landmark JSONL, and ground truth."""
    out_dir = Path(out_dir)
    frames_dir = out_dir / "frames"
    frames_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([config.seed, video_seed])
    size = config.frame_size
    n = config.duration_frames

    base, _ = _base_face(size)
    pts_base = TEMPLATE_LANDMARKS * size

    sig = config.signatures.get(class_label)
    pattern = None
    sig_resolved = None
    if sig is not None and class_label != REAL_CLASS:
        sig_resolved = sig.resolved()
        pattern = signature_pattern(sig_resolved, size)

    t = np.arange(n) / config.fps
    pulse_phase = float(rng.uniform(0.0, 2 * math.pi))
    pulse = np.sin(2 * math.pi * config.heart_rate_hz * t + pulse_phase)
    illum = 1.0 + config.illumination_drift * np.sin(
        2 * math.pi * 0.1 * t + float(rng.uniform(0.0, 2 * math.pi)))
    mf = rng.uniform(0.2, 0.8, size=4)
    mp = rng.uniform(0.0, 2 * math.pi, size=4)
    dx = config.face_motion_px * (np.sin(2 * math.pi * mf[0] * t + mp[0])
                                  + 0.5 * np.sin(2 * math.pi * mf[1] * t + mp[1])) / 1.5
    dy = config.face_motion_px * (np.sin(2 * math.pi * mf[2] * t + mp[2])
                                  + 0.5 * np.sin(2 * math.pi * mf[3] * t + mp[3])) / 1.5
    if sig_resolved is not None:
        env_phase = float(rng.uniform(0.0, 2 * math.pi))

    base32 = base.astype(np.float32)
    if pattern is not None:
        weighted_pattern = (pattern[:, :, None]
                            * np.asarray(sig_resolved.channel_weights)
                            ).astype(np.float32)
    records = []
    for i in range(n):
        mults = np.array([
            (1.0 + 0.5 * config.pulse_amplitude * pulse[i]) * illum[i],
            (1.0 + config.pulse_amplitude * pulse[i]) * illum[i],
            illum[i],
        ], dtype=np.float32)
        # content moves by (+dx, +dy); pulse/illumination commute with the shift
        shift = np.float32([[1, 0, dx[i]], [0, 1, dy[i]]])
        frame = cv2.warpAffine(base32, shift, (size, size),
                               flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_REPLICATE) * mults
        if pattern is not None:
            envelope = 1.0 + 0.5 * math.sin(
                2 * math.pi * sig_resolved.temporal_freq_hz * t[i] + env_phase)
            frame += np.float32(sig_resolved.amplitude * envelope) * weighted_pattern
        if config.sensor_noise_sigma > 0:
            frame += rng.standard_normal(frame.shape, dtype=np.float32) \
                * np.float32(config.sensor_noise_sigma)
        arr = np.clip(np.rint(frame), 0, 255).astype(np.uint8)
        cv2.imwrite(str(frames_dir / (FRAME_PATTERN % i)), arr[:, :, ::-1],
                    [cv2.IMWRITE_PNG_COMPRESSION, 1])

        pts = pts_base + np.array([dx[i], dy[i]])
        if config.landmark_jitter_px > 0:
            pts = pts + rng.normal(0.0, config.landmark_jitter_px, pts.shape)
        records.append(LandmarkRecord(frame=i, face_id=0, confidence=1.0, points=pts))

    save_landmarks(records, out_dir / "landmarks.jsonl")
    truth = GroundTruth(
        video_id=video_id,
        class_label=class_label,
        fps=config.fps,
        pulse_waveform=[float(v) for v in pulse],
        signature=asdict(sig_resolved) if sig_resolved is not None else None,
        motion=[[float(a), float(b)] for a, b in zip(dx, dy)],
    )
    truth.save(out_dir / "ground_truth.json")
    return truth


def _gen_one(args) -> None:
    config, class_label, video_dir, video_id, video_seed = args
    generate_video(config, class_label, video_dir, video_id, video_seed)


def generate_dataset(config: SynthConfig, classes: list[str], videos_per_class: int,
                     out_dir: str | Path, workers: int = 1) -> Path:
    """Render a labeled dataset and write its manifest; returns the manifest path.

    Non-"real" classes without an explicit signature get one derived from
    the class name, so any class list is usable out of the box.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    signatures = dict(config.signatures)
    for idx, cls in enumerate(classes):
        if cls != REAL_CLASS and cls not in signatures:
            signatures[cls] = ClassSignature(pattern_seed=config.seed * 1000 + idx)
    config = replace(config, signatures=signatures)

    jobs = []
    entries = []
    for ci, cls in enumerate(classes):
        for vi in range(videos_per_class):
            video_id = f"{cls}_{vi:04d}"
            video_dir = out_dir / video_id
            jobs.append((config, cls, video_dir, video_id, ci * 100003 + vi))
            entries.append(VideoEntry(
                id=video_id, class_label=cls,
                frames_path=video_dir / "frames",
                landmarks_path=video_dir / "landmarks.jsonl",
                fps=config.fps))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_gen_one, jobs, chunksize=1))
    else:
        for job in jobs:
            _gen_one(job)

    manifest = DatasetManifest(videos=entries, classes=list(classes),
                               split_seed=config.seed)
    manifest_path = out_dir / "manifest.json"
    save_manifest(manifest, manifest_path)
    return manifest_path
