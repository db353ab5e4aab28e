"""Grid-wise chrominance PPG traces and their power spectral densities.

Each rectified face is divided into 32 equal squares (8 columns x 4 rows
of 32x32 px). Per square and window we keep the spatial-mean RGB trace,
its CHROM projection, and the CHROM signal's periodogram resampled to
window length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rectify import RECT_H, RECT_W, RectifiedFace

GRID_COLS = 8
GRID_ROWS = 4
GRID_SQUARES = GRID_COLS * GRID_ROWS
SQUARE = 32  # px, both axes

MIN_WINDOW = 16

# A square with less than this fraction of in-mesh pixels in any frame is
# dropped (zeroed) for the whole window.
MIN_VALID_FRACTION = 0.25

_ZERO_STD = 1e-12


@dataclass
class GridTraceSet:
    means: np.ndarray       # (32, omega, 3) spatial-mean RGB per square per frame
    valid_mask: np.ndarray  # (32, omega) bool

    def square_valid(self) -> np.ndarray:
        """Squares valid in every frame of the window: (32,) bool."""
        return self.valid_mask.all(axis=1)


@dataclass
class RawPpgMatrix:
    values: np.ndarray      # (32, omega), zero-mean rows; invalid rows all-zero
    valid_rows: np.ndarray  # (32,) bool


@dataclass
class PsdMatrix:
    values: np.ndarray      # (32, omega), non-negative; invalid rows all-zero
    valid_rows: np.ndarray  # (32,) bool


def grid_means(faces: Sequence[RectifiedFace]) -> GridTraceSet:
    """Spatial-mean RGB of each grid square across a window of faces.

    Means are taken over valid (inside-mesh) pixels only. Square r sits at
    column (r mod 8), row (r div 8) of the raster.
    """
    omega = len(faces)
    means = np.zeros((GRID_SQUARES, omega, 3), dtype=np.float64)
    mask = np.zeros((GRID_SQUARES, omega), dtype=bool)
    per_square = SQUARE * SQUARE
    for t, face in enumerate(faces):
        if face.raster.shape != (RECT_H, RECT_W, 3):
            raise ValueError(f"rectified raster must be {RECT_H}x{RECT_W}x3")
        valid = face.valid.reshape(GRID_ROWS, SQUARE, GRID_COLS, SQUARE)
        counts = valid.sum(axis=(1, 3)).reshape(-1).astype(np.float64)  # (32,)
        px = face.raster.astype(np.float64) * face.valid[:, :, None]
        sums = px.reshape(GRID_ROWS, SQUARE, GRID_COLS, SQUARE, 3).sum(axis=(1, 3))
        sums = sums.reshape(-1, 3)
        nonzero = counts > 0
        means[nonzero, t] = sums[nonzero] / counts[nonzero, None]
        mask[:, t] = counts >= MIN_VALID_FRACTION * per_square
    return GridTraceSet(means=means, valid_mask=mask)


def chrom_ppg(trace: np.ndarray) -> np.ndarray:
    """CHROM projection of one square's mean-RGB trace.

    Channels are normalized by their temporal means, projected onto the
    chrominance plane (Xs = 3Rn - 2Gn, Ys = 1.5Rn + Gn - 1.5Bn), combined
    as S = Xs - alpha*Ys with alpha = std(Xs)/std(Ys), and mean-removed.
    Traces with a zero-mean channel or (near-)constant Ys yield zeros.
    """
    trace = np.asarray(trace, dtype=np.float64)
    if trace.ndim != 2 or trace.shape[1] != 3:
        raise ValueError("trace must have shape (omega, 3)")
    omega = trace.shape[0]
    if omega < MIN_WINDOW:
        raise ValueError(f"window must be at least {MIN_WINDOW} frames")
    ch_mean = trace.mean(axis=0)
    if np.any(np.abs(ch_mean) < _ZERO_STD):
        return np.zeros(omega)
    rn, gn, bn = (trace / ch_mean).T
    xs = 3.0 * rn - 2.0 * gn
    ys = 1.5 * rn + gn - 1.5 * bn
    sy = ys.std()
    if sy < _ZERO_STD:
        return np.zeros(omega)
    s = xs - (xs.std() / sy) * ys
    return s - s.mean()


def raw_ppg_matrix(grid: GridTraceSet) -> RawPpgMatrix:
    """CHROM signal per grid square; invalid squares become zero rows."""
    n, omega, _ = grid.means.shape
    values = np.zeros((n, omega), dtype=np.float64)
    valid = grid.square_valid().copy()
    for r in range(n):
        if not valid[r]:
            continue
        row = chrom_ppg(grid.means[r])
        if not row.any():
            valid[r] = False
        values[r] = row
    return RawPpgMatrix(values=values, valid_rows=valid)


def periodogram(signal: np.ndarray) -> np.ndarray:
    """One-sided scaled periodogram over the floor(n/2)+1 bins.

    Interior bins carry the mirrored negative-frequency power, so the bins
    sum to sum(s^2)/n exactly (Parseval).
    """
    signal = np.asarray(signal, dtype=np.float64)
    n = len(signal)
    spec = np.abs(np.fft.rfft(signal)) ** 2 / float(n * n)
    if len(spec) > 1:
        spec[1:] *= 2.0
        if n % 2 == 0:
            spec[-1] /= 2.0  # Nyquist bin has no mirror
    return spec


def psd(signal: np.ndarray) -> np.ndarray:
    """Periodogram linearly resampled from floor(n/2)+1 bins to n bins."""
    n = len(signal)
    if n < MIN_WINDOW:
        raise ValueError(f"window must be at least {MIN_WINDOW} frames")
    p = periodogram(signal)
    src = np.arange(len(p), dtype=np.float64)
    dst = np.linspace(0.0, len(p) - 1.0, num=n)
    return np.interp(dst, src, p)


def psd_matrix(raw: RawPpgMatrix) -> PsdMatrix:
    n, omega = raw.values.shape
    values = np.zeros((n, omega), dtype=np.float64)
    for r in range(n):
        if raw.valid_rows[r]:
            values[r] = psd(raw.values[r])
    return PsdMatrix(values=values, valid_rows=raw.valid_rows.copy())
