"""PPG cell assembly and the .ppgc binary container.

A cell stacks the 32 normalized raw PPG rows over the 32 normalized PSD
rows (64 x omega) for one window; the raw-only ablation keeps 32 x omega.
On disk: magic, version, flags, u16 dims, JSON metadata block, row-major
little-endian float32 payload, trailing CRC32 of everything after the
magic. A lossy 8-bit grayscale PNG export exists for visual inspection
and external image-model training.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

CELL_MAGIC = b"PPGC"
FINGERPRINT_MAGIC = b"PPGF"
FORMAT_VERSION = 1

FLAG_HAS_PSD = 0x01
FLAG_COLOR = 0x02  # payload has a trailing channel axis of 3

_HEADER = struct.Struct("<BBHHI")  # version, flags, rows, cols, meta_len


class CellFormatError(ValueError):
    """Raised for malformed .ppgc/.ppgf files."""


@dataclass
class CellMeta:
    video_id: str = ""
    face_id: int = 0
    window_start: int = 0
    class_label: str | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "video_id": self.video_id,
            "face_id": self.face_id,
            "window_start": self.window_start,
            "class_label": self.class_label,
        }
        doc.update(self.extra)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "CellMeta":
        known = {k: doc.get(k) for k in ("video_id", "face_id", "window_start", "class_label")}
        extra = {k: v for k, v in doc.items() if k not in known}
        return cls(video_id=known["video_id"] or "",
                   face_id=int(known["face_id"] or 0),
                   window_start=int(known["window_start"] or 0),
                   class_label=known["class_label"],
                   extra=extra)


@dataclass
class PpgCell:
    values: np.ndarray  # float32 (rows, omega), entries in [0, 1]
    has_psd: bool
    meta: CellMeta = field(default_factory=CellMeta)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def omega(self) -> int:
        return self.values.shape[1]


def normalize_block(block: np.ndarray) -> np.ndarray:
    """Min-max map to [0, 1]; a constant block maps to all 0.5."""
    block = np.asarray(block, dtype=np.float64)
    lo = block.min()
    span = block.max() - lo
    if span <= 0.0:
        return np.full_like(block, 0.5)
    return (block - lo) / span


def assemble(raw_values: np.ndarray, psd_values: np.ndarray | None,
             mode: str = "with_psd", meta: CellMeta | None = None) -> PpgCell:
    """Build a cell from a raw PPG block and (optionally) its PSD block.

    Each 32 x omega block is min-max normalized independently, so the raw
    half of a 64-row cell is identical to the raw-only ablation cell.
    """
    if mode not in ("with_psd", "raw_only"):
        raise ValueError(f"unknown mode {mode!r}")
    raw_values = np.asarray(raw_values, dtype=np.float64)
    if raw_values.ndim != 2:
        raise ValueError("raw block must be 2-D")
    if not np.all(np.isfinite(raw_values)):
        raise ValueError("raw block contains non-finite values")
    blocks = [normalize_block(raw_values)]
    if mode == "with_psd":
        if psd_values is None:
            raise ValueError("with_psd mode requires a PSD block")
        psd_values = np.asarray(psd_values, dtype=np.float64)
        if psd_values.shape != raw_values.shape:
            raise ValueError(
                f"PSD block shape {psd_values.shape} != raw block shape {raw_values.shape}")
        if not np.all(np.isfinite(psd_values)):
            raise ValueError("PSD block contains non-finite values")
        blocks.append(normalize_block(psd_values))
    values = np.vstack(blocks).astype(np.float32)
    return PpgCell(values=values, has_psd=(mode == "with_psd"),
                   meta=meta or CellMeta())


def strip_psd(cell: PpgCell) -> PpgCell:
    """Raw-only view of a 64-row cell; exact, since blocks normalize independently."""
    if not cell.has_psd:
        return cell
    half = cell.rows // 2
    return PpgCell(values=cell.values[:half].copy(), has_psd=False, meta=cell.meta)


def _pack_block(magic: bytes, flags: int, values: np.ndarray, meta: dict) -> bytes:
    if values.ndim == 3:
        rows, cols, channels = values.shape
        if channels != 3:
            raise ValueError("3-D payloads must have 3 channels")
        flags |= FLAG_COLOR
    else:
        rows, cols = values.shape
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    body = _HEADER.pack(FORMAT_VERSION, flags, rows, cols, len(meta_bytes))
    body += meta_bytes + payload
    return magic + body + struct.pack("<I", zlib.crc32(body))


def _unpack_block(data: bytes, magic: bytes, path: str) -> tuple[int, np.ndarray, dict]:
    if len(data) < 4 or data[:4] != magic:
        raise CellFormatError(f"{path}: bad magic (expected {magic!r})")
    if len(data) < 4 + _HEADER.size + 4:
        raise CellFormatError(f"{path}: truncated file")
    body, (crc_stored,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc_stored:
        raise CellFormatError(f"{path}: checksum failure")
    version, flags, rows, cols, meta_len = _HEADER.unpack(body[:_HEADER.size])
    if version != FORMAT_VERSION:
        raise CellFormatError(f"{path}: unsupported version {version}")
    off = _HEADER.size
    if len(body) < off + meta_len:
        raise CellFormatError(f"{path}: truncated metadata")
    try:
        meta = json.loads(body[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CellFormatError(f"{path}: bad metadata block: {exc}") from exc
    off += meta_len
    n_values = rows * cols * (3 if flags & FLAG_COLOR else 1)
    expected = n_values * 4
    if len(body) - off != expected:
        raise CellFormatError(
            f"{path}: payload is {len(body) - off} bytes, expected {expected}")
    values = np.frombuffer(body[off:], dtype="<f4").copy()
    shape = (rows, cols, 3) if flags & FLAG_COLOR else (rows, cols)
    return flags, values.reshape(shape), meta


def write_cell(cell: PpgCell, path: str | Path) -> None:
    flags = FLAG_HAS_PSD if cell.has_psd else 0
    Path(path).write_bytes(_pack_block(CELL_MAGIC, flags, cell.values, cell.meta.to_dict()))


def read_cell(path: str | Path) -> PpgCell:
    data = Path(path).read_bytes()
    flags, values, meta = _unpack_block(data, CELL_MAGIC, str(path))
    if values.ndim != 2:
        raise CellFormatError(f"{path}: cells must be 2-D")
    return PpgCell(values=values, has_psd=bool(flags & FLAG_HAS_PSD),
                   meta=CellMeta.from_dict(meta))


def write_cell_png(cell: PpgCell, path: str | Path) -> None:
    """Lossy 8-bit grayscale rendering: pixel (r, c) = round(255 * value)."""
    img = np.clip(np.rint(cell.values.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)
