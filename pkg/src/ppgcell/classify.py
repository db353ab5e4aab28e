"""Desk-scale cell classifier: flatten -> optional ReLU hidden layer ->
linear -> softmax, trained by deterministic mini-batch SGD.

This is deliberately shallow; heavyweight backbones train externally on
exported cells. Weights live as float32 (so persistence is bit-exact)
while all arithmetic runs in float64.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .cell import PpgCell, CellMeta

MODEL_MAGIC = b"PPGM"
MODEL_VERSION = 1


class ModelError(ValueError):
    """Raised for model misuse (shape/class mismatches)."""


class ModelFormatError(ModelError):
    """Raised for malformed .ppgm files."""


@dataclass
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.05
    batch_size: int = 32
    hidden: int = 128       # 0 = pure linear-softmax
    seed: int = 0
    l2: float = 0.0
    class_weighting: bool = True
    val_fraction: float = 0.0


@dataclass
class ClassifierModel:
    classes: list[str]
    rows: int
    cols: int
    params: dict[str, np.ndarray]  # float32; keys per param_names()
    config: TrainConfig = field(default_factory=TrainConfig)

    @property
    def hidden(self) -> int:
        return self.config.hidden

    def param_names(self) -> list[str]:
        return ["w1", "b1", "w2", "b2"] if self.hidden > 0 else ["w", "b"]

    def input_dim(self) -> int:
        return self.rows * self.cols

    def check_cell(self, cell: PpgCell) -> None:
        if cell.values.shape != (self.rows, self.cols):
            raise ModelError(
                f"cell shape {cell.values.shape} does not match model "
                f"input ({self.rows}, {self.cols})")


@dataclass
class CellPrediction:
    classes: list[str]
    probs: np.ndarray  # (K,), sums to 1
    meta: CellMeta = field(default_factory=CellMeta)

    @property
    def argmax(self) -> str:
        return self.classes[int(np.argmax(self.probs))]

    @property
    def confidence(self) -> float:
        return float(self.probs.max())


def _params64(params: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.astype(np.float64) for k, v in params.items()}


def _logits(params: dict[str, np.ndarray], x: np.ndarray, hidden: int) -> np.ndarray:
    if hidden > 0:
        h = np.maximum(x @ params["w1"] + params["b1"], 0.0)
        return h @ params["w2"] + params["b2"]
    return x @ params["w"] + params["b"]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(params: dict[str, np.ndarray], x: np.ndarray, y: np.ndarray,
                   hidden: int, sample_weights: np.ndarray | None = None,
                   l2: float = 0.0) -> tuple[float, dict[str, np.ndarray]]:
    """Weighted-mean cross-entropy plus 0.5*l2*sum(W^2), with gradients.

    Accepts an empty batch, in which case only the regularization term
    contributes (loss = reg, grads = l2 * W).
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    n = x.shape[0]
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    reg = 0.0
    for k in params:
        if k.startswith("w"):
            reg += 0.5 * l2 * float((params[k] ** 2).sum())
            grads[k] += l2 * params[k]
    if n == 0:
        return reg, grads

    if sample_weights is None:
        sample_weights = np.ones(n)
    wsum = float(sample_weights.sum())

    if hidden > 0:
        h_pre = x @ params["w1"] + params["b1"]
        h = np.maximum(h_pre, 0.0)
        z = h @ params["w2"] + params["b2"]
    else:
        z = x @ params["w"] + params["b"]
    zs = z - z.max(axis=1, keepdims=True)
    log_probs = zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))
    data_loss = float(-(sample_weights * log_probs[np.arange(n), y]).sum() / wsum)

    probs = np.exp(log_probs)
    dz = probs.copy()
    dz[np.arange(n), y] -= 1.0
    dz *= (sample_weights / wsum)[:, None]
    if hidden > 0:
        grads["w2"] += h.T @ dz
        grads["b2"] += dz.sum(axis=0)
        dh = (dz @ params["w2"].T) * (h_pre > 0.0)
        grads["w1"] += x.T @ dh
        grads["b1"] += dh.sum(axis=0)
    else:
        grads["w"] += x.T @ dz
        grads["b"] += dz.sum(axis=0)
    return data_loss + reg, grads


def _design_matrix(cells: list[PpgCell]) -> np.ndarray:
    return np.stack([c.values.reshape(-1).astype(np.float64) for c in cells])


def train(cells: list[PpgCell], config: TrainConfig,
          classes: list[str] | None = None) -> tuple[ClassifierModel, list[dict]]:
    """Train on labeled cells; deterministic given config.seed.

    Returns the model and a per-epoch history of
    {epoch, train_loss, train_acc, val_loss, val_acc}.
    """
    if not cells:
        raise ModelError("no cells to train on")
    shape = cells[0].values.shape
    for c in cells:
        if c.values.shape != shape:
            raise ModelError(
                f"inconsistent cell shapes: {c.values.shape} vs {shape}")
        if c.meta.class_label is None:
            raise ModelError(f"cell for video {c.meta.video_id!r} has no class label")
    if classes is None:
        classes = sorted({c.meta.class_label for c in cells})
    if len(classes) < 2:
        raise ModelError("need at least 2 classes to train")
    class_index = {name: i for i, name in enumerate(classes)}
    for c in cells:
        if c.meta.class_label not in class_index:
            raise ModelError(f"cell labeled {c.meta.class_label!r} not in class list")
    counts = np.zeros(len(classes), dtype=np.int64)
    y_all = np.array([class_index[c.meta.class_label] for c in cells])
    for yi in y_all:
        counts[yi] += 1
    if (counts == 0).any():
        missing = [classes[i] for i in np.flatnonzero(counts == 0)]
        raise ModelError(f"classes with zero cells: {missing}")

    x_all = _design_matrix(cells)
    rng = np.random.default_rng(config.seed)
    n, d = x_all.shape
    k = len(classes)

    perm = rng.permutation(n)
    n_val = int(round(config.val_fraction * n))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    x, y = x_all[train_idx], y_all[train_idx]
    xv, yv = x_all[val_idx], y_all[val_idx]

    if config.class_weighting:
        cw = len(y) / (k * np.maximum(np.bincount(y, minlength=k), 1))
        weights = cw[y]
    else:
        weights = np.ones(len(y))

    params: dict[str, np.ndarray] = {}
    if config.hidden > 0:
        params["w1"] = (rng.standard_normal((d, config.hidden))
                        * math.sqrt(2.0 / d)).astype(np.float32)
        params["b1"] = np.zeros(config.hidden, dtype=np.float32)
        params["w2"] = (rng.standard_normal((config.hidden, k))
                        * math.sqrt(2.0 / config.hidden)).astype(np.float32)
        params["b2"] = np.zeros(k, dtype=np.float32)
    else:
        params["w"] = (rng.standard_normal((d, k)) * math.sqrt(1.0 / d)).astype(np.float32)
        params["b"] = np.zeros(k, dtype=np.float32)

    history: list[dict] = []
    lr = config.learning_rate
    for epoch in range(config.epochs):
        order = rng.permutation(len(y))
        for s in range(0, len(y), config.batch_size):
            idx = order[s:s + config.batch_size]
            _, grads = loss_and_grads(params, x[idx], y[idx], config.hidden,
                                      sample_weights=weights[idx], l2=config.l2)
            for key in params:
                params[key] = (params[key].astype(np.float64)
                               - lr * grads[key]).astype(np.float32)
        p64 = _params64(params)
        tr_loss, _ = loss_and_grads(p64, x, y, config.hidden,
                                    sample_weights=weights, l2=config.l2)
        tr_acc = float((_logits(p64, x, config.hidden).argmax(axis=1) == y).mean())
        row = {"epoch": epoch, "train_loss": tr_loss, "train_acc": tr_acc,
               "val_loss": math.nan, "val_acc": math.nan}
        if len(yv):
            row["val_loss"], _ = loss_and_grads(p64, xv, yv, config.hidden, l2=config.l2)
            row["val_acc"] = float((_logits(p64, xv, config.hidden).argmax(axis=1) == yv).mean())
        history.append(row)

    model = ClassifierModel(classes=list(classes), rows=shape[0], cols=shape[1],
                            params=params, config=config)
    return model, history


def predict(model: ClassifierModel, cell: PpgCell) -> CellPrediction:
    """Softmax class probabilities for one cell.

    Each class logit is an independent contiguous dot product and the
    softmax denominator uses math.fsum, so permuting the class list (with
    its weight columns) permutes the probabilities exactly, down to the
    last bit; batched matmuls do not guarantee that.
    """
    model.check_cell(cell)
    p = _params64(model.params)
    x = cell.values.reshape(-1).astype(np.float64)
    if model.hidden > 0:
        h = np.maximum(x @ p["w1"] + p["b1"], 0.0)
        w_out, b_out = p["w2"], p["b2"]
    else:
        h, w_out, b_out = x, p["w"], p["b"]
    z = np.array([float(h @ np.ascontiguousarray(w_out[:, k])) + b_out[k]
                  for k in range(len(model.classes))])
    e = np.exp(z - z.max())
    probs = e / math.fsum(e)
    return CellPrediction(classes=model.classes, probs=probs, meta=cell.meta)


def predict_batch(model: ClassifierModel, cells: list[PpgCell]) -> list[CellPrediction]:
    return [predict(model, c) for c in cells]


def gradient_check(model: ClassifierModel, cells: list[PpgCell],
                   n_samples: int = 120, step: float = 1e-4,
                   seed: int = 0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Samples n_samples weight positions across all parameter arrays; the
    batch is limited to 8 cells to keep the finite differencing cheap.
    """
    if len(cells) > 8:
        raise ValueError("gradient check batch is limited to 8 cells")
    class_index = {name: i for i, name in enumerate(model.classes)}
    x = _design_matrix(cells) if cells else np.zeros((0, model.input_dim()))
    y = np.array([class_index[c.meta.class_label] for c in cells], dtype=np.int64)

    p64 = _params64(model.params)
    l2 = model.config.l2
    _, grads = loss_and_grads(p64, x, y, model.hidden, l2=l2)

    rng = np.random.default_rng(seed)
    names = model.param_names()
    sizes = np.array([p64[k].size for k in names])
    flat_positions = rng.integers(0, sizes.sum(), size=n_samples)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for pos in flat_positions:
        ai = int(np.searchsorted(offsets, pos, side="right") - 1)
        name, local = names[ai], int(pos - offsets[ai])
        idx = np.unravel_index(local, p64[name].shape)
        orig = p64[name][idx]
        p64[name][idx] = orig + step
        up, _ = loss_and_grads(p64, x, y, model.hidden, l2=l2)
        p64[name][idx] = orig - step
        dn, _ = loss_and_grads(p64, x, y, model.hidden, l2=l2)
        p64[name][idx] = orig
        numeric = (up - dn) / (2.0 * step)
        analytic = grads[name][idx]
        denom = max(abs(analytic), abs(numeric), 1e-4)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def save_model(model: ClassifierModel, path: str | Path) -> None:
    header = {
        "classes": model.classes,
        "rows": model.rows,
        "cols": model.cols,
        "config": asdict(model.config),
        "params": [[k, list(model.params[k].shape)] for k in model.param_names()],
    }
    meta = json.dumps(header, sort_keys=True).encode("utf-8")
    body = struct.pack("<BI", MODEL_VERSION, len(meta)) + meta
    for k in model.param_names():
        body += np.ascontiguousarray(model.params[k], dtype="<f4").tobytes()
    Path(path).write_bytes(MODEL_MAGIC + body + struct.pack("<I", zlib.crc32(body)))


def load_model(path: str | Path, expected_classes: list[str] | None = None) -> ClassifierModel:
    data = Path(path).read_bytes()
    name = str(path)
    if len(data) < 4 or data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{name}: bad magic")
    if len(data) < 13:
        raise ModelFormatError(f"{name}: truncated file")
    body, (crc_stored,) = data[4:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc_stored:
        raise ModelFormatError(f"{name}: checksum failure")
    version, meta_len = struct.unpack("<BI", body[:5])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{name}: unsupported version {version}")
    if len(body) < 5 + meta_len:
        raise ModelFormatError(f"{name}: truncated header")
    header = json.loads(body[5:5 + meta_len].decode("utf-8"))
    off = 5 + meta_len
    params: dict[str, np.ndarray] = {}
    for key, shape in header["params"]:
        count = int(np.prod(shape))
        blob = body[off:off + 4 * count]
        if len(blob) != 4 * count:
            raise ModelFormatError(f"{name}: truncated weights for {key!r}")
        params[key] = np.frombuffer(blob, dtype="<f4").copy().reshape(shape)
        off += 4 * count
    if off != len(body):
        raise ModelFormatError(f"{name}: {len(body) - off} trailing bytes")
    model = ClassifierModel(classes=list(header["classes"]),
                            rows=int(header["rows"]), cols=int(header["cols"]),
                            params=params,
                            config=TrainConfig(**header["config"]))
    if expected_classes is not None and list(expected_classes) != model.classes:
        raise ModelError(
            f"model classes {model.classes} conflict with expected {list(expected_classes)}")
    return model
