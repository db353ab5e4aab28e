"""PPG cells for deep-fake source attribution.

Pipeline: face landmarks -> rectified skin ROI -> 32 grid-wise CHROM-PPG
traces per window -> 64 x omega PPG cells (raw + power spectra) ->
per-cell classification -> per-video verdict aggregation; plus residual
fingerprint accumulation and a synthetic-video oracle.
"""

__version__ = "0.1.0"

from .cell import PpgCell, assemble, read_cell, write_cell
from .classify import ClassifierModel, TrainConfig, predict, train
from .aggregate import SCHEMES, build_verdict, evaluate
from .ingest import DatasetManifest, load_manifest, split_train_test

__all__ = [
    "PpgCell", "assemble", "read_cell", "write_cell",
    "ClassifierModel", "TrainConfig", "predict", "train",
    "SCHEMES", "build_verdict", "evaluate",
    "DatasetManifest", "load_manifest", "split_train_test",
    "__version__",
]
