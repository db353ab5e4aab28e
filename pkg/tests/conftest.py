import json
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from ppgcell.ingest import FRAME_PATTERN
from ppgcell.synth import TEMPLATE_LANDMARKS


def write_frames(directory: Path, count: int, size: int = 8, value: int = 100) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    img = np.full((size, size, 3), value, dtype=np.uint8)
    for i in range(count):
        Image.fromarray(img).save(directory / (FRAME_PATTERN % i))


def write_landmarks(path: Path, frames, face_id: int = 0, confidence: float = 1.0,
                    size: int = 8) -> None:
    pts = (TEMPLATE_LANDMARKS * size).tolist()
    with open(path, "w") as fh:
        for f in frames:
            fh.write(json.dumps({"frame": int(f), "face_id": face_id,
                                 "confidence": confidence, "points": pts}) + "\n")


@pytest.fixture
def tiny_dataset(tmp_path):
    """Two-class manifest with 4 videos, 20 tiny frames each."""
    classes = ["real", "genA"]
    videos = []
    for ci, cls in enumerate(classes):
        for vi in range(2):
            vid = f"{cls}_{vi}"
            vdir = tmp_path / vid
            write_frames(vdir / "frames", 20)
            write_landmarks(vdir / "landmarks.jsonl", range(20))
            videos.append({"id": vid, "class_label": cls,
                           "frames_path": f"{vid}/frames",
                           "landmarks_path": f"{vid}/landmarks.jsonl",
                           "fps": 30.0})
    manifest = {"classes": classes, "split_seed": 7, "videos": videos}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    return path
