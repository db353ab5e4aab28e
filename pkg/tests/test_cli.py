import json

import numpy as np
import pytest

from ppgcell import cli, pipeline
from ppgcell.cell import read_cell
from ppgcell.ingest import (enumerate_windows, load_landmarks, load_manifest,
                            split_train_test)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Small synthetic dataset shared by the CLI tests."""
    root = tmp_path_factory.mktemp("clids")
    rc = cli.main(["synth", "--out", str(root / "data"),
                   "--classes", "genA,genB,real", "--videos-per-class", "3",
                   "--frames", "80", "--seed", "21", "--workers", "2"])
    assert rc == 0
    return root


def run(args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def cells_dir(dataset):
    """First extraction over the dataset; returns (directory, summary)."""
    rc = run(["extract", "--manifest", dataset / "data" / "manifest.json",
              "--out", dataset / "cells", "--omega", 64, "--workers", 2])
    assert rc == 0
    summary = json.loads((dataset / "cells" / "extract_summary.json").read_text())
    return dataset / "cells", summary


class TestSynthCommand:
    def test_manifest_valid(self, dataset):
        manifest = load_manifest(dataset / "data" / "manifest.json")
        assert len(manifest.videos) == 9
        assert set(manifest.classes) == {"genA", "genB", "real"}


class TestExtract:
    def test_cell_count_matches_window_oracle(self, dataset, cells_dir):
        cells, summary = cells_dir
        manifest = load_manifest(dataset / "data" / "manifest.json")
        expected = 0
        for video in manifest.videos:
            lms = load_landmarks(video.landmarks_path)
            expected += len(enumerate_windows(video, lms, 64))
        produced = list(cells.glob("*.ppgc"))
        assert len(produced) == expected
        assert summary["cells_written"] == expected
        assert summary["failed_videos"] == []

    def test_rerun_is_idempotent(self, dataset, cells_dir):
        before = {p.name: p.stat().st_mtime_ns
                  for p in cells_dir[0].glob("*.ppgc")}
        rc = run(["extract", "--manifest", dataset / "data" / "manifest.json",
                  "--out", dataset / "cells", "--omega", 64])
        assert rc == 0
        summary = json.loads((dataset / "cells" / "extract_summary.json").read_text())
        assert summary["cells_written"] == 0
        assert summary["cells_skipped_existing"] == len(before)
        after = {p.name: p.stat().st_mtime_ns
                 for p in (dataset / "cells").glob("*.ppgc")}
        assert after == before

    def test_short_video_listed_as_skipped(self, dataset, tmp_path):
        # 80-frame videos cannot host a 4096-frame window... use omega such
        # that no window fits: omega > duration
        rc = run(["extract", "--manifest", dataset / "data" / "manifest.json",
                  "--out", tmp_path / "cells", "--omega", 128])
        assert rc == 0
        summary = json.loads((tmp_path / "cells" / "extract_summary.json").read_text())
        assert summary["cells_written"] == 0
        assert len(summary["skipped_windows"]) == 9
        assert "no uninterrupted window" in summary["skipped_windows"][0]["reason"]

    def test_no_psd_flag(self, dataset, tmp_path):
        rc = run(["extract", "--manifest", dataset / "data" / "manifest.json",
                  "--out", tmp_path / "cells", "--omega", 64, "--no-psd"])
        assert rc == 0
        cell = read_cell(next((tmp_path / "cells").glob("*.ppgc")))
        assert cell.values.shape[0] == 32
        assert not cell.has_psd

    def test_dump_rectified(self, dataset, tmp_path):
        manifest = load_manifest(dataset / "data" / "manifest.json")
        one = manifest.videos[0]
        solo = {"classes": [one.class_label], "split_seed": 0,
                "videos": [{"id": one.id, "class_label": one.class_label,
                            "frames_path": str(one.frames_path),
                            "landmarks_path": str(one.landmarks_path),
                            "fps": one.fps}]}
        mpath = tmp_path / "m.json"
        mpath.write_text(json.dumps(solo))
        rc = run(["extract", "--manifest", mpath, "--out", tmp_path / "cells",
                  "--omega", 64, "--dump-rectified", tmp_path / "dump"])
        assert rc == 0
        dumped = list((tmp_path / "dump").glob("*_face0.png"))
        assert len(dumped) == 64


@pytest.fixture(scope="module")
def trained(dataset, cells_dir):
    model_path = dataset / "model.ppgm"
    rc = run(["train", "--manifest", dataset / "data" / "manifest.json",
              "--cells", cells_dir[0], "--out", model_path,
              "--seed", 0])
    assert rc == 0
    assert model_path.exists()
    assert model_path.with_suffix(".log.csv").exists()
    return model_path


class TestTrainEvaluatePredict:
    def test_training_log_columns(self, trained):
        header = trained.with_suffix(".log.csv").read_text().splitlines()[0]
        assert header == "epoch,train_loss,train_acc,val_loss,val_acc"

    def test_evaluate_test_split(self, dataset, trained, cells_dir, capsys):
        rc = run(["evaluate", "--model", trained,
                  "--manifest", dataset / "data" / "manifest.json",
                  "--cells", cells_dir[0], "--out", dataset / "report"])
        assert rc == 0
        out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert out["videos"] == 3  # one test video per class at 70/30 of 3
        assert (dataset / "report" / "confusion.csv").exists()
        summary = json.loads((dataset / "report" / "summary.json").read_text())
        assert summary["scheme"] == "logodds"
        assert 0.0 <= summary["macro_accuracy"] <= 1.0

    def test_predict_cells_and_aggregate_roundtrip(self, dataset, trained, cells_dir, tmp_path):
        verdicts_path = tmp_path / "verdicts.json"
        preds_path = tmp_path / "preds.jsonl"
        rc = run(["predict", "--model", trained, "--cells", cells_dir[0],
                  "--out", verdicts_path, "--dump-predictions", preds_path])
        assert rc == 0
        verdicts = json.loads(verdicts_path.read_text())
        assert len(verdicts) == 9
        for v in verdicts:
            assert set(v["scheme_results"]) == set(
                ("majority", "mean-thresh", "max", "top2", "logodds"))
        rc = run(["aggregate", "--predictions", preds_path,
                  "--out", tmp_path / "re.json"])
        assert rc == 0
        re_verdicts = json.loads((tmp_path / "re.json").read_text())
        assert re_verdicts == verdicts

    def test_predict_single_video(self, dataset, trained, tmp_path):
        manifest = load_manifest(dataset / "data" / "manifest.json")
        video = manifest.videos[0]
        out = tmp_path / "v.json"
        rc = run(["predict", "--model", trained,
                  "--frames", video.frames_path,
                  "--landmarks", video.landmarks_path,
                  "--fps", 30.0, "--video-id", video.id, "--out", out])
        assert rc == 0
        doc = json.loads(out.read_text())
        assert doc[0]["video"] == video.id

    def test_deterministic_retrain_byte_identical(self, dataset, trained, cells_dir, tmp_path):
        rc = run(["train", "--manifest", dataset / "data" / "manifest.json",
                  "--cells", cells_dir[0], "--out", tmp_path / "again.ppgm",
                  "--seed", 0])
        assert rc == 0
        assert (tmp_path / "again.ppgm").read_bytes() == trained.read_bytes()


class TestExitCodes:
    def test_missing_manifest_is_data_error(self, tmp_path):
        rc = run(["extract", "--manifest", tmp_path / "none.json",
                  "--out", tmp_path / "cells"])
        assert rc == cli.EXIT_DATA

    def test_bad_omega_is_config_error(self, dataset, tmp_path):
        rc = run(["extract", "--manifest", dataset / "data" / "manifest.json",
                  "--out", tmp_path / "cells", "--omega", 7])
        assert rc == cli.EXIT_CONFIG

    def test_bad_config_file(self, dataset, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"omega": 64, "bogus_knob": 1}))
        rc = run(["extract", "--manifest", dataset / "data" / "manifest.json",
                  "--out", tmp_path / "cells", "--config", cfg])
        assert rc == cli.EXIT_CONFIG

    def test_config_file_with_flag_override(self, dataset, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"omega": 128, "workers": 1}))
        rc = run(["extract", "--manifest", dataset / "data" / "manifest.json",
                  "--out", tmp_path / "cells", "--config", cfg, "--omega", 64])
        assert rc == 0
        # flag wins: 64-frame windows fit the 80-frame videos
        summary = json.loads((tmp_path / "cells" / "extract_summary.json").read_text())
        assert summary["omega"] == 64
        assert summary["cells_written"] == 9

    def test_model_class_conflict_is_data_error(self, dataset, trained, cells_dir, tmp_path):
        doc = json.loads((dataset / "data" / "manifest.json").read_text())
        doc["classes"] = doc["classes"] + ["phantom"]
        bad = tmp_path / "m.json"
        bad.write_text(json.dumps(doc))
        rc = run(["evaluate", "--model", trained,
                  "--manifest", bad, "--cells", cells_dir[0],
                  "--out", tmp_path / "rep"])
        assert rc == cli.EXIT_DATA


class TestFingerprintCommand:
    def test_fingerprints_written(self, dataset, capsys):
        rc = run(["fingerprint", "--manifest", dataset / "data" / "manifest.json",
                  "--out", dataset / "fp", "--omega", 16])
        assert rc == 0
        assert (dataset / "fp" / "genA.ppgf").exists()
        assert (dataset / "fp" / "genA.png").exists()
        assert (dataset / "fp" / "genB.ppgf").exists()
        assert (dataset / "fp" / "real.ppgf").exists()
        from ppgcell.fingerprint import read_fingerprint
        fp = read_fingerprint(dataset / "fp" / "genA.ppgf")
        assert fp.values.shape == (128, 256, 3)
        assert fp.provenance["videos"] == 3

    def test_unknown_class_rejected(self, dataset, tmp_path):
        rc = run(["fingerprint", "--manifest", dataset / "data" / "manifest.json",
                  "--out", tmp_path / "fp", "--classes", "nope"])
        assert rc == cli.EXIT_DATA
