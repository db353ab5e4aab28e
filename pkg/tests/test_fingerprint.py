import numpy as np
import pytest

from ppgcell.cell import CellFormatError
from ppgcell.fingerprint import (Fingerprint, ResidualAccumulator,
                                 accumulate_residual, finalize_fingerprint,
                                 merge, read_fingerprint, residual_for_video,
                                 temporal_nlm_denoise, write_fingerprint,
                                 write_fingerprint_png)
from ppgcell.rectify import RECT_H, RECT_W

SHAPE = (RECT_H, RECT_W, 3)


def noisy_stack(rng, base, sigma, n=5):
    return [np.clip(base + rng.normal(0, sigma, base.shape), 0, 255).astype(np.uint8)
            for _ in range(n)]


class TestDenoise:
    def test_constant_stack_exact(self):
        stack = [np.full((64, 64, 3), 117, np.uint8) for _ in range(5)]
        out = temporal_nlm_denoise(stack)
        np.testing.assert_array_equal(out, stack[2])

    def test_clean_identical_frames_near_identity(self):
        base = np.full((64, 64, 3), 140, np.uint8)
        base[20:40, 20:40] = 160
        out = temporal_nlm_denoise([base.copy() for _ in range(5)])
        assert np.abs(out.astype(int) - base.astype(int)).max() <= 1

    def test_gaussian_noise_reduced(self):
        rng = np.random.default_rng(0)
        ys, xs = np.mgrid[0:64, 0:64]
        clean = (120 + 40 * np.sin(xs / 10.0) + 30 * np.cos(ys / 12.0))
        clean = np.stack([clean] * 3, axis=2)
        stack = noisy_stack(rng, clean, sigma=10.0)
        out = temporal_nlm_denoise(stack, h=10.0)
        mse_in = np.mean((stack[2].astype(float) - clean) ** 2)
        mse_out = np.mean((out.astype(float) - clean) ** 2)
        assert mse_out < mse_in

    def test_stack_size_validation(self):
        frame = np.zeros((16, 16, 3), np.uint8)
        with pytest.raises(ValueError, match="at least 3"):
            temporal_nlm_denoise([frame, frame])
        with pytest.raises(ValueError, match="odd"):
            temporal_nlm_denoise([frame] * 4)

    def test_mismatched_shapes(self):
        with pytest.raises(ValueError):
            temporal_nlm_denoise([np.zeros((16, 16, 3), np.uint8),
                                  np.zeros((8, 8, 3), np.uint8),
                                  np.zeros((16, 16, 3), np.uint8)])


class TestAccumulator:
    def test_identical_pair_changes_only_count(self):
        acc = ResidualAccumulator("genA")
        img = np.random.default_rng(1).integers(0, 255, SHAPE).astype(np.uint8)
        accumulate_residual(acc, img, img)
        assert acc.count == 1
        assert np.all(acc.total == 0.0)

    def test_opposite_residuals_cancel(self):
        acc = ResidualAccumulator("genA")
        base = np.full(SHAPE, 100, np.uint8)
        plus = np.full(SHAPE, 110, np.uint8)
        minus = np.full(SHAPE, 90, np.uint8)
        accumulate_residual(acc, plus, base)
        accumulate_residual(acc, minus, base)
        assert np.all(acc.mean() == 0.0)

    def test_order_independent(self):
        rng = np.random.default_rng(2)
        pairs = [(rng.integers(0, 255, SHAPE).astype(np.uint8),
                  rng.integers(0, 255, SHAPE).astype(np.uint8)) for _ in range(4)]
        a = ResidualAccumulator("x")
        b = ResidualAccumulator("x")
        for orig, den in pairs:
            accumulate_residual(a, orig, den)
        for orig, den in reversed(pairs):
            accumulate_residual(b, orig, den)
        np.testing.assert_array_equal(a.total, b.total)

    def test_offset_invariance(self):
        # constant offset on both original and denoised cancels exactly
        rng = np.random.default_rng(3)
        orig = rng.integers(10, 200, SHAPE).astype(np.uint8)
        den = rng.integers(10, 200, SHAPE).astype(np.uint8)
        a = ResidualAccumulator("x")
        accumulate_residual(a, orig, den)
        b = ResidualAccumulator("x")
        accumulate_residual(b, orig + 20, den + 20)
        np.testing.assert_array_equal(a.total, b.total)

    def test_merge(self):
        rng = np.random.default_rng(4)
        a = ResidualAccumulator("x")
        accumulate_residual(a, rng.integers(0, 255, SHAPE).astype(np.uint8),
                            rng.integers(0, 255, SHAPE).astype(np.uint8))
        b = ResidualAccumulator("x")
        accumulate_residual(b, rng.integers(0, 255, SHAPE).astype(np.uint8),
                            rng.integers(0, 255, SHAPE).astype(np.uint8))
        m = merge(a, b)
        assert m.count == 2
        np.testing.assert_array_equal(m.total, a.total + b.total)
        with pytest.raises(ValueError):
            merge(a, ResidualAccumulator("y"))

    def test_empty_mean_error(self):
        with pytest.raises(ValueError):
            ResidualAccumulator("x").mean()


class TestFinalize:
    def fill(self, label, residuals):
        acc = ResidualAccumulator(label)
        base = np.full(SHAPE, 128, np.float64)
        for r in residuals:
            orig = np.clip(base + r, 0, 255).astype(np.uint8)
            accumulate_residual(acc, orig, base.astype(np.uint8))
        return acc

    def test_self_subtraction_zero_guard(self):
        rng = np.random.default_rng(5)
        r = rng.normal(0, 5, SHAPE)
        acc = self.fill("genA", [r])
        same = self.fill("real", [r])
        fp = finalize_fingerprint(acc, same)
        assert np.all(fp.values == 0.0)

    def test_normalization_peak_is_one(self):
        rng = np.random.default_rng(6)
        acc = self.fill("genA", [rng.normal(0, 8, SHAPE)])
        real = self.fill("real", [np.zeros(SHAPE)])
        fp = finalize_fingerprint(acc, real)
        assert np.abs(fp.values).max() == pytest.approx(1.0, abs=1e-6)
        assert fp.values.min() >= -1.0 and fp.values.max() <= 1.0

    def test_real_class_no_subtraction(self):
        rng = np.random.default_rng(7)
        noise = rng.normal(0, 6, SHAPE)
        real = self.fill("real", [noise])
        fp = finalize_fingerprint(real, None)
        # plain normalized mean residual: tracks the injected noise up to
        # uint8 quantization of the original image
        assert np.abs(fp.values).max() == pytest.approx(1.0, abs=1e-6)
        expect = noise / np.abs(noise).max()
        assert abs(np.corrcoef(fp.values.ravel(), expect.ravel())[0, 1]) > 0.98

    def test_empty_counts_error(self):
        with pytest.raises(ValueError):
            finalize_fingerprint(ResidualAccumulator("x"), None)
        acc = self.fill("x", [np.zeros(SHAPE)])
        with pytest.raises(ValueError):
            finalize_fingerprint(acc, ResidualAccumulator("real"))


class TestFingerprintIO:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(8)
        fp = Fingerprint(values=rng.uniform(-1, 1, SHAPE).astype(np.float32),
                         class_label="genA", provenance={"videos": 3})
        path = tmp_path / "g.ppgf"
        write_fingerprint(fp, path)
        back = read_fingerprint(path)
        np.testing.assert_array_equal(back.values, fp.values)
        assert back.class_label == "genA"
        assert back.provenance == {"videos": 3}

    def test_wrong_magic_rejected(self, tmp_path):
        from ppgcell.cell import write_cell, CellMeta, PpgCell
        cell = PpgCell(values=np.zeros((32, 16), np.float32), has_psd=False,
                       meta=CellMeta())
        path = tmp_path / "c.ppgc"
        write_cell(cell, path)
        with pytest.raises(CellFormatError, match="magic"):
            read_fingerprint(path)

    def test_png_rendering(self, tmp_path):
        from PIL import Image
        values = np.zeros(SHAPE, np.float32)
        values[0, 0] = 1.0
        values[0, 1] = -1.0
        fp = Fingerprint(values=values, class_label="x")
        write_fingerprint_png(fp, tmp_path / "x.png")
        with Image.open(tmp_path / "x.png") as img:
            arr = np.asarray(img)
        assert tuple(arr[0, 0]) == (255, 255, 255)
        assert tuple(arr[0, 1]) == (0, 0, 0)
        assert tuple(arr[1, 1]) == (128, 128, 128)  # round(127.5) with zero value


class TestResidualForVideo:
    def test_recovers_pair_from_synthetic_video(self, tmp_path):
        from ppgcell.synth import SynthConfig, generate_video
        from ppgcell.ingest import VideoEntry
        cfg = SynthConfig(duration_frames=24, frame_size=128, seed=9)
        generate_video(cfg, "real", tmp_path / "v", "v", 0)
        video = VideoEntry("v", "real", tmp_path / "v" / "frames",
                           tmp_path / "v" / "landmarks.jsonl", 30.0)
        pair = residual_for_video(video, omega=16)
        assert pair is not None
        orig, den = pair
        assert orig.shape == SHAPE and den.shape == SHAPE
        assert orig.dtype == np.uint8 and den.dtype == np.uint8

    def test_no_window_returns_none(self, tmp_path):
        from ppgcell.synth import SynthConfig, generate_video
        from ppgcell.ingest import VideoEntry
        cfg = SynthConfig(duration_frames=10, frame_size=128, seed=9)
        generate_video(cfg, "real", tmp_path / "v", "v", 0)
        video = VideoEntry("v", "real", tmp_path / "v" / "frames",
                           tmp_path / "v" / "landmarks.jsonl", 30.0)
        assert residual_for_video(video, omega=16) is None
