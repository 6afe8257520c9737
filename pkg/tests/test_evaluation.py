import math

import numpy as np
import pytest

from opdlab.evaluation import (MetricsReport, aar, evaluate_aar, evaluate_input, evaluate_model, gaussian_window,
                               mse, noisy_input_psnr, psnr, rmse, ssim)
from opdlab.model import build_denoiser
from opdlab.noise import FrameStack, NoiseSpec, make_stack


def ssim_reference(a, b, peak=1.0):
    """Window-by-window SSIM with explicitly weighted moments."""
    half = 5
    ax = np.arange(-half, half + 1)
    g = np.exp(-ax ** 2 / (2 * 1.5 ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    vals = []
    for i in range(a.shape[0] - 10):
        for j in range(a.shape[1] - 10):
            pa, pb = a[i:i + 11, j:j + 11], b[i:i + 11, j:j + 11]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cv = (w * (pa - ma) * (pb - mb)).sum()
            vals.append((2 * ma * mb + c1) * (2 * cv + c2) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestClosedForms:
    def test_psnr_of_quarter_offset(self):
        a, b = np.zeros((8, 8)), np.full((8, 8), 0.25)
        assert abs(psnr(a, b) - 20 * math.log10(4)) <= 1e-9
        assert abs(psnr(a, b) - 12.041199826559248) <= 1e-9
        assert abs(rmse(a, b) - 0.25) <= 1e-9
        assert abs(mse(a, b) - 0.0625) <= 1e-12

    def test_psnr_with_peak(self):
        a, b = np.zeros(4), np.full(4, 25.5)
        assert abs(psnr(a, b, peak=255) - 20.0) <= 1e-9

    def test_identical_is_infinite(self):
        x = np.random.default_rng(0).random((5, 5))
        assert psnr(x, x) == math.inf
        assert rmse(x, x) == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros(3), np.zeros(4))


class TestSsim:
    def test_identical_is_exactly_one(self):
        rng = np.random.default_rng(1)
        for _ in range(10):
            x = rng.random((24, 24))
            assert ssim(x, x) == 1.0

    def test_constant_images(self):
        c1 = 0.01 ** 2
        expected = (2 * 0.6 * 0.61 + c1) / (0.6 ** 2 + 0.61 ** 2 + c1)
        assert abs(ssim(np.full((16, 16), 0.6), np.full((16, 16), 0.61)) - expected) <= 1e-9

    def test_against_window_loop_reference(self):
        rng = np.random.default_rng(2)
        worst = 0.0
        for _ in range(50):
            a = rng.random((16, 18))
            b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
            worst = max(worst, abs(ssim(a, b) - ssim_reference(a, b)))
        assert worst <= 1e-9

    def test_inverted_image_scores_negative(self):
        x = np.random.default_rng(3).random((32, 32))
        assert ssim(x, 1 - x) < 0

    def test_window_normalised(self):
        w = gaussian_window()
        assert w.shape == (11, 11)
        assert w.sum() == pytest.approx(1.0, abs=1e-15)
        assert w[5, 5] == w.max()

    def test_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestAar:
    def test_mean_of_frames(self):
        frames = np.arange(12, dtype=float).reshape(3, 2, 2)
        np.testing.assert_array_equal(aar(frames), frames.mean(axis=0))
        assert aar(frames[:1]).shape == (2, 2)

    def test_gain_for_eight_frames(self):
        clean = np.full((128, 128), 0.5)
        stack = make_stack(clean, NoiseSpec.gaussian(25), 8, 0, 0)
        gain = psnr(aar(stack), clean) - psnr(stack.frames[0], clean)
        assert gain == pytest.approx(10 * math.log10(8), abs=0.3)
        assert 10 * math.log10(8) == pytest.approx(9.03, abs=0.005)


class TestReports:
    def test_aggregate_excludes_infinite(self):
        r = MetricsReport()
        clean = np.random.default_rng(4).random((16, 16))
        r.add("a", clean, clean)
        r.add("b", np.clip(clean + 0.1, 0, 1), clean)
        agg = r.aggregate()
        assert agg["psnr_infinite"] == 1 and agg["count"] == 2
        assert agg["psnr"] == r.psnr[1]

    def test_estimates_are_clipped(self):
        r = MetricsReport()
        ref = np.ones((16, 16))
        r.add("a", np.full((16, 16), 1.5), ref)
        assert r.psnr[0] == math.inf

    def test_proxy_reference_without_clean(self):
        stack = FrameStack(np.random.default_rng(5).random((4, 16, 16)).astype(np.float32))
        assert evaluate_aar([stack]).proxy_reference
        assert evaluate_aar([stack]).psnr[0] == math.inf

    def test_model_modes(self, small_stacks):
        net = build_denoiser(0)
        per_frame = evaluate_model(net, small_stacks[:2], "per_frame")
        fused = evaluate_model(net, small_stacks[:2], "fused")
        assert per_frame.count == 8 and fused.count == 2
        with pytest.raises(ValueError):
            evaluate_model(net, small_stacks[:1], "median")

    def test_input_metrics(self, small_stacks):
        assert evaluate_input(small_stacks[:1]).count == 4
        assert noisy_input_psnr(small_stacks) == pytest.approx(20.17, abs=0.5)
