import json
import math

import numpy as np
import pytest

from opdlab.evaluation import psnr
from opdlab.noise import (FrameStack, NoiseSpec, add_gaussian, add_poisson, add_speckle, frame_rng, load_dataset,
                          make_stack, manifest_checksum, procedural_image, read_frames_bin, synth_dataset,
                          write_frames_bin)

N = 10**6


def gen(seed=0):
    return np.random.default_rng(seed)


class TestGaussian:
    def test_zero_sigma_is_identity(self):
        x = gen().random((8, 8))
        np.testing.assert_array_equal(add_gaussian(x, 0, gen()), x)

    def test_residual_moments(self):
        x = np.full(N, 0.5)
        r = add_gaussian(x, 25, gen(1)) - x
        assert abs(r.mean()) <= 0.001
        assert abs(r.std() - 25 / 255) <= 0.002

    def test_psnr_closed_form(self):
        x = np.full((256, 256), 0.5)
        expected = 10 * math.log10((255 / 25) ** 2)
        assert expected == pytest.approx(20.17, abs=0.005)
        assert psnr(add_gaussian(x, 25, gen(2)), x) == pytest.approx(expected, abs=0.15)


class TestPoisson:
    def test_zero_stays_zero(self):
        assert not add_poisson(np.zeros((16, 16)), 30, gen()).any()

    @pytest.mark.parametrize("level", [0.2, 0.5, 0.8])
    def test_mean_and_variance(self, level):
        out = add_poisson(np.full(N, level), 30, gen(3))
        assert abs(out.mean() - level) <= 0.001
        assert out.var() == pytest.approx(level / 30, rel=0.05)

    def test_large_lambda_approaches_clean(self):
        x = gen(4).random((64, 64))
        assert psnr(add_poisson(x, 1e6, gen(5)), x) > 55

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            add_poisson(np.array([1.5]), 30, gen())


class TestSpeckle:
    def test_many_looks_approaches_clean(self):
        x = gen(6).random((64, 64))
        np.testing.assert_allclose(add_speckle(x, 1e6, gen(7)), x, atol=0.01)

    def test_zero_stays_zero(self):
        assert not add_speckle(np.zeros(100), 4, gen()).any()

    def test_moments(self):
        out = add_speckle(np.full(N, 0.5), 4, gen(8))
        assert abs(out.mean() - 0.5) <= 0.002
        assert out.var() == pytest.approx(0.0625, rel=0.05)


class TestNoiseSpec:
    def test_exactly_one_parameter(self):
        with pytest.raises(ValueError):
            NoiseSpec("gaussian", sigma=25, lam=30)
        with pytest.raises(ValueError):
            NoiseSpec("poisson")

    @pytest.mark.parametrize("kwargs", [{"kind": "gaussian", "sigma": -1}, {"kind": "poisson", "lam": 0},
                                        {"kind": "speckle", "looks": 0.5}])
    def test_ranges(self, kwargs):
        with pytest.raises(ValueError):
            NoiseSpec(**kwargs)

    def test_round_trip(self):
        for spec in (NoiseSpec.gaussian(25), NoiseSpec.poisson(30), NoiseSpec.speckle(4)):
            assert NoiseSpec.from_dict(spec.to_dict()) == spec


class TestMakeStack:
    def test_zero_noise_frames_equal_clean(self):
        clean = procedural_image(32, gen(9))
        stack = make_stack(clean, NoiseSpec.gaussian(0), 8, 1, 0)
        for f in stack.frames:
            np.testing.assert_array_equal(f, clean.astype(np.float32))

    def test_deterministic(self):
        clean = procedural_image(32, gen(10))
        a = make_stack(clean, NoiseSpec.gaussian(25), 4, 5, 3)
        b = make_stack(clean, NoiseSpec.gaussian(25), 4, 5, 3)
        assert a.frames.tobytes() == b.frames.tobytes()

    def test_generation_order_irrelevant(self):
        clean = np.full((8, 8), 0.5)
        direct = add_gaussian(clean, 25, frame_rng(5, 3, 2)).astype(np.float32)
        np.testing.assert_array_equal(make_stack(clean, NoiseSpec.gaussian(25), 4, 5, 3).frames[2], direct)

    def test_average_residual_shrinks_by_sqrt_m(self):
        clean = np.full((512, 512), 0.5)
        stack = make_stack(clean, NoiseSpec.gaussian(25), 8, 2, 0)
        resid = stack.frames.mean(axis=0) - clean
        assert resid.std() == pytest.approx((25 / 255) / math.sqrt(8), rel=0.05)

    def test_frames_are_independent(self):
        clean = np.full((400, 250), 0.5)  # 10^5 pixels
        stack = make_stack(clean, NoiseSpec.gaussian(25), 4, 3, 0)
        resid = (stack.frames - clean.astype(np.float32)).reshape(4, -1)
        corr = np.corrcoef(resid)
        off = corr[~np.eye(4, dtype=bool)]
        assert np.abs(off).max() <= 0.01

    def test_m_below_two_rejected(self):
        with pytest.raises(ValueError):
            make_stack(np.zeros((4, 4)), NoiseSpec.gaussian(25), 1, 0, 0)
        with pytest.raises(ValueError):
            FrameStack(np.zeros((1, 4, 4)))


class TestSynthDataset:
    def test_layout_and_counts(self, tmp_path):
        manifest = synth_dataset(tmp_path, NoiseSpec.gaussian(25), m=2, seed=3, count=4, size=16)
        assert len(manifest["samples"]) == 4
        assert len(list(tmp_path.glob("*/frame_*.png"))) == 8
        assert len(list(tmp_path.glob("*/clean.png"))) == 4
        on_disk = json.loads((tmp_path / "manifest.json").read_text())
        assert on_disk["m"] == 2 and on_disk["noise"] == {"kind": "gaussian", "sigma": 25.0}
        assert {"id", "h", "w", "has_clean"} <= set(on_disk["samples"][0])

    def test_regeneration_is_identical(self, tmp_path):
        synth_dataset(tmp_path / "a", NoiseSpec.poisson(30), m=3, seed=9, count=3, size=16)
        synth_dataset(tmp_path / "b", NoiseSpec.poisson(30), m=3, seed=9, count=3, size=16)
        assert manifest_checksum(tmp_path / "a") == manifest_checksum(tmp_path / "b")

    def test_per_sample_psnr(self, tmp_path):
        synth_dataset(tmp_path, NoiseSpec.gaussian(25), m=2, seed=1, count=4, size=64)
        for stack in load_dataset(tmp_path):
            for frame in stack.frames:
                assert psnr(frame, stack.clean) == pytest.approx(20.17, abs=0.5)

    def test_float_binary_header_and_unclipped_values(self, tmp_path):
        synth_dataset(tmp_path, NoiseSpec.gaussian(50), m=2, seed=1, count=1, size=16)
        raw = (tmp_path / "s0000" / "frames_f32.bin").read_bytes()
        assert raw[:4] == b"OPDF"
        assert list(np.frombuffer(raw[4:20], "<u4")) == [1, 2, 16, 16]
        frames = read_frames_bin(tmp_path / "s0000" / "frames_f32.bin")
        assert frames.min() < 0 or frames.max() > 1  # noise at sigma 50 escapes [0, 1]

    def test_loaded_clean_matches_generated(self, tmp_path):
        synth_dataset(tmp_path, NoiseSpec.gaussian(25), m=2, seed=4, count=2, size=16)
        stacks = load_dataset(tmp_path)
        fresh = make_stack(procedural_image(16, np.random.default_rng(np.random.SeedSequence([4, 0xC1EA, 1]))),
                           NoiseSpec.gaussian(25), 2, 4, 1)
        np.testing.assert_array_equal(stacks[1].clean, fresh.clean)
        np.testing.assert_array_equal(stacks[1].frames, fresh.frames)

    def test_directory_source_skips_unreadable(self, tmp_path):
        from PIL import Image

        src = tmp_path / "src"
        src.mkdir()
        Image.fromarray((np.random.default_rng(0).random((40, 40, 3)) * 255).astype(np.uint8)).save(src / "a.png")
        (src / "broken.png").write_bytes(b"not an image")
        manifest = synth_dataset(tmp_path / "out", NoiseSpec.gaussian(10), m=2, seed=0, count=5, size=32,
                                 clean_source=src)
        assert [s["id"] for s in manifest["samples"]] == ["a"]

    def test_empty_source_fails(self, tmp_path):
        (tmp_path / "src").mkdir()
        with pytest.raises(RuntimeError):
            synth_dataset(tmp_path / "out", NoiseSpec.gaussian(10), count=2, size=16, clean_source=tmp_path / "src")

    def test_frames_bin_round_trip(self, tmp_path):
        frames = np.random.default_rng(0).standard_normal((3, 4, 6)).astype(np.float32)
        write_frames_bin(tmp_path / "f.bin", frames)
        np.testing.assert_array_equal(read_frames_bin(tmp_path / "f.bin"), frames)
