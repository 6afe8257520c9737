import numpy as np
import pytest

from opdlab.losses import opd_loss
from opdlab.model import LAYER_PLAN, PARAMETER_COUNT, build_denoiser, forward, he_init
from opdlab.numerics import ShapeError, Tensor, grad_check, select


def test_parameter_count_matches_plan():
    # hand count: 16*1*9+16, 16*16*9+16, 32*16*9+32, 32*32*9+32, 16*32*9+16, 16*32*9+16, 1*16*9+1
    hand = 160 + 2320 + 4640 + 9248 + 4624 + 4624 + 145
    assert hand == PARAMETER_COUNT == 25_761
    assert build_denoiser(0).num_parameters() == hand


def test_parameter_order():
    names = [n for n, _ in build_denoiser(0).named_parameters()]
    assert names[:4] == ["enc1a.weight", "enc1a.bias", "enc1b.weight", "enc1b.bias"]
    assert names[-1] == "head.bias"
    assert len(names) == 2 * len(LAYER_PLAN)


def test_same_seed_same_weights():
    a, b = build_denoiser(3), build_denoiser(3)
    for p, q in zip(a.parameters(), b.parameters()):
        assert p.data.tobytes() == q.data.tobytes()
    c = build_denoiser(4)
    assert not np.array_equal(a.weights["enc2"].data, c.weights["enc2"].data)


def test_he_init_statistics():
    w = he_init((4096, 1, 3, 3), np.random.default_rng(0), np.float64).data
    assert abs(w.mean()) < 0.01
    assert w.std() == pytest.approx(np.sqrt(2 / 9), rel=0.02)
    assert not build_denoiser(0).biases["down"].data.any()


def test_output_shape_and_dtype():
    net = build_denoiser(0)
    out = net(Tensor(np.zeros((3, 1, 64, 64), np.float32)))
    assert out.shape == (3, 1, 64, 64)
    assert out.dtype == np.float32


def test_rejects_odd_extent_and_channels():
    net = build_denoiser(0)
    with pytest.raises(ShapeError, match="pad"):
        net(Tensor(np.zeros((1, 1, 15, 16), np.float32)))
    with pytest.raises(ShapeError):
        net(Tensor(np.zeros((1, 2, 16, 16), np.float32)))


def test_no_cross_sample_leakage():
    net = build_denoiser(1, np.float64)
    rng = np.random.default_rng(0)
    x = rng.random((4, 1, 16, 16))
    alone = forward(net, Tensor(x[1:2])).data
    batched = forward(net, Tensor(x)).data[1:2]
    np.testing.assert_allclose(batched, alone, rtol=0, atol=1e-12)
    y = x.copy()
    y[0] = rng.random((1, 16, 16))
    np.testing.assert_allclose(forward(net, Tensor(y)).data[1:], forward(net, Tensor(x)).data[1:], atol=1e-12)


def test_period_two_translation_covariance():
    net = build_denoiser(2, np.float64)
    img = np.random.default_rng(1).random((1, 1, 48, 48))
    shifted = np.roll(img, (2, 4), axis=(2, 3))
    a = forward(net, Tensor(img)).data[0, 0]
    b = forward(net, Tensor(shifted)).data[0, 0]
    # away from the zero-padded border the outputs move with the input
    np.testing.assert_allclose(b[18:30, 20:32], a[16:28, 16:28], atol=1e-12)


def test_float64_copy_matches_float32():
    net = build_denoiser(5)
    x = np.random.default_rng(2).random((1, 1, 16, 16)).astype(np.float32)
    a = net(Tensor(x)).data
    b = net.astype(np.float64)(Tensor(x.astype(np.float64))).data
    np.testing.assert_allclose(a, b, atol=1e-5)


def test_full_model_gradient_through_opd_loss():
    net = build_denoiser(6, np.float64)
    rng = np.random.default_rng(3)
    clean = rng.random((8, 8))
    frames = clean + 0.1 * rng.standard_normal((3, 8, 8))
    x = Tensor(frames[:, None])

    def loss():
        y = forward(net, x)
        return opd_loss([select(y, j) for j in range(3)], [f[None, None] for f in frames]).total

    err = grad_check(loss, net.parameters(), step=1e-6, coords=6, rng=np.random.default_rng(0))
    assert err <= 1e-5
