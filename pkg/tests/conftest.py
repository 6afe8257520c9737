import numpy as np
import pytest

from opdlab.noise import NoiseSpec, make_stack, procedural_images


def naive_conv2d(x, w, b, stride, padding):
    """Direct nested-loop cross-correlation, used as an independent oracle."""
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for bi in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                acc += xp[bi, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[bi, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_stacks():
    """Eight procedural 16x16 samples, m = 4, Gaussian sigma 25."""
    return [make_stack(img, NoiseSpec.gaussian(25), 4, 11, i, sid)
            for i, (sid, img) in enumerate(procedural_images(8, 16, 11))]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
