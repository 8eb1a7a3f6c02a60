import numpy as np

from spiralcine import wavelet


def test_orthogonality_isometry():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
    c = wavelet.forward2d(x, levels=3)
    assert abs(np.linalg.norm(c) - np.linalg.norm(x)) \
        < 1e-9 * np.linalg.norm(x)


def test_perfect_reconstruction():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((32, 32)) + 1j * rng.standard_normal((32, 32))
    y = wavelet.inverse2d(wavelet.forward2d(x, levels=2), levels=2)
    assert np.abs(y - x).max() < 1e-10


def test_linearity():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((16, 16))
    y = rng.standard_normal((16, 16))
    lhs = wavelet.forward2d(2.0 * x + 3.0 * y, levels=1)
    rhs = 2.0 * wavelet.forward2d(x, levels=1) \
        + 3.0 * wavelet.forward2d(y, levels=1)
    assert np.abs(lhs - rhs).max() < 1e-10


def test_constant_image_energy_in_approximation():
    x = np.ones((32, 32))
    c = wavelet.forward2d(x, levels=3)
    detail = c.copy()
    detail[:4, :4] = 0.0
    assert np.linalg.norm(detail) < 1e-9 * np.linalg.norm(c)
