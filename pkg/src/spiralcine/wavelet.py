"""Orthogonal periodized 2D Daubechies wavelet transform.

The 4-tap Daubechies filter is orthogonal, so the multi-level periodized
transform is an exact isometry; this is what makes the l1 regularizer's
proximal step exact in the wavelet domain.
"""

import numpy as np

_SQRT3 = np.sqrt(3.0)
DB4_LOWPASS = np.array([1.0 + _SQRT3, 3.0 + _SQRT3,
                        3.0 - _SQRT3, 1.0 - _SQRT3]) / (4.0 * np.sqrt(2.0))
DB4_HIGHPASS = DB4_LOWPASS[::-1].copy()
DB4_HIGHPASS[1::2] *= -1.0


def _analysis_1d(x, axis):
    """One periodized analysis step along an axis: (approx, detail)."""
    x = np.moveaxis(x, axis, 0)
    n = x.shape[0]
    idx = (2 * np.arange(n // 2)[:, None] + np.arange(4)[None, :]) % n
    lo = np.tensordot(DB4_LOWPASS, x[idx], axes=(0, 1))
    hi = np.tensordot(DB4_HIGHPASS, x[idx], axes=(0, 1))
    return np.moveaxis(lo, 0, axis), np.moveaxis(hi, 0, axis)


def _synthesis_1d(lo, hi, axis):
    """Inverse of one periodized analysis step along an axis."""
    lo = np.moveaxis(lo, axis, 0)
    hi = np.moveaxis(hi, axis, 0)
    m = lo.shape[0]
    n = 2 * m
    out = np.zeros((n,) + lo.shape[1:], dtype=np.result_type(lo, hi))
    for k in range(4):
        idx = (2 * np.arange(m) + k) % n
        np.add.at(out, idx, DB4_LOWPASS[k] * lo + DB4_HIGHPASS[k] * hi)
    return np.moveaxis(out, 0, axis)


def forward2d(image, levels=3):
    """Multi-level 2D transform; coefficients packed in-place (approx block
    in the top-left corner of each level)."""
    n = image.shape[0]
    if image.shape[0] != image.shape[1]:
        raise ValueError("forward2d: image must be square")
    if n % (1 << levels):
        raise ValueError(f"forward2d: size {n} not divisible by "
                         f"2^{levels}")
    out = np.array(image, dtype=np.result_type(image, float), copy=True)
    size = n
    for _ in range(levels):
        block = out[:size, :size]
        lo_r, hi_r = _analysis_1d(block, 0)
        stacked = np.concatenate([lo_r, hi_r], axis=0)
        lo_c, hi_c = _analysis_1d(stacked, 1)
        out[:size, :size] = np.concatenate([lo_c, hi_c], axis=1)
        size //= 2
    return out


def inverse2d(coeffs, levels=3):
    """Inverse of forward2d."""
    n = coeffs.shape[0]
    out = np.array(coeffs, dtype=np.result_type(coeffs, float), copy=True)
    size = n >> (levels - 1)
    for _ in range(levels):
        block = out[:size, :size]
        half = size // 2
        stacked = _synthesis_1d(block[:, :half], block[:, half:], 1)
        out[:size, :size] = _synthesis_1d(stacked[:half], stacked[half:], 0)
        size *= 2
    return out
