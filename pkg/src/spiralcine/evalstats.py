"""Agreement and image-quality metrics."""

import numpy as np


def bland_altman(a, b):
    """Bland-Altman agreement between two paired measurement series.

    Returns (bias, loa_low, loa_high) where bias is the mean of a - b and
    the limits of agreement are bias +/- 1.96 times the sample standard
    deviation (n - 1 denominator) of the differences.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("bland_altman: input lengths differ "
                         f"({a.shape} vs {b.shape})")
    if a.size < 2:
        raise ValueError("bland_altman: need at least 2 paired values")
    d = a - b
    bias = float(np.mean(d))
    sd = float(np.std(d, ddof=1))
    return bias, bias - 1.96 * sd, bias + 1.96 * sd


def nrmse(x, ref):
    """Root-mean-square error of x vs ref, normalized by the norm of ref."""
    x = np.asarray(x)
    ref = np.asarray(ref)
    if x.shape != ref.shape:
        raise ValueError(f"nrmse: shape mismatch {x.shape} vs {ref.shape}")
    denom = np.linalg.norm(ref.ravel())
    if denom == 0:
        raise ValueError("nrmse: reference is identically zero")
    return float(np.linalg.norm((x - ref).ravel()) / denom)


def psnr(x, ref):
    """Peak signal-to-noise ratio in dB, peak taken from ref."""
    x = np.asarray(x)
    ref = np.asarray(ref)
    if x.shape != ref.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {ref.shape}")
    mse = float(np.mean(np.abs(x - ref) ** 2))
    peak = float(np.max(np.abs(ref)))
    if mse == 0:
        return float("inf")
    if peak == 0:
        raise ValueError("psnr: reference is identically zero")
    return float(10.0 * np.log10(peak ** 2 / mse))


def dice(mask_a, mask_b, label):
    """Dice overlap of one label between two label maps.

    Defined as 1.0 when the label is absent from both masks.
    """
    mask_a = np.asarray(mask_a)
    mask_b = np.asarray(mask_b)
    if mask_a.shape != mask_b.shape:
        raise ValueError(
            f"dice: shape mismatch {mask_a.shape} vs {mask_b.shape}")
    a = mask_a == label
    b = mask_b == label
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)
