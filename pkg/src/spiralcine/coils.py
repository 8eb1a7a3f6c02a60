"""Coil-sensitivity estimation: temporal-average gridding followed by
adaptive (covariance-eigenvector) map estimation."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter, zoom

from . import nufft
from .trajectory import (density_compensation, density_weights_for_grid,
                         frame_positions)


@dataclass
class SensitivityMaps:
    maps: np.ndarray   # (n_coils, H, W) complex, rss-normalized inside mask
    mask: np.ndarray   # (H, W) bool


def temporal_average(raw, oversampling=2.0, kernel_width=6):
    """Adjoint-grid the pooled arms of all frames into one image per coil.

    Frames sharing a schedule orientation are averaged in k-space, then a
    single density-weighted adjoint NUFFT over the union trajectory of all
    orientations produces the per-coil average image. Returns (maps, plan)
    where maps is (n_coils, G, G).
    """
    sched = raw.schedule
    if raw.n_frames < sched.n_orientations * sched.frames_per_orientation:
        raise ValueError(
            "temporal_average: acquisition shorter than one full orientation "
            f"cycle ({raw.n_frames} frames, need at least "
            f"{sched.n_orientations * sched.frames_per_orientation})")
    G = raw.grid_size
    n_o = sched.n_orientations

    pooled = []
    positions = []
    for o in range(n_o):
        frames = [f for f in range(raw.n_frames)
                  if raw.frame_orientation(f) == o]
        pooled.append(raw.samples[frames].mean(axis=0))
        pos = frame_positions(raw.interleaves,
                              float(sched.orientation_offsets[o]),
                              G).reshape(-1, 2)
        positions.append(pos)
    pooled = np.stack(pooled)                   # (n_o, C, A, S)
    positions = np.concatenate(positions)

    w_frame = density_weights_for_grid(
        density_compensation(raw.interleaves), G).ravel()
    weights = np.tile(w_frame / n_o, n_o)

    union_plan = nufft.plan(nufft.wrap_positions(positions), G,
                            oversampling, kernel_width)
    weights = nufft.refine_density_weights(union_plan, weights)
    images = np.empty((raw.n_coils, G, G), dtype=np.complex128)
    for c in range(raw.n_coils):
        data = pooled[:, c].reshape(-1)
        images[c] = nufft.adjoint(data, union_plan, weights)
    return images, union_plan


def dominant_eigenvector(R, tol=1e-10, max_iter=200):
    """Dominant eigenvector(s) of Hermitian matrices by power iteration.

    R has shape (..., C, C); the start vector is all-ones. Returns unit
    vectors of shape (..., C).
    """
    C = R.shape[-1]
    e = np.ones(R.shape[:-1], dtype=complex)
    e /= np.sqrt(C)
    for _ in range(max_iter):
        nxt = np.einsum("...ij,...j->...i", R, e)
        norm = np.linalg.norm(nxt, axis=-1, keepdims=True)
        nxt = np.where(norm > 0, nxt / np.where(norm == 0, 1, norm), e)
        # phase-align iterates before the convergence check
        ph = np.einsum("...i,...i->...", np.conj(e), nxt)
        ph = np.where(np.abs(ph) > 0, ph / np.abs(np.where(ph == 0, 1, ph)),
                      1.0)
        nxt = nxt * np.conj(ph)[..., None]
        delta = np.max(np.abs(nxt - e))
        e = nxt
        if delta < tol:
            break
    return e


def walsh_maps(coil_images, block_size=8, target_resolution_divisor=4,
               support_frac=1e-3):
    """Adaptive coil-map estimation from per-coil images.

    Per low-resolution pixel the coil-by-coil sample covariance over a local
    block is formed; its dominant eigenvector (phase-anchored to coil 0) is
    the sensitivity estimate. Estimation runs on a grid downsampled by
    `target_resolution_divisor` and is interpolated back; maps are
    root-sum-of-squares normalized inside the support mask.
    """
    imgs = np.asarray(coil_images)
    if imgs.ndim != 3:
        raise ValueError("walsh_maps: expected (n_coils, H, W)")
    if block_size < 2:
        raise ValueError("walsh_maps: block_size must be >= 2")
    C, G, _ = imgs.shape
    div = int(target_resolution_divisor)
    g = max(1, G // div)
    low = imgs.reshape(C, g, G // g, g, G // g).mean(axis=(2, 4))

    # odd window: an even uniform filter would shift the estimate by half
    # a low-resolution pixel
    win = max(1, int(round(block_size / (G / g))) // 2 * 2 + 1)
    R = np.empty((g, g, C, C), dtype=complex)
    for i in range(C):
        for j in range(i, C):
            prod = low[i] * np.conj(low[j])
            sm = (uniform_filter(prod.real, size=win, mode="nearest")
                  + 1j * uniform_filter(prod.imag, size=win, mode="nearest"))
            R[..., i, j] = sm
            R[..., j, i] = np.conj(sm)

    power = np.einsum("...ii->...", R).real
    valid = power > support_frac * power.max()

    e = dominant_eigenvector(R)
    # anchor the global phase per pixel to coil 0
    ref = e[..., 0]
    phase = np.where(np.abs(ref) > 0,
                     ref / np.abs(np.where(ref == 0, 1, ref)), 1.0)
    e = e * np.conj(phase)[..., None]
    e[~valid] = 0.0

    maps = np.empty((C, G, G), dtype=complex)
    scale = G / g
    for c in range(C):
        maps[c] = (zoom(e[..., c].real, scale, order=3, mode="nearest",
                        grid_mode=True)
                   + 1j * zoom(e[..., c].imag, scale, order=3,
                               mode="nearest", grid_mode=True))
    mask = zoom(valid.astype(float), scale, order=0, mode="nearest",
                grid_mode=True) > 0.5

    rss = np.sqrt((np.abs(maps) ** 2).sum(axis=0))
    ok = mask & (rss > 0)
    maps[:, ok] /= rss[ok]
    maps[:, ~ok] = 0.0
    return SensitivityMaps(maps=maps, mask=ok)
