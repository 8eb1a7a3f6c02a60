"""Ventricular volume curves, ED/ES detection, and ejection fraction."""

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import find_peaks

LABEL_BACKGROUND = 0
LABEL_LV = 1
LABEL_MYO = 2
LABEL_RV = 3


@dataclass
class VolumeCurve:
    """Per-frame LV blood-pool volume in mL."""
    volumes_ml: np.ndarray
    frame_dt_ms: float
    slice_volumes_ml: np.ndarray = field(default=None)  # (n_slices, n_frames)

    def __len__(self):
        return len(self.volumes_ml)


def mask_to_volume(masks, pixel_size_mm, slice_thickness_mm, frame_dt_ms=48.0,
                   label=LABEL_LV):
    """Convert per-slice, per-frame label masks to an LV volume curve.

    masks: array (n_slices, n_frames, H, W) or (n_frames, H, W) for a single
    slice. Volume per frame is the label pixel count times pixel area times
    slice thickness, summed over slices, reported in mL.
    """
    masks = np.asarray(masks)
    if masks.size == 0:
        raise ValueError("mask_to_volume: empty mask set")
    if masks.ndim == 3:
        masks = masks[None]
    if masks.ndim != 4:
        raise ValueError("mask_to_volume: expected (slices, frames, H, W)")
    counts = (masks == label).sum(axis=(2, 3)).astype(float)
    voxel_mm3 = pixel_size_mm ** 2 * slice_thickness_mm
    slice_volumes = counts * voxel_mm3 / 1000.0  # mm^3 -> mL
    return VolumeCurve(volumes_ml=slice_volumes.sum(axis=0),
                       frame_dt_ms=float(frame_dt_ms),
                       slice_volumes_ml=slice_volumes)


def detect_extrema(curve, min_prominence_frac=0.05, min_separation_s=0.4):
    """Detect per-cycle end-diastolic maxima and end-systolic minima.

    Local maxima are ED candidates and local minima ES candidates, with a
    minimum prominence of 5% of the curve range and a minimum separation of
    0.4 s by default. The returned sequences alternate strictly (when two
    extrema of the same kind are adjacent, only the more extreme survives).

    Returns (edv_list, esv_list, ed_frames, es_frames).
    """
    v = np.asarray(curve.volumes_ml, dtype=float)
    rng = float(v.max() - v.min())
    if rng <= 0:
        raise ValueError("detect_extrema: constant volume curve")
    distance = max(1, int(round(min_separation_s * 1000.0 / curve.frame_dt_ms)))
    prominence = min_prominence_frac * rng
    maxima, _ = find_peaks(v, prominence=prominence, distance=distance)
    minima, _ = find_peaks(-v, prominence=prominence, distance=distance)
    if len(maxima) == 0 or len(minima) == 0:
        raise ValueError("detect_extrema: no alternating extrema found")

    # enforce strict max/min alternation
    events = sorted([(f, +1) for f in maxima] + [(f, -1) for f in minima])
    kept = []
    for f, kind in events:
        if kept and kept[-1][1] == kind:
            prev_f = kept[-1][0]
            better = v[f] > v[prev_f] if kind == +1 else v[f] < v[prev_f]
            if better:
                kept[-1] = (f, kind)
        else:
            kept.append((f, kind))
    ed_frames = [f for f, kind in kept if kind == +1]
    es_frames = [f for f, kind in kept if kind == -1]
    return (list(v[ed_frames]), list(v[es_frames]), ed_frames, es_frames)


def ejection_fraction(edv_list, esv_list):
    """Ejection fraction in percent from per-cycle EDV/ESV candidates.

    Medians are taken across cycles; EF = 100 * (EDV - ESV) / EDV.
    Returns (ef_percent, median_edv, median_esv).
    """
    if len(edv_list) == 0 or len(esv_list) == 0:
        raise ValueError("ejection_fraction: empty EDV or ESV list")
    edv = float(np.median(edv_list))
    esv = float(np.median(esv_list))
    if edv == 0:
        raise ValueError("ejection_fraction: median EDV is zero")
    return 100.0 * (edv - esv) / edv, edv, esv
