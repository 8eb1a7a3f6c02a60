"""Self-gating from the k-space center sample of each spiral arm, cardiac
cycle detection, and binning of multi-orientation breath-hold data into
fully sampled segmented frames."""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter
from scipy.signal import butter, filtfilt, find_peaks

from . import nufft
from .trajectory import (density_compensation, density_weights_for_grid,
                         frame_positions)


@dataclass
class GatingSignal:
    dc_per_arm: np.ndarray      # detrended coil-combined |DC| per arm
    raw_dc: np.ndarray          # before detrending
    sample_times_ms: np.ndarray


@dataclass
class SegmentedSet:
    phase_count: int
    assignments: list           # per phase: dict (orientation, arm) -> (frame, arm)
    completeness: np.ndarray    # fraction of the orientation*arm union present
    images: np.ndarray          # per-phase adjoint recon, (P, G, G) real


def arm_times_ms(raw):
    """Acquisition time of every arm, frame-major order."""
    tr = raw.frame_dt_ms / raw.n_arms
    f = np.arange(raw.n_frames)[:, None]
    a = np.arange(raw.n_arms)[None, :]
    return (f * raw.frame_dt_ms + a * tr).ravel()


def extract_gating(raw, detrend_window_s=2.0):
    """Coil-combined magnitude of the k-space center sample per arm,
    detrended by a moving median."""
    k0 = raw.interleaves.base_arm.samples[0]
    if np.linalg.norm(k0) > 1e-9:
        raise ValueError("extract_gating: arms do not start at the k-space "
                         "center")
    dc = np.sqrt((np.abs(raw.samples[:, :, :, 0]) ** 2).sum(axis=1))
    dc = dc.ravel()  # frame-major, arm within frame
    times = arm_times_ms(raw)
    tr_ms = raw.frame_dt_ms / raw.n_arms
    win = max(3, int(round(detrend_window_s * 1000.0 / tr_ms)) | 1)
    trend = median_filter(dc, size=min(win, len(dc) | 1), mode="nearest")
    return GatingSignal(dc_per_arm=dc - trend, raw_dc=dc,
                        sample_times_ms=times)


def detect_cycles(signal, band_hz=(0.5, 3.0), min_peak_distance_s=0.4):
    """Cycle boundaries (ms) at the peaks of the band-passed gating signal."""
    x = signal.dc_per_arm
    if np.allclose(x, x[0]):
        raise ValueError("detect_cycles: gating signal is constant")
    dt_s = (signal.sample_times_ms[1] - signal.sample_times_ms[0]) / 1000.0
    fs = 1.0 / dt_s
    b, a = butter(2, [band_hz[0] / (fs / 2), band_hz[1] / (fs / 2)],
                  btype="band")
    filt = filtfilt(b, a, x)
    distance = max(1, int(round(min_peak_distance_s * fs)))
    peaks, _ = find_peaks(filt, distance=distance,
                          prominence=0.5 * np.std(filt))
    if len(peaks) < 2:
        raise ValueError("detect_cycles: fewer than 2 cycles detected; "
                         "acquire longer")
    return signal.sample_times_ms[peaks]


def bin_segmented(raw, cycles_ms, phase_count, oversampling=2.0,
                  kernel_width=6, extrapolate=True):
    """Pool arms across heartbeats into fully sampled segmented frames.

    Each arm is assigned to a cardiac phase by its fractional position
    within its cycle; per phase, arms accumulate across cycles until every
    schedule orientation is present (first occurrence wins). The pooled
    (orientation x arm) union is adjoint-gridded per phase. With
    `extrapolate`, one median-length cycle is assumed before the first and
    after the last detected boundary so the leading/trailing data are not
    discarded.
    """
    sched = raw.schedule
    n_o = sched.n_orientations
    n_arms = raw.n_arms
    cycles_ms = np.sort(np.asarray(cycles_ms, dtype=float))
    if len(cycles_ms) < 2:
        raise ValueError("bin_segmented: need at least one full cycle")
    if extrapolate:
        rr = float(np.median(np.diff(cycles_ms)))
        cycles_ms = np.concatenate([[cycles_ms[0] - rr], cycles_ms,
                                    [cycles_ms[-1] + rr]])

    times = arm_times_ms(raw).reshape(raw.n_frames, n_arms)
    assignments = [dict() for _ in range(phase_count)]
    for f in range(raw.n_frames):
        o = raw.frame_orientation(f)
        for a in range(n_arms):
            t = times[f, a]
            c = np.searchsorted(cycles_ms, t, side="right") - 1
            if c < 0 or c >= len(cycles_ms) - 1:
                continue  # outside complete cycles
            frac = (t - cycles_ms[c]) / (cycles_ms[c + 1] - cycles_ms[c])
            ph = min(int(frac * phase_count), phase_count - 1)
            assignments[ph].setdefault((o, a), (f, a))

    completeness = np.array([len(asg) / (n_o * n_arms)
                             for asg in assignments])
    missing = []
    for ph, asg in enumerate(assignments):
        absent = sorted({o for o in range(n_o)}
                        - {o for (o, _a) in asg})
        present_pairs = {(o, a) for (o, a) in asg}
        gap = [(o, a) for o in range(n_o) for a in range(n_arms)
               if (o, a) not in present_pairs]
        if gap:
            missing.append((ph, absent, len(gap)))
    if missing:
        detail = "; ".join(
            f"phase {ph}: {n} arm slots missing"
            + (f" (orientations {ab} absent)" if ab else "")
            for ph, ab, n in missing)
        raise ValueError("bin_segmented: incomplete phase coverage - "
                         + detail)

    G = raw.grid_size
    w_frame = density_weights_for_grid(
        density_compensation(raw.interleaves), G)
    images = np.empty((phase_count, G, G))
    for ph in range(phase_count):
        pos, data, wts = [], [], []
        for (o, a), (f, _a) in sorted(assignments[ph].items()):
            p = frame_positions(raw.interleaves,
                                float(sched.orientation_offsets[o]), G)[a]
            pos.append(p)
            data.append(raw.samples[f, :, a, :])
            wts.append(w_frame[a] / n_o)
        pos = np.concatenate(pos)
        data = np.concatenate([d for d in data], axis=1)  # (C, total)
        wts = np.concatenate(wts)
        gp = nufft.plan(nufft.wrap_positions(pos), G, oversampling,
                        kernel_width)
        wts = nufft.refine_density_weights(gp, wts)
        coil_imgs = np.stack([nufft.adjoint(data[c], gp, wts)
                              for c in range(raw.n_coils)])
        images[ph] = np.sqrt((np.abs(coil_imgs) ** 2).sum(axis=0))
    return SegmentedSet(phase_count=phase_count, assignments=assignments,
                        completeness=completeness, images=images)


def gating_report(signal, cycles_ms, segmented=None):
    """JSON-ready summary of the gating analysis."""
    spacings = np.diff(cycles_ms)
    report = {
        "n_arms": int(len(signal.dc_per_arm)),
        "n_cycles": int(len(cycles_ms) - 1),
        "cycle_boundaries_ms": [float(t) for t in cycles_ms],
        "mean_rr_ms": float(spacings.mean()) if len(spacings) else None,
    }
    if segmented is not None:
        report["phases"] = [
            {"phase": ph,
             "arm_count": len(segmented.assignments[ph]),
             "completeness": float(segmented.completeness[ph])}
            for ph in range(segmented.phase_count)]
    return report
