"""Analytic dynamic beating-heart phantom and multi-coil spiral k-space
simulation.

The phantom is a stack of short-axis slices with piecewise-constant tissue
intensities (blood 1.0, myocardium 0.35, chest wall 0.6, fat ring 0.8,
background 0) and a 1-pixel Gaussian edge blur. The LV endocardial radius
follows a raised cosine between its end-diastolic and end-systolic values;
the myocardial wall conserves its area per slice, so it thickens at
systole.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from . import nufft
from .trajectory import frame_positions
from .volumetry import LABEL_LV, LABEL_MYO, LABEL_RV

INTENSITY_BLOOD = 1.0
INTENSITY_MYO = 0.35
INTENSITY_CHEST = 0.6
INTENSITY_FAT = 0.8

WALL_THICKNESS_ED_MM = 8.0
APEX_SCALE = 0.35


@dataclass
class PhantomConfig:
    grid_size: int = 128
    pixel_size_mm: float = 1.29
    n_slices: int = 10
    slice_thickness_mm: float = 8.0
    heart_period_ms: float = 1000.0
    n_frames: int = 40
    frame_dt_ms: float = 48.0
    lv_radius_ed_mm: float = 22.0
    lv_radius_es_mm: float = 13.9
    arrhythmia_jitter: float = 0.0
    breathing_amplitude_mm: float = 0.0
    seed: int = 0

    def __post_init__(self):
        extent = self.grid_size * self.pixel_size_mm / 2.0
        if not (0 < self.lv_radius_es_mm < self.lv_radius_ed_mm < extent):
            raise ValueError(
                "PhantomConfig: need 0 < lv_radius_es < lv_radius_ed < "
                f"grid extent/2 ({extent:g} mm)")
        if self.frame_dt_ms <= 0:
            raise ValueError("PhantomConfig: frame_dt must be positive")
        if self.heart_period_ms < 2 * self.frame_dt_ms:
            raise ValueError("PhantomConfig: heart_period must be at least "
                             "2 * frame_dt")

    @classmethod
    def for_ejection_fraction(cls, ef_percent, **kwargs):
        """Config whose analytic LV volume curve has the given EF (radii are
        related by r_es = r_ed * sqrt(1 - EF))."""
        cfg = cls(**kwargs)
        cfg.lv_radius_es_mm = cfg.lv_radius_ed_mm * float(
            np.sqrt(1.0 - ef_percent / 100.0))
        return cfg


@dataclass
class DynamicPhantom:
    images: np.ndarray              # (n_slices, n_frames, H, W) float
    masks: np.ndarray               # (n_slices, n_frames, H, W) uint8
    true_volume_curve: np.ndarray   # mL per frame, summed over slices
    cycle_boundaries: np.ndarray    # frame indices of cycle starts
    cycle_lengths_ms: np.ndarray    # realized per-cycle lengths
    config: PhantomConfig


@dataclass
class CoilSet:
    n_coils: int
    maps: np.ndarray                # (n_coils, H, W) complex


@dataclass
class RawAcquisition:
    """Multi-coil spiral k-space samples, [frame][coil][arm][sample]."""
    samples: np.ndarray
    interleaves: object             # InterleaveSet
    schedule: object                # RotationSchedule
    grid_size: int
    frame_dt_ms: float
    noise_sigma: float
    seed: int

    @property
    def n_frames(self):
        return self.samples.shape[0]

    @property
    def n_coils(self):
        return self.samples.shape[1]

    @property
    def n_arms(self):
        return self.samples.shape[2]

    def frame_offset(self, f):
        o = (f // self.schedule.frames_per_orientation) \
            % self.schedule.n_orientations
        return float(self.schedule.orientation_offsets[o])

    def frame_orientation(self, f):
        return (f // self.schedule.frames_per_orientation) \
            % self.schedule.n_orientations


def _cycle_lengths(config, total_ms):
    rng = np.random.default_rng(config.seed)
    lengths = []
    t = 0.0
    while t < total_ms:
        jitter = config.arrhythmia_jitter * rng.uniform(-1.0, 1.0)
        L = config.heart_period_ms * (1.0 + jitter)
        lengths.append(L)
        t += L
    return np.array(lengths)


def lv_radius(config, frac):
    """LV endocardial radius (mm) at fractional cycle position, raised
    cosine with ED at frac = 0 and ES at frac = 0.5."""
    r_ed, r_es = config.lv_radius_ed_mm, config.lv_radius_es_mm
    return r_es + (r_ed - r_es) * 0.5 * (1.0 + np.cos(2 * np.pi * frac))


def cycle_position(config, cycle_lengths_ms, t_ms):
    """(cycle index, fractional position) of an absolute time."""
    starts = np.concatenate([[0.0], np.cumsum(cycle_lengths_ms)])
    c = int(np.searchsorted(starts, t_ms, side="right") - 1)
    c = min(c, len(cycle_lengths_ms) - 1)
    return c, (t_ms - starts[c]) / cycle_lengths_ms[c]


def slice_scale(config, s):
    """Linear base-to-apex scaling of the in-plane heart radii."""
    if config.n_slices == 1:
        return 1.0
    return 1.0 - (1.0 - APEX_SCALE) * s / (config.n_slices - 1)


def generate_phantom(config):
    """Render the dynamic phantom: images, masks, and the ground-truth LV
    volume curve (pixel-counted, consistent with the masks)."""
    G = config.grid_size
    px = config.pixel_size_mm
    extent = G * px / 2.0

    heart_center = np.array([-0.05, 0.04]) * G * px  # mm, (x, y) from center
    wall_area = np.pi * ((config.lv_radius_ed_mm + WALL_THICKNESS_ED_MM) ** 2
                         - config.lv_radius_ed_mm ** 2)
    r_out_max = np.sqrt(config.lv_radius_ed_mm ** 2 + wall_area / np.pi)
    reach = (np.max(np.abs(heart_center)) + 2.0 * r_out_max
             + config.breathing_amplitude_mm)
    if reach > extent:
        raise ValueError(
            f"generate_phantom: heart geometry (reach {reach:.1f} mm) "
            f"exceeds the grid half-extent ({extent:.1f} mm)")

    total_ms = config.n_frames * config.frame_dt_ms
    cycle_lengths = _cycle_lengths(config, total_ms)
    starts = np.concatenate([[0.0], np.cumsum(cycle_lengths)])
    boundaries = np.round(starts[starts < total_ms]
                          / config.frame_dt_ms).astype(int)
    breath_period = 10.0 * config.heart_period_ms

    coords = (np.arange(G) - G / 2.0 + 0.5) * px
    xg, yg = np.meshgrid(coords, coords)

    body_a, body_b = 0.44 * G * px, 0.36 * G * px
    body = (xg / body_a) ** 2 + (yg / body_b) ** 2
    body_mask = body <= 1.0
    fat_mask = body_mask & (body > 0.88)

    images = np.zeros((config.n_slices, config.n_frames, G, G))
    masks = np.zeros((config.n_slices, config.n_frames, G, G), dtype=np.uint8)

    for f in range(config.n_frames):
        t = f * config.frame_dt_ms
        _, frac = cycle_position(config, cycle_lengths, t)
        r_in = lv_radius(config, frac)
        breath = config.breathing_amplitude_mm * np.sin(
            2 * np.pi * t / breath_period)
        cx, cy = heart_center[0], heart_center[1] + breath
        dx, dy = xg - cx, yg - cy
        d2 = dx * dx + dy * dy
        for s in range(config.n_slices):
            sc = slice_scale(config, s)
            r_lv = r_in * sc
            r_epi = np.sqrt(r_lv ** 2 + wall_area * sc ** 2 / np.pi)
            lv = d2 <= r_lv ** 2
            myo = (d2 <= r_epi ** 2) & ~lv
            r_rv = 0.9 * r_epi
            rv_cx, rv_cy = cx - 0.95 * r_epi, cy
            rv = (((xg - rv_cx) ** 2 + (yg - rv_cy) ** 2 <= r_rv ** 2)
                  & (d2 > r_epi ** 2))

            img = np.zeros((G, G))
            img[body_mask] = INTENSITY_CHEST
            img[fat_mask] = INTENSITY_FAT
            img[rv] = INTENSITY_BLOOD
            img[myo] = INTENSITY_MYO
            img[lv] = INTENSITY_BLOOD
            images[s, f] = gaussian_filter(img, sigma=1.0)

            m = np.zeros((G, G), dtype=np.uint8)
            m[rv] = LABEL_RV
            m[myo] = LABEL_MYO
            m[lv] = LABEL_LV
            masks[s, f] = m

    lv_counts = (masks == LABEL_LV).sum(axis=(2, 3))
    volume = lv_counts.sum(axis=0) * px ** 2 * config.slice_thickness_mm / 1e3

    return DynamicPhantom(images=images, masks=masks,
                          true_volume_curve=volume,
                          cycle_boundaries=boundaries,
                          cycle_lengths_ms=cycle_lengths,
                          config=config)


def generate_coils(n_coils=8, grid_size=128, seed=0, uniform=False):
    """Synthetic coil sensitivities: one complex Gaussian lobe per coil,
    centered on the grid border, with a smooth linear phase."""
    if n_coils < 1:
        raise ValueError("generate_coils: n_coils must be >= 1")
    G = grid_size
    if uniform:
        return CoilSet(n_coils=n_coils,
                       maps=np.ones((n_coils, G, G), dtype=complex))
    rng = np.random.default_rng(seed)
    coords = np.arange(G) - G / 2.0 + 0.5
    xg, yg = np.meshgrid(coords, coords)
    sigma = 0.55 * G
    maps = np.empty((n_coils, G, G), dtype=complex)
    for c in range(n_coils):
        ang = 2 * np.pi * c / n_coils + rng.uniform(-0.1, 0.1)
        cx, cy = 0.55 * G * np.cos(ang), 0.55 * G * np.sin(ang)
        mag = (0.9 + 0.2 * rng.uniform()) * np.exp(
            -((xg - cx) ** 2 + (yg - cy) ** 2) / (2 * sigma ** 2))
        slope = rng.uniform(-np.pi, np.pi, size=2) / G
        phase = slope[0] * xg + slope[1] * yg + rng.uniform(0, 2 * np.pi)
        maps[c] = mag * np.exp(1j * phase)
    return CoilSet(n_coils=n_coils, maps=maps)


def frame_plans(interleaves, schedule, grid_size, oversampling=2.0,
                kernel_width=6):
    """One gridding plan per schedule orientation (reused across frames)."""
    plans = []
    for o in range(schedule.n_orientations):
        pos = frame_positions(interleaves,
                              float(schedule.orientation_offsets[o]),
                              grid_size).reshape(-1, 2)
        plans.append(nufft.plan(nufft.wrap_positions(pos), grid_size,
                                oversampling, kernel_width))
    return plans


def simulate_kspace(phantom, coils, interleaves, schedule, noise_sigma=0.0,
                    seed=0, slice_index=0, n_frames=None):
    """Forward-simulate the multi-coil spiral acquisition of one slice.

    Per frame, the coil-weighted image is pushed through the forward NUFFT
    along the arms of the frame's schedule orientation; complex white noise
    with std = noise_sigma * mean |signal| is added. The first sample of
    every arm is the k-space center, so the acquisition carries a
    self-gating DC signal.
    """
    G = phantom.config.grid_size
    if coils.maps.shape[1] != G:
        raise ValueError("simulate_kspace: coil grid does not match phantom "
                         f"({coils.maps.shape[1]} vs {G})")
    if n_frames is None:
        n_frames = phantom.config.n_frames
    if n_frames > phantom.config.n_frames:
        raise ValueError("simulate_kspace: more frames requested than the "
                         "phantom provides")
    plans = frame_plans(interleaves, schedule, G)
    n_arms = interleaves.n_arms
    n_samp = interleaves.base_arm.n_samples

    out = np.empty((n_frames, coils.n_coils, n_arms, n_samp),
                   dtype=np.complex128)
    for f in range(n_frames):
        o = (f // schedule.frames_per_orientation) % schedule.n_orientations
        img = phantom.images[slice_index, f]
        for c in range(coils.n_coils):
            s = nufft.forward(img * coils.maps[c], plans[o])
            out[f, c] = s.reshape(n_arms, n_samp)

    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        level = noise_sigma * np.mean(np.abs(out))
        out = out + level * (rng.standard_normal(out.shape)
                             + 1j * rng.standard_normal(out.shape))

    return RawAcquisition(samples=out, interleaves=interleaves,
                          schedule=schedule, grid_size=G,
                          frame_dt_ms=phantom.config.frame_dt_ms,
                          noise_sigma=noise_sigma, seed=seed)
