"""Spiral interleave design, pattern-rotation scheduling, gradient
transfer-function correction, and density compensation."""

from dataclasses import dataclass

import numpy as np

GAMMA_HZ_PER_T = 42.577478518e6  # proton gyromagnetic ratio / 2pi


@dataclass
class SpiralArm:
    """One spiral-out readout.

    samples: (n, 2) k-space positions in cycles/FOV.
    gradient_waveform: (n, 2) in mT/m, sampled at dwell_time_us spacing.
    """
    samples: np.ndarray
    gradient_waveform: np.ndarray
    dwell_time_us: float
    fov_mm: float

    @property
    def n_samples(self):
        return self.samples.shape[0]

    def rotated(self, angle):
        c, s = np.cos(angle), np.sin(angle)
        rot = np.array([[c, -s], [s, c]])
        return SpiralArm(samples=self.samples @ rot.T,
                         gradient_waveform=self.gradient_waveform @ rot.T,
                         dwell_time_us=self.dwell_time_us,
                         fov_mm=self.fov_mm)


@dataclass
class InterleaveSet:
    """A base arm plus n_arms equally spaced rotated copies."""
    base_arm: SpiralArm
    n_arms: int
    angles: np.ndarray

    def arm(self, j, extra_rotation=0.0):
        return self.base_arm.rotated(self.angles[j] + extra_rotation)

    def positions(self, extra_rotation=0.0):
        """Stacked sample positions of all arms, (n_arms, n_samples, 2)."""
        return np.stack([self.arm(j, extra_rotation).samples
                         for j in range(self.n_arms)])


@dataclass
class RotationSchedule:
    """Per-frame rotation plan: which pattern orientation each frame uses."""
    n_orientations: int
    frames_per_orientation: int
    orientation_offsets: np.ndarray
    n_arms: int

    @property
    def n_frames(self):
        return self.n_orientations * self.frames_per_orientation

    def frame_orientation(self, frame):
        return int(frame) // self.frames_per_orientation

    def frame_offset(self, frame):
        return float(self.orientation_offsets[self.frame_orientation(frame)])

    def all_angles(self):
        """Union of arm angles over all orientations, wrapped to [0, 2pi)."""
        base = 2 * np.pi * np.arange(self.n_arms) / self.n_arms
        ang = (self.orientation_offsets[:, None] + base[None, :]).ravel()
        return np.mod(ang, 2 * np.pi)


@dataclass
class GstfModel:
    """Gradient-system frequency response: sampled transfer function plus a
    bulk delay. The same response is applied to both gradient axes."""
    freq_hz: np.ndarray
    response: np.ndarray
    delay_us: float = 0.0

    def __post_init__(self):
        if np.any(np.abs(self.response) > 1 + 1e-6):
            raise ValueError("GstfModel: |H(f)| must not exceed 1 "
                             "(passive system)")

    @classmethod
    def identity(cls):
        f = np.array([0.0, 1e9])
        return cls(freq_hz=f, response=np.ones(2, dtype=complex))

    @classmethod
    def pure_delay(cls, delay_us):
        return cls(freq_hz=np.array([0.0, 1e9]),
                   response=np.ones(2, dtype=complex), delay_us=delay_us)

    @classmethod
    def low_pass(cls, cutoff_hz, delay_us=0.0, n_freq=4096, f_max_hz=2e6):
        f = np.linspace(0.0, f_max_hz, n_freq)
        h = 1.0 / (1.0 + 1j * f / cutoff_hz)
        return cls(freq_hz=f, response=h, delay_us=delay_us)


def design_spiral(fov_mm=320.0, resolution_mm=1.29, n_arms=13,
                  max_gradient_mt_m=40.0, max_slew_t_m_s=180.0,
                  dwell_time_us=2.0, undersampling=5.0,
                  max_duration_ms=3.5):
    """Design a slew/amplitude-limited Archimedean spiral-out interleave set.

    The spiral reaches k_max = 1/(2*resolution). Its pitch is set so that
    `undersampling` times n_arms rotated copies would be Nyquist-sampled in
    the radial (turn-to-turn) direction for the given FOV; with the default
    undersampling of 5 and 13 arms the single-frame pattern undersamples by
    a factor of ~5, as in the target protocol.
    """
    if resolution_mm <= 0 or fov_mm < resolution_mm:
        raise ValueError("design_spiral: need resolution > 0 and "
                         "fov >= resolution")
    if max_gradient_mt_m <= 0 or max_slew_t_m_s <= 0 or dwell_time_us <= 0:
        raise ValueError("design_spiral: hardware limits must be positive")
    if n_arms < 1:
        raise ValueError("design_spiral: n_arms must be >= 1")

    fov = fov_mm * 1e-3
    kmax = 1.0 / (2.0 * resolution_mm * 1e-3)       # 1/m
    a = undersampling * n_arms / (2 * np.pi * fov)  # pitch, 1/m per radian
    theta_max = kmax / a
    gmax = max_gradient_mt_m * 1e-3                 # T/m
    smax = max_slew_t_m_s
    dt = dwell_time_us * 1e-6

    # time-optimal phase evolution for k = a*theta*exp(i*theta): run at the
    # slew limit (|d2k/dt2| = gamma*smax, solving the full quadratic for the
    # angular acceleration so the gradient ramps from zero) until the
    # amplitude limit |dk/dt| = gamma*gmax takes over
    s_norm = GAMMA_HZ_PER_T * smax / a

    def theta_ddot(th, thd):
        A = 1.0 + th ** 2
        B = 2.0 * th * thd ** 2
        C = thd ** 4 * (th ** 2 + 4.0) - s_norm ** 2
        disc = max(B * B - 4.0 * A * C, 0.0)
        return (-B + np.sqrt(disc)) / (2.0 * A)

    def theta_dot_amp(th):
        return GAMMA_HZ_PER_T * gmax / (a * np.sqrt(1.0 + th ** 2))

    max_samples = int(max_duration_ms * 1e3 / dwell_time_us) + 1
    substeps = 4
    h = dt / substeps
    th, thd = 0.0, 0.0
    thetas, tdots = [th], [thd]
    while thetas[-1] < theta_max:
        if len(thetas) > max_samples:
            raise ValueError(
                "design_spiral: arm cannot reach k_max within "
                f"{max_duration_ms} ms under the given hardware limits")
        for _ in range(substeps):
            cap = theta_dot_amp(th)
            if thd >= cap:
                th += h * cap
                thd = theta_dot_amp(th)
            else:
                # RK4 on (theta, theta_dot)
                k1t, k1v = thd, theta_ddot(th, thd)
                k2t = thd + 0.5 * h * k1v
                k2v = theta_ddot(th + 0.5 * h * k1t, k2t)
                k3t = thd + 0.5 * h * k2v
                k3v = theta_ddot(th + 0.5 * h * k2t, k3t)
                k4t = thd + h * k3v
                k4v = theta_ddot(th + h * k3t, k4t)
                th += h * (k1t + 2 * k2t + 2 * k3t + k4t) / 6.0
                thd += h * (k1v + 2 * k2v + 2 * k3v + k4v) / 6.0
                thd = min(thd, theta_dot_amp(th))
        thetas.append(th)
        tdots.append(thd)
    theta = np.array(thetas)
    tdot = np.array(tdots)

    # analytic gradient g = (1/gamma) dk/dt
    dk = a * (1 + 1j * theta) * np.exp(1j * theta) * tdot
    g = dk / GAMMA_HZ_PER_T                          # T/m, complex
    grad = np.stack([g.real, g.imag], axis=1)

    # k stored as the trapezoid integral of the stored gradient, rescaled to
    # end exactly at k_max
    k = _integrate_gradient(grad, dt)
    scale = kmax / np.hypot(k[-1, 0], k[-1, 1])
    k *= scale
    grad *= scale

    base = SpiralArm(samples=k * fov, gradient_waveform=grad * 1e3,
                     dwell_time_us=dwell_time_us, fov_mm=fov_mm)
    angles = 2 * np.pi * np.arange(n_arms) / n_arms
    return InterleaveSet(base_arm=base, n_arms=n_arms, angles=angles)


def _integrate_gradient(grad_t_m, dt_s):
    """Cumulative trapezoid integral of a gradient waveform -> k in 1/m.
    The first sample is k = 0."""
    k = np.zeros_like(grad_t_m, dtype=float)
    k[1:] = np.cumsum(0.5 * (grad_t_m[1:] + grad_t_m[:-1]) * dt_s, axis=0)
    return k * GAMMA_HZ_PER_T


def integrate_arm_gradient(arm):
    """Recompute arm sample positions (cycles/FOV) from its stored gradient."""
    k = _integrate_gradient(arm.gradient_waveform * 1e-3,
                            arm.dwell_time_us * 1e-6)
    return k * (arm.fov_mm * 1e-3)


def build_schedule(interleaves, n_orientations=8, frames_per_orientation=1):
    """Greedy largest-gap rotation schedule.

    Each new orientation offset is placed at the midpoint of the largest
    angular gap of the union of previously used arm angles (folded into one
    arm-spacing period); ties resolve to the smallest candidate offset.
    """
    if n_orientations < 1:
        raise ValueError("build_schedule: n_orientations must be >= 1")
    n_arms = interleaves.n_arms
    period = 2 * np.pi / n_arms
    offsets = [0.0]
    for _ in range(1, n_orientations):
        used = np.sort(np.mod(offsets, period))
        gaps = np.diff(np.concatenate([used, [used[0] + period]]))
        mids = used + gaps / 2.0
        best = np.max(gaps)
        cand = np.mod(mids[gaps > best - 1e-12], period)
        offsets.append(float(np.min(cand)))
    return RotationSchedule(n_orientations=n_orientations,
                            frames_per_orientation=frames_per_orientation,
                            orientation_offsets=np.array(offsets),
                            n_arms=n_arms)


def gstf_correct(arm, model):
    """Apply a gradient-system transfer function to an arm's gradient and
    re-derive its k-space samples.

    The nominal gradient is zero-padded to at least twice its length,
    filtered in the frequency domain by H(f) * exp(-2*pi*i*f*delay), and
    transformed back; k is re-integrated from the corrected gradient.
    """
    g = np.asarray(arm.gradient_waveform, dtype=float)
    if g.size == 0:
        raise ValueError("gstf_correct: arm has no gradient waveform")
    n = g.shape[0]
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    dt = arm.dwell_time_us * 1e-6
    f = np.fft.fftfreq(nfft, d=dt)
    h = (np.interp(np.abs(f), model.freq_hz, model.response.real)
         + 1j * np.interp(np.abs(f), model.freq_hz, model.response.imag))
    # real input: response at negative frequencies is the conjugate
    h = np.where(f < 0, np.conj(h), h)
    h = h * np.exp(-2j * np.pi * f * model.delay_us * 1e-6)

    corrected = np.empty_like(g)
    for ax in range(2):
        spec = np.fft.fft(g[:, ax], nfft)
        corrected[:, ax] = np.fft.ifft(spec * h)[:n].real
    k = _integrate_gradient(corrected * 1e-3, dt) * (arm.fov_mm * 1e-3)
    return SpiralArm(samples=k, gradient_waveform=corrected,
                     dwell_time_us=arm.dwell_time_us, fov_mm=arm.fov_mm)


def density_compensation(interleaves, orientation_offset=0.0):
    """Per-sample density weights for one frame's arm set.

    Weights follow |k| * |dk/dt| along the arm (identical for every rotated
    copy); the center sample takes the limit weight of its neighbor. The
    weights are normalized so that, interpreted as k-space area elements in
    (cycles/pixel)^2 over the whole frame, they sum to the area of the
    sampled disc; the weighted adjoint NUFFT then approximates the inverse
    transform with unit gain. Returns (n_arms, n_samples).
    """
    arm = interleaves.base_arm
    k = arm.samples                       # cycles/FOV
    if arm.n_samples < 2:
        raise ValueError("density_compensation: degenerate arm")
    speed = np.linalg.norm(np.gradient(k, axis=0), axis=1)
    r = np.linalg.norm(k, axis=1)
    w = r * speed
    w[0] = w[1]
    # calibrate radially: within 1-grid-cell annuli the profile stays
    # proportional to |k|*|dk/dt|, but each annulus carries exactly its
    # share of the sampled-disc area (the raw profile alone over-weights
    # the rim of a slew-limited spiral)
    kmax_fov = r[-1]
    n_bins = max(8, int(np.ceil(kmax_fov)))
    edges = np.linspace(0.0, kmax_fov, n_bins + 1)
    which = np.clip(np.searchsorted(edges, r, side="right") - 1,
                    0, n_bins - 1)
    for b in range(n_bins):
        sel = which == b
        total = w[sel].sum() * interleaves.n_arms
        if total > 0:
            area = np.pi * (min(edges[b + 1], kmax_fov) ** 2 - edges[b] ** 2)
            w[sel] *= area / total
    return np.tile(w, (interleaves.n_arms, 1))


def frame_positions(interleaves, orientation_offset, grid_size):
    """Sample positions of one frame in cycles/pixel for a given grid.

    cycles/FOV divided by grid_size gives cycles/pixel when the image grid
    spans one FOV. Returns (n_arms, n_samples, 2).
    """
    return interleaves.positions(orientation_offset) / grid_size


def density_weights_for_grid(weights_fov, grid_size):
    """Convert density weights from (cycles/FOV)^2 to (cycles/pixel)^2 area
    elements for a grid of `grid_size` pixels."""
    return weights_fov / grid_size ** 2
