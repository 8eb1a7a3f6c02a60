"""Reconstruction of undersampled spiral frames: naive gridding, CG-SENSE,
per-frame l1-wavelet FISTA, and low-rank plus sparse on the 2D+t series."""

from dataclasses import dataclass, field

import numpy as np

from . import nufft, wavelet


@dataclass
class EncodingOperator:
    """Coil-weighted NUFFT encoding for one frame: image -> (coil, sample)."""
    maps: np.ndarray          # (n_coils, G, G) complex
    plan: nufft.GriddingPlan

    @property
    def n_coils(self):
        return self.maps.shape[0]

    @property
    def grid_size(self):
        return self.plan.grid_size

    def forward(self, image):
        out = np.empty((self.n_coils, self.plan.n_samples),
                       dtype=np.complex128)
        for c in range(self.n_coils):
            out[c] = nufft.forward(image * self.maps[c], self.plan)
        return out

    def adjoint(self, data):
        G = self.grid_size
        out = np.zeros((G, G), dtype=np.complex128)
        for c in range(self.n_coils):
            out += np.conj(self.maps[c]) * nufft.adjoint(data[c], self.plan)
        return out

    def normal(self, image):
        return self.adjoint(self.forward(image))


@dataclass
class ReconResult:
    image: np.ndarray
    residual_history: list
    method: str
    parameters: dict = field(default_factory=dict)


def _check_finite(data, name):
    if not np.all(np.isfinite(data)):
        raise ValueError(f"{name}: non-finite values in input data")


def gridding_recon(frame_data, plan, weights, maps=None):
    """Density-weighted adjoint gridding with root-sum-of-squares coil
    combination. frame_data is (n_coils, n_samples)."""
    frame_data = np.asarray(frame_data)
    imgs = np.stack([nufft.adjoint(frame_data[c], plan, weights)
                     for c in range(frame_data.shape[0])])
    return np.sqrt((np.abs(imgs) ** 2).sum(axis=0))


def cg_sense(frame_data, op, iters=10):
    """Conjugate gradients on the normal equations of the coil-weighted
    encoding, from a zero initial guess.

    The residual history records the data-consistency norm ||E x - d|| per
    iteration, which CG decreases monotonically on this SPD system.
    """
    frame_data = np.asarray(frame_data, dtype=np.complex128)
    _check_finite(frame_data, "cg_sense")
    G = op.grid_size
    b = op.adjoint(frame_data)
    x = np.zeros((G, G), dtype=np.complex128)
    r = b.copy()
    p = r.copy()
    rs = np.vdot(r, r).real
    history = [float(np.linalg.norm(op.forward(x) - frame_data))]
    for _ in range(iters):
        Ap = op.normal(p)
        denom = np.vdot(p, Ap).real
        if denom <= 0:
            break
        alpha = rs / denom
        x += alpha * p
        r -= alpha * Ap
        rs_new = np.vdot(r, r).real
        p = r + (rs_new / rs) * p
        rs = rs_new
        history.append(float(np.linalg.norm(op.forward(x) - frame_data)))
    return ReconResult(image=x, residual_history=history, method="cgsense",
                       parameters={"iters": iters})


def estimate_lipschitz(op, n_iter=20, seed=0):
    """Largest eigenvalue of E^H E by power iteration."""
    rng = np.random.default_rng(seed)
    G = op.grid_size
    x = rng.standard_normal((G, G)) + 1j * rng.standard_normal((G, G))
    x /= np.linalg.norm(x)
    lam = 1.0
    for _ in range(n_iter):
        y = op.normal(x)
        lam = float(np.linalg.norm(y))
        if lam == 0:
            return 1.0
        x = y / lam
    return lam


def soft_threshold(x, t):
    """Complex magnitude shrinkage."""
    mag = np.abs(x)
    scale = np.maximum(mag - t, 0.0) / np.where(mag == 0, 1.0, mag)
    return x * scale


def fista_l1wavelet(frame_data, op, lam, iters=30, wavelet_levels=3):
    """FISTA on 0.5*||E x - d||^2 + lam*||W x||_1 with an orthogonal
    wavelet transform W; function-value restart keeps the objective
    non-increasing."""
    if lam < 0:
        raise ValueError("fista_l1wavelet: lambda must be >= 0")
    G = op.grid_size
    if G % (1 << wavelet_levels):
        raise ValueError("fista_l1wavelet: grid size must be divisible by "
                         f"2^{wavelet_levels}")
    frame_data = np.asarray(frame_data, dtype=np.complex128)
    _check_finite(frame_data, "fista_l1wavelet")

    L = estimate_lipschitz(op)
    step = 1.0 / L

    def objective(img):
        resid = op.forward(img) - frame_data
        coeffs = wavelet.forward2d(img, wavelet_levels)
        return 0.5 * np.linalg.norm(resid) ** 2 \
            + lam * np.abs(coeffs).sum()

    x = np.zeros((G, G), dtype=np.complex128)
    y = x.copy()
    t = 1.0
    obj_prev = objective(x)
    history = [float(np.linalg.norm(op.forward(x) - frame_data))]
    for _ in range(iters):
        grad = op.adjoint(op.forward(y) - frame_data)
        z = y - step * grad
        coeffs = wavelet.forward2d(z, wavelet_levels)
        x_new = wavelet.inverse2d(soft_threshold(coeffs, lam * step),
                                  wavelet_levels)
        obj = objective(x_new)
        if obj > obj_prev:
            # restart momentum from the last accepted iterate
            t = 1.0
            y = x.copy()
            grad = op.adjoint(op.forward(y) - frame_data)
            z = y - step * grad
            coeffs = wavelet.forward2d(z, wavelet_levels)
            x_new = wavelet.inverse2d(soft_threshold(coeffs, lam * step),
                                      wavelet_levels)
            obj = objective(x_new)
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
        obj_prev = min(obj_prev, obj)
        history.append(float(np.linalg.norm(op.forward(x) - frame_data)))
    return ReconResult(image=x, residual_history=history, method="cs",
                       parameters={"lambda": lam, "iters": iters,
                                   "wavelet_levels": wavelet_levels})


def lrs(series_data, ops, lambda_l=0.01, lambda_s=0.01, iters=30):
    """Low-rank plus sparse decomposition of a 2D+t series.

    Per iteration: a data-consistency gradient step on L + S, singular-value
    thresholding of the Casorati matrix of the L update (threshold
    lambda_l * sigma_1), and soft-thresholding of the temporal FFT of the S
    update (threshold lambda_s times the initial transform peak).

    series_data: (n_frames, n_coils, n_samples); ops: one EncodingOperator
    per frame. Returns a ReconResult whose image is L + S, with L and S in
    parameters.
    """
    series_data = np.asarray(series_data, dtype=np.complex128)
    n_frames = series_data.shape[0]
    if n_frames < 2:
        raise ValueError("lrs: need at least 2 frames")
    if len(ops) != n_frames:
        raise ValueError("lrs: need one encoding operator per frame")
    _check_finite(series_data, "lrs")
    G = ops[0].grid_size

    lip = max(estimate_lipschitz(ops[0]), 1e-12)
    step = 0.9 / (2.0 * lip)

    def dc_gradient(x):
        g = np.empty_like(x)
        for f in range(n_frames):
            g[f] = ops[f].adjoint(ops[f].forward(x[f]) - series_data[f])
        return g

    def dc_residual(x):
        return float(np.sqrt(sum(
            np.linalg.norm(ops[f].forward(x[f]) - series_data[f]) ** 2
            for f in range(n_frames))))

    L = np.stack([ops[f].adjoint(series_data[f]) for f in range(n_frames)])
    L /= max(lip, 1.0)
    S = np.zeros_like(L)
    s_scale = None
    history = [dc_residual(L + S)]
    for _ in range(iters):
        g = dc_gradient(L + S)
        Lu = L - step * g
        Su = S - step * g

        cas = Lu.reshape(n_frames, G * G).T
        U, sv, Vh = np.linalg.svd(cas, full_matrices=False)
        sv = np.maximum(sv - lambda_l * sv[0], 0.0)
        L = (U * sv) @ Vh
        L = L.T.reshape(n_frames, G, G)

        spec = np.fft.fft(Su, axis=0)
        if s_scale is None:
            s_scale = float(np.max(np.abs(spec))) or 1.0
        spec = soft_threshold(spec, lambda_s * s_scale)
        S = np.fft.ifft(spec, axis=0)

        history.append(dc_residual(L + S))
    return ReconResult(image=L + S, residual_history=history, method="lrs",
                       parameters={"lambda_l": lambda_l,
                                   "lambda_s": lambda_s, "iters": iters,
                                   "L": L, "S": S})
