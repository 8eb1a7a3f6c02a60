import numpy as np
import pytest

from spiralcine import coils, nufft, phantom, recon, trajectory


def grid_positions(G):
    f = (np.arange(G) - G // 2) / G
    kx, ky = np.meshgrid(f, f)
    return nufft.wrap_positions(np.stack([kx.ravel(), ky.ravel()], axis=1))


def identity_op(G, n_coils=1):
    gp = nufft.plan(grid_positions(G), G)
    maps = np.ones((n_coils, G, G), dtype=complex)
    return recon.EncodingOperator(maps=maps, plan=gp)


def test_encoding_operator_dot_test():
    rng = np.random.default_rng(0)
    G = 32
    maps = (rng.standard_normal((4, G, G))
            + 1j * rng.standard_normal((4, G, G)))
    gp = nufft.plan(rng.uniform(-0.5, 0.5, (300, 2)), G)
    op = recon.EncodingOperator(maps=maps, plan=gp)
    x = rng.standard_normal((G, G)) + 1j * rng.standard_normal((G, G))
    y = (rng.standard_normal((4, 300))
         + 1j * rng.standard_normal((4, 300)))
    lhs = np.vdot(y, op.forward(x))
    rhs = np.vdot(op.adjoint(y), x)
    assert abs(lhs - rhs) / abs(lhs) < 1e-6


def test_cg_sense_wellposed_recovers_image():
    rng = np.random.default_rng(1)
    G = 16
    op = identity_op(G)
    truth = rng.standard_normal((G, G)) + 1j * rng.standard_normal((G, G))
    data = op.forward(truth)
    res = recon.cg_sense(data, op, iters=10)
    assert np.linalg.norm(res.image - truth) / np.linalg.norm(truth) < 1e-4


def test_cg_residual_strictly_decreasing(small_phantom, spiral_coarse):
    coil_set = phantom.generate_coils(4, 64, seed=0)
    sched = trajectory.build_schedule(spiral_coarse, 8, 1)
    raw = phantom.simulate_kspace(small_phantom, coil_set, spiral_coarse,
                                  sched, n_frames=8)
    imgs, _ = coils.temporal_average(raw)
    maps = coils.walsh_maps(imgs)
    pos = trajectory.frame_positions(spiral_coarse, 0.0, 64).reshape(-1, 2)
    gp = nufft.plan(nufft.wrap_positions(pos), 64)
    op = recon.EncodingOperator(maps=maps.maps, plan=gp)
    data = raw.samples[0].reshape(raw.n_coils, -1)
    res = recon.cg_sense(data, op, iters=10)
    h = np.array(res.residual_history)
    assert len(h) == 11
    assert np.all(np.diff(h) < 0)


def test_cg_rejects_nonfinite():
    op = identity_op(8)
    bad = np.full((1, 64), np.nan, dtype=complex)
    with pytest.raises(ValueError, match="non-finite"):
        recon.cg_sense(bad, op)


def test_gridding_zero_data():
    G = 16
    gp = nufft.plan(grid_positions(G), G)
    img = recon.gridding_recon(np.zeros((2, G * G)), gp, np.ones(G * G))
    assert np.abs(img).max() == 0.0


def test_fista_lambda_zero_matches_cg():
    rng = np.random.default_rng(2)
    G = 16
    op = identity_op(G)
    truth = rng.standard_normal((G, G)) + 1j * rng.standard_normal((G, G))
    data = op.forward(truth)
    fista = recon.fista_l1wavelet(data, op, lam=0.0, iters=60)
    cg = recon.cg_sense(data, op, iters=20)
    assert np.linalg.norm(fista.image - cg.image) \
        / np.linalg.norm(cg.image) < 1e-3


def test_fista_huge_lambda_shrinks_to_zero():
    rng = np.random.default_rng(3)
    G = 16
    op = identity_op(G)
    data = op.forward(rng.standard_normal((G, G)).astype(complex))
    res = recon.fista_l1wavelet(data, op, lam=1e12, iters=5)
    assert np.linalg.norm(res.image) == 0.0


def test_fista_validation():
    op = identity_op(16)
    with pytest.raises(ValueError, match="lambda"):
        recon.fista_l1wavelet(np.zeros((1, 256)), op, lam=-1.0)
    op9 = identity_op(9) if False else None
    with pytest.raises(ValueError, match="divisible"):
        gp = nufft.plan(np.zeros((1, 2)), 12)
        bad_op = recon.EncodingOperator(
            maps=np.ones((1, 12, 12), dtype=complex), plan=gp)
        recon.fista_l1wavelet(np.zeros((1, 1)), bad_op, lam=0.1,
                              wavelet_levels=3)


def _static_series(n_frames=20, G=32, samples=700, seed=5):
    rng = np.random.default_rng(seed)
    truth = np.zeros((G, G), dtype=complex)
    truth[8:24, 8:24] = 1.0
    maps = np.ones((1, G, G), dtype=complex)
    ops, data = [], []
    for _ in range(n_frames):
        gp = nufft.plan(rng.uniform(-0.5, 0.5, (samples, 2)), G)
        op = recon.EncodingOperator(maps=maps, plan=gp)
        ops.append(op)
        data.append(op.forward(truth))
    return truth, ops, np.stack(data)


def test_lrs_static_series_rank_one():
    truth, ops, data = _static_series()
    res = recon.lrs(data, ops, lambda_l=0.02, lambda_s=1.0, iters=60)
    L, S = res.parameters["L"], res.parameters["S"]
    n_frames, G = data.shape[0], ops[0].grid_size
    sv = np.linalg.svd(L.reshape(n_frames, G * G).T, compute_uv=False)
    assert sv[1] / sv[0] < 1e-3
    assert np.linalg.norm(S) < 1e-3 * np.linalg.norm(L)


def test_lrs_huge_lambda_s_kills_sparse():
    _truth, ops, data = _static_series(n_frames=4, samples=300)
    res = recon.lrs(data, ops, lambda_l=0.02, lambda_s=1e9, iters=5)
    assert np.linalg.norm(res.parameters["S"]) == 0.0


def test_lrs_single_frame_rejected():
    _truth, ops, data = _static_series(n_frames=2, samples=100)
    with pytest.raises(ValueError, match="frames"):
        recon.lrs(data[:1], ops[:1])


def test_lrs_beats_gridding_residual(small_phantom, spiral_coarse):
    # beating phantom, 13-arm frames: LRS data-consistency residual is at
    # least 2x below that of the naive gridding images
    coil_set = phantom.generate_coils(4, 64, seed=0)
    sched = trajectory.build_schedule(spiral_coarse, 8, 1)
    raw = phantom.simulate_kspace(small_phantom, coil_set, spiral_coarse,
                                  sched, n_frames=8)
    imgs, _ = coils.temporal_average(raw)
    maps = coils.walsh_maps(imgs)
    w = trajectory.density_weights_for_grid(
        trajectory.density_compensation(raw.interleaves), 64).ravel()
    ops, data, grid_res = [], [], 0.0
    for f in range(raw.n_frames):
        pos = trajectory.frame_positions(
            raw.interleaves, raw.frame_offset(f), 64).reshape(-1, 2)
        gp = nufft.plan(nufft.wrap_positions(pos), 64)
        op = recon.EncodingOperator(maps=maps.maps, plan=gp)
        d = raw.samples[f].reshape(raw.n_coils, -1)
        wr = nufft.refine_density_weights(gp, w)
        g_img = recon.gridding_recon(d, gp, wr)
        grid_res += np.linalg.norm(op.forward(g_img.astype(complex))
                                   - d) ** 2
        ops.append(op)
        data.append(d)
    grid_res = np.sqrt(grid_res)
    res = recon.lrs(np.stack(data), ops, lambda_l=0.02, lambda_s=0.05,
                    iters=25)
    assert res.residual_history[-1] * 2.0 < grid_res
