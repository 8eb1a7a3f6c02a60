import os

import numpy as np
import pytest

from spiralcine import xsdnet

FIXTURE = os.path.join(os.path.dirname(__file__), "fixtures", "tiny.xsdw")

TINY_MANIFEST = {
    "arch": "xsdnet",
    "input_channels": 1,
    "anatomy_factors": 4,
    "classes": 4,
    "modality_dim": 4,
    "anatomy_unet": {"depth": 2, "base_channels": 4},
    "final_unet": {"depth": 2, "base_channels": 4},
    "segmentor_channels": [4],
    "modality_encoder_channels": [4, 8],
    "film_decoder": {"blocks": 2, "channels": 4},
}


def brute_conv2d(x, w, b, stride=1):
    C, H, W = x.shape
    O, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for a in range(kh):
                        for bb in range(kw):
                            acc += w[o, c, a, bb] \
                                * xp[c, i * stride + a, j * stride + bb]
                out[o, i, j] = acc + b[o]
    return out


def test_conv2d_brute_force_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 9, 9))
    w = rng.standard_normal((3, 4, 3, 3))
    b = rng.standard_normal(3)
    got = xsdnet.conv2d(x, w, b)
    ref = brute_conv2d(x, w, b)
    assert np.abs(got - ref).max() < 1e-5
    got2 = xsdnet.conv2d(x, w, b, stride=2)
    ref2 = brute_conv2d(x, w, b, stride=2)
    assert np.abs(got2 - ref2).max() < 1e-5


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 6, 6))
    w = np.zeros((2, 2, 1, 1))
    w[0, 0, 0, 0] = 1.0
    w[1, 1, 0, 0] = 1.0
    out = xsdnet.conv2d(x, w, np.zeros(2))
    assert np.abs(out - x).max() < 1e-12


def test_batchnorm_oracle():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 5, 5))
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    m, v = rng.standard_normal(3), np.abs(rng.standard_normal(3)) + 0.1
    got = xsdnet.batchnorm(x, g, b, m, v)
    ref = np.stack([(x[c] - m[c]) / np.sqrt(v[c] + 1e-5) * g[c] + b[c]
                    for c in range(3)])
    assert np.abs(got - ref).max() < 1e-5


def test_leaky_relu_maxpool_upsample():
    x = np.array([[[1.0, -2.0], [-3.0, 4.0]]])
    np.testing.assert_allclose(xsdnet.leaky_relu(x),
                               [[[1.0, -0.02], [-0.03, 4.0]]])
    assert xsdnet.maxpool2(x)[0, 0, 0] == 4.0
    up = xsdnet.upsample_nearest2(x)
    assert up.shape == (1, 4, 4)
    assert np.all(up[0, :2, :2] == 1.0)
    with pytest.raises(ValueError, match="odd"):
        xsdnet.maxpool2(np.zeros((1, 3, 4)))


def test_softmax_channels_normalized():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((4, 7, 7)) * 10
    p = xsdnet.softmax_channels(x)
    assert np.abs(p.sum(axis=0) - 1.0).max() < 1e-6
    assert p.min() >= 0


def test_film_modulate():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 4, 4))
    g, b = rng.standard_normal(3), rng.standard_normal(3)
    got = xsdnet.film_modulate(x, g, b)
    ref = g[:, None, None] * x + b[:, None, None]
    assert np.abs(got - ref).max() < 1e-12
    with pytest.raises(ValueError, match="film_modulate"):
        xsdnet.film_modulate(x, np.ones(2), np.zeros(2))


def test_concat_channels_mismatch_named():
    with pytest.raises(ValueError, match="concat_channels"):
        xsdnet.concat_channels(np.zeros((1, 4, 4)), np.zeros((1, 5, 4)))


@pytest.fixture(scope="module")
def tiny_store():
    return xsdnet.load_weights(FIXTURE)


def test_fixture_loads_and_validates(tiny_store):
    assert tiny_store.manifest["anatomy_factors"] == 4
    assert "anatomy.enc0.conv0.weight" in tiny_store.tensors


def test_round_trip_bit_identical(tiny_store, tmp_path):
    p = tmp_path / "copy.xsdw"
    xsdnet.save_weights(tiny_store, p)
    with open(FIXTURE, "rb") as fh:
        original = fh.read()
    with open(p, "rb") as fh:
        rewritten = fh.read()
    assert original == rewritten


def test_missing_tensor_named(tiny_store, tmp_path):
    broken = xsdnet.WeightStore(tensors=dict(tiny_store.tensors),
                                manifest=tiny_store.manifest)
    del broken.tensors["segmentor.conv0.bias"]
    with pytest.raises(xsdnet.WeightFormatError,
                       match="segmentor.conv0.bias"):
        xsdnet.validate(broken)


def test_shape_mismatch_named(tiny_store):
    broken = xsdnet.WeightStore(tensors=dict(tiny_store.tensors),
                                manifest=tiny_store.manifest)
    broken.tensors["film.out.bias"] = np.zeros(3, dtype=np.float32)
    with pytest.raises(xsdnet.WeightFormatError, match="film.out.bias"):
        xsdnet.validate(broken)


def test_crc_corruption_detected(tmp_path):
    with open(FIXTURE, "rb") as fh:
        blob = bytearray(fh.read())
    blob[len(blob) // 2] ^= 0xFF
    p = tmp_path / "bad.xsdw"
    p.write_bytes(bytes(blob))
    with pytest.raises(xsdnet.WeightFormatError, match="CRC"):
        xsdnet.load_weights(str(p))


def test_not_xsdw_rejected(tmp_path):
    p = tmp_path / "nope.xsdw"
    p.write_bytes(b"JUNKJUNKJUNKJUNKJUNK")
    with pytest.raises(xsdnet.WeightFormatError, match="not an XSDW"):
        xsdnet.load_weights(str(p))


def test_anatomy_factors_binary(tiny_store):
    rng = np.random.default_rng(5)
    factors = xsdnet.anatomy_encode(rng.random((16, 16)), tiny_store)
    assert set(np.unique(factors)) <= {0.0, 1.0}
    assert factors.shape == (4, 16, 16)


def test_segment_probabilities(tiny_store):
    rng = np.random.default_rng(6)
    factors = xsdnet.anatomy_encode(rng.random((16, 16)), tiny_store)
    probs, mask = xsdnet.segment(factors, tiny_store)
    assert np.abs(probs.sum(axis=0) - 1.0).max() < 1e-5
    assert mask.shape == (16, 16) and mask.dtype == np.uint8
    # zero factors -> spatially constant probabilities away from the border
    probs0, _ = xsdnet.segment(np.zeros_like(factors), tiny_store)
    inner = probs0[:, 4:-4, 4:-4]
    assert np.abs(inner - inner[:, :1, :1]).max() < 1e-6


def test_modality_vector(tiny_store):
    rng = np.random.default_rng(7)
    img = rng.random((16, 16))
    factors = xsdnet.anatomy_encode(img, tiny_store)
    z1 = xsdnet.modality_encode(img, factors, tiny_store)
    z2 = xsdnet.modality_encode(img, factors, tiny_store)
    assert z1.shape == (4,)
    assert np.array_equal(z1, z2)
    assert np.all(np.isfinite(z1))


def test_film_identity_modulation(tiny_store):
    # craft FiLM heads so gamma(z) = 1 and beta(z) = 0: then the decode
    # equals the unmodulated conv stack
    store = xsdnet.WeightStore(tensors=dict(tiny_store.tensors),
                               manifest=tiny_store.manifest)
    for i in range(store.manifest["film_decoder"]["blocks"]):
        for p, val in (("gamma", 1.0), ("beta", 0.0)):
            wname = f"film.block{i}.{p}.weight"
            bname = f"film.block{i}.{p}.bias"
            store.tensors[wname] = np.zeros_like(store.tensors[wname])
            store.tensors[bname] = np.full_like(store.tensors[bname], val)
    rng = np.random.default_rng(8)
    factors = (rng.random((4, 8, 8)) > 0.5).astype(np.float32)
    z = rng.standard_normal(4).astype(np.float32)
    out_a = xsdnet.film_decode(factors, z, store)
    out_b = xsdnet.film_decode(factors, np.zeros(4, dtype=np.float32),
                               store)
    assert np.abs(out_a - out_b).max() < 1e-6


def test_infer_deterministic_and_shapes(tiny_store):
    rng = np.random.default_rng(9)
    img = rng.random((32, 32))
    a = xsdnet.infer(img, tiny_store)
    b = xsdnet.infer(img, tiny_store)
    assert np.array_equal(a.reconstruction, b.reconstruction)
    assert np.array_equal(a.mask, b.mask)
    assert a.probabilities.shape == (4, 32, 32)
    assert a.reconstruction.shape == (32, 32)
    assert set(np.unique(a.factors)) <= {0.0, 1.0}


def test_infer_pads_odd_sizes(tiny_store):
    rng = np.random.default_rng(10)
    out = xsdnet.infer(rng.random((18, 22)), tiny_store)
    assert out.reconstruction.shape == (18, 22)
    assert out.mask.shape == (18, 22)


def test_infer_accepts_complex_magnitude(tiny_store):
    rng = np.random.default_rng(11)
    img = rng.random((16, 16)) + 1j * rng.random((16, 16))
    a = xsdnet.infer(img, tiny_store)
    b = xsdnet.infer(np.abs(img), tiny_store)
    assert np.array_equal(a.reconstruction, b.reconstruction)


def test_init_weights_matches_manifest():
    store = xsdnet.init_weights(TINY_MANIFEST, seed=42)
    xsdnet.validate(store)
    again = xsdnet.init_weights(TINY_MANIFEST, seed=42)
    assert all(np.array_equal(store.tensors[k], again.tensors[k])
               for k in store.tensors)
