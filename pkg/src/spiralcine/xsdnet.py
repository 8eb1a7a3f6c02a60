"""Inference engine for the disentangled reconstruction/segmentation
network, plus the portable XSDW weights container.

The graph consumes an interim (CG-SENSE) magnitude image and produces a
4-class segmentation and an artifact-free reconstruction. Topology lives
in the manifest carried inside the weights file, so a trainer and this
engine agree on the architecture without sharing code.
"""

import json
import zlib
from dataclasses import dataclass

import numpy as np

XSDW_MAGIC = b"XSDW"
XSDW_VERSION = 1
MANIFEST_TENSOR = "__manifest__"
BN_EPS = 1e-5
LEAKY_SLOPE = 0.01


def default_manifest():
    return {
        "arch": "xsdnet",
        "input_channels": 1,
        "anatomy_factors": 8,
        "classes": 4,
        "modality_dim": 8,
        "anatomy_unet": {"depth": 4, "base_channels": 16},
        "final_unet": {"depth": 4, "base_channels": 16},
        "segmentor_channels": [16, 16],
        "modality_encoder_channels": [16, 32, 32],
        "film_decoder": {"blocks": 3, "channels": 16},
    }


# ---------------------------------------------------------------------------
# layer primitives

def conv2d(x, w, b, stride=1, pad="same", name="conv2d"):
    """2D convolution (cross-correlation), channels-first single image."""
    x = np.asarray(x)
    w = np.asarray(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ValueError(f"{name}: shape mismatch, input {x.shape} vs "
                         f"kernel {w.shape}")
    kh, kw = w.shape[2], w.shape[3]
    if pad == "same":
        ph, pw = kh // 2, kw // 2
    else:
        ph = pw = int(pad)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw),
                                                   axis=(1, 2))
    win = win[:, ::stride, ::stride]
    out = np.einsum("ocij,chwij->ohw", w, win, optimize=True)
    if b is not None:
        out = out + np.asarray(b)[:, None, None]
    return out


def batchnorm(x, gamma, beta, mean, var, eps=BN_EPS, name="batchnorm"):
    if x.shape[0] != len(gamma):
        raise ValueError(f"{name}: channel mismatch {x.shape[0]} vs "
                         f"{len(gamma)}")
    inv = 1.0 / np.sqrt(np.asarray(var) + eps)
    return ((x - np.asarray(mean)[:, None, None])
            * (np.asarray(gamma) * inv)[:, None, None]
            + np.asarray(beta)[:, None, None])


def leaky_relu(x, slope=LEAKY_SLOPE):
    return np.where(x >= 0, x, slope * x)


def maxpool2(x):
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2: odd spatial size {x.shape}")
    return x.reshape(c, h // 2, 2, w // 2, 2).max(axis=(2, 4))


def upsample_nearest2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def concat_channels(a, b):
    if a.shape[1:] != b.shape[1:]:
        raise ValueError(f"concat_channels: spatial mismatch {a.shape} vs "
                         f"{b.shape}")
    return np.concatenate([a, b], axis=0)


def softmax_channels(x):
    e = np.exp(x - x.max(axis=0, keepdims=True))
    return e / e.sum(axis=0, keepdims=True)


def film_modulate(x, gamma, beta):
    """Per-channel scale and shift from a conditioning vector."""
    if x.shape[0] != len(gamma) or len(gamma) != len(beta):
        raise ValueError(f"film_modulate: channel mismatch {x.shape[0]} "
                         f"vs {len(gamma)}/{len(beta)}")
    return np.asarray(gamma)[:, None, None] * x \
        + np.asarray(beta)[:, None, None]


# ---------------------------------------------------------------------------
# weight container / XSDW format

class WeightFormatError(ValueError):
    pass


@dataclass
class WeightStore:
    tensors: dict       # name -> np.float32 ndarray
    manifest: dict

    def __getitem__(self, name):
        try:
            return self.tensors[name]
        except KeyError:
            raise WeightFormatError(f"missing tensor '{name}'") from None


def _unet_layer_shapes(prefix, in_ch, out_ch, depth, base):
    shapes = {}

    def conv_block(name, cin, cout):
        shapes[f"{name}.weight"] = (cout, cin, 3, 3)
        shapes[f"{name}.bias"] = (cout,)
        for p in ("gamma", "beta", "mean", "var"):
            shapes[f"{name}.bn.{p}"] = (cout,)

    ch = in_ch
    enc_ch = []
    for i in range(depth):
        cout = base * (2 ** i)
        conv_block(f"{prefix}.enc{i}.conv0", ch, cout)
        conv_block(f"{prefix}.enc{i}.conv1", cout, cout)
        enc_ch.append(cout)
        ch = cout
    bott = base * (2 ** depth)
    conv_block(f"{prefix}.bottleneck.conv0", ch, bott)
    conv_block(f"{prefix}.bottleneck.conv1", bott, bott)
    ch = bott
    for i in reversed(range(depth)):
        cout = enc_ch[i]
        conv_block(f"{prefix}.dec{i}.conv0", ch + enc_ch[i], cout)
        conv_block(f"{prefix}.dec{i}.conv1", cout, cout)
        ch = cout
    shapes[f"{prefix}.out.weight"] = (out_ch, ch, 1, 1)
    shapes[f"{prefix}.out.bias"] = (out_ch,)
    return shapes


def expected_tensor_shapes(manifest):
    """All tensors (name -> shape) the manifest's topology requires."""
    m = manifest
    nf = m["anatomy_factors"]
    zdim = m["modality_dim"]
    shapes = {}
    shapes.update(_unet_layer_shapes(
        "anatomy", m["input_channels"], nf,
        m["anatomy_unet"]["depth"], m["anatomy_unet"]["base_channels"]))
    shapes.update(_unet_layer_shapes(
        "final", m["input_channels"] + 1, 1,
        m["final_unet"]["depth"], m["final_unet"]["base_channels"]))

    ch = nf
    for i, cout in enumerate(m["segmentor_channels"]):
        shapes[f"segmentor.conv{i}.weight"] = (cout, ch, 3, 3)
        shapes[f"segmentor.conv{i}.bias"] = (cout,)
        for p in ("gamma", "beta", "mean", "var"):
            shapes[f"segmentor.conv{i}.bn.{p}"] = (cout,)
        ch = cout
    n_hidden = len(m["segmentor_channels"])
    shapes[f"segmentor.conv{n_hidden}.weight"] = (m["classes"], ch, 3, 3)
    shapes[f"segmentor.conv{n_hidden}.bias"] = (m["classes"],)

    ch = m["input_channels"] + nf
    for i, cout in enumerate(m["modality_encoder_channels"]):
        shapes[f"modality.conv{i}.weight"] = (cout, ch, 3, 3)
        shapes[f"modality.conv{i}.bias"] = (cout,)
        for p in ("gamma", "beta", "mean", "var"):
            shapes[f"modality.conv{i}.bn.{p}"] = (cout,)
        ch = cout
    shapes["modality.fc_mu.weight"] = (zdim, ch)
    shapes["modality.fc_mu.bias"] = (zdim,)
    shapes["modality.fc_logvar.weight"] = (zdim, ch)
    shapes["modality.fc_logvar.bias"] = (zdim,)

    fc = m["film_decoder"]["channels"]
    shapes["film.conv_in.weight"] = (fc, nf, 3, 3)
    shapes["film.conv_in.bias"] = (fc,)
    for i in range(m["film_decoder"]["blocks"]):
        shapes[f"film.block{i}.conv.weight"] = (fc, fc, 3, 3)
        shapes[f"film.block{i}.conv.bias"] = (fc,)
        shapes[f"film.block{i}.gamma.weight"] = (fc, zdim)
        shapes[f"film.block{i}.gamma.bias"] = (fc,)
        shapes[f"film.block{i}.beta.weight"] = (fc, zdim)
        shapes[f"film.block{i}.beta.bias"] = (fc,)
    shapes["film.out.weight"] = (1, fc, 1, 1)
    shapes["film.out.bias"] = (1,)
    return shapes


def validate(store):
    shapes = expected_tensor_shapes(store.manifest)
    for name, shape in shapes.items():
        t = store.tensors.get(name)
        if t is None:
            raise WeightFormatError(f"missing tensor '{name}'")
        if tuple(t.shape) != tuple(shape):
            raise WeightFormatError(
                f"tensor '{name}' has shape {tuple(t.shape)}, "
                f"expected {tuple(shape)}")
    return store


def init_weights(manifest=None, seed=0):
    """Randomly initialized store (He-style conv init, identity norms)."""
    manifest = manifest or default_manifest()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in expected_tensor_shapes(manifest).items():
        if name.endswith((".bn.gamma", ".bn.var")):
            t = np.ones(shape, dtype=np.float32)
        elif name.endswith((".bn.beta", ".bn.mean", ".bias")):
            t = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:]))
            t = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                           size=shape).astype(np.float32)
        tensors[name] = t
    return WeightStore(tensors=tensors, manifest=manifest)


def _manifest_payload(manifest):
    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 4)
    return np.frombuffer(raw, dtype="<f4").copy()


def _decode_manifest(arr):
    raw = arr.astype("<f4").tobytes()
    return json.loads(raw.decode("utf-8").rstrip())


def save_weights(store, path):
    """Write the store in the XSDW container (CRC-protected, bit-exact)."""
    validate(store)
    chunks = [XSDW_MAGIC,
              np.uint32(XSDW_VERSION).tobytes(),
              np.uint32(len(store.tensors) + 1).tobytes()]

    def tensor_chunk(name, arr):
        nb = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts = [np.uint16(len(nb)).tobytes(), nb,
                 np.uint8(arr.ndim).tobytes(),
                 np.asarray(arr.shape, dtype="<u4").tobytes(),
                 arr.tobytes()]
        return b"".join(parts)

    chunks.append(tensor_chunk(MANIFEST_TENSOR,
                               _manifest_payload(store.manifest)))
    for name in sorted(store.tensors):
        chunks.append(tensor_chunk(name, store.tensors[name]))
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(np.uint32(crc).tobytes())


def load_weights(path):
    """Read and validate an XSDW file; errors name the offending tensor."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != XSDW_MAGIC:
        raise WeightFormatError(f"{path}: not an XSDW file")
    stored_crc = int(np.frombuffer(blob[-4:], dtype="<u4")[0])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise WeightFormatError(f"{path}: CRC mismatch, file corrupted")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != XSDW_VERSION:
        raise WeightFormatError(f"{path}: unsupported version {version}")
    count = int(np.frombuffer(blob[8:12], dtype="<u4")[0])

    off = 12
    tensors = {}
    order = []
    for _ in range(count):
        nlen = int(np.frombuffer(blob[off:off + 2], dtype="<u2")[0])
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        ndim = blob[off]
        off += 1
        dims = np.frombuffer(blob[off:off + 4 * ndim], dtype="<u4")
        off += 4 * ndim
        n = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(blob[off:off + 4 * n], dtype="<f4")
        if data.size != n:
            raise WeightFormatError(f"{path}: truncated tensor '{name}'")
        off += 4 * n
        tensors[name] = data.reshape(dims.astype(int)).copy()
        order.append(name)
    if not order or order[0] != MANIFEST_TENSOR:
        raise WeightFormatError(
            f"{path}: manifest tensor must be stored first")
    manifest = _decode_manifest(tensors.pop(MANIFEST_TENSOR))
    return validate(WeightStore(tensors=tensors, manifest=manifest))


# ---------------------------------------------------------------------------
# graph blocks

def _conv_bn_act(x, store, name):
    x = conv2d(x, store[f"{name}.weight"], store[f"{name}.bias"], name=name)
    x = batchnorm(x, store[f"{name}.bn.gamma"], store[f"{name}.bn.beta"],
                  store[f"{name}.bn.mean"], store[f"{name}.bn.var"],
                  name=name)
    x = leaky_relu(x)
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite activations after '{name}'")
    return x


def _unet(x, store, prefix, depth):
    skips = []
    for i in range(depth):
        x = _conv_bn_act(x, store, f"{prefix}.enc{i}.conv0")
        x = _conv_bn_act(x, store, f"{prefix}.enc{i}.conv1")
        skips.append(x)
        x = maxpool2(x)
    x = _conv_bn_act(x, store, f"{prefix}.bottleneck.conv0")
    x = _conv_bn_act(x, store, f"{prefix}.bottleneck.conv1")
    for i in reversed(range(depth)):
        x = upsample_nearest2(x)
        x = concat_channels(x, skips[i])
        x = _conv_bn_act(x, store, f"{prefix}.dec{i}.conv0")
        x = _conv_bn_act(x, store, f"{prefix}.dec{i}.conv1")
    return conv2d(x, store[f"{prefix}.out.weight"],
                  store[f"{prefix}.out.bias"], name=f"{prefix}.out")


def _pad_to_multiple(img, mult):
    h, w = img.shape[-2:]
    ph, pw = -h % mult, -w % mult
    if ph == 0 and pw == 0:
        return img, (h, w)
    pad_spec = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(img, pad_spec, mode="edge"), (h, w)


def anatomy_encode(interim, store):
    """Binary anatomy factor maps from the interim image (channel softmax
    thresholded at 0.5)."""
    depth = store.manifest["anatomy_unet"]["depth"]
    x, (h, w) = _pad_to_multiple(np.asarray(interim, dtype=np.float32)[None],
                                 1 << depth)
    logits = _unet(x, store, "anatomy", depth)
    probs = softmax_channels(logits)[:, :h, :w]
    return (probs > 0.5).astype(np.float32)


def segment(factors, store):
    """Class probabilities and argmax mask from the anatomy factors."""
    m = store.manifest
    if factors.shape[0] != m["anatomy_factors"]:
        raise ValueError(f"segment: expected {m['anatomy_factors']} factor "
                         f"channels, got {factors.shape[0]}")
    x = np.asarray(factors, dtype=np.float32)
    for i in range(len(m["segmentor_channels"])):
        x = _conv_bn_act(x, store, f"segmentor.conv{i}")
    i = len(m["segmentor_channels"])
    logits = conv2d(x, store[f"segmentor.conv{i}.weight"],
                    store[f"segmentor.conv{i}.bias"],
                    name=f"segmentor.conv{i}")
    probs = softmax_channels(logits)
    return probs, np.argmax(probs, axis=0).astype(np.uint8)


def modality_encode(interim, factors, store):
    """Posterior-mean modality vector from interim image and factors."""
    x = concat_channels(np.asarray(interim, dtype=np.float32)[None],
                        np.asarray(factors, dtype=np.float32))
    m = store.manifest
    for i in range(len(m["modality_encoder_channels"])):
        name = f"modality.conv{i}"
        x = conv2d(x, store[f"{name}.weight"], store[f"{name}.bias"],
                   stride=2, name=name)
        x = batchnorm(x, store[f"{name}.bn.gamma"], store[f"{name}.bn.beta"],
                      store[f"{name}.bn.mean"], store[f"{name}.bn.var"],
                      name=name)
        x = leaky_relu(x)
    pooled = x.mean(axis=(1, 2))
    mu = store["modality.fc_mu.weight"] @ pooled \
        + store["modality.fc_mu.bias"]
    if not np.all(np.isfinite(mu)):
        raise FloatingPointError("non-finite modality vector")
    return mu


def film_decode(factors, z, store):
    """Reconstruction estimate from factors conditioned on the modality
    vector via per-channel scale/shift."""
    m = store.manifest
    x = conv2d(np.asarray(factors, dtype=np.float32),
               store["film.conv_in.weight"], store["film.conv_in.bias"],
               name="film.conv_in")
    x = leaky_relu(x)
    for i in range(m["film_decoder"]["blocks"]):
        name = f"film.block{i}"
        x = conv2d(x, store[f"{name}.conv.weight"],
                   store[f"{name}.conv.bias"], name=f"{name}.conv")
        gamma = store[f"{name}.gamma.weight"] @ z \
            + store[f"{name}.gamma.bias"]
        beta = store[f"{name}.beta.weight"] @ z + store[f"{name}.beta.bias"]
        x = leaky_relu(film_modulate(x, gamma, beta))
    out = conv2d(x, store["film.out.weight"], store["film.out.bias"],
                 name="film.out")
    return out[0]


@dataclass
class InferenceOutput:
    probabilities: np.ndarray   # (classes, H, W)
    mask: np.ndarray            # (H, W) uint8 argmax
    reconstruction: np.ndarray  # (H, W) float
    factors: np.ndarray         # (n_factors, H, W) binary
    modality: np.ndarray        # (modality_dim,)
    film_output: np.ndarray     # (H, W) float


def infer(interim, store):
    """Full forward pass on one interim magnitude image."""
    interim = np.asarray(interim)
    if np.iscomplexobj(interim):
        interim = np.abs(interim)
    interim = interim.astype(np.float32)
    if interim.ndim != 2:
        raise ValueError("infer: expected a 2D image")

    factors = anatomy_encode(interim, store)
    probs, mask = segment(factors, store)
    z = modality_encode(interim, factors, store)
    film_out = film_decode(factors, z, store)

    depth = store.manifest["final_unet"]["depth"]
    stack = np.stack([film_out.astype(np.float32), interim])
    x, (h, w) = _pad_to_multiple(stack, 1 << depth)
    recon = _unet(x, store, "final", depth)[0, :h, :w]
    return InferenceOutput(probabilities=probs, mask=mask,
                           reconstruction=recon, factors=factors,
                           modality=z, film_output=film_out)
