"""Readers for the pipeline's binary containers and the XSDW weight writer.

These speak the on-disk formats only; nothing here imports the inference
package. Container layout: 4-byte magic, u32 version, u32-length-prefixed
JSON header, payload, trailing CRC32.
"""

import json
import os
import tempfile
import zlib

import numpy as np

FORMAT_VERSION = 1
XSDW_MAGIC = b"XSDW"
XSDW_VERSION = 1
MANIFEST_TENSOR = "__manifest__"


class FileFormatError(ValueError):
    pass


def _atomic_write(path, blob):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_container(path, magic):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != magic:
        raise FileFormatError(f"{path}: not a {magic.decode()} file")
    stored = int(np.frombuffer(blob[-4:], dtype="<u4")[0])
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored:
        raise FileFormatError(f"{path}: CRC mismatch")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version}")
    hlen = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    return header, blob[12 + hlen:-4]


def read_imgs(path):
    """Image stack (n_slices, n_frames, n_coils, H, W) plus header."""
    header, payload = _read_container(path, b"IMGS")
    dtype = {"f32": "<f4", "c64": "<c8"}[header["dtype"]]
    shape = (int(header["n_slices"]), int(header["n_frames"]),
             int(header["n_coils"]), int(header["H"]), int(header["W"]))
    arr = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    return arr, header


def read_mask(path):
    """Label mask (n_slices, n_frames, H, W) uint8 plus header."""
    header, payload = _read_container(path, b"MASK")
    shape = (int(header["n_slices"]), int(header["n_frames"]),
             int(header["H"]), int(header["W"]))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()
    return arr, header


def write_xsdw(path, tensors, manifest):
    """Serialize named f32 tensors plus the JSON graph manifest.

    Layout: magic "XSDW", version u32, tensor count u32; per tensor a u16
    name length, UTF-8 name, u8 ndim, u32 dims, f32 little-endian payload;
    trailing CRC32. The manifest travels as a tensor named "__manifest__"
    stored first (its payload is the space-padded JSON text).
    """
    chunks = [XSDW_MAGIC,
              np.uint32(XSDW_VERSION).tobytes(),
              np.uint32(len(tensors) + 1).tobytes()]

    def chunk(name, ndim, dims, payload):
        nb = name.encode("utf-8")
        return b"".join([np.uint16(len(nb)).tobytes(), nb,
                         np.uint8(ndim).tobytes(),
                         np.asarray(dims, dtype="<u4").tobytes(), payload])

    raw = json.dumps(manifest, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 4)
    chunks.append(chunk(MANIFEST_TENSOR, 1, [len(raw) // 4], raw))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        chunks.append(chunk(name, arr.ndim, arr.shape, arr.tobytes()))
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    _atomic_write(path, body + np.uint32(crc).tobytes())
