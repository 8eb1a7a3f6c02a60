"""Bit-exact binary containers used by the command-line pipeline.

All four share one layout: 4-byte magic, u32 version, u32-length-prefixed
UTF-8 JSON header, raw little-endian payload, trailing CRC32 over all
preceding bytes. Writers are atomic (temp file + rename); readers verify
magic, version and CRC and report byte offsets on malformed input.
"""

import json
import os
import tempfile
import zlib
from dataclasses import dataclass

import numpy as np

from .trajectory import GAMMA_HZ_PER_T, InterleaveSet, SpiralArm

FORMAT_VERSION = 1


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


def write_container(path, magic, header, payload):
    if len(magic) != 4:
        raise ValueError("magic must be 4 bytes")
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join([magic,
                     np.uint32(FORMAT_VERSION).tobytes(),
                     np.uint32(len(hdr)).tobytes(),
                     hdr,
                     payload])
    crc = zlib.crc32(body) & 0xFFFFFFFF
    _atomic_write(path, body + np.uint32(crc).tobytes())


def read_container(path, magic):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FileFormatError(f"{path}: file too short ({len(blob)} bytes)")
    if blob[:4] != magic:
        raise FileFormatError(
            f"{path}: bad magic at offset 0: {blob[:4]!r}, "
            f"expected {magic!r}")
    stored = int(np.frombuffer(blob[-4:], dtype="<u4")[0])
    actual = zlib.crc32(blob[:-4]) & 0xFFFFFFFF
    if stored != actual:
        raise FileFormatError(
            f"{path}: CRC mismatch at offset {len(blob) - 4} "
            f"(stored {stored:#010x}, computed {actual:#010x})")
    version = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise FileFormatError(f"{path}: unsupported version {version} "
                              "at offset 4")
    hlen = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    if 12 + hlen > len(blob) - 4:
        raise FileFormatError(f"{path}: header length {hlen} at offset 8 "
                              "exceeds file size")
    try:
        header = json.loads(blob[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FileFormatError(f"{path}: malformed JSON header at offset 12: "
                              f"{e}") from None
    return header, blob[12 + hlen:-4]


def _expect_payload(path, payload, nbytes):
    if len(payload) != nbytes:
        raise FileFormatError(f"{path}: payload is {len(payload)} bytes, "
                              f"expected {nbytes}")


# ---------------------------------------------------------------------------
# TRAJ

@dataclass
class TrajFile:
    """Decoded TRAJ contents: the f32 arm samples exactly as stored, plus
    header metadata."""
    arms: np.ndarray          # (n_arms, samples, 2) float32, cycles/FOV
    header: dict

    def interleaves(self):
        """Interleave set rebuilt from the stored base arm.

        The gradient is recovered by inverting the trapezoid k-space
        integral (g[0] = 0), so downstream density compensation works on
        trajectories that never carried an explicit gradient waveform.
        """
        dwell_us = float(self.header["dwell_time_us"])
        fov_mm = float(self.header["fov_mm"])
        dt_s = dwell_us * 1e-6
        k_m = self.arms[0].astype(float) / (fov_mm * 1e-3)   # cycles/m
        g = np.zeros_like(k_m)                               # T/m
        scale = 2.0 / (GAMMA_HZ_PER_T * dt_s)
        for n in range(1, k_m.shape[0]):
            g[n] = scale * (k_m[n] - k_m[n - 1]) - g[n - 1]
        base = SpiralArm(samples=self.arms[0].astype(float),
                         gradient_waveform=g * 1e3,
                         dwell_time_us=dwell_us, fov_mm=fov_mm)
        angles = 2.0 * np.pi * np.arange(self.arms.shape[0]) \
            / self.arms.shape[0]
        return InterleaveSet(base_arm=base, n_arms=self.arms.shape[0],
                             angles=angles)


def write_traj(path, interleaves=None, arms=None, dwell_time_us=None,
               fov_mm=None, extra_header=None):
    """All rotated arms, (kx, ky) f32 in cycles/FOV.

    Pass either an interleave set or an explicit (n_arms, samples, 2) arms
    array (the latter preserves bytes when re-serializing a read file).
    """
    if arms is None:
        if interleaves is None:
            raise ValueError("write_traj: need interleaves or arms")
        arms = np.stack([interleaves.arm(j).samples
                         for j in range(interleaves.n_arms)])
        dwell_time_us = interleaves.base_arm.dwell_time_us
        fov_mm = interleaves.base_arm.fov_mm
    arms = np.ascontiguousarray(arms, dtype="<f4")
    if arms.ndim != 3 or arms.shape[2] != 2:
        raise ValueError("write_traj: arms must be (n_arms, samples, 2)")
    header = {"n_arms": int(arms.shape[0]),
              "samples": int(arms.shape[1]),
              "units": "cycles/FOV",
              "dwell_time_us": float(dwell_time_us),
              "fov_mm": float(fov_mm)}
    if extra_header:
        header.update(extra_header)
    write_container(path, b"TRAJ", header, arms.tobytes())


def read_traj(path):
    header, payload = read_container(path, b"TRAJ")
    n_arms, n_samp = int(header["n_arms"]), int(header["samples"])
    _expect_payload(path, payload, n_arms * n_samp * 2 * 4)
    arms = np.frombuffer(payload, dtype="<f4").reshape(n_arms, n_samp, 2)
    return TrajFile(arms=arms.copy(), header=header)


# ---------------------------------------------------------------------------
# IMGS / MASK

_IMGS_DTYPES = {"f32": "<f4", "c64": "<c8"}


def write_imgs(path, array, pixel_size_mm, slice_thickness_mm,
               extra_header=None):
    """Image stack (n_slices, n_frames, n_coils, H, W); trailing singleton
    axes may be omitted on input (2D..5D accepted)."""
    array = np.asarray(array)
    if array.ndim < 2 or array.ndim > 5:
        raise ValueError(f"write_imgs: array must be 2D..5D, got "
                         f"{array.ndim}D")
    while array.ndim < 5:
        array = array[None]
    if np.iscomplexobj(array):
        dtype = "c64"
    else:
        dtype = "f32"
    s, f, c, h, w = array.shape
    header = {"H": h, "W": w, "n_frames": f, "n_slices": s, "n_coils": c,
              "dtype": dtype, "pixel_size_mm": float(pixel_size_mm),
              "slice_thickness_mm": float(slice_thickness_mm)}
    if extra_header:
        header.update(extra_header)
    payload = np.ascontiguousarray(array,
                                   dtype=_IMGS_DTYPES[dtype]).tobytes()
    write_container(path, b"IMGS", header, payload)


def read_imgs(path):
    header, payload = read_container(path, b"IMGS")
    dtype = header["dtype"]
    if dtype not in _IMGS_DTYPES:
        raise FileFormatError(f"{path}: unknown dtype '{dtype}'")
    shape = (int(header["n_slices"]), int(header["n_frames"]),
             int(header["n_coils"]), int(header["H"]), int(header["W"]))
    np_dtype = np.dtype(_IMGS_DTYPES[dtype])
    _expect_payload(path, payload, int(np.prod(shape)) * np_dtype.itemsize)
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape).copy()
    return arr, header


DEFAULT_LEGEND = {"0": "background", "1": "lv_blood", "2": "myocardium",
                  "3": "rv_blood"}


def write_mask(path, array, pixel_size_mm, slice_thickness_mm,
               legend=None, extra_header=None):
    """Label mask (n_slices, n_frames, H, W) uint8 with a legend."""
    array = np.asarray(array)
    if array.ndim < 2 or array.ndim > 4:
        raise ValueError(f"write_mask: array must be 2D..4D, got "
                         f"{array.ndim}D")
    while array.ndim < 4:
        array = array[None]
    s, f, h, w = array.shape
    header = {"H": h, "W": w, "n_frames": f, "n_slices": s, "n_coils": 1,
              "dtype": "u8", "pixel_size_mm": float(pixel_size_mm),
              "slice_thickness_mm": float(slice_thickness_mm),
              "legend": legend or DEFAULT_LEGEND}
    if extra_header:
        header.update(extra_header)
    payload = np.ascontiguousarray(array, dtype=np.uint8).tobytes()
    write_container(path, b"MASK", header, payload)


def read_mask(path):
    header, payload = read_container(path, b"MASK")
    if header.get("dtype") != "u8":
        raise FileFormatError(f"{path}: MASK dtype must be u8")
    shape = (int(header["n_slices"]), int(header["n_frames"]),
             int(header["H"]), int(header["W"]))
    _expect_payload(path, payload, int(np.prod(shape)))
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(shape).copy()
    return arr, header


# ---------------------------------------------------------------------------
# RAWK

def write_rawk(path, samples, traj_filename, dims, frame_dt_ms=48.0,
               dwell_time_us=2.0, extra_header=None):
    """Raw k-space samples (n_frames, n_coils, n_arms, samples_per_arm)
    complex, stored as interleaved f32 (re, im)."""
    samples = np.asarray(samples)
    if samples.ndim != 4:
        raise ValueError("write_rawk: samples must be 4D "
                         "[frame][coil][arm][sample]")
    f, c, a, m = samples.shape
    header = {"dims": int(dims), "n_frames": f, "n_coils": c, "n_arms": a,
              "samples_per_arm": m, "dwell_time": float(dwell_time_us),
              "trajectory": str(traj_filename),
              "frame_dt": float(frame_dt_ms)}
    if extra_header:
        header.update(extra_header)
    payload = np.ascontiguousarray(samples, dtype="<c8").tobytes()
    write_container(path, b"RAWK", header, payload)


def read_rawk(path):
    header, payload = read_container(path, b"RAWK")
    shape = (int(header["n_frames"]), int(header["n_coils"]),
             int(header["n_arms"]), int(header["samples_per_arm"]))
    _expect_payload(path, payload, int(np.prod(shape)) * 8)
    arr = np.frombuffer(payload, dtype="<c8").reshape(shape)
    return arr.astype(np.complex128), header
