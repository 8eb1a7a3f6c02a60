import numpy as np
import pytest

from spiralcine import formats, trajectory


@pytest.fixture(scope="module")
def interleaves():
    return trajectory.design_spiral(resolution_mm=2.58)


def test_traj_round_trip_byte_identical(interleaves, tmp_path):
    p1 = tmp_path / "a.traj"
    formats.write_traj(str(p1), interleaves)
    tf = formats.read_traj(str(p1))
    p2 = tmp_path / "b.traj"
    formats.write_traj(str(p2), arms=tf.arms,
                       dwell_time_us=tf.header["dwell_time_us"],
                       fov_mm=tf.header["fov_mm"])
    assert p1.read_bytes() == p2.read_bytes()


def test_traj_gradient_recovery(interleaves, tmp_path):
    p = tmp_path / "a.traj"
    formats.write_traj(str(p), interleaves)
    il = formats.read_traj(str(p)).interleaves()
    g0 = interleaves.base_arm.gradient_waveform
    g1 = il.base_arm.gradient_waveform
    assert np.abs(g1 - g0).max() < 1e-3 * np.abs(g0).max()
    k = trajectory.integrate_arm_gradient(il.base_arm)
    assert np.abs(k - il.base_arm.samples).max() \
        < 1e-5 * np.abs(il.base_arm.samples).max()


def test_imgs_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    for arr in (rng.random((2, 3, 1, 8, 8)).astype(np.float32),
                (rng.random((8, 8)) + 1j * rng.random((8, 8)))
                .astype(np.complex64)):
        p = tmp_path / "x.imgs"
        formats.write_imgs(str(p), arr, 1.29, 8.0)
        out, hdr = formats.read_imgs(str(p))
        while arr.ndim < 5:
            arr = arr[None]
        assert np.array_equal(out, arr)
        # second write of the read data is byte-identical
        p2 = tmp_path / "y.imgs"
        formats.write_imgs(str(p2), out, hdr["pixel_size_mm"],
                           hdr["slice_thickness_mm"])
        assert p.read_bytes() == p2.read_bytes()


def test_mask_round_trip_with_legend(tmp_path):
    rng = np.random.default_rng(1)
    m = rng.integers(0, 4, (1, 2, 8, 8)).astype(np.uint8)
    p = tmp_path / "m.mask"
    formats.write_mask(str(p), m, 1.29, 8.0)
    out, hdr = formats.read_mask(str(p))
    assert np.array_equal(out, m)
    assert hdr["legend"]["2"] == "myocardium"


def test_rawk_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    s = (rng.standard_normal((3, 2, 13, 50))
         + 1j * rng.standard_normal((3, 2, 13, 50))).astype(np.complex64)
    p = tmp_path / "r.rawk"
    formats.write_rawk(str(p), s, "t.traj", 64, frame_dt_ms=48.0)
    out, hdr = formats.read_rawk(str(p))
    assert np.array_equal(out.astype(np.complex64), s)
    assert hdr["trajectory"] == "t.traj"
    assert hdr["frame_dt"] == 48.0
    p2 = tmp_path / "r2.rawk"
    formats.write_rawk(str(p2), out.astype(np.complex64),
                       hdr["trajectory"], hdr["dims"],
                       frame_dt_ms=hdr["frame_dt"],
                       dwell_time_us=hdr["dwell_time"])
    assert p.read_bytes() == p2.read_bytes()


@pytest.mark.parametrize("writer,reader", [
    ("traj", formats.read_traj),
    ("imgs", formats.read_imgs),
    ("mask", formats.read_mask),
    ("rawk", formats.read_rawk),
])
def test_crc_corruption_always_detected(writer, reader, tmp_path,
                                        interleaves):
    p = tmp_path / f"f.{writer}"
    if writer == "traj":
        formats.write_traj(str(p), interleaves)
    elif writer == "imgs":
        formats.write_imgs(str(p), np.zeros((4, 4), np.float32), 1.0, 1.0)
    elif writer == "mask":
        formats.write_mask(str(p), np.zeros((4, 4), np.uint8), 1.0, 1.0)
    else:
        formats.write_rawk(str(p), np.zeros((1, 1, 1, 4), np.complex64),
                           "t", 4)
    blob = bytearray(p.read_bytes())
    blob[len(blob) // 2] ^= 0x01
    p.write_bytes(bytes(blob))
    with pytest.raises(formats.FileFormatError, match="CRC"):
        reader(str(p))


def test_bad_magic_offset_reported(tmp_path):
    p = tmp_path / "bad.imgs"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(formats.FileFormatError, match="offset 0"):
        formats.read_imgs(str(p))


def test_truncated_payload_reported(tmp_path):
    p = tmp_path / "t.imgs"
    formats.write_imgs(str(p), np.zeros((4, 4), np.float32), 1.0, 1.0)
    blob = p.read_bytes()
    # drop 8 payload bytes and re-seal the CRC so truncation, not the
    # checksum, is what gets diagnosed
    import zlib
    body = blob[:-12]
    crc = np.uint32(zlib.crc32(body) & 0xFFFFFFFF).tobytes()
    p.write_bytes(body + crc)
    with pytest.raises(formats.FileFormatError, match="payload"):
        formats.read_imgs(str(p))


def test_atomic_write_leaves_no_temp(tmp_path):
    p = tmp_path / "x.imgs"
    formats.write_imgs(str(p), np.zeros((4, 4), np.float32), 1.0, 1.0)
    leftovers = [f for f in p.parent.iterdir() if f.suffix == ".tmp"]
    assert leftovers == []
