import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spcaps.tensorio import (
    FormatError, Image, Space, hue_array, read_ppm, read_tensor, read_tensor_from, read_tensors,
    rgb_to_hue, rgb_to_lab, srgb_to_lab_array, to_gray, write_pgm, write_ppm, write_tensor,
    write_tensor_to, write_tensors,
)


def test_read_single_red_pixel(tmp_path):
    p = tmp_path / "red.ppm"
    p.write_bytes(b"P6\n1 1\n255\n" + bytes([255, 0, 0]))
    img = read_ppm(p)
    assert img.space == Space.RGB8
    assert img.data.shape == (1, 1, 3)
    assert img.data[0, 0].tolist() == [255, 0, 0]


def test_header_comments_are_skipped(tmp_path):
    p = tmp_path / "c.ppm"
    p.write_bytes(b"P6 # comment\n2 # w\n1\n255\n" + bytes(range(6)))
    assert read_ppm(p).data.ravel().tolist() == list(range(6))


def test_maxval_16bit_rejected(tmp_path):
    p = tmp_path / "deep.ppm"
    p.write_bytes(b"P6\n1 1\n65535\n" + bytes(6))
    with pytest.raises(FormatError, match="unsupported maxval"):
        read_ppm(p)


def test_gray_2x2_payload_order(tmp_path):
    p = tmp_path / "g.pgm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 85, 170, 255]))
    img = read_ppm(p)
    assert img.space == Space.GRAY
    assert img.data[:, :, 0].tolist() == [[0, 85], [170, 255]]


def test_bad_magic_and_truncation(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P3\n1 1\n255\n0 0 0\n")
    with pytest.raises(FormatError):
        read_ppm(p)
    p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
    with pytest.raises(OSError):
        read_ppm(p)


def test_ppm_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    rgb = Image.rgb(rng.integers(0, 256, (3, 3, 3)))
    write_ppm(rgb, tmp_path / "a.ppm")
    assert read_ppm(tmp_path / "a.ppm") == rgb
    gray = Image.gray(rng.integers(0, 256, (5, 4)))
    write_pgm(gray, tmp_path / "b.pgm")
    assert read_ppm(tmp_path / "b.pgm") == gray


def test_writer_space_mismatch(tmp_path):
    lab = rgb_to_lab(Image.rgb(np.zeros((2, 2, 3))))
    with pytest.raises(ValueError, match="space mismatch"):
        write_ppm(lab, tmp_path / "lab.ppm")
    with pytest.raises(ValueError, match="space mismatch"):
        write_pgm(Image.rgb(np.zeros((2, 2, 3))), tmp_path / "rgb.pgm")


def test_lab_black_and_white():
    lab = srgb_to_lab_array(np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]))
    np.testing.assert_allclose(lab[0], 0.0, atol=1e-12)
    assert abs(lab[1, 0] - 100.0) < 1e-6
    assert abs(lab[1, 1]) < 0.01 and abs(lab[1, 2]) < 0.01


def test_lab_matches_reference_converter():
    color = pytest.importorskip("skimage.color")
    rng = np.random.default_rng(1)
    rgb = np.concatenate([[[255, 0, 0], [0, 255, 0], [0, 0, 255]], rng.integers(0, 256, (50, 3))]).astype(np.uint8)
    ours = rgb_to_lab(Image.rgb(rgb[None])).data[0]
    ref = color.rgb2lab(rgb[None] / 255.0, illuminant="D65")[0]
    assert np.max(np.abs(ours[0] - ref[0])) < 0.05
    assert np.max(np.abs(ours - ref)) < 0.05


def test_lab_is_pixel_local():
    rng = np.random.default_rng(2)
    rgb = rng.integers(0, 256, (6, 7, 3)).astype(np.uint8)
    perm = rng.permutation(42)
    a = rgb_to_lab(Image.rgb(rgb)).data.reshape(-1, 3)
    b = rgb_to_lab(Image.rgb(rgb.reshape(-1, 3)[perm].reshape(6, 7, 3))).data.reshape(-1, 3)
    np.testing.assert_array_equal(a[perm], b)


def test_hue_reference_points():
    h = hue_array(np.array([[255, 0, 0], [0, 255, 0], [0, 0, 255], [128, 128, 128]], dtype=float))
    np.testing.assert_allclose(h, [0.0, 1 / 3, 2 / 3, 0.0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.uint8, (4, 5, 3)))
def test_hue_range(rgb):
    h = rgb_to_hue(Image.rgb(rgb)).data
    assert np.all(h >= 0) and np.all(h < 1)


def test_hue_matches_colorsys():
    import colorsys

    rng = np.random.default_rng(3)
    rgb = rng.integers(0, 256, (200, 3))
    ours = hue_array(rgb.astype(float))
    ref = np.array([colorsys.rgb_to_hsv(*(c / 255.0))[0] for c in rgb])
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_gray_luma():
    g = to_gray(Image.rgb(np.array([[[255, 255, 255], [255, 0, 0]]]))).data[0, :, 0]
    assert g.tolist() == [255, 76]


def test_tensor_round_trip_small(tmp_path):
    t = np.arange(6, dtype=np.float32).reshape(2, 3)
    write_tensor(t, tmp_path / "t.spct")
    np.testing.assert_array_equal(read_tensor(tmp_path / "t.spct"), t)


def test_tensor_round_trip_bit_exact(tmp_path):
    t = np.random.default_rng(4).standard_normal((8, 8, 64)).astype(np.float32)
    write_tensor(t, tmp_path / "t.spct")
    back = read_tensor(tmp_path / "t.spct")
    assert back.shape == (8, 8, 64)
    assert back.tobytes() == t.tobytes()


def test_tensor_layout():
    buf = io.BytesIO()
    write_tensor_to(buf, np.array([[1.0, 2.0]], dtype=np.float32))
    raw = buf.getvalue()
    assert raw[:4] == b"SPCT"
    assert raw[4:16] == (2).to_bytes(4, "little") + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
    assert np.frombuffer(raw[16:], "<f4").tolist() == [1.0, 2.0]


def test_tensor_errors(tmp_path):
    p = tmp_path / "t.spct"
    write_tensor(np.ones((2, 2), np.float32), p)
    raw = bytearray(p.read_bytes())
    bad = bytearray(raw)
    bad[0:4] = b"XXXX"
    p.write_bytes(bytes(bad))
    with pytest.raises(FormatError):
        read_tensor(p)
    p.write_bytes(bytes(raw[:-3]))
    with pytest.raises(FormatError):
        read_tensor(p)
    p.write_bytes(bytes(raw) + b"\0")
    with pytest.raises(FormatError):
        read_tensor(p)
    with pytest.raises(ValueError):
        write_tensor(np.array([np.nan]), p)


def test_named_tensors(tmp_path):
    rng = np.random.default_rng(5)
    named = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": rng.standard_normal(7).astype(np.float32)}
    offsets = write_tensors(named, tmp_path / "m.spct")
    assert offsets["a"] == 0
    back = read_tensors(tmp_path / "m.spct", offsets)
    for k in named:
        np.testing.assert_array_equal(back[k], named[k])


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5),
                  elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip_property(arr):
    buf = io.BytesIO()
    write_tensor_to(buf, arr)
    buf.seek(0)
    back = read_tensor_from(buf)
    assert back.shape == arr.shape
    assert back.tobytes() == np.array(arr, "<f4", order="C").tobytes()
