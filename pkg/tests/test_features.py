import io
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dejavu.features import (DataError, FormatError, feature_at, feature_map_from_bytes,
                             feature_map_to_bytes, flat_index, load_feature_map, load_image_ppm,
                             save_feature_map, save_image_ppm)


def test_feature_at_single_cell():
    fmap = np.array([3.0, 4.0]).reshape(1, 1, 2)
    np.testing.assert_array_equal(feature_at(fmap, 0, 0), [3.0, 4.0])


def test_feature_at_row_layout():
    fmap = np.array([5.0, 7.0]).reshape(2, 1, 1)
    np.testing.assert_array_equal(feature_at(fmap, 1, 0), [7.0])


def test_feature_at_matches_layout_formula():
    fmap = np.arange(12.0).reshape(2, 2, 3)
    start = flat_index(fmap.shape, 1, 1, 0)
    assert start == (1 * 2 + 1) * 3
    np.testing.assert_array_equal(feature_at(fmap, 1, 1), fmap.ravel()[start:start + 3])
    np.testing.assert_array_equal(feature_at(fmap, 1, 1), [9.0, 10.0, 11.0])


@pytest.mark.parametrize("row,col", [(-1, 0), (2, 0), (0, 2)])
def test_feature_at_out_of_range(row, col):
    with pytest.raises(IndexError):
        feature_at(np.zeros((2, 2, 3)), row, col)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4), st.data())
def test_layout_law(h, w, n, data):
    fmap = np.arange(h * w * n, dtype=float).reshape(h, w, n)
    r = data.draw(st.integers(0, h - 1))
    c = data.draw(st.integers(0, w - 1))
    k = data.draw(st.integers(0, n - 1))
    assert fmap.ravel()[flat_index(fmap.shape, r, c, k)] == fmap[r, c, k]


def test_dvf_sizes():
    buf = io.BytesIO()
    assert save_feature_map(np.full((1, 1, 1), 0.5), buf) == 20
    data = feature_map_to_bytes(np.zeros((2, 3, 10)))
    assert len(data) - 16 == 2 * 3 * 10 * 4


def test_dvf_header_is_little_endian():
    data = feature_map_to_bytes(np.zeros((2, 3, 4)))
    assert data[:4] == b"DVF1"
    assert struct.unpack("<III", data[4:16]) == (2, 3, 4)


def test_dvf_load_known_bytes():
    raw = b"DVF1" + struct.pack("<III", 1, 1, 1) + struct.pack("<f", 0.5)
    np.testing.assert_array_equal(feature_map_from_bytes(raw), np.full((1, 1, 1), 0.5))


def test_dvf_bad_magic():
    raw = b"XXXX" + struct.pack("<III", 1, 1, 1) + struct.pack("<f", 0.5)
    with pytest.raises(FormatError):
        feature_map_from_bytes(raw)


def test_dvf_truncated_payload():
    raw = b"DVF1" + struct.pack("<III", 4, 4, 10) + bytes(100)
    with pytest.raises(FormatError, match="640"):
        feature_map_from_bytes(raw)


def test_dvf_rejects_non_finite():
    raw = b"DVF1" + struct.pack("<III", 1, 1, 2) + struct.pack("<ff", 1.0, float("nan"))
    with pytest.raises(DataError):
        feature_map_from_bytes(raw)


finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@settings(max_examples=50)
@given(arrays(np.float32, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 5)),
              elements=finite32))
def test_dvf_round_trip_bit_exact(values):
    fmap = values.astype(np.float64)
    back = feature_map_from_bytes(feature_map_to_bytes(fmap))
    assert back.shape == fmap.shape
    assert back.astype(np.float32).tobytes() == values.tobytes()


def test_ppm_single_red_pixel():
    img = load_image_ppm(io.BytesIO(b"P6\n1 1\n255\n" + bytes([255, 0, 0])))
    np.testing.assert_array_equal(img, [[[1.0, 0.0, 0.0]]])


def test_ppm_mid_value():
    img = load_image_ppm(io.BytesIO(b"P6 1 1 255\n" + bytes([128, 128, 128])))
    assert img[0, 0, 0] == pytest.approx(128 / 255)
    assert img[0, 0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_ppm_header_comment():
    img = load_image_ppm(io.BytesIO(b"P6\n# made by hand\n2 1\n255\n" + bytes(range(6))))
    assert img.shape == (1, 2, 3)


@pytest.mark.parametrize("raw", [
    b"P3\n1 1\n255\n" + bytes(3),
    b"P6\n1 1\n65535\n" + bytes(6),
    b"P6\n2 2\n255\n" + bytes(5),
    b"P6\n1 x\n255\n" + bytes(3),
    b"P6\n1",
])
def test_ppm_malformed(raw):
    with pytest.raises(FormatError):
        load_image_ppm(io.BytesIO(raw))


@settings(max_examples=40)
@given(st.integers(1, 6), st.integers(1, 6), st.data())
def test_ppm_round_trip_byte_identical(w, h, data):
    pixels = data.draw(st.binary(min_size=w * h * 3, max_size=w * h * 3))
    raw = f"P6\n{w} {h}\n255\n".encode() + pixels
    out = io.BytesIO()
    save_image_ppm(load_image_ppm(io.BytesIO(raw)), out)
    assert out.getvalue() == raw
