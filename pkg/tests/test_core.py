import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mmdrestore.core import (
    FormatError,
    GradientCheckError,
    as_image,
    derive_seed,
    finite_difference_gradient,
    from_levels,
    load_image,
    load_tensor,
    make_rng,
    quantize,
    relative_error,
    sample_standard_normal,
    save_image,
    save_tensor,
    to_levels,
)


def test_rng_streams_repeat():
    a = make_rng(42).standard_normal(5)
    b = make_rng(42).standard_normal(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_rng(43).standard_normal(5))


def test_derive_seed_is_stable_and_separates_parts():
    assert derive_seed(1, 2, 3) == derive_seed(1, 2, 3)
    assert derive_seed(1, 2, 3) != derive_seed(1, 3, 2)
    assert 0 <= derive_seed(2**64 - 1, 0) < 2**63


def test_standard_normal_rejects_empty_shape():
    with pytest.raises(ValueError):
        sample_standard_normal(make_rng(0), ())


def test_levels_round_trip():
    lv = np.arange(256)
    assert np.array_equal(to_levels(from_levels(lv)), lv)
    # round half up, with clipping
    assert to_levels(np.array([0.5 / 255, -1.0, 2.0])).tolist() == [1, 0, 255]


@given(arrays(np.float64, (4, 5), elements=st.floats(0, 1)))
def test_quantize_is_idempotent(x):
    q = quantize(x)
    assert np.array_equal(quantize(q), q)
    assert np.max(np.abs(q - x)) <= 0.5 / 255 + 1e-12


def test_as_image_validation():
    assert as_image(np.zeros((3, 4))).shape == (3, 4, 1)
    with pytest.raises(ValueError):
        as_image(np.zeros((3, 4, 2)))
    with pytest.raises(ValueError):
        as_image(np.full((2, 2, 1), 1.5))
    with pytest.raises(ValueError):
        as_image(np.full((2, 2, 1), np.nan))


def test_finite_difference_on_polynomial():
    x = np.array([0.3, -1.2, 2.0])
    g = finite_difference_gradient(lambda v: float(v[0] ** 3 + v[1] * v[2]), x, h=1e-4)
    assert np.allclose(g, [3 * 0.09, 2.0, -1.2], atol=1e-7)


def test_finite_difference_reports_coordinate():
    def f(v):
        return np.sqrt(v[1]) if v[1] >= 0 else np.nan

    with pytest.raises(GradientCheckError, match=r"\(1,\)"):
        finite_difference_gradient(f, np.array([1.0, 5e-4]), h=1e-3)
    with pytest.raises(ValueError):
        finite_difference_gradient(f, np.ones(2), h=0.0)


def test_relative_error_uses_floor():
    assert relative_error([1.0, 2.0], [1.0, 2.5]) == pytest.approx(0.2)
    assert relative_error([1e-9], [0.0]) == pytest.approx(0.1)


# ----------------------------------------------------------------- tensors


def test_tensor_layout_is_exact(tmp_path):
    path = tmp_path / "t.mrt"
    save_tensor(path, np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
    raw = path.read_bytes()
    assert raw[:4] == b"MRT1"
    assert struct.unpack("<III", raw[4:16]) == (2, 2, 3)
    assert np.frombuffer(raw[16:], "<f4").tolist() == [1, 2, 3, 4, 5, 6]


@settings(max_examples=30, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple), elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(tmp_path_factory, a):
    path = tmp_path_factory.mktemp("t") / "a.mrt"
    save_tensor(path, a)
    b = load_tensor(path)
    assert b.dtype == np.float32 and b.shape == a.shape
    assert np.array_equal(a, b)


def test_tensor_errors(tmp_path):
    with pytest.raises(ValueError):
        save_tensor(tmp_path / "x.mrt", np.float32(1.0))
    with pytest.raises(ValueError):
        save_tensor(tmp_path / "x.mrt", np.array([np.inf]))
    bad = tmp_path / "bad.mrt"
    bad.write_bytes(b"MRT2" + struct.pack("<II", 1, 1) + b"\0" * 4)
    with pytest.raises(FormatError, match="magic"):
        load_tensor(bad)
    bad.write_bytes(b"MRT1" + struct.pack("<I", 0))
    with pytest.raises(FormatError, match="rank"):
        load_tensor(bad)
    bad.write_bytes(b"MRT1" + struct.pack("<II", 1, 3) + b"\0" * 8)
    with pytest.raises(FormatError, match="payload"):
        load_tensor(bad)
    bad.write_bytes(b"MRT1" + struct.pack("<III", 2, 2**31, 2**31))
    with pytest.raises(FormatError, match="overflow"):
        load_tensor(bad)


# ------------------------------------------------------------------ images


@pytest.mark.parametrize("channels,magic", [(1, b"P5"), (3, b"P6")])
def test_image_round_trip(tmp_path, channels, magic):
    img = from_levels(make_rng(0).integers(0, 256, (5, 7, channels)))
    path = tmp_path / "i.pnm"
    save_image(path, img)
    assert path.read_bytes().startswith(magic + b"\n7 5\n255\n")
    assert np.array_equal(load_image(path), img)


def test_image_header_comments(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1 # width height\n255\n\x00\xff")
    assert load_image(path)[:, :, 0].tolist() == [[0.0, 1.0]]


def test_image_errors(tmp_path):
    path = tmp_path / "e.pgm"
    path.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(FormatError):
        load_image(path)
    path.write_bytes(b"P5\n2 2\n65535\n" + b"\0" * 8)
    with pytest.raises(FormatError, match="maxval"):
        load_image(path)
    path.write_bytes(b"P5\n2 2\n255\n\0")
    with pytest.raises(FormatError, match="truncated"):
        load_image(path)
