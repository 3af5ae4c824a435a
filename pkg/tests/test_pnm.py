import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hclinpaint.pnm import FormatError, decode, encode, read_image, write_image


@given(arrays(np.float64, st.tuples(st.just(3), st.integers(1, 9), st.integers(1, 9)), elements=st.floats(0, 1)))
def test_color_round_trip_within_quantization(img):
    back = decode(encode(img))
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 1 / 510 + 1e-12


def test_binary_mask_exact(tmp_path):
    m = (np.random.default_rng(0).random((7, 5)) > 0.5).astype(float)
    write_image(tmp_path / "m.pgm", m)
    raw = (tmp_path / "m.pgm").read_bytes()
    assert raw.startswith(b"P5\n5 7\n255\n")
    assert set(raw[len(b"P5\n5 7\n255\n"):]) <= {0, 255}
    np.testing.assert_array_equal(read_image(tmp_path / "m.pgm"), m)


def test_comments_in_header():
    buf = b"P5\n# made by hand\n2 1\n# max\n255\n\x00\xff"
    np.testing.assert_array_equal(decode(buf), [[0.0, 1.0]])


@pytest.mark.parametrize(
    "buf, offset",
    [
        (b"P7\n2 2\n255\n" + bytes(4), 0),
        (b"P5\n2 2\n65535\n" + bytes(8), None),
        (b"P5\n2 2\n255\n" + bytes(3), None),
        (b"P6\n2", None),
    ],
)
def test_format_errors(buf, offset):
    with pytest.raises(FormatError) as err:
        decode(buf)
    if offset is not None:
        assert err.value.offset == offset
    assert "byte offset" in str(err.value)


def test_error_names_path(tmp_path):
    f = tmp_path / "broken.ppm"
    f.write_bytes(b"P3\n1 1\n255\n0 0 0")
    with pytest.raises(FormatError, match="broken.ppm"):
        read_image(f)


def test_write_clamps():
    out = decode(encode(np.array([[-0.5, 1.7]])))
    np.testing.assert_array_equal(out, [[0.0, 1.0]])
