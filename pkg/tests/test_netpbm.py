import numpy as np
import pytest

from fop.imagecore import GrayImage
from fop.netpbm import (
    NetpbmError,
    decode_netpbm,
    encode_pbm,
    encode_pgm,
    read_netpbm,
    read_probability_pgm,
    write_pbm,
    write_pgm,
    write_probability_pgm,
)


@pytest.mark.parametrize("plain", [False, True])
@pytest.mark.parametrize("shape", [(1, 1), (3, 9), (7, 16), (5, 17)])
def test_pbm_roundtrip(tmp_path, plain, shape):
    x = (np.random.default_rng(sum(shape)).random(shape) < 0.4).astype(np.uint8)
    path = tmp_path / "x.pbm"
    write_pbm(path, x, plain=plain)
    back = read_netpbm(path)
    assert back.dtype == np.uint8
    np.testing.assert_array_equal(back, x)
    # bit-exact re-encoding
    assert encode_pbm(back, plain) == path.read_bytes()


@pytest.mark.parametrize("plain", [False, True])
@pytest.mark.parametrize("levels", [2, 256, 1024, 65536])
def test_pgm_roundtrip(tmp_path, plain, levels):
    rng = np.random.default_rng(levels)
    y = GrayImage(rng.integers(0, levels, size=(6, 11)), levels)
    path = tmp_path / "y.pgm"
    write_pgm(path, y, plain=plain)
    back = read_netpbm(path)
    assert back == y
    assert encode_pgm(back, plain) == path.read_bytes()


def test_comments_and_plain_packed_digits():
    data = b"P1\n# comment\n3 2\n101\n010\n"
    np.testing.assert_array_equal(decode_netpbm(data), [[1, 0, 1], [0, 1, 0]])
    g = decode_netpbm(b"P2 2 1 # c\n 9\n3 9\n")
    assert g.levels == 10
    np.testing.assert_array_equal(g.pixels, [[3, 9]])


def test_truncated():
    with pytest.raises(NetpbmError):
        decode_netpbm(b"P5\n4 4\n255\n\x00\x01")
    with pytest.raises(NetpbmError):
        decode_netpbm(b"P4\n8 2\n\xff")
    with pytest.raises(NetpbmError):
        decode_netpbm(b"P7\n")


def test_probability_map(tmp_path):
    p = np.array([[0.0, 0.25, 1.0], [0.5, 1 / 3, 0.999]])
    write_probability_pgm(tmp_path / "p.pgm", p)
    raw = read_netpbm(tmp_path / "p.pgm")
    assert raw.levels == 65536
    np.testing.assert_array_equal(raw.pixels, np.rint(p * 65535))
    np.testing.assert_allclose(read_probability_pgm(tmp_path / "p.pgm"), p, atol=1 / 65535)
