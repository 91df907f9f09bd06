"""Minimal PBM (P1/P4) and PGM (P2/P5) reader and writer."""
from __future__ import annotations

import os

import numpy as np

from .imagecore import GrayImage, as_binary


class NetpbmError(ValueError):
    pass


def _tokens(data: bytes, count: int, pos: int = 0):
    """Read ``count`` whitespace separated header tokens, skipping comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        out.append(data[start:pos])
    return out, pos


def read_netpbm(path):
    """Read a PBM or PGM file.

    Returns a binary ``uint8`` array for PBM and a :class:`GrayImage`
    (with ``levels = maxval + 1``) for PGM.
    """
    with open(path, "rb") as f:
        data = f.read()
    return decode_netpbm(data)


def decode_netpbm(data: bytes):
    magic = data[:2]
    if magic in (b"P1", b"P4"):
        (w, h), pos = _tokens(data, 2, 2)
        w, h = int(w), int(h)
        if magic == b"P1":
            body = data[pos:]
            # P1 pixels may be packed without separators
            digits = [c for c in body if c in (48, 49)]
            if len(digits) < w * h:
                raise NetpbmError("truncated P1 raster")
            return (np.array(digits[: w * h], dtype=np.uint8) - 48).reshape(h, w)
        pos += 1  # single whitespace byte before raster
        stride = (w + 7) // 8
        raw = np.frombuffer(data[pos:pos + stride * h], dtype=np.uint8)
        if raw.size < stride * h:
            raise NetpbmError("truncated P4 raster")
        bits = np.unpackbits(raw.reshape(h, stride), axis=1)[:, :w]
        return bits.astype(np.uint8)
    if magic in (b"P2", b"P5"):
        (w, h, maxval), pos = _tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
        if not 0 < maxval < 65536:
            raise NetpbmError(f"bad maxval {maxval}")
        if magic == b"P2":
            vals = data[pos:].split()
            if len(vals) < w * h:
                raise NetpbmError("truncated P2 raster")
            pix = np.array([int(v) for v in vals[: w * h]], dtype=np.int64).reshape(h, w)
        else:
            pos += 1
            dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
            nbytes = w * h * dtype.itemsize
            if len(data) - pos < nbytes:
                raise NetpbmError("truncated P5 raster")
            pix = np.frombuffer(data[pos:pos + nbytes], dtype=dtype).reshape(h, w).astype(np.int64)
        if pix.max(initial=0) > maxval:
            raise NetpbmError("pixel exceeds maxval")
        return GrayImage(pix, maxval + 1)
    raise NetpbmError(f"unsupported magic number {magic!r}")


def encode_pbm(img, plain: bool = False) -> bytes:
    a = as_binary(img)
    h, w = a.shape
    if plain:
        rows = "\n".join(" ".join(str(int(v)) for v in row) for row in a)
        return f"P1\n{w} {h}\n{rows}\n".encode()
    packed = np.packbits(a, axis=1)
    return f"P4\n{w} {h}\n".encode() + packed.tobytes()


def encode_pgm(img: GrayImage, plain: bool = False, maxval: int | None = None) -> bytes:
    maxval = img.levels - 1 if maxval is None else maxval
    if not 0 < maxval < 65536:
        raise NetpbmError(f"bad maxval {maxval}")
    pix = img.pixels
    h, w = pix.shape
    if plain:
        rows = "\n".join(" ".join(str(int(v)) for v in row) for row in pix)
        return f"P2\n{w} {h}\n{maxval}\n{rows}\n".encode()
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    return f"P5\n{w} {h}\n{maxval}\n".encode() + pix.astype(dtype).tobytes()


def write_pbm(path, img, plain: bool = False) -> None:
    _write(path, encode_pbm(img, plain))


def write_pgm(path, img: GrayImage, plain: bool = False) -> None:
    _write(path, encode_pgm(img, plain))


def write_probability_pgm(path, prob: np.ndarray) -> None:
    """Store values in [0, 1] as a 16-bit PGM (value = round(p * 65535))."""
    q = np.rint(np.clip(prob, 0.0, 1.0) * 65535).astype(np.int64)
    _write(path, encode_pgm(GrayImage(q, 65536)))


def read_probability_pgm(path) -> np.ndarray:
    g = read_netpbm(path)
    if not isinstance(g, GrayImage):
        raise NetpbmError("expected a PGM probability map")
    return g.pixels / float(g.levels - 1)


def _write(path, data: bytes) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(data)
