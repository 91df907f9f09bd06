"""FoP model parameters, energies, feature counts and the model file format.

The parameter vector ``w`` and feature vector ``phi`` share one layout: for
each scale ``k`` a block of pattern entries (102 symmetry classes, or all
512 codes in raw mode) followed by ``M`` data entries. Energies are in nats
and ``p(x | y)`` is proportional to ``exp(-E(x, y))``.
"""
from __future__ import annotations

import hashlib
import io
import os
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .imagecore import (
    CLASS_OF,
    N_CLASSES,
    N_PATTERNS,
    GrayImage,
    Pyramid,
    as_binary,
    build_pyramid,
    pattern_codes,
)

FORMAT_TAG = "fop-model v1"


class ModelFormatError(ValueError):
    """Raised for malformed, truncated or incompatible model files."""


@dataclass
class FoPModel:
    """Per-scale pattern potentials ``V[k]`` and data costs ``D[k]``.

    ``lam`` is the regularisation weight used in training; it is stored
    with the model but takes no part in energy evaluation.
    """

    V: np.ndarray
    D: np.ndarray
    invariant: bool = True
    lam: float = 0.0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.V = np.array(self.V, dtype=np.float64, ndmin=2)
        self.D = np.array(self.D, dtype=np.float64, ndmin=2)
        if self.V.shape[0] < 1:
            raise ValueError("model needs at least one scale")
        if self.V.shape[0] != self.D.shape[0]:
            raise ValueError("V and D must have one row per scale")
        want = N_CLASSES if self.invariant else N_PATTERNS
        if self.V.shape[1] != want:
            raise ValueError(f"expected {want} pattern entries per scale, got {self.V.shape[1]}")
        if self.D.shape[1] < 1:
            raise ValueError("M must be positive")
        if not (np.all(np.isfinite(self.V)) and np.all(np.isfinite(self.D))):
            raise ValueError("model parameters must be finite")

    @classmethod
    def zeros(cls, K: int, M: int = 256, invariant: bool = True, lam: float = 0.0):
        C = N_CLASSES if invariant else N_PATTERNS
        return cls(np.zeros((K, C)), np.zeros((K, M)), invariant, lam)

    @property
    def K(self) -> int:
        return self.V.shape[0]

    @property
    def M(self) -> int:
        return self.D.shape[1]

    @property
    def n_patterns(self) -> int:
        return self.V.shape[1]

    @property
    def block_size(self) -> int:
        return self.n_patterns + self.M

    def pattern_table(self) -> np.ndarray:
        """Costs indexed by raw pattern code, shape (K, 512)."""
        if self.invariant:
            return self.V[:, CLASS_OF]
        return self.V.copy()

    def vector(self) -> np.ndarray:
        return np.concatenate([self.V, self.D], axis=1).reshape(-1)

    def with_vector(self, w) -> "FoPModel":
        w = np.asarray(w, dtype=np.float64).reshape(self.K, self.block_size)
        return FoPModel(w[:, :self.n_patterns].copy(), w[:, self.n_patterns:].copy(),
                        self.invariant, self.lam, dict(self.meta))

    def level0(self) -> "FoPModel":
        """Single-scale model made of the finest scale's parameters."""
        return FoPModel(self.V[:1].copy(), self.D[:1].copy(), self.invariant, self.lam)

    def extended(self, K: int) -> "FoPModel":
        """Copy with ``K`` scales; new scales start at zero."""
        V = np.zeros((K, self.n_patterns))
        D = np.zeros((K, self.M))
        k = min(K, self.K)
        V[:k] = self.V[:k]
        D[:k] = self.D[:k]
        return FoPModel(V, D, self.invariant, self.lam)

    def copy(self) -> "FoPModel":
        return FoPModel(self.V.copy(), self.D.copy(), self.invariant, self.lam, dict(self.meta))

    def __eq__(self, other):
        if not isinstance(other, FoPModel):
            return NotImplemented
        return (self.invariant == other.invariant and self.lam == other.lam
                and np.array_equal(self.V, other.V) and np.array_equal(self.D, other.D))

    __hash__ = None

    def digest(self) -> str:
        return hashlib.sha256(dumps(self).encode()).hexdigest()


# --- energies -----------------------------------------------------------------

def _x_pyramid(x, K) -> Pyramid:
    if isinstance(x, Pyramid):
        if x.K != K:
            raise ValueError(f"pyramid has {x.K} levels, model has {K}")
        return x
    return build_pyramid(as_binary(x), K)


def _y_pyramid(y, K) -> Pyramid | None:
    if y is None:
        return None
    if isinstance(y, Pyramid):
        if y.K != K:
            raise ValueError(f"pyramid has {y.K} levels, model has {K}")
        return y
    if not isinstance(y, GrayImage):
        y = GrayImage(np.asarray(y))
    return build_pyramid(y, K)


def _check_geometry(px: Pyramid, py: Pyramid | None, M: int | None = None):
    if py is None:
        return
    if px.shapes() != py.shapes():
        raise ValueError(f"pyramid geometry mismatch: {px.shapes()} vs {py.shapes()}")
    if M is not None and py.levels[0].levels != M:
        raise ValueError(f"observation has {py.levels[0].levels} levels, model expects {M}")


def energy_fop(model: FoPModel, px) -> float:
    """Pattern energy summed over every window of every pyramid level."""
    px = _x_pyramid(px, model.K)
    table = model.pattern_table()
    return float(sum(table[k][pattern_codes(lvl)].sum() for k, lvl in enumerate(px.levels)))


def energy_data(model: FoPModel, px, py) -> float:
    """Observation cost ``D[k][y_k]`` summed over on-cells of every level."""
    px = _x_pyramid(px, model.K)
    py = _y_pyramid(py, model.K)
    if py is None:
        return 0.0
    _check_geometry(px, py, model.M)
    e = 0.0
    for k, (xl, yl) in enumerate(zip(px.levels, py.levels)):
        e += model.D[k][yl.pixels[xl == 1]].sum()
    return float(e)


def energy_total(model: FoPModel, px, py=None) -> float:
    return energy_fop(model, px) + energy_data(model, px, py)


def features(model: FoPModel, px, py=None) -> np.ndarray:
    """Feature vector ``phi(x, y)`` laid out like :meth:`FoPModel.vector`.

    Only the layout of ``model`` (K, M, invariant) is used.
    """
    px = _x_pyramid(px, model.K)
    py = _y_pyramid(py, model.K)
    _check_geometry(px, py, model.M)
    blocks = []
    for k, xl in enumerate(px.levels):
        codes = pattern_codes(xl).reshape(-1)
        if model.invariant:
            pat = np.bincount(CLASS_OF[codes], minlength=N_CLASSES)
        else:
            pat = np.bincount(codes, minlength=N_PATTERNS)
        if py is None:
            dat = np.zeros(model.M, dtype=np.int64)
        else:
            dat = np.bincount(py.levels[k].pixels[xl == 1], minlength=model.M)
        blocks.append(np.concatenate([pat, dat]))
    return np.concatenate(blocks).astype(np.int64)


# --- incremental state --------------------------------------------------------

class PyramidState:
    """Mutable pyramid of a binary image with per-cell pattern codes.

    Flipping a level-0 pixel updates at most one cell per level and the
    nine codes around each changed cell.
    """

    def __init__(self, x, K: int):
        x = as_binary(x)
        self.shape = x.shape
        self.K = K
        pyr = build_pyramid(x, K)
        sizes = [a.size for a in pyr.levels]
        self.ns = np.array([a.shape[0] for a in pyr.levels], dtype=np.int64)
        self.ms = np.array([a.shape[1] for a in pyr.levels], dtype=np.int64)
        self.off = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.xs = np.concatenate([a.reshape(-1) for a in pyr.levels]).astype(np.uint8)
        self.codes = np.zeros(self.off[-1], dtype=np.int32)
        _kernels.fill_codes(self.xs, self.codes, self.off, self.ns, self.ms)

    def level(self, k: int) -> np.ndarray:
        return self.xs[self.off[k]:self.off[k + 1]].reshape(self.ns[k], self.ms[k])

    @property
    def x(self) -> np.ndarray:
        return self.level(0)

    def pyramid(self) -> Pyramid:
        return Pyramid("binary-or", tuple(self.level(k).copy() for k in range(self.K)))

    def copy(self) -> "PyramidState":
        new = object.__new__(PyramidState)
        new.__dict__.update(self.__dict__)
        new.xs = self.xs.copy()
        new.codes = self.codes.copy()
        return new


class EnergyTables:
    """Lookup tables binding a model to one observation pyramid."""

    def __init__(self, model: FoPModel, py, shape, K: int | None = None):
        K = model.K if K is None else K
        if K < model.K:
            raise ValueError("state has fewer levels than the model")
        self.model = model
        vt = np.zeros((K, N_PATTERNS))
        vt[:model.K] = model.pattern_table()
        self.vtab = vt
        shapes = [tuple(int(v) for v in s) for s in _shapes(shape, K)]
        self.dmap = np.zeros(sum(a * b for a, b in shapes))
        if py is not None:
            py = py if isinstance(py, Pyramid) else build_pyramid(py, K)
            if py.K < model.K:
                raise ValueError("observation pyramid too shallow for model")
            if py.levels[0].levels != model.M:
                raise ValueError(f"observation has {py.levels[0].levels} levels, model expects {model.M}")
            o = 0
            for k, (a, b) in enumerate(shapes):
                if k < model.K:
                    yl = py.levels[k].pixels
                    if yl.shape != (a, b):
                        raise ValueError("observation geometry mismatch")
                    self.dmap[o:o + a * b] = model.D[k][yl.reshape(-1)]
                o += a * b
        self.dmap0 = self.dmap[: shapes[0][0] * shapes[0][1]].copy()
        self.v0 = self.vtab[0].copy()


def _shapes(shape, K):
    from .imagecore import level_shape
    return [level_shape(tuple(shape), k) for k in range(K)]


def delta_energy(model: FoPModel, px, py, flips) -> float:
    """Energy change from flipping the listed level-0 pixels.

    Only the affected pyramid cells and windows are visited; the inputs are
    not modified.
    """
    px = _x_pyramid(px, model.K)
    x = px.levels[0]
    n, m = x.shape
    flips = list(flips)
    for i, j in flips:
        if not (0 <= i < n and 0 <= j < m):
            raise IndexError(f"flip ({i}, {j}) outside {n}x{m} image")
    py = _y_pyramid(py, model.K)
    _check_geometry(px, py, model.M)
    st = PyramidState(x, model.K)
    tb = EnergyTables(model, py, x.shape)
    dummy = np.zeros(1)
    d = 0.0
    for i, j in flips:
        dp, _ = _kernels.flip_pixel(i, j, st.xs, st.codes, st.off, st.ns, st.ms,
                                    tb.vtab, tb.dmap, dummy, dummy, False)
        d += dp
    return d


# --- file format ----------------------------------------------------------------

def dumps(model: FoPModel, step: int | None = None) -> str:
    out = io.StringIO()
    out.write(f"{FORMAT_TAG}\n")
    out.write(f"K {model.K}\n")
    out.write(f"M {model.M}\n")
    out.write(f"mode {'invariant' if model.invariant else 'raw'}\n")
    out.write(f"lambda {model.lam!r}\n")
    if step is not None:
        out.write(f"step {int(step)}\n")
    for k in range(model.K):
        out.write(f"V {k}\n")
        out.writelines(f"{float(v)!r}\n" for v in model.V[k])
        out.write(f"D {k}\n")
        out.writelines(f"{float(v)!r}\n" for v in model.D[k])
    return out.getvalue()


def loads(text: str, expect_mode: str | None = None) -> FoPModel:
    """Parse a model file; ``expect_mode`` ('invariant' or 'raw') is enforced if given."""
    model, _ = _parse(text, expect_mode)
    return model


def _parse(text: str, expect_mode: str | None):
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise ModelFormatError("empty model file")
    if " ".join(lines[0].split()) != FORMAT_TAG:
        if lines[0].split()[:1] == ["fop-model"]:
            raise ModelFormatError(f"unsupported model version: {lines[0]!r}")
        raise ModelFormatError(f"not a model file (header {lines[0]!r})")
    header = {}
    pos = 1
    while pos < len(lines) and lines[pos].split()[0] in ("K", "M", "mode", "lambda", "step"):
        key, *rest = lines[pos].split()
        if len(rest) != 1:
            raise ModelFormatError(f"bad header line {lines[pos]!r}")
        header[key] = rest[0]
        pos += 1
    for key in ("K", "M", "mode"):
        if key not in header:
            raise ModelFormatError(f"missing header field {key!r}")
    try:
        K = int(header["K"])
        M = int(header["M"])
        lam = float(header.get("lambda", "0.0"))
        step = int(header["step"]) if "step" in header else None
    except ValueError as exc:
        raise ModelFormatError(f"bad header value: {exc}") from None
    mode = header["mode"]
    if mode not in ("invariant", "raw"):
        raise ModelFormatError(f"unknown mode {mode!r}")
    if expect_mode is not None and mode != expect_mode:
        raise ModelFormatError(f"model file is in {mode} mode, expected {expect_mode}")
    if K < 1 or M < 1:
        raise ModelFormatError("K and M must be positive")
    C = N_CLASSES if mode == "invariant" else N_PATTERNS
    V = np.empty((K, C))
    D = np.empty((K, M))

    def section(tag, k, count):
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError(f"truncated file: missing section {tag} {k}")
        if lines[pos].split() != [tag, str(k)]:
            raise ModelFormatError(f"expected section '{tag} {k}', got {lines[pos]!r}")
        pos += 1
        vals = lines[pos:pos + count]
        if len(vals) < count or any(v[0].isalpha() and v.lower() not in ("inf", "-inf", "nan") for v in vals):
            raise ModelFormatError(f"truncated section {tag} {k}: expected {count} values")
        try:
            arr = np.array([float(v) for v in vals])
        except ValueError as exc:
            raise ModelFormatError(f"bad value in section {tag} {k}: {exc}") from None
        pos += count
        return arr

    for k in range(K):
        V[k] = section("V", k, C)
        D[k] = section("D", k, M)
    if pos != len(lines):
        raise ModelFormatError(f"unexpected trailing content: {lines[pos]!r}")
    try:
        model = FoPModel(V, D, mode == "invariant", lam)
    except ValueError as exc:
        raise ModelFormatError(str(exc)) from None
    return model, step


def model_save(model: FoPModel, path, step: int | None = None) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="\n") as f:
        f.write(dumps(model, step))


def model_load(path, expect_mode: str | None = None) -> FoPModel:
    with open(path) as f:
        return loads(f.read(), expect_mode)


def checkpoint_load(path, expect_mode: str | None = None) -> tuple[FoPModel, int | None]:
    with open(path) as f:
        return _parse(f.read(), expect_mode)
