"""Image containers, pyramids and 3x3 pattern codes.

Binary images are plain 2-D ``uint8`` arrays holding 0/1. Grayscale
observations carry their level count, so they are wrapped in
:class:`GrayImage`.

Pattern codes use a row-major bit layout: for a window centred at
``(i, j)`` bit ``3*(dr+1) + (dc+1)`` holds ``x[i+dr, j+dc]``. The centre
pixel is bit 4 and pixels outside the image read as 0.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

N_PATTERNS = 512
N_CLASSES = 102


def as_binary(x) -> np.ndarray:
    """Validate and return ``x`` as a 2-D uint8 0/1 array."""
    a = np.asarray(x)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"binary image must be a nonempty 2-D array, got shape {a.shape}")
    if a.dtype != np.uint8:
        if np.any((a != 0) & (a != 1)):
            raise ValueError("binary image values must be 0 or 1")
        a = a.astype(np.uint8)
    elif a.max() > 1:
        raise ValueError("binary image values must be 0 or 1")
    return a


@dataclass(frozen=True)
class GrayImage:
    """Grayscale image with integer pixels in ``0..levels-1``."""

    pixels: np.ndarray
    levels: int = 256

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"gray image must be a nonempty 2-D array, got shape {p.shape}")
        if self.levels < 1:
            raise ValueError("levels must be positive")
        if p.size and (p.min() < 0 or p.max() >= self.levels):
            raise ValueError(f"gray values must lie in [0, {self.levels - 1}]")
        object.__setattr__(self, "pixels", p.astype(np.int32, copy=False))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return self.levels == other.levels and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


def level_shape(shape: tuple[int, int], k: int) -> tuple[int, int]:
    """Grid size of pyramid level ``k`` for a base image of ``shape``."""
    n, m = shape
    s = 1 << k
    return (-(-n // s), -(-m // s))


def _pad_even(a: np.ndarray) -> np.ndarray:
    n, m = a.shape
    return np.pad(a, ((0, n % 2), (0, m % 2)))


def coarsen_or(img) -> np.ndarray:
    """Halve resolution; each parent is the OR of its in-range children."""
    a = _pad_even(as_binary(img))
    n, m = a.shape
    return a.reshape(n // 2, 2, m // 2, 2).max(axis=(1, 3))


def coarsen_avg(img: GrayImage) -> GrayImage:
    """Halve resolution; each parent is floor(mean of in-range children)."""
    p = img.pixels
    n, m = p.shape
    sums = _pad_even(p.astype(np.int64))
    sums = sums.reshape(sums.shape[0] // 2, 2, sums.shape[1] // 2, 2).sum(axis=(1, 3))
    counts = _pad_even(np.ones((n, m), dtype=np.int64))
    counts = counts.reshape(counts.shape[0] // 2, 2, counts.shape[1] // 2, 2).sum(axis=(1, 3))
    return GrayImage(sums // counts, img.levels)


@dataclass(frozen=True)
class Pyramid:
    """Stack of successively coarsened images; ``levels[0]`` is the source."""

    kind: str  # "binary-or" or "gray-average"
    levels: tuple

    @property
    def K(self) -> int:
        return len(self.levels)

    def arrays(self) -> list[np.ndarray]:
        if self.kind == "binary-or":
            return list(self.levels)
        return [g.pixels for g in self.levels]

    def shapes(self) -> list[tuple[int, int]]:
        return [a.shape for a in self.arrays()]

    def __getitem__(self, k):
        return self.levels[k]


def build_pyramid(img, K: int) -> Pyramid:
    """Build a ``K``-level pyramid; OR coarsening for binary input, averaging for gray."""
    if K < 1:
        raise ValueError("K must be at least 1")
    if isinstance(img, GrayImage):
        base_shape = img.shape
    else:
        img = as_binary(img)
        base_shape = img.shape
    # ceil division never reaches zero, so reject pyramids whose coarsest
    # level would need more halvings than the image supports
    if (1 << (K - 1)) >= 2 * max(base_shape):
        raise ValueError(f"K={K} too large for image of shape {base_shape}")
    levels = [img]
    for _ in range(K - 1):
        prev = levels[-1]
        levels.append(coarsen_avg(prev) if isinstance(img, GrayImage) else coarsen_or(prev))
    kind = "gray-average" if isinstance(img, GrayImage) else "binary-or"
    return Pyramid(kind, tuple(levels))


# --- patterns ---------------------------------------------------------------

def pattern_codes(img) -> np.ndarray:
    """Pattern code of the 3x3 window centred at every pixel (zero padded)."""
    a = as_binary(img).astype(np.int32)
    n, m = a.shape
    p = np.pad(a, 1)
    codes = np.zeros((n, m), dtype=np.int32)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            bit = 3 * (dr + 1) + (dc + 1)
            codes |= p[1 + dr:1 + dr + n, 1 + dc:1 + dc + m] << bit
    return codes


def pattern_at(img, i: int, j: int) -> int:
    a = as_binary(img)
    n, m = a.shape
    if not (0 <= i < n and 0 <= j < m):
        raise IndexError(f"pixel ({i}, {j}) outside {n}x{m} image")
    code = 0
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            r, c = i + dr, j + dc
            if 0 <= r < n and 0 <= c < m and a[r, c]:
                code |= 1 << (3 * (dr + 1) + (dc + 1))
    return code


def code_to_window(code: int) -> np.ndarray:
    return np.array([(code >> b) & 1 for b in range(9)], dtype=np.uint8).reshape(3, 3)


def window_to_code(win: np.ndarray) -> int:
    flat = np.asarray(win, dtype=np.int64).reshape(9)
    return int((flat << np.arange(9)).sum())


def _dihedral_windows(win: np.ndarray) -> list[np.ndarray]:
    out = []
    for t in range(8):
        w = np.rot90(win, t % 4)
        if t >= 4:
            w = np.fliplr(w)
        out.append(w)
    return out


def _build_tables():
    transforms = np.empty((8, N_PATTERNS), dtype=np.int32)
    for code in range(N_PATTERNS):
        for t, w in enumerate(_dihedral_windows(code_to_window(code))):
            transforms[t, code] = window_to_code(w)
    canon = transforms.min(axis=0)
    reps = np.unique(canon)
    class_of = np.searchsorted(reps, canon).astype(np.int32)
    return transforms, reps.astype(np.int32), class_of


#: ``DIHEDRAL[t, code]`` is ``code`` after the ``t``-th of the 8 symmetries.
#: Indices 0-3 rotate by multiples of 90 degrees; 4-7 add a mirror.
DIHEDRAL, CLASS_REPRESENTATIVES, CLASS_OF = _build_tables()
for _a in (DIHEDRAL, CLASS_REPRESENTATIVES, CLASS_OF):
    _a.setflags(write=False)

# transpose of the window (swap rows and columns), used for vertical bands
TRANSPOSE = np.array(
    [window_to_code(code_to_window(c).T) for c in range(N_PATTERNS)], dtype=np.int32
)
TRANSPOSE.setflags(write=False)


def canonicalize(code: int) -> int:
    """Symmetry class id (0..101) of a pattern code."""
    if not 0 <= code < N_PATTERNS:
        raise ValueError(f"pattern code {code} out of range")
    return int(CLASS_OF[code])


def transform_image(img: np.ndarray, t: int) -> np.ndarray:
    """Apply dihedral transform ``t`` (same numbering as :data:`DIHEDRAL`) to an image."""
    w = np.rot90(img, t % 4)
    if t >= 4:
        w = np.fliplr(w)
    return np.ascontiguousarray(w)


def class_sizes() -> np.ndarray:
    return np.bincount(CLASS_OF, minlength=N_CLASSES)


def connected_components(img, connectivity: int = 8) -> list[np.ndarray]:
    """Masks of the connected components of the on-pixels of ``img``."""
    from scipy import ndimage

    structure = np.ones((3, 3), dtype=int) if connectivity == 8 else None
    labels, count = ndimage.label(as_binary(img), structure=structure)
    return [labels == c for c in range(1, count + 1)]


def parent_cells(mask: np.ndarray) -> np.ndarray:
    """Mask of the coarse cells that contain at least one pixel of ``mask``."""
    return coarsen_or(mask.astype(np.uint8))


def stack_shapes(shape: Sequence[int], K: int) -> list[tuple[int, int]]:
    return [level_shape(tuple(shape), k) for k in range(K)]
