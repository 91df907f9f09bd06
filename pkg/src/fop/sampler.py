"""Block Gibbs, exact band and Metropolis-Hastings band samplers.

A band is a strip of ``h`` full rows (or columns). Under a single-scale
model the columns of the band form a chain whose factors couple three
neighbouring column states, so the band can be sampled exactly with a
forward pass followed by backward sampling. For multiscale targets the
exact single-scale sampler of a proposal model ``q`` generates
candidates that are accepted or rejected against the target ``p``; one
forward table serves many proposals.
"""
from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .imagecore import TRANSPOSE, as_binary
from .model import EnergyTables, FoPModel, PyramidState, energy_total

RNG_ALGORITHM = "numpy.random.PCG64 seeded via numpy.random.SeedSequence; chains use SeedSequence.spawn"
MAX_BLOCK = 20
MAX_BAND_HEIGHT = 8


def make_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.PCG64(seed))


def spawn_seeds(seed, count: int) -> list[np.random.SeedSequence]:
    """Independent child streams, one per chain/image."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return ss.spawn(count)


class ChainState:
    """Current image, its maintained pyramid, an RNG and a sweep counter."""

    def __init__(self, x, K: int, seed=None):
        self.state = PyramidState(as_binary(x), K)
        self.rng = make_rng(seed)
        self.sweeps = 0

    @property
    def x(self) -> np.ndarray:
        return self.state.x

    @property
    def K(self) -> int:
        return self.state.K

    @property
    def shape(self):
        return self.state.shape

    def pyramid(self):
        return self.state.pyramid()

    def copy(self) -> "ChainState":
        new = object.__new__(ChainState)
        new.state = self.state.copy()
        new.rng = np.random.Generator(np.random.PCG64())
        new.rng.bit_generator.state = self.rng.bit_generator.state
        new.sweeps = self.sweeps
        return new


@dataclass(frozen=True)
class Band:
    axis: str  # "h" (rows) or "v" (columns)
    start: int
    height: int

    def __post_init__(self):
        if self.axis not in ("h", "v"):
            raise ValueError("band axis must be 'h' or 'v'")
        if self.height < 1 or self.start < 0:
            raise ValueError("invalid band")

    def check(self, shape):
        extent = shape[0] if self.axis == "h" else shape[1]
        if self.start + self.height > extent:
            raise ValueError(f"band {self} exceeds image of shape {shape}")

    def pixels(self, shape):
        n, m = shape
        if self.axis == "h":
            return [(r, c) for r in range(self.start, self.start + self.height) for c in range(m)]
        return [(r, c) for c in range(self.start, self.start + self.height) for r in range(n)]


@dataclass(frozen=True)
class Schedule:
    """Band sweep schedule: height ``h``, proposals per band, band stride."""

    h: int = 3
    proposals: int = 8
    stride: int | None = None  # default ceil(h / 2)

    def bands(self, shape) -> list[Band]:
        out = []
        for axis, extent in (("h", shape[0]), ("v", shape[1])):
            h = min(self.h, extent)
            stride = self.stride or max(1, math.ceil(self.h / 2))
            starts = list(range(0, extent - h + 1, stride))
            if starts[-1] != extent - h:
                starts.append(extent - h)
            out.extend(Band(axis, s, h) for s in starts)
        return out


@dataclass
class ForwardTable:
    band: Band
    alpha: np.ndarray  # (m, 2^h, 2^h) log-weights over (z_{j-1}, z_j)
    log_normalizer: float
    ctx: np.ndarray
    dcol: np.ndarray
    vb: np.ndarray
    rows: int  # extent across the band direction, in band orientation

    @property
    def columns(self) -> int:
        return self.alpha.shape[0]


class BandSampler:
    """Target ``p``, proposal ``q`` and observation bound to one image shape."""

    def __init__(self, p: FoPModel, q: FoPModel | None, y, shape, K: int | None = None,
                 schedule: Schedule = Schedule()):
        if q is None:
            q = p.level0()
        if q.K != 1:
            raise ValueError("proposal model must be single-scale")
        K = p.K if K is None else K
        self.p = p
        self.q = q
        self.shape = tuple(shape)
        self.K = K
        self.schedule = schedule
        self.tp = EnergyTables(p, y, shape, K)
        tq = EnergyTables(q, y, shape, 1)
        self.vq = tq.v0
        self.dq = tq.dmap0
        self.vq_t = np.ascontiguousarray(self.vq[TRANSPOSE])
        self.dq2 = self.dq.reshape(self.shape)
        self.bands = schedule.bands(self.shape)

    def energy(self, chain: ChainState) -> float:
        s = chain.state
        return _kernels.total_energy(s.xs, s.codes, s.off, s.ns, s.ms, self.tp.vtab, self.tp.dmap)

    def forward(self, x: np.ndarray, band: Band) -> ForwardTable:
        band.check(self.shape)
        h = band.height
        if h > MAX_BAND_HEIGHT:
            raise ValueError(f"band height {h} exceeds limit {MAX_BAND_HEIGHT}")
        if band.axis == "h":
            xb, db, vb = x, self.dq2, self.vq
        else:
            xb, db, vb = x.T, self.dq2.T, self.vq_t
        alpha = np.empty((xb.shape[1], 1 << h, 1 << h))
        logz, ctx, dcol = _kernels.band_forward(xb, db, vb, band.start, h, alpha)
        return ForwardTable(band, alpha, logz, ctx, dcol, vb, xb.shape[0])

    def mh_band_step(self, chain: ChainState, band: Band, proposals: int | None = None,
                     accum: np.ndarray | None = None):
        """Draw proposals for one band and accept each with the MH ratio.

        Returns (accepted, proposals, energy change under ``p``).
        """
        _check_chain(chain, self)
        P = self.schedule.proposals if proposals is None else proposals
        ft = self.forward(chain.x, band)
        u = chain.rng.random((P, ft.columns + 1))
        s = chain.state
        acc = np.zeros(0) if accum is None else accum
        accepted, de = _kernels.mh_band(
            s.xs, s.codes, s.off, s.ns, s.ms, self.tp.vtab, self.tp.dmap, self.vq, self.dq,
            ft.alpha, ft.ctx, ft.dcol, ft.vb, band.start, band.height, band.axis == "v", u, acc)
        return accepted, P, de

    def sweep(self, chain: ChainState, accum: np.ndarray | None = None) -> dict:
        """Horizontal bands then vertical bands; returns per-axis acceptance stats."""
        stats = {"h": [0, 0], "v": [0, 0], "de": 0.0}
        for band in self.bands:
            a, p, de = self.mh_band_step(chain, band, accum=accum)
            stats[band.axis][0] += a
            stats[band.axis][1] += p
            stats["de"] += de
        chain.sweeps += 1
        return stats


def _check_chain(chain: ChainState, sampler: BandSampler):
    if chain.shape != sampler.shape:
        raise ValueError(f"chain shape {chain.shape} does not match sampler {sampler.shape}")
    if chain.K != sampler.K:
        raise ValueError(f"chain has {chain.K} levels, sampler expects {sampler.K}")


# --- functional entry points ------------------------------------------------------

def band_forward(model: FoPModel, py, x, band: Band) -> ForwardTable:
    """Forward table of the exact conditional of ``band`` under a single-scale model."""
    if model.K != 1:
        raise ValueError("band_forward needs a single-scale model")
    x = as_binary(x)
    return BandSampler(model, model, py, x.shape, 1).forward(x, band)


def band_sample(ft: ForwardTable, rng) -> np.ndarray:
    """Backward sample: one column state per column of the band."""
    rng = make_rng(rng)
    u = rng.random(ft.columns)
    z = np.empty(ft.columns, dtype=np.int64)
    _kernels.band_backward(ft.alpha, ft.ctx, ft.dcol, ft.vb, ft.band.start, ft.band.height,
                           ft.rows, u, z)
    return z


def apply_band(x: np.ndarray, band: Band, z) -> np.ndarray:
    """Image with the band replaced by column states ``z``."""
    out = np.array(x, dtype=np.uint8, copy=True)
    bits = ((np.asarray(z)[None, :] >> np.arange(band.height)[:, None]) & 1).astype(np.uint8)
    if band.axis == "h":
        out[band.start:band.start + band.height, :] = bits
    else:
        out[:, band.start:band.start + band.height] = bits.T
    return out


def band_states(x: np.ndarray, band: Band) -> np.ndarray:
    """Column states of the band in ``x`` (inverse of :func:`apply_band`)."""
    x = np.asarray(x)
    strip = x[band.start:band.start + band.height, :] if band.axis == "h" else \
        x[:, band.start:band.start + band.height].T
    return (strip.astype(np.int64) << np.arange(band.height)[:, None]).sum(axis=0)


def mh_band_step(chain: ChainState, p: FoPModel, q: FoPModel | None, py, band: Band,
                 proposals: int = 8):
    sampler = BandSampler(p, q, py, chain.shape, chain.K)
    return sampler.mh_band_step(chain, band, proposals)


def sweep(chain: ChainState, p: FoPModel, q: FoPModel | None, py,
          schedule: Schedule = Schedule()) -> dict:
    sampler = BandSampler(p, q, py, chain.shape, chain.K, schedule)
    return sampler.sweep(chain)


def gibbs_block(chain: ChainState, model: FoPModel, py, block, cap: int = MAX_BLOCK,
                enumeration: str = "gray"):
    """Exact resample of a block of level-0 pixels from its conditional.

    ``enumeration="gray"`` walks configurations in Gray-code order with one
    incremental flip per step; ``"naive"`` recomputes the full energy of
    every configuration. Both consume one uniform from ``chain.rng``.
    Returns the log-weights over block configurations (bit b of the index
    flips block pixel b relative to the incoming state).
    """
    block = list(block)
    if len(block) == 0:
        return np.zeros(1)
    if len(block) > cap:
        raise ValueError(f"block of {len(block)} pixels exceeds cap {cap}")
    if len(set(block)) != len(block):
        raise ValueError("block pixels must be distinct")
    n, m = chain.shape
    for i, j in block:
        if not (0 <= i < n and 0 <= j < m):
            raise IndexError(f"block pixel ({i}, {j}) outside image")
    rows = np.array([b[0] for b in block], dtype=np.int64)
    cols = np.array([b[1] for b in block], dtype=np.int64)
    u = chain.rng.random()
    tb = EnergyTables(model, py, chain.shape, chain.K)
    s = chain.state
    if enumeration == "gray":
        _, _, logw = _kernels.gibbs_block(rows, cols, u, s.xs, s.codes, s.off, s.ns, s.ms,
                                          tb.vtab, tb.dmap)
        return logw
    if enumeration != "naive":
        raise ValueError(f"unknown enumeration {enumeration!r}")
    x0 = s.x.copy()
    e0 = energy_total(model, x0, py)
    logw = np.empty(1 << len(block))
    for mask in range(1 << len(block)):
        x = x0.copy()
        for b in range(len(block)):
            if (mask >> b) & 1:
                x[rows[b], cols[b]] ^= 1
        logw[mask] = -(energy_total(model, x, py) - e0)
    pick = _kernels._draw(logw, u)
    dummy = np.zeros(1)
    for b in range(len(block)):
        if (pick >> b) & 1:
            _kernels.flip_pixel(rows[b], cols[b], s.xs, s.codes, s.off, s.ns, s.ms,
                                tb.vtab, tb.dmap, dummy, dummy, False)
    return logw


def sample_prior(model: FoPModel, shape, sweeps: int, seed=None,
                 schedule: Schedule = Schedule(), init=None, q: FoPModel | None = None) -> np.ndarray:
    """Run the band chain on the pattern energy alone and return the final image."""
    chain = ChainState(np.zeros(shape, np.uint8) if init is None else init, model.K, seed)
    sampler = BandSampler(model, q, None, chain.shape, model.K, schedule)
    for _ in range(sweeps):
        sampler.sweep(chain)
    return chain.x.copy()


@dataclass
class Trace:
    """Per-sweep sampler diagnostics."""

    rows: list = field(default_factory=list)

    def record(self, sweep_index: int, stats: dict, energy: float):
        for axis in ("h", "v"):
            a, p = stats[axis]
            if p:
                self.rows.append((sweep_index, axis, a / p, energy))

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sweep", "band_axis", "accept_rate", "energy"])
            for s, axis, rate, e in self.rows:
                w.writerow([s, axis, repr(float(rate)), repr(float(e))])


def run_chain(sampler: BandSampler, chain: ChainState, sweeps: int, trace: Trace | None = None):
    energy = sampler.energy(chain) if trace is not None else 0.0
    for _ in range(sweeps):
        st = sampler.sweep(chain)
        if trace is not None:
            energy += st["de"]
            trace.record(chain.sweeps, st, energy)
    return chain


def parallel_map(fn, items, jobs: int | None = None):
    """Map over independent chains; the compiled kernels release the GIL."""
    items = list(items)
    if jobs is None or jobs <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))
