"""Datasets, synthetic data, posterior inference, PR evaluation and the exact oracle."""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .imagecore import GrayImage, as_binary, build_pyramid, level_shape
from .model import FoPModel
from .netpbm import read_netpbm, write_pbm, write_pgm
from .sampler import BandSampler, ChainState, Schedule, make_rng, parallel_map, spawn_seeds

CONTOUR_PRESET = {"mu0": 150.0, "mu1": 100.0, "sigma": 40.0}
LEAF_PRESET = {"mu0": 150.0, "mu1": 100.0, "sigma": 100.0}
ORACLE_MAX_PIXELS = 22


# --- datasets ---------------------------------------------------------------------

@dataclass
class Dataset:
    masks: list
    observations: list
    names: list
    manifest: str | None = None

    def __post_init__(self):
        if not (len(self.masks) == len(self.observations) == len(self.names)):
            raise ValueError("dataset lists differ in length")
        for x, y, name in zip(self.masks, self.observations, self.names):
            if as_binary(x).shape != y.shape:
                raise ValueError(f"{name}: mask {x.shape} and observation {y.shape} differ")

    def __len__(self):
        return len(self.masks)

    def pairs(self):
        return list(zip(self.masks, self.observations))


def load_manifest(path) -> Dataset:
    """Read ``<mask.pbm> <obs.pgm> <name>`` lines; paths are relative to the manifest."""
    base = os.path.dirname(os.path.abspath(path))
    masks, obs, names = [], [], []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected '<mask> <obs> <name>'")
            mpath, opath, name = parts
            x = read_netpbm(os.path.join(base, mpath))
            y = read_netpbm(os.path.join(base, opath))
            if isinstance(x, GrayImage) or not isinstance(y, GrayImage):
                raise ValueError(f"{path}:{lineno}: mask must be PBM and observation PGM")
            masks.append(x)
            obs.append(y)
            names.append(name)
    if not masks:
        raise ValueError(f"{path}: empty manifest")
    return Dataset(masks, obs, names, str(path))


def save_dataset(ds: Dataset, out_dir) -> str:
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    for x, y, name in zip(ds.masks, ds.observations, ds.names):
        write_pbm(os.path.join(out_dir, f"{name}_mask.pbm"), x)
        write_pgm(os.path.join(out_dir, f"{name}_obs.pgm"), y)
        lines.append(f"{name}_mask.pbm {name}_obs.pgm {name}\n")
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w") as f:
        f.writelines(lines)
    return path


# --- synthetic data -----------------------------------------------------------------

def synth_observe(x, mu0: float, mu1: float, sigma: float, M: int = 256, seed=None) -> GrayImage:
    """Per-pixel Gaussian observation, rounded and clamped to ``0..M-1``."""
    if M < 2:
        raise ValueError("M must be at least 2")
    x = as_binary(x)
    rng = make_rng(seed)
    mean = np.where(x == 1, mu1, mu0).astype(np.float64)
    y = mean + sigma * rng.standard_normal(x.shape)
    return GrayImage(np.clip(np.rint(y), 0, M - 1).astype(np.int64), M)


def _star_blob(shape, rng, center=None, radius=None):
    n, m = shape
    cy, cx = center if center is not None else (rng.uniform(0.3, 0.7) * n, rng.uniform(0.3, 0.7) * m)
    r0 = radius if radius is not None else rng.uniform(0.15, 0.3) * min(n, m)
    yy, xx = np.mgrid[0:n, 0:m]
    theta = np.arctan2(yy - cy, xx - cx)
    r = np.full_like(theta, 1.0)
    for k in range(2, 6):
        r += rng.uniform(0, 0.25 / k * 2) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    r = np.maximum(r, 0.45) * r0
    return (np.hypot(yy - cy, xx - cx) <= r).astype(np.uint8)


def _largest_component(mask):
    from scipy import ndimage

    labels, count = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if count <= 1:
        return mask.astype(np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    return (labels == 1 + int(np.argmax(sizes))).astype(np.uint8)


def _boundary(mask):
    """Inner boundary of a mask: on-pixels with an off 4-neighbour (inside the image)."""
    p = np.pad(mask, 1, mode="edge")
    inner = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return (mask & (1 - inner)).astype(np.uint8)


def _line(img, r0, c0, r1, c1):
    n_steps = int(max(abs(r1 - r0), abs(c1 - c0))) + 1
    rr = np.rint(np.linspace(r0, r1, n_steps)).astype(int)
    cc = np.rint(np.linspace(c0, c1, n_steps)).astype(int)
    ok = (rr >= 0) & (rr < img.shape[0]) & (cc >= 0) & (cc < img.shape[1])
    img[rr[ok], cc[ok]] = 1


def _contour_map(size, rng):
    n = m = size
    img = np.zeros((n, m), np.uint8)
    for _ in range(rng.integers(2, 4)):
        cy, cx = rng.uniform(-0.1, 1.1, size=2) * size
        radius = rng.uniform(0.12, 0.35) * size
        img |= _boundary(_star_blob((n, m), rng, (cy, cx), radius))
    # one open polyline crossing part of the image
    pts = [rng.uniform(0, size, size=2)]
    heading = rng.uniform(0, 2 * np.pi)
    for _ in range(rng.integers(2, 5)):
        heading += rng.normal(0, 0.6)
        step = rng.uniform(0.15, 0.35) * size
        pts.append(pts[-1] + step * np.array([np.sin(heading), np.cos(heading)]))
    for a, b in zip(pts[:-1], pts[1:]):
        _line(img, a[0], a[1], b[0], b[1])
    return img


def synth_shapes(kind: str, count: int, size: int, seed=None) -> list:
    """Random contour maps (thin strokes) or single-component blob masks."""
    rng = make_rng(seed)
    out = []
    for _ in range(count):
        if kind == "contours":
            out.append(_contour_map(size, rng))
        elif kind == "blobs":
            out.append(_largest_component(_star_blob((size, size), rng)))
        else:
            raise ValueError(f"unknown shape kind {kind!r}")
    return out


def synth_dataset(kind: str, count: int, size: int, mu0: float, mu1: float, sigma: float,
                  M: int = 256, seed=0, prefix: str = "img") -> Dataset:
    ss_shapes, ss_obs = spawn_seeds(seed, 2)
    masks = synth_shapes(kind, count, size, ss_shapes)
    obs_seeds = spawn_seeds(ss_obs, count)
    obs = [synth_observe(x, mu0, mu1, sigma, M, s) for x, s in zip(masks, obs_seeds)]
    return Dataset(masks, obs, [f"{prefix}{i:03d}" for i in range(count)])


# --- posterior inference ------------------------------------------------------------

@dataclass
class PosteriorMap:
    prob: np.ndarray
    samples: int
    accept_rate: float = float("nan")
    meta: dict = field(default_factory=dict)


def infer_marginals(model: FoPModel, y, burn_in: int = 50, sweeps: int = 200, thin: int = 1,
                    seed=None, q: FoPModel | None = None, schedule: Schedule = Schedule(),
                    init=None, shape=None) -> PosteriorMap:
    """Average of thinned post-burn-in band-chain states per pixel."""
    if y is not None and not isinstance(y, GrayImage):
        y = GrayImage(np.asarray(y), model.M)
    shape = y.shape if y is not None else tuple(shape)
    x0 = np.zeros(shape, np.uint8) if init is None else as_binary(init)
    chain = ChainState(x0, model.K, seed)
    sampler = BandSampler(model, q, y, shape, model.K, schedule)
    acc = [0, 0]
    for _ in range(burn_in):
        sampler.sweep(chain)
    total = np.zeros(shape)
    count = 0
    for s in range(sweeps):
        st = sampler.sweep(chain)
        for axis in ("h", "v"):
            acc[0] += st[axis][0]
            acc[1] += st[axis][1]
        if (s + 1) % thin == 0:
            total += chain.x
            count += 1
    prob = total / max(count, 1)
    return PosteriorMap(prob, count, acc[0] / acc[1] if acc[1] else float("nan"),
                        {"burn_in": burn_in, "sweeps": sweeps, "thin": thin,
                         "h": schedule.h, "proposals": schedule.proposals})


def infer_many(model, ys, seed=0, jobs=None, **kw) -> list[PosteriorMap]:
    seeds = spawn_seeds(seed, len(ys))
    return parallel_map(lambda a: infer_marginals(model, a[0], seed=a[1], **kw),
                        list(zip(ys, seeds)), jobs)


# --- precision / recall ---------------------------------------------------------

@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    defined: np.ndarray  # thresholds with at least one predicted positive

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["threshold", "precision", "recall"])
            for t, p, r in zip(self.thresholds, self.precision, self.recall):
                w.writerow([f"{t:.6g}", repr(float(p)), repr(float(r))])
            w.writerow(["AP", repr(float(self.ap))])


def default_thresholds(count: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, count)


def pr_curve(predictions, truths, thresholds=None) -> PRCurve:
    """Pixel-level precision/recall aggregated over all images.

    A pixel is predicted on when its probability is ``>= threshold``.
    Thresholds with no predicted positives report precision 1 and are left
    out of the area; the curve is extended flat to recall 0 from its
    lowest-recall point and AP is the trapezoidal area over recall.
    """
    predictions = [p.prob if isinstance(p, PosteriorMap) else np.asarray(p, dtype=np.float64)
                   for p in predictions]
    truths = [as_binary(t) for t in truths]
    if not predictions or len(predictions) != len(truths):
        raise ValueError("need matching, nonempty prediction and truth lists")
    for p, t in zip(predictions, truths):
        if p.shape != t.shape:
            raise ValueError(f"prediction shape {p.shape} != truth shape {t.shape}")
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, float)
    scores = np.concatenate([p.reshape(-1) for p in predictions])
    labels = np.concatenate([t.reshape(-1) for t in truths]).astype(bool)
    n_pos = labels.sum()
    pos_scores = np.sort(scores[labels])
    all_scores = np.sort(scores)
    # counts of scores >= t via sorted search
    pred = len(all_scores) - np.searchsorted(all_scores, thresholds, side="left")
    tp = len(pos_scores) - np.searchsorted(pos_scores, thresholds, side="left")
    defined = pred > 0
    precision = np.where(defined, tp / np.maximum(pred, 1), 1.0)
    recall = tp / n_pos if n_pos else np.zeros(len(thresholds))
    ap = _area(recall[defined], precision[defined])
    return PRCurve(thresholds, precision, recall, ap, defined)


def _area(recall, precision) -> float:
    if len(recall) == 0:
        return 0.0
    order = np.lexsort((-precision, recall))
    r = np.concatenate([[0.0], recall[order]])
    p = np.concatenate([[precision[order][0]], precision[order]])
    return float(np.sum(np.diff(r) * (p[1:] + p[:-1]) / 2.0))


def raw_scores(y: GrayImage, mu0: float = 150.0, mu1: float = 100.0) -> np.ndarray:
    """Baseline score in [0, 1]: gray values rescaled so the on-class mean scores high."""
    v = y.pixels / float(y.levels - 1)
    return v if mu1 > mu0 else 1.0 - v


# --- exact oracle ---------------------------------------------------------------------

def _batch_or(xb):
    b, n, m = xb.shape
    xb = np.pad(xb, ((0, 0), (0, n % 2), (0, m % 2)))
    return xb.reshape(b, xb.shape[1] // 2, 2, xb.shape[2] // 2, 2).max(axis=(2, 4))


def _batch_codes(xb):
    b, n, m = xb.shape
    p = np.pad(xb.astype(np.int32), ((0, 0), (1, 1), (1, 1)))
    codes = np.zeros((b, n, m), dtype=np.int32)
    bit = 0
    for dr in range(3):
        for dc in range(3):
            codes |= p[:, dr:dr + n, dc:dc + m] << bit
            bit += 1
    return codes


def enumerate_energies(model: FoPModel, y, shape=None, chunk: int = 1 << 16) -> np.ndarray:
    """Energy of every image on the grid; image ``s`` has pixel (i, j) = bit i*m+j of s."""
    if y is not None and not isinstance(y, GrayImage):
        y = GrayImage(np.asarray(y), model.M)
    shape = y.shape if y is not None else tuple(shape)
    n, m = shape
    N = n * m
    if N > ORACLE_MAX_PIXELS:
        raise ValueError(f"{n}x{m} grid too large to enumerate (limit {ORACLE_MAX_PIXELS} pixels)")
    table = model.pattern_table()
    dcost = []
    if y is not None:
        if y.levels != model.M:
            raise ValueError("observation levels do not match model M")
        py = build_pyramid(y, model.K)
        dcost = [model.D[k][py.levels[k].pixels] for k in range(model.K)]
    out = np.empty(1 << N)
    shifts = np.arange(N, dtype=np.int64)
    for start in range(0, 1 << N, chunk):
        s = np.arange(start, min(start + chunk, 1 << N), dtype=np.int64)
        xb = ((s[:, None] >> shifts[None, :]) & 1).astype(np.uint8).reshape(-1, n, m)
        e = np.zeros(len(s))
        lvl = xb
        for k in range(model.K):
            if k > 0:
                lvl = _batch_or(lvl)
            e += table[k][_batch_codes(lvl)].sum(axis=(1, 2))
            if dcost:
                e += (lvl * dcost[k][None]).sum(axis=(1, 2))
        out[start:start + len(s)] = e
    return out


@dataclass
class OracleResult:
    shape: tuple
    energies: np.ndarray
    log_z: float
    marginals: np.ndarray

    def probabilities(self) -> np.ndarray:
        return np.exp(-self.energies - self.log_z)

    def index_of(self, x) -> int:
        bits = as_binary(x).reshape(-1).astype(np.int64)
        return int((bits << np.arange(bits.size)).sum())

    def conditional(self, pixels, x) -> np.ndarray:
        """Distribution over configurations of ``pixels`` with the rest fixed to ``x``.

        Entry ``c`` has bit b equal to the value of ``pixels[b]``.
        """
        n, m = self.shape
        base = self.index_of(x)
        bitpos = [i * m + j for i, j in pixels]
        for b in bitpos:
            base &= ~(1 << b)
        idx = np.full(1 << len(bitpos), base, dtype=np.int64)
        for c in range(1 << len(bitpos)):
            for b, pos in enumerate(bitpos):
                if (c >> b) & 1:
                    idx[c] |= 1 << pos
        lw = -self.energies[idx]
        lw -= lw.max()
        w = np.exp(lw)
        return w / w.sum()


def _logsumexp(a):
    mx = a.max()
    return float(mx + np.log(np.exp(a - mx).sum()))


def oracle_enumerate(model: FoPModel, y, shape=None) -> OracleResult:
    """Exact log Z(y), per-pixel marginals and conditionals by enumeration."""
    if y is not None and not isinstance(y, GrayImage):
        y = GrayImage(np.asarray(y), model.M)
    shape = y.shape if y is not None else tuple(shape)
    n, m = shape
    e = enumerate_energies(model, y, shape)
    log_z = _logsumexp(-e)
    p = np.exp(-e - log_z)
    s = np.arange(1 << (n * m), dtype=np.int64)
    marg = np.array([p[(s >> b) & 1 == 1].sum() for b in range(n * m)]).reshape(n, m)
    return OracleResult((n, m), e, log_z, marg)


def level_shapes(shape, K):
    return [level_shape(tuple(shape), k) for k in range(K)]
