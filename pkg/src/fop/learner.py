"""Regularised maximum-likelihood training.

The objective is ``lam/2 |w|^2 + sum_i -log p(x_i | y_i)``. Stochastic
training replaces the posterior expectation of the features with the state
of one persistent band-sampler chain per example. Tiny instances can be
trained with the exact gradient computed by enumeration.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .imagecore import CLASS_OF, GrayImage, as_binary
from .model import FoPModel, dumps, features, loads
from .pipeline import _batch_codes, _batch_or, ORACLE_MAX_PIXELS
from .sampler import BandSampler, ChainState, Schedule, parallel_map, spawn_seeds

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    lam: float = 1e-3
    eta: float = 1e-4
    steps: int = 100
    sweeps_per_step: int = 1
    h: int = 3
    proposals: int = 8
    stride: int | None = None
    seed: int = 0
    decay_at: float = 0.75  # fraction of steps after which eta is scaled by 0.1
    polyak: bool = False  # average parameters over the last 25% of steps
    batch: int | None = None  # examples per step; None uses all of them
    jobs: int | None = None
    precondition: bool = False  # scale each coordinate by a running RMS of its gradient
    rms_decay: float = 0.99

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be non-negative")
        if self.eta <= 0:
            raise ValueError("eta must be positive")

    def schedule(self) -> Schedule:
        return Schedule(self.h, self.proposals, self.stride)

    def learning_rate(self, step: int) -> float:
        """Per-example learning rate at a 0-based step index."""
        return self.eta * (0.1 if step >= self.decay_at * self.steps else 1.0)


@dataclass
class TrainState:
    model: FoPModel
    chains: list
    step: int = 0
    trace: list = field(default_factory=list)
    data_features: list = field(default_factory=list)
    avg: np.ndarray | None = None
    avg_count: int = 0
    g2: np.ndarray | None = None

    def write_trace(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["step", "obj_estimate", "grad_norm", "accept_rate", "wall_ms"])
            for row in self.trace:
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:4]] + [f"{row[4]:.3f}"])


def _as_pairs(data):
    pairs = []
    for x, y in data:
        x = as_binary(x)
        if not isinstance(y, GrayImage):
            y = GrayImage(np.asarray(y))
        if x.shape != y.shape:
            raise ValueError("mask and observation shapes differ")
        pairs.append((x, y))
    if not pairs:
        raise ValueError("empty training set")
    return pairs


def init_state(model: FoPModel, data, cfg: TrainConfig) -> TrainState:
    """Chains start at the ground-truth images with independent RNG streams."""
    pairs = _as_pairs(data)
    seeds = spawn_seeds(cfg.seed, len(pairs))
    chains = [ChainState(x, model.K, s) for (x, _), s in zip(pairs, seeds)]
    phis = [features(model, x, y) for x, y in pairs]
    return TrainState(model.copy(), chains, 0, [], phis)


def sgd_step(ts: TrainState, data, cfg: TrainConfig, q: FoPModel | None = None) -> TrainState:
    """Advance every chain under the current model, then take one gradient step.

    The update is ``w -= (eta_t / N) * (lam * w + sum_i phi(x_i, y_i) - phi(x_i', y_i))``
    with ``x_i'`` the chain state after advancing.
    """
    pairs = _as_pairs(data)
    if len(pairs) != len(ts.chains):
        raise ValueError("one chain per training example is required")
    t0 = time.perf_counter()
    model = ts.model
    schedule = cfg.schedule()
    N = len(pairs)
    idx = list(range(N))
    if cfg.batch is not None and cfg.batch < N:
        rng = np.random.default_rng([cfg.seed, ts.step])
        idx = sorted(rng.choice(N, size=cfg.batch, replace=False).tolist())

    def advance(i):
        x, y = pairs[i]
        sampler = BandSampler(model, q, y, x.shape, model.K, schedule)
        acc = [0, 0]
        chain = ts.chains[i]
        for _ in range(cfg.sweeps_per_step):
            st = sampler.sweep(chain)
            acc[0] += st["h"][0] + st["v"][0]
            acc[1] += st["h"][1] + st["v"][1]
        return features(model, chain.x, y), acc

    results = parallel_map(advance, idx, cfg.jobs)
    w = model.vector()
    diff = np.zeros_like(w)
    accepted = proposed = 0
    for i, (phi_s, acc) in zip(idx, results):
        diff += ts.data_features[i] - phi_s
        accepted += acc[0]
        proposed += acc[1]
    scale = N / len(idx)
    grad = cfg.lam * w + scale * diff
    with np.errstate(over="ignore", invalid="ignore"):
        if cfg.precondition:
            g2 = (grad / N) ** 2
            ts.g2 = g2 if ts.g2 is None else cfg.rms_decay * ts.g2 + (1 - cfg.rms_decay) * g2
            w_new = w - cfg.learning_rate(ts.step) * (grad / N) / (np.sqrt(ts.g2) + 1e-8)
        else:
            w_new = w - (cfg.learning_rate(ts.step) / N) * grad
    if not np.all(np.isfinite(w_new)):
        raise TrainingDiverged(f"non-finite parameters after step {ts.step}")
    ts.model = model.with_vector(w_new)
    ts.step += 1
    if cfg.polyak and ts.step > 0.75 * cfg.steps:
        ts.avg = w_new.copy() if ts.avg is None else ts.avg + w_new
        ts.avg_count += 1
    # O(w) up to the unknown log-partition terms: lam/2|w|^2 + sum_i E(x_i) - E(x_i')
    obj = 0.5 * cfg.lam * float(w @ w) + float(w @ diff) * scale
    ts.trace.append((ts.step, obj, float(np.linalg.norm(grad)),
                     accepted / proposed if proposed else float("nan"),
                     (time.perf_counter() - t0) * 1e3))
    return ts


def train(data, cfg: TrainConfig, K: int = 1, q: FoPModel | None = None,
          init: FoPModel | None = None, M: int | None = None, state: TrainState | None = None,
          callback=None) -> FoPModel:
    """Stochastic maximum-likelihood training.

    ``K=1`` trains a single-scale model; for ``K>1`` the band sampler uses
    ``q`` as its proposal (or the finest scale of the current model when
    ``q`` is None). ``init`` seeds the parameters; when it has fewer scales
    than ``K`` the extra scales start at zero.
    """
    pairs = _as_pairs(data)
    if init is None:
        M = pairs[0][1].levels if M is None else M
        init = FoPModel.zeros(K, M, lam=cfg.lam)
    elif init.K != K:
        init = init.extended(K)
    ts = run_training(pairs, cfg, init, q, state, callback)
    model = ts.model
    if cfg.polyak and ts.avg is not None:
        model = model.with_vector(ts.avg / ts.avg_count)
    model.lam = cfg.lam
    model.meta = {"train_config": asdict(cfg), "steps": ts.step}
    return model


def run_training(data, cfg: TrainConfig, init: FoPModel, q: FoPModel | None = None,
                 state: TrainState | None = None, callback=None) -> TrainState:
    """Run :func:`sgd_step` until ``cfg.steps``; resumes from ``state`` if given."""
    pairs = _as_pairs(data)
    init = FoPModel(init.V, init.D, init.invariant, cfg.lam)
    ts = state if state is not None else init_state(init, pairs, cfg)
    while ts.step < cfg.steps:
        sgd_step(ts, pairs, cfg, q)
        if callback is not None:
            callback(ts)
        if ts.step % 50 == 0:
            log.info("step %d grad_norm %.4g accept %.3f", ts.step, ts.trace[-1][2], ts.trace[-1][3])
    return ts


def save_checkpoint(ts: TrainState, path, cfg: TrainConfig | None = None) -> None:
    """Everything needed to continue training bit-identically."""
    payload = {
        "model": np.array(dumps(ts.model, step=ts.step)),
        "step": np.array(ts.step),
        "chains": np.stack([c.x for c in ts.chains]) if ts.chains else np.zeros((0, 0, 0), np.uint8),
        "rng": np.array(json.dumps([c.rng.bit_generator.state for c in ts.chains])),
        "sweeps": np.array([c.sweeps for c in ts.chains]),
        "trace": np.array(ts.trace, dtype=np.float64).reshape(-1, 5),
        "data_features": np.stack(ts.data_features),
        "avg_count": np.array(ts.avg_count),
        "config": np.array(json.dumps(asdict(cfg) if cfg is not None else {})),
    }
    if ts.avg is not None:
        payload["avg"] = ts.avg
    if ts.g2 is not None:
        payload["g2"] = ts.g2
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    """Inverse of :func:`save_checkpoint`; also returns the stored config dict."""
    with np.load(path, allow_pickle=False) as z:
        model = loads(str(z["model"]))
        chains = []
        for x, st, n in zip(z["chains"], json.loads(str(z["rng"])), z["sweeps"]):
            c = ChainState(x, model.K)
            c.rng.bit_generator.state = st
            c.sweeps = int(n)
            chains.append(c)
        trace = [(int(r[0]), *map(float, r[1:])) for r in z["trace"]]
        ts = TrainState(model, chains, int(z["step"]), trace, list(z["data_features"]),
                        z["avg"].copy() if "avg" in z else None, int(z["avg_count"]),
                        z["g2"].copy() if "g2" in z else None)
        return ts, json.loads(str(z["config"]))


# --- exact enumeration ----------------------------------------------------------

def _state_features(model: FoPModel, y: GrayImage, start: int, stop: int) -> np.ndarray:
    """Feature vectors of images ``start..stop-1`` (bit i*m+j of the index is pixel (i, j))."""
    n, m = y.shape
    N = n * m
    s = np.arange(start, stop, dtype=np.int64)
    xb = ((s[:, None] >> np.arange(N)[None, :]) & 1).astype(np.uint8).reshape(-1, n, m)
    from .imagecore import build_pyramid
    py = build_pyramid(y, model.K)
    C = model.n_patterns
    out = np.zeros((len(s), model.K * model.block_size), dtype=np.float64)
    lvl = xb
    rows = np.arange(len(s))[:, None]
    for k in range(model.K):
        if k > 0:
            lvl = _batch_or(lvl)
        codes = _batch_codes(lvl).reshape(len(s), -1)
        if model.invariant:
            codes = CLASS_OF[codes]
        o = k * model.block_size
        np.add.at(out, (np.broadcast_to(rows, codes.shape), o + codes), 1.0)
        yk = py.levels[k].pixels.reshape(-1)
        on = lvl.reshape(len(s), -1)
        np.add.at(out, (np.broadcast_to(rows, on.shape), o + C + np.broadcast_to(yk, on.shape)), on)
    return out


class ExactProblem:
    """Exact objective and gradient for a dataset of enumerable images."""

    def __init__(self, layout: FoPModel, data, lam: float):
        self.layout = layout
        self.lam = lam
        self.pairs = _as_pairs(data)
        self.F = []
        self.phi = []
        for x, y in self.pairs:
            N = x.size
            if N > ORACLE_MAX_PIXELS:
                raise ValueError(f"image with {N} pixels is too large to enumerate")
            self.F.append(_state_features(layout, y, 0, 1 << N))
            self.phi.append(features(layout, x, y).astype(np.float64))

    def objective_and_gradient(self, w):
        w = np.asarray(w, dtype=np.float64)
        obj = 0.5 * self.lam * float(w @ w)
        grad = self.lam * w
        for F, phi in zip(self.F, self.phi):
            e = F @ w
            neg = -e
            mx = neg.max()
            p = np.exp(neg - mx)
            z = p.sum()
            log_z = mx + np.log(z)
            p /= z
            obj += float(phi @ w) + log_z
            grad = grad + phi - p @ F
        return obj, grad

    def objective(self, w):
        return self.objective_and_gradient(w)[0]

    def gradient(self, w):
        return self.objective_and_gradient(w)[1]


def exact_gradient(model: FoPModel, data, lam: float) -> np.ndarray:
    """``lam * w + sum_i phi(x_i, y_i) - E_{p(x|y_i)} phi(x, y_i)`` by enumeration."""
    return ExactProblem(model, data, lam).gradient(model.vector())


def exact_objective(model: FoPModel, data, lam: float) -> float:
    return ExactProblem(model, data, lam).objective(model.vector())


def train_exact(data, lam: float, K: int = 1, M: int | None = None, init: FoPModel | None = None,
                max_iter: int = 100000, tol: float = 1e-5, problem: ExactProblem | None = None):
    """Full-gradient descent with backtracking line search on the exact objective.

    Returns (model, trace) where trace rows are (iteration, objective, grad_norm).
    """
    pairs = _as_pairs(data)
    if init is None:
        M = pairs[0][1].levels if M is None else M
        init = FoPModel.zeros(K, M, lam=lam)
    prob = problem if problem is not None else ExactProblem(init, pairs, lam)
    w = init.vector()
    obj, g = prob.objective_and_gradient(w)
    step = 1.0
    trace = [(0, obj, float(np.linalg.norm(g)))]
    for it in range(1, max_iter + 1):
        gn2 = float(g @ g)
        if np.sqrt(gn2) < tol:
            break
        while True:
            w_try = w - step * g
            obj_try, g_try = prob.objective_and_gradient(w_try)
            if obj_try <= obj - 0.5 * step * gn2:
                break
            step *= 0.5
            if step < 1e-20:
                raise TrainingDiverged("line search failed")
        w, obj, g = w_try, obj_try, g_try
        step *= 2.0
        trace.append((it, obj, float(np.linalg.norm(g))))
    model = init.with_vector(w)
    model.lam = lam
    return model, trace
