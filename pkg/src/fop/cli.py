"""Command-line front end: ``fop <command> [options]``.

Every command writes one ``metadata.json`` into its output directory.
Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict

import numpy as np

from . import __version__
from .imagecore import GrayImage, build_pyramid
from .learner import (
    TrainConfig,
    TrainingDiverged,
    init_state,
    load_checkpoint,
    run_training,
    save_checkpoint,
    train_exact,
)
from .model import FoPModel, ModelFormatError, model_load, model_save
from .netpbm import NetpbmError, read_netpbm, read_probability_pgm, write_pbm, write_pgm, write_probability_pgm
from .pipeline import (
    CONTOUR_PRESET,
    LEAF_PRESET,
    ORACLE_MAX_PIXELS,
    infer_many,
    load_manifest,
    oracle_enumerate,
    pr_curve,
    raw_scores,
    save_dataset,
    synth_dataset,
)
from .sampler import RNG_ALGORITHM, Schedule, sample_prior

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
PRESETS = {"contour": CONTOUR_PRESET, "leaf": LEAF_PRESET}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --- helpers ------------------------------------------------------------------------

def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("FOP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"FOP_SEED must be an integer, got {env!r}")
    return 0


def _jobs(args):
    return args.jobs if args.jobs else (os.cpu_count() or 1)


def _config_digest(args) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "_argv")}
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def _write_metadata(out_dir, args, seed, t0, model_hash=None, extra=None):
    """Run record; wall time makes this the one non-reproducible output."""
    record = {
        "command_line": [os.path.basename(sys.argv[0]) or "fop"] + list(args._argv),
        "command": args.command,
        "seed": seed,
        "rng_algorithm": RNG_ALGORITHM,
        "model_hash": model_hash,
        "config": {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "_argv")},
        "config_digest": _config_digest(args),
        "version": __version__,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    if extra:
        record.update(extra)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metadata.json"), "w") as f:
        json.dump(record, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _file_hash(path) -> str:
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def _load_model(path, what="model") -> FoPModel:
    try:
        return model_load(path)
    except OSError as e:
        raise DataError(f"cannot read {what} {path}: {e.strerror}")


def _observations(args):
    """(names, observations, masks or None) from --manifest or --image."""
    if args.manifest:
        ds = load_manifest(args.manifest)
        return ds.names, ds.observations, ds.masks
    y = read_netpbm(args.image)
    if not isinstance(y, GrayImage):
        raise DataError(f"{args.image}: observation must be a PGM image")
    name = os.path.splitext(os.path.basename(args.image))[0]
    return [name], [y], None


def _check_levels(model: FoPModel, ys):
    for y in ys:
        if y.levels != model.M:
            raise DataError(f"observation has {y.levels} gray levels, model expects {model.M}")


# --- commands -------------------------------------------------------------------------

def cmd_coarsen(args, seed, t0):
    img = read_netpbm(args.input)
    try:
        pyr = build_pyramid(img, args.levels)
    except ValueError as e:
        raise UsageError(str(e))
    os.makedirs(args.out_dir, exist_ok=True)
    stem = os.path.splitext(os.path.basename(args.input))[0]
    for k, lvl in enumerate(pyr.levels):
        if isinstance(lvl, GrayImage):
            write_pgm(os.path.join(args.out_dir, f"{stem}_level{k}.pgm"), lvl)
        else:
            write_pbm(os.path.join(args.out_dir, f"{stem}_level{k}.pbm"), lvl)
    _write_metadata(args.out_dir, args, seed, t0, extra={"coarsening": pyr.kind, "shapes": pyr.shapes()})


def cmd_synth(args, seed, t0):
    params = dict(PRESETS[args.preset])
    for key in ("mu0", "mu1", "sigma"):
        if getattr(args, key) is not None:
            params[key] = getattr(args, key)
    if params["sigma"] < 0 or args.count < 1 or args.size < 1 or args.gray_levels < 2:
        raise UsageError("sigma must be >= 0, count and size >= 1, gray levels >= 2")
    ds = synth_dataset(args.kind, args.count, args.size, M=args.gray_levels, seed=seed, **params)
    save_dataset(ds, args.out_dir)
    _write_metadata(args.out_dir, args, seed, t0, extra={"observation_model": params})


def _train_config(args, seed) -> TrainConfig:
    try:
        return TrainConfig(lam=args.lam, eta=args.eta, steps=args.steps, sweeps_per_step=args.sweeps_per_step,
                           h=args.h, proposals=args.proposals, stride=args.stride, seed=seed,
                           decay_at=args.decay_at, polyak=args.polyak, batch=args.batch,
                           jobs=_jobs(args), precondition=args.precondition)
    except ValueError as e:
        raise UsageError(str(e))


def cmd_train(args, seed, t0):
    ds = load_manifest(args.manifest)
    pairs = ds.pairs()
    shapes = {y.levels for y in ds.observations}
    if len(shapes) != 1:
        raise DataError("observations use different gray-level counts")
    M = shapes.pop()
    os.makedirs(args.out_dir, exist_ok=True)
    model_path = os.path.join(args.out_dir, "model.txt")
    q = _load_model(args.proposal_model, "proposal model") if args.proposal_model else None
    if q is not None and q.K != 1:
        raise DataError("proposal model must be single-scale")
    init = _load_model(args.init_model, "initial model") if args.init_model else None
    if init is None and q is not None:
        init = q  # staged recipe: start from the proposal's scale-0 parameters
    if init is not None:
        if init.M != M:
            raise DataError(f"initial model has M={init.M}, data has {M} gray levels")
        init = init.extended(args.levels) if init.K < args.levels else init
        if init.K != args.levels:
            raise DataError(f"initial model has {init.K} scales, --levels is {args.levels}")
    else:
        init = FoPModel.zeros(args.levels, M, invariant=not args.raw_patterns)
    for x, _ in pairs:
        build_pyramid(x, args.levels)

    if args.exact:
        model, trace = train_exact(pairs, args.lam, args.levels, M, init, args.max_iter, args.tol)
        model_save(model, model_path)
        with open(os.path.join(args.out_dir, "trace.csv"), "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iteration", "objective", "grad_norm"])
            for it, obj, gn in trace:
                w.writerow([it, repr(float(obj)), repr(float(gn))])
        _write_metadata(args.out_dir, args, seed, t0, _file_hash(model_path),
                        {"mode": "exact", "final_grad_norm": trace[-1][2]})
        return

    cfg = _train_config(args, seed)
    if args.resume:
        ts, stored = load_checkpoint(args.resume)
        for key, val in asdict(cfg).items():
            if key not in ("steps", "jobs") and stored.get(key, val) != val:
                raise UsageError(f"--resume: option {key} differs from the checkpoint ({stored[key]!r})")
        if len(ts.chains) != len(pairs):
            raise DataError("checkpoint was written for a different dataset")
    else:
        ts = init_state(FoPModel(init.V, init.D, init.invariant, cfg.lam), pairs, cfg)
    ckpt = os.path.join(args.out_dir, "checkpoint.npz")

    def callback(state):
        if args.checkpoint_every and state.step % args.checkpoint_every == 0:
            save_checkpoint(state, ckpt, cfg)

    ts = run_training(pairs, cfg, init, q, ts, callback)
    save_checkpoint(ts, ckpt, cfg)
    model = ts.model
    if cfg.polyak and ts.avg is not None:
        model = model.with_vector(ts.avg / ts.avg_count)
    model.lam = cfg.lam
    model_save(model, model_path, step=ts.step)
    ts.write_trace(os.path.join(args.out_dir, "trace.csv"))
    rates = [r[3] for r in ts.trace if np.isfinite(r[3])]
    _write_metadata(args.out_dir, args, seed, t0, _file_hash(model_path),
                    {"mode": "stochastic", "train_config": asdict(cfg),
                     "proposal_model_hash": _file_hash(args.proposal_model) if args.proposal_model else None,
                     "mean_accept_rate": float(np.mean(rates)) if rates else None})


def _schedule(args):
    try:
        return Schedule(args.h, args.proposals, args.stride)
    except ValueError as e:
        raise UsageError(str(e))


def cmd_infer(args, seed, t0):
    model = _load_model(args.model)
    q = _load_model(args.proposal_model, "proposal model") if args.proposal_model else None
    names, ys, _ = _observations(args)
    _check_levels(model, ys)
    for y in ys:
        build_pyramid(np.zeros(y.shape, np.uint8), model.K)
    schedule = _schedule(args)
    maps = infer_many(model, ys, seed=seed, jobs=_jobs(args), burn_in=args.burn_in, sweeps=args.sweeps,
                      thin=args.thin, q=q, schedule=schedule)
    os.makedirs(args.out_dir, exist_ok=True)
    extra = {"images": names, "accept_rate": [pm.accept_rate for pm in maps]}
    for name, pm in zip(names, maps):
        write_probability_pgm(os.path.join(args.out_dir, f"{name}.pgm"), pm.prob)
        if args.csv:
            np.savetxt(os.path.join(args.out_dir, f"{name}.csv"), pm.prob, delimiter=",", fmt="%.17g")
    if args.grid_test:
        errors = []
        for y, pm in zip(ys, maps):
            if y.pixels.size > ORACLE_MAX_PIXELS:
                raise UsageError(f"--grid-test needs images of at most {ORACLE_MAX_PIXELS} pixels")
            errors.append(float(np.abs(pm.prob - oracle_enumerate(model, y).marginals).max()))
        extra["grid_test_max_abs_error"] = errors
        print(f"grid-test max abs marginal error: {max(errors):.6f}")
    _write_metadata(args.out_dir, args, seed, t0, _file_hash(args.model), extra)


def cmd_eval(args, seed, t0):
    ds = load_manifest(args.manifest)
    if args.out and len(args.posteriors) + bool(args.raw) != 1:
        raise UsageError("--out takes a single posterior directory; use --out-dir for several")
    out_dir = args.out_dir or os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    thresholds = np.linspace(0.0, 1.0, args.thresholds)
    runs = []
    for d in args.posteriors:
        preds = []
        for name, x in zip(ds.names, ds.masks):
            path = os.path.join(d, f"{name}.pgm")
            if not os.path.exists(path):
                raise DataError(f"missing posterior map {path}")
            preds.append(read_probability_pgm(path))
        runs.append((os.path.basename(os.path.normpath(d)), preds))
    if args.raw:
        runs.append(("raw", [raw_scores(y, args.mu0, args.mu1) for y in ds.observations]))
    results = {}
    for label, preds in runs:
        curve = pr_curve(preds, ds.masks, thresholds)
        path = args.out if args.out else os.path.join(out_dir, f"{label}.csv")
        curve.write_csv(path)
        results[label] = curve.ap
        print(f"{label}\tAP {curve.ap:.6f}")
    _write_metadata(out_dir, args, seed, t0, extra={"ap": results})


def cmd_sample_prior(args, seed, t0):
    model = _load_model(args.model)
    q = _load_model(args.proposal_model, "proposal model") if args.proposal_model else None
    shape = (args.size, args.size) if args.width is None else (args.size, args.width)
    try:
        build_pyramid(np.zeros(shape, np.uint8), model.K)
    except ValueError as e:
        raise UsageError(str(e))
    x = sample_prior(model, shape, args.sweeps, seed, _schedule(args), q=q)
    os.makedirs(args.out_dir, exist_ok=True)
    write_pbm(os.path.join(args.out_dir, "sample.pbm"), x)
    _write_metadata(args.out_dir, args, seed, t0, _file_hash(args.model), {"density": float(x.mean())})


# --- parser ---------------------------------------------------------------------------

def _add_common(p, jobs=False):
    p.add_argument("--seed", type=int, default=None, help="master seed (default: $FOP_SEED, else 0)")
    if jobs:
        p.add_argument("--jobs", type=int, default=None, help="worker threads (default: all cores)")


def _add_schedule(p):
    p.add_argument("--h", type=int, default=3, help="band height")
    p.add_argument("--proposals", type=int, default=8, help="MH proposals per band")
    p.add_argument("--stride", type=int, default=None, help="band start spacing (default: ceil(h/2))")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="fop", description="Multiscale field-of-patterns models for binary images.",
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("coarsen", help="write the pyramid of a PBM/PGM image", formatter_class=fmt)
    p.add_argument("input")
    p.add_argument("--levels", "-K", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_coarsen)

    p = sub.add_parser("synth", help="generate a synthetic dataset and manifest", formatter_class=fmt)
    p.add_argument("--kind", choices=["contours", "blobs"], default="contours")
    p.add_argument("--preset", choices=sorted(PRESETS), default="contour")
    p.add_argument("--count", type=int, default=30)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--mu0", type=float, default=None, help="background mean (overrides preset)")
    p.add_argument("--mu1", type=float, default=None, help="foreground mean (overrides preset)")
    p.add_argument("--sigma", type=float, default=None, help="noise std (overrides preset)")
    p.add_argument("--gray-levels", type=int, default=256, help="M")
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="maximum-likelihood training", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--levels", "-K", type=int, default=1)
    p.add_argument("--lam", type=float, default=1e-3, help="L2 regularisation weight")
    p.add_argument("--eta", type=float, default=1e-4, help="per-example learning rate")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--sweeps-per-step", type=int, default=1)
    p.add_argument("--decay-at", type=float, default=0.75, help="fraction of steps after which eta drops 10x")
    p.add_argument("--polyak", action="store_true", help="average parameters over the last quarter of steps")
    p.add_argument("--precondition", action="store_true", help="per-coordinate RMS step scaling")
    p.add_argument("--batch", type=int, default=None, help="examples per step (default: all)")
    _add_schedule(p)
    p.add_argument("--proposal-model", default=None, help="single-scale proposal q for K > 1")
    p.add_argument("--init-model", default=None, help="starting parameters (default: proposal model or zeros)")
    p.add_argument("--raw-patterns", action="store_true", help="512 untied pattern costs per scale")
    p.add_argument("--exact", action="store_true", help="exact-gradient descent for tiny images")
    p.add_argument("--tol", type=float, default=1e-5, help="gradient-norm tolerance for --exact")
    p.add_argument("--max-iter", type=int, default=100000, help="iteration cap for --exact")
    p.add_argument("--checkpoint-every", type=int, default=0, help="steps between checkpoints (0: end only)")
    p.add_argument("--resume", default=None, help="checkpoint.npz to continue from")
    p.add_argument("--out-dir", required=True)
    _add_common(p, jobs=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="posterior marginal maps", formatter_class=fmt)
    p.add_argument("--model", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--image")
    p.add_argument("--proposal-model", default=None)
    p.add_argument("--burn-in", type=int, default=50)
    p.add_argument("--sweeps", type=int, default=200)
    p.add_argument("--thin", type=int, default=1)
    _add_schedule(p)
    p.add_argument("--csv", action="store_true", help="also write maps as CSV")
    p.add_argument("--grid-test", action="store_true", help=argparse.SUPPRESS)
    p.add_argument("--out-dir", required=True)
    _add_common(p, jobs=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="precision-recall curves and AP", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--posteriors", nargs="*", default=[], help="directories of <name>.pgm maps, one per model")
    p.add_argument("--raw", action="store_true", help="also score raw gray-value thresholding")
    p.add_argument("--mu0", type=float, default=150.0, help="background mean for --raw orientation")
    p.add_argument("--mu1", type=float, default=100.0, help="foreground mean for --raw orientation")
    p.add_argument("--thresholds", type=int, default=101)
    out = p.add_mutually_exclusive_group(required=True)
    out.add_argument("--out", help="CSV path (single model)")
    out.add_argument("--out-dir", help="directory receiving <model>.csv per model")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample-prior", help="draw an image from the prior", formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--proposal-model", default=None)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--width", type=int, default=None, help="columns (default: --size)")
    p.add_argument("--sweeps", type=int, default=100)
    _add_schedule(p)
    p.add_argument("--out-dir", required=True)
    _add_common(p)
    p.set_defaults(func=cmd_sample_prior)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    args._argv = argv
    t0 = time.perf_counter()
    try:
        seed = _seed(args)
        if args.command == "eval" and not args.posteriors and not args.raw:
            raise UsageError("nothing to evaluate: give --posteriors and/or --raw")
        args.func(args, seed, t0)
    except UsageError as e:
        print(f"fop {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, NetpbmError, ModelFormatError, FileNotFoundError, IsADirectoryError, ValueError) as e:
        print(f"fop {args.command}: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, FloatingPointError) as e:
        print(f"fop {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
