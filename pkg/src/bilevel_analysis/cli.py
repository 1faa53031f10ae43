"""Command-line interface.

Every command writes into an output directory together with a
``manifest.json`` recording package versions, the resolved configuration and
SHA-256 hashes of the inputs. Options may also come from a JSON file given
with ``--config``; flags on the command line take precedence.

Exit codes: 0 success, 2 invalid input or configuration, 3 unreliable solver
results (for example a training run with too many inaccurate gradients).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .datagen import Dataset, load_dataset, make_dataset, save_dataset
from .denoise import DenoiseConfig, admm_denoise, resolve_operator
from .evaluation import (
    IMAGE_RANGE,
    evaluate,
    format_table,
    render_error,
    render_filters,
    render_response,
    reports_to_csv,
    write_pgm,
)
from .imgops import save_filterbank
from .train import (
    DEFAULT_SCHEDULE,
    TrainConfig,
    beta_sweep,
    default_beta_grid,
    format_schedule,
    initial_filterbank,
    parse_schedule,
    sgd_train,
    unsupervised_train,
)

logger = logging.getLogger("bilevel_analysis")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_UNRELIABLE = 3
SEED_ENV = "BAD_SEED"
PROG = "bilevel-analysis"


class Unreliable(RuntimeError):
    """Solver results that should not be trusted."""


# helpers ---------------------------------------------------------------

def _versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("numpy", "scipy", "scikit-learn", "threadpoolctl", "artifact"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


PROVENANCE_FILES = ("manifest.json", "timing.json")


def _hash_path(path: Path) -> str:
    # a directory hashes its relative names and contents, skipping provenance
    # files that record run locations and wall-clock times
    h = hashlib.sha256()
    if path.is_dir():
        files = sorted(p for p in path.rglob("*")
                       if p.is_file() and p.name not in PROVENANCE_FILES)
    else:
        files = [path]
    for p in files:
        if path.is_dir():
            h.update(str(p.relative_to(path)).encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def _input_hashes(*paths) -> dict:
    return {str(p): _hash_path(Path(p)) for p in paths
            if p is not None and Path(p).exists()}


def _prepare_out(out, force: bool, allow_existing: bool = False) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not (force or allow_existing):
        raise FileExistsError(f"{out} exists and is not empty; use --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, args, inputs=(), **extra):
    config = {k: v for k, v in sorted(vars(args).items())
              if k not in ("func", "config", "force", "verbose")}
    manifest = {
        "command": args.command,
        "config": config,
        "versions": _versions(),
        "inputs": _input_hashes(*inputs),
    }
    manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str))


def _seed(args) -> int:
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError as err:
            raise ValueError(f"{SEED_ENV} must be an integer, got {env!r}") from err
    return int(args.seed)


def _operator(arg):
    """``tv``, ``dct`` or a path to a filter bank (a training run directory
    resolves to its ``final.json`` or ``fb.json``)."""
    p = Path(arg)
    if p.is_dir():
        for name in ("final.json", "fb.json"):
            if (p / name).is_file():
                return resolve_operator(p / name)
        raise FileNotFoundError(f"{p} holds no filter bank")
    if arg in ("tv", "dct"):
        return resolve_operator(arg)
    if not p.is_file():
        raise FileNotFoundError(f"filter bank {arg} not found")
    return resolve_operator(p)


def _op_label(arg) -> str:
    # outputs name the bank by content (filters_sha256), not by location
    return arg if arg in ("tv", "dct") else "filterbank"


def _beta(arg) -> float:
    """A number, or a sweep directory / ``best_beta.json`` holding one."""
    try:
        value = float(arg)
    except (TypeError, ValueError):
        p = Path(arg)
        if p.is_dir():
            p = p / "best_beta.json"
        if not p.is_file():
            raise FileNotFoundError(f"beta source {arg} not found") from None
        value = float(json.loads(p.read_text())["best_beta"])
    if not np.isfinite(value) or value < 0:
        raise ValueError(f"beta must be finite and >= 0, got {value}")
    return value


def _denoise_cfg(args) -> DenoiseConfig:
    return DenoiseConfig(rho=args.rho, relax=args.relax, outer_iters=args.admm_iters,
                         tol=args.admm_tol)


def _check_sizes(fb, ds: Dataset):
    N = ds.clean.shape[-1]
    if N < fb.f:
        raise ValueError(f"images of side {N} are smaller than the {fb.f}x{fb.f} filters")


def _save_images(out: Path, prefix: str, images, previews: bool):
    for t, img in enumerate(images):
        img.astype("<f8").tofile(out / f"{prefix}_{t:04d}.f64")
        if previews:
            write_pgm(out / f"{prefix}_{t:04d}.pgm", img, IMAGE_RANGE)


# commands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = _seed(args)
    splits = ("train", "test") if args.split == "both" else (args.split,)
    out = _prepare_out(args.out, args.force)
    for split in splits:
        ds = make_dataset(seed=seed, T=args.count, split=split, N=args.size,
                          sigma=args.sigma, n_rects=args.rects)
        target = out / split if len(splits) > 1 else out
        save_dataset(ds, target, previews=args.previews)
    _write_manifest(out, args, seed=seed)
    return EXIT_OK


def cmd_train(args) -> int:
    seed = _seed(args)
    ds = load_dataset(args.data)
    out = _prepare_out(args.out, args.force, allow_existing=args.resume)
    if args.mode == "unsupervised":
        if args.beta is None:
            sweep = beta_sweep("dct", ds, cfg=_denoise_cfg(args))
            learn_beta = sweep.best_beta
            (out / "dct_sweep.csv").write_text(sweep.to_csv())
        else:
            learn_beta = _beta(args.beta)
        info = unsupervised_train(ds.clean, iters=args.iters, rho=args.learn_rho,
                                  beta=learn_beta, return_info=True)
        save_filterbank(info.fb, out / "fb.json")
        (out / "objective.json").write_text(json.dumps(
            {"objective": info.objective, "init_objective": info.init_objective,
             "best_iter": info.best_iter, "dropped_filter": info.dropped}, indent=2))
        _write_manifest(out, args, inputs=[args.data], seed=seed, beta=learn_beta)
        return EXIT_OK

    fb0 = initial_filterbank(args.init)
    _check_sizes(fb0, ds)
    if args.beta is None:
        sweep = beta_sweep(fb0, ds, cfg=_denoise_cfg(args))
        beta = sweep.best_beta
        (out / "init_sweep.csv").write_text(sweep.to_csv())
    else:
        beta = _beta(args.beta)
    if not beta > 0:
        raise ValueError("supervised training needs beta > 0")
    cfg = TrainConfig(beta=beta, step_size=args.step, schedule=parse_schedule(args.schedule),
                      seed=seed, init=args.init, warm_start=not args.no_warm,
                      denoise=_denoise_cfg(args), snapshot_every=args.snapshot_every)
    run = sgd_train(ds, cfg, init_fb=fb0, run_dir=out, resume=args.resume)
    _write_manifest(out, args, inputs=[args.data], seed=seed, beta=beta)
    if run.unreliable:
        raise Unreliable(f"{run.n_flagged} of {len(run.steps)} steps had inaccurate gradients")
    return EXIT_OK


def cmd_denoise(args) -> int:
    fb = _operator(args.op)
    ds = load_dataset(args.data)
    _check_sizes(fb, ds)
    beta = _beta(args.beta)
    out = _prepare_out(args.out, args.force)
    state = admm_denoise(fb, ds.noisy, _denoise_cfg(args), beta=beta)
    _save_images(out, "recon", state.x, args.previews)
    (out / "meta.json").write_text(json.dumps(
        {"N": int(ds.clean.shape[-1]), "T": len(ds), "beta": beta, "op": _op_label(args.op),
         "filters_sha256": hashlib.sha256(fb.filters.tobytes()).hexdigest(),
         "admm_iters": state.iters_run.tolist()}, indent=2, sort_keys=True))
    _write_manifest(out, args, inputs=[args.data, args.op], beta=beta)
    return EXIT_OK


def cmd_sweep(args) -> int:
    fb = _operator(args.op)
    ds = load_dataset(args.data)
    _check_sizes(fb, ds)
    if args.grid:
        grid = [float(v) for v in args.grid.split(",")]
    else:
        grid = default_beta_grid(args.n_grid, args.lo, args.hi)
    out = _prepare_out(args.out, args.force)
    result = beta_sweep(fb, ds, grid=grid, cfg=_denoise_cfg(args), refine=args.refine)
    (out / "sweep.csv").write_text(result.to_csv())
    best = result.best_snr
    (out / "best_beta.json").write_text(json.dumps(
        {"best_beta": result.best_beta, "snr_db": best if isinstance(best, float) else None,
         "op": _op_label(args.op)}, indent=2, sort_keys=True))
    _write_manifest(out, args, inputs=[args.data, args.op])
    return EXIT_OK


def _parse_entry(entry: str):
    parts = entry.split(":")
    if len(parts) != 3:
        raise ValueError(f"--method expects NAME:OPERATOR:BETA, got {entry!r}")
    return parts[0], parts[1], parts[2]


def cmd_eval(args) -> int:
    ds = load_dataset(args.data)
    out = _prepare_out(args.out, args.force)
    reports = [evaluate("noisy input", ds.noisy, ds.clean)]
    timings = {}
    inputs = [args.data]
    for entry in args.method or []:
        name, op, beta_spec = _parse_entry(entry)
        fb = _operator(op)
        _check_sizes(fb, ds)
        beta = _beta(beta_spec)
        t0 = time.perf_counter()
        x = admm_denoise(fb, ds.noisy, _denoise_cfg(args), beta=beta).x
        timings[name] = time.perf_counter() - t0
        reports.append(evaluate(name, x, ds.clean, beta=beta))
        method_dir = out / name.replace("/", "_")
        method_dir.mkdir(exist_ok=True)
        _save_images(method_dir, "recon", x, args.previews)
        inputs += [op, beta_spec]
    (out / "report.json").write_text(json.dumps([r.to_dict() for r in reports], indent=2,
                                                sort_keys=True))
    (out / "table.csv").write_text(reports_to_csv(reports))
    table = format_table(reports)
    (out / "table.txt").write_text(table + "\n")
    # wall-clock times vary from run to run, so they live apart from the results
    (out / "timing.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    _write_manifest(out, args, inputs=inputs)
    print(table)
    return EXIT_OK


def cmd_render(args) -> int:
    fb = _operator(args.fb)
    out = _prepare_out(args.out, args.force)
    render_filters(fb, out / "filters.pgm", scale=args.scale)
    inputs = [args.fb]
    if args.data is not None:
        ds = load_dataset(args.data)
        _check_sizes(fb, ds)
        if not 0 <= args.index < len(ds):
            raise ValueError(f"--index {args.index} outside the {len(ds)} images")
        clean, noisy = ds.clean[args.index], ds.noisy[args.index]
        render_response(fb, clean, out / "response.pgm")
        write_pgm(out / "clean.pgm", clean)
        write_pgm(out / "noisy.pgm", noisy)
        if args.beta is not None:
            x = admm_denoise(fb, noisy, _denoise_cfg(args), beta=_beta(args.beta)).x
            write_pgm(out / "recon.pgm", x)
            render_error(x, clean, out / "error.pgm")
        inputs.append(args.data)
    _write_manifest(out, args, inputs=inputs)
    return EXIT_OK


# parser ----------------------------------------------------------------

def _add_admm(p, rho=1.0, relax=1.0, iters=400, tol=0.0):
    g = p.add_argument_group("ADMM")
    g.add_argument("--rho", type=float, default=rho, help="ADMM penalty")
    g.add_argument("--relax", type=float, default=relax, help="over-relaxation in (0, 2)")
    g.add_argument("--admm-iters", type=int, default=iters, help="maximum outer iterations")
    g.add_argument("--admm-tol", type=float, default=tol,
                   help="relative residual stopping tolerance (0 runs every iteration)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of option values; flags override it")
    common.add_argument("--threads", type=int, default=1, help="BLAS/LAPACK thread cap")
    common.add_argument("--force", action="store_true", help="overwrite a nonempty --out")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog=PROG, description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate dead-leaves datasets")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=("train", "test", "both"), default="both")
    p.add_argument("--count", type=int, default=10, help="pairs per split")
    p.add_argument("--size", type=int, default=64, help="image side")
    p.add_argument("--sigma", type=float, default=0.1, help="noise standard deviation")
    p.add_argument("--rects", type=int, default=100, help="rectangles per image")
    p.add_argument("--previews", action="store_true", help="also write PGM previews")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="learn a filter bank")
    p.add_argument("--mode", choices=("supervised", "unsupervised"), default="supervised")
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--beta", help="number or sweep directory; default sweeps the initial bank "
                   "(the DCT bank in unsupervised mode)")
    p.add_argument("--step", type=float, default=2.0, help="SGD step size")
    p.add_argument("--schedule", default=format_schedule(DEFAULT_SCHEDULE),
                   help="comma list of BATCHxITERS")
    p.add_argument("--init", default="dct", help="'dct' or a filter bank file")
    p.add_argument("--no-warm", action="store_true", help="cold-start every ADMM solve")
    p.add_argument("--snapshot-every", type=int, default=100)
    p.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    p.add_argument("--iters", type=int, default=200, help="unsupervised outer iterations")
    p.add_argument("--learn-rho", type=float, default=1.0, help="unsupervised ADMM penalty")
    _add_admm(p, rho=10.0, relax=1.7, iters=2000, tol=1e-6)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", parents=[common], help="denoise a dataset")
    p.add_argument("--op", required=True, help="tv, dct or a filter bank")
    p.add_argument("--beta", required=True, help="number or sweep directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--previews", action="store_true")
    _add_admm(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("sweep", parents=[common], help="pick beta by training SNR")
    p.add_argument("--op", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", help="comma list of beta values")
    p.add_argument("--n-grid", type=int, default=15)
    p.add_argument("--lo", type=float, default=1e-3)
    p.add_argument("--hi", type=float, default=1.0)
    p.add_argument("--refine", type=int, default=0)
    _add_admm(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", parents=[common], help="compare methods on a test set")
    p.add_argument("--data", required=True, help="testing dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--method", action="append", metavar="NAME:OP:BETA",
                   help="repeatable; OP is tv, dct or a bank, BETA a number or sweep dir")
    p.add_argument("--previews", action="store_true")
    _add_admm(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="filter tiles and image maps")
    p.add_argument("--fb", required=True, help="tv, dct or a filter bank")
    p.add_argument("--out", required=True)
    p.add_argument("--data", help="dataset for the response and error maps")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--beta", help="denoise with this beta to render the error map")
    p.add_argument("--scale", type=int, default=8)
    _add_admm(p)
    p.set_defaults(func=cmd_render)
    return parser


def _apply_config(parser, argv):
    """Parse ``argv`` with option defaults taken from ``--config``."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    path = Path(args.config)
    if not path.is_file():
        raise FileNotFoundError(f"config file {path} not found")
    values = json.loads(path.read_text())
    if not isinstance(values, dict):
        raise ValueError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    values = {k.replace("-", "_"): v for k, v in values.items()}
    unknown = sorted(set(values) - known - {"command"})
    if unknown:
        raise ValueError(f"unknown config keys for {args.command}: {', '.join(unknown)}")
    values.pop("command", None)
    sub.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as err:
        return EXIT_INVALID if err.code else EXIT_OK
    except (ValueError, FileNotFoundError, json.JSONDecodeError) as err:
        print(f"{PROG}: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print(f"{PROG}: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except Unreliable as err:
        print(f"{PROG}: unreliable result: {err}", file=sys.stderr)
        return EXIT_UNRELIABLE
    except (FloatingPointError, np.linalg.LinAlgError, RuntimeError) as err:
        print(f"{PROG}: solver failure: {err}", file=sys.stderr)
        return EXIT_UNRELIABLE
    except (ValueError, FileNotFoundError, FileExistsError, KeyError) as err:
        print(f"{PROG}: error: {err}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
