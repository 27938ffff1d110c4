"""Command-line front end: ``run``, ``plan``, ``bound`` and ``synth``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numeric failure.
Every command that writes files also writes a JSON manifest next to them.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import __version__, analysis
from .data import TAIL_RULE, load_dataset, make_covariance, sample_stream, save_csv
from .errors import (
    ConfigError,
    DataError,
    NonConvergenceError,
    NumericOverflowError,
    UnsupportedRegimeError,
)
from .harness import ExperimentConfig, run_monte_carlo

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Experiment grids. ``base`` holds full-scale settings; ``sweep`` lists the
# override sets for the individual curves. Step constants are tuned for this
# implementation except where published values fit this parameterization.
PRESETS = {
    "fig1a": {
        "base": dict(d=5, lambda1=1.0, eigengap=0.2, variant="single", samples=1_000_000, step_c=10.0),
        "sweep": [{"minibatch": B} for B in (1, 10, 100, 500, 1000, 2000)],
    },
    "fig1b": {
        "base": dict(d=5, lambda1=1.0, eigengap=0.2, variant="dmk", nodes=10, local_batch=10,
                     samples=1_000_000, step_c=10.0),
        "sweep": [{"mu": mu} for mu in (0, 10, 100, 200)],
    },
    "eigengap": {
        "base": dict(d=5, lambda1=1.0, variant="single", minibatch=1000, samples=1_000_000),
        # c0 = 2 c gap held at 4
        "sweep": [{"eigengap": g, "step_c": 2.0 / g} for g in (0.1, 0.2, 0.3, 0.4, 0.5)],
    },
    "dims": {
        "base": dict(lambda1=1.0, eigengap=0.2, variant="single", minibatch=1000, samples=1_000_000,
                     step_c=10.0),
        "sweep": [{"d": d} for d in (5, 10, 15, 20)],
    },
    "normbound": {
        # at a = 1: lambda1 = 0.3252, gap 0.2, r = 1.45; the covariance scales as a^2
        "base": dict(d=5, lambda1=0.3252, eigengap=0.2, kind="bounded", reference_half_range=1.0,
                     variant="single", minibatch=1, samples=1_000_000),
        "sweep": [{"half_range": a, "step_c": c} for a, c in ((1.0, 8.0), (2.0, 2.0), (3.0, 1.0), (10.0, 0.08))],
    },
    "mnist": {
        "base": dict(variant="single", samples=60_000, center=True),
        "sweep": [{"minibatch": B, "step_c": c}
                  for B, c in ((1, 0.6), (10, 0.9), (100, 1.1), (300, 1.5), (1000, 1.6))],
        "needs_data": True,
    },
    "higgs": {
        "base": dict(variant="single", samples=11_000_000, step_c=0.07, center=True),
        "sweep": [{"minibatch": B} for B in (1, 100, 1000, 10_000, 20_000)],
        "needs_data": True,
    },
}

CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}

# command-line flag -> config field
RUN_OVERRIDES = {
    "seed": "seed",
    "trials": "trials",
    "samples": "samples",
    "minibatch": "minibatch",
    "nodes": "nodes",
    "local_batch": "local_batch",
    "mu": "mu",
    "step_c": "step_c",
    "step_L": "step_L",
    "algo": "algo",
    "variant": "variant",
    "data": "data",
    "trace_stride": "trace_stride",
}


class CLIError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors as configuration errors (exit 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def git_blob_hash(path) -> str:
    """Content hash as computed by ``git hash-object``."""
    with open(path, "rb") as fh:
        data = fh.read()
    h = hashlib.sha1(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def _config_hash(cfg_dict: dict) -> str:
    blob = json.dumps(cfg_dict, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_json(path, obj) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".json")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _manifest_path(out: str) -> str:
    stem, _ = os.path.splitext(out)
    return stem + ".manifest.json"


def _check_writable(path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path)) or "."
    if not os.path.isdir(directory) or not os.access(directory, os.W_OK):
        raise CLIError(f"cannot write to {path}", EXIT_DATA)


def _coerce(name: str, value):
    """Convert a config-file value to the type of the ExperimentConfig field."""
    if name not in CONFIG_FIELDS:
        raise CLIError(f"unknown config key {name!r}", EXIT_CONFIG)
    kind = str(CONFIG_FIELDS[name].type)
    try:
        if kind.startswith("int"):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return None if value is None else int(value)
        if kind.startswith("float"):
            return None if value is None else float(value)
        if kind.startswith("bool"):
            if not isinstance(value, bool):
                raise ValueError
            return value
        return value
    except (TypeError, ValueError):
        raise CLIError(f"bad value for {name}: {value!r}", EXIT_CONFIG) from None


def load_config_file(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise CLIError(f"config file not found: {path}", EXIT_CONFIG) from None
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise CLIError(f"cannot parse config {path}: {exc}", EXIT_CONFIG) from None
    return {k: _coerce(k, v) for k, v in raw.items()}


def _scaled(value: int, scale: float) -> int:
    return max(1, int(round(value / scale)))


def _matching_point(sweep: list[dict], from_file: dict, overrides: dict) -> dict:
    """Sweep entry whose swept values agree with the user's, else the first one."""
    user = {**from_file, **overrides}
    for point in sweep:
        shared = set(point) & set(user)
        if shared and all(point[k] == user[k] for k in shared):
            return point
    return sweep[0]


def _run_points(args) -> tuple[list[tuple[str, dict]], dict, dict]:
    """Resolve the preset, config file and flags into labelled config dicts."""
    if args.scale <= 0:
        raise CLIError("--scale must be > 0", EXIT_CONFIG)
    overrides = {field: getattr(args, flag) for flag, field in RUN_OVERRIDES.items()
                 if getattr(args, flag) is not None}
    from_file = load_config_file(args.config) if args.config else {}

    if args.preset:
        preset = PRESETS[args.preset]
        base = dict(preset["base"])
        base["samples"] = _scaled(base["samples"], args.scale)
        sweep = preset["sweep"]
        if preset.get("needs_data") and not (overrides.get("data") or from_file.get("data")):
            raise CLIError(f"preset {args.preset} needs a dataset (--data)", EXIT_CONFIG)
    else:
        base, sweep = {}, [{}]

    # a swept key set by the user selects a single curve
    user_keys = set(from_file) | set(overrides)
    if any(user_keys & set(point) for point in sweep):
        sweep = [_matching_point(sweep, from_file, overrides)]

    points = []
    for point in sweep:
        merged = {**base, **point, **from_file, **overrides}
        label = "_".join(f"{k}{merged[k]:g}" if isinstance(merged[k], float) else f"{k}{merged[k]}"
                         for k in point)
        points.append((label, merged))
    return points, overrides, from_file


def _make_config(merged: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig(**merged)
    except ConfigError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    except (TypeError, ValueError) as exc:
        raise CLIError(f"invalid configuration: {exc}", EXIT_CONFIG) from None


def _dataset_rows(path: str) -> int:
    try:
        return load_dataset(path).shape[0]
    except FileNotFoundError:
        raise CLIError(f"dataset not found: {path}", EXIT_DATA) from None
    except (DataError, OSError, ValueError) as exc:
        raise CLIError(f"cannot read dataset {path}: {exc}", EXIT_DATA) from None


def cmd_run(args) -> int:
    started = _now()
    points, overrides, from_file = _run_points(args)
    out = args.out
    _check_writable(out)
    notes = []

    configs = []
    for label, merged in points:
        data = merged.get("data")
        if data:
            n = _dataset_rows(data)
            if merged.get("samples", ExperimentConfig.samples) > n and "samples" not in overrides:
                notes.append(f"{label or 'run'}: samples capped at dataset size {n}")
                merged["samples"] = n
        configs.append((label, _make_config(merged)))

    stem, ext = os.path.splitext(out)
    ext = ext or ".csv"
    results = []
    for label, cfg in configs:
        try:
            trace = run_monte_carlo(cfg, workers=args.threads)
        except (NumericOverflowError, NonConvergenceError, FloatingPointError) as exc:
            raise CLIError(f"numeric failure: {exc}", EXIT_NUMERIC) from None
        except ConfigError as exc:
            raise CLIError(str(exc), EXIT_CONFIG) from None
        except (DataError, OSError) as exc:
            raise CLIError(f"data error: {exc}", EXIT_DATA) from None
        if not np.all(np.isfinite(trace.mean)):
            raise CLIError("numeric failure: non-finite potential", EXIT_NUMERIC)
        path = out if len(configs) == 1 else f"{stem}_{label}{ext}"
        results.append((path, cfg, trace))

    # outputs are written only after every run succeeded
    manifest_path = _manifest_path(out)
    entries = []
    for path, cfg, trace in results:
        trace.to_csv(path)
        entries.append({
            "path": os.path.abspath(path),
            "config": cfg.to_dict(),
            "config_hash": _config_hash(cfg.to_dict()),
            "mu": cfg.discards,
            "iterations": int(trace.iterations[-1]),
            "final_mean_psi": trace.final_mean,
            "exhausted": bool(trace.exhausted),
            "sha1": git_blob_hash(path),
        })
    inputs = {}
    if args.config:
        inputs[os.path.abspath(args.config)] = git_blob_hash(args.config)
    for _, cfg, _ in results:
        if cfg.data:
            inputs[os.path.abspath(cfg.data)] = git_blob_hash(cfg.data)
    manifest = {
        "command": "run",
        "argv": sys.argv[1:],
        "version": __version__,
        "preset": args.preset,
        "scale": args.scale,
        "config_file": os.path.abspath(args.config) if args.config else None,
        "config_file_values": from_file,
        "overrides": overrides,
        "threads": args.threads,
        "inputs": inputs,
        "outputs": entries,
        "seeds": {"master": results[0][1].seed,
                  "trial_rng": "SeedSequence([seed, trial]).spawn(2) -> (init, data)"},
        "spectrum_rule": TAIL_RULE,
        "notes": notes,
        "started": started,
        "finished": _now(),
    }
    _write_json(manifest_path, manifest)
    for note in notes:
        print(f"note: {note}", file=sys.stderr)
    for path, cfg, trace in results:
        print(f"{path}: B={cfg.B} mu={cfg.discards} final mean psi={trace.final_mean:.6g}")
    print(f"manifest: {manifest_path}")
    return EXIT_OK


def _plan_params(args) -> tuple[analysis.BoundParams, float]:
    if args.lambda1 is None:
        lambda1 = max(1.0, args.eigengap)
    else:
        lambda1 = args.lambda1
    try:
        p = analysis.BoundParams(d=args.d, r=args.r, sigma2_eff=args.sigma2, delta=args.delta,
                                 lambda1=lambda1, eigengap=args.eigengap)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    if not args.c0 > 2:
        raise CLIError(f"requires c0 > 2, got c0={args.c0}", EXIT_CONFIG)
    return p, args.c0 / (2.0 * args.eigengap)


def plan_report(args) -> dict:
    """All numbers printed by ``plan``, as a dict."""
    p, c = _plan_params(args)
    T, mu = args.T, args.mu
    if args.minibatch is not None:
        B = args.minibatch
    else:
        B = args.nodes * args.local_batch
    if B < 1 or mu < 0 or T < B + mu:
        raise CLIError(f"need B >= 1, mu >= 0 and T >= B + mu (T={T}, B={B}, mu={mu})", EXIT_CONFIG)
    s2_B = p.sigma2_eff / B
    pB = dataclasses.replace(p, sigma2_eff=s2_B)
    L1, L2, L = analysis.l_lower_bound_main(pB, c)
    C1, C2 = analysis.bound_constants(pB, c, L)
    iters = T // (B + mu)
    sched = analysis.StepSchedule(c=c, L=L, eigengap=p.eigengap)
    bound_T = analysis.theoretical_bound(iters, pB, sched)
    # L1' and L2' of the finite-sample bound: L = L1' + (sigma2 / B) L2'
    L1p = analysis.l_lower_bound_main(dataclasses.replace(p, sigma2_eff=0.0), c)[0]
    L2p = analysis.l_lower_bound_main(dataclasses.replace(p, sigma2_eff=1.0), c)[1]
    terms = analysis.finite_sample_terms(T, B, mu, p, L1p, L2p, args.c0)
    return {
        "T": T, "B": B, "mu": mu, "c0": args.c0, "c": c,
        "B_max": analysis.max_minibatch(T, args.c0),
        "sigma2_B": s2_B, "L1": L1, "L2": L2, "L": L, "C1": C1, "C2": C2,
        "iterations": iters, "bound_at_T": bound_T,
        "L1_prime": L1p, "L2_prime": L2p,
        "finite_sample_terms": list(terms), "finite_sample_bound": sum(terms),
    }


def cmd_plan(args) -> int:
    rep = plan_report(args)
    if args.json:
        print(json.dumps(rep, indent=2))
        return EXIT_OK
    B_ok = "ok" if rep["B"] <= rep["B_max"] else "exceeds B_max"
    print(f"T = {rep['T']}, B = {rep['B']} ({B_ok}), mu = {rep['mu']}, iterations = {rep['iterations']}")
    print(f"max mini-batch B_max = {rep['B_max']}")
    print(f"c0 = {rep['c0']:g}, c = {rep['c']:.6g}")
    print(f"L1 = {rep['L1']:.6e}, L2 = {rep['L2']:.6e}, L = {rep['L']:.6e}")
    print(f"C1 = {rep['C1']:.6e}, C2 = {rep['C2']:.6e}")
    print(f"expected-potential bound at T/(B+mu) iterations: {rep['bound_at_T']:.6e}")
    t1, t2, t3 = rep["finite_sample_terms"]
    print(f"finite-sample bound terms: {t1:.6e} {t2:.6e} {t3:.6e}")
    print(f"finite-sample bound: {rep['finite_sample_bound']:.6e}")
    return EXIT_OK


def cmd_bound(args) -> int:
    p, c = _plan_params(args)
    L = args.L
    if L is None:
        L = analysis.l_lower_bound_main(p, c)[2]
    sched = analysis.StepSchedule(c=c, L=L, eigengap=p.eigengap)
    if args.t:
        ts = sorted(set(args.t))
    else:
        ts = sorted(set(int(x) for x in np.geomspace(1, args.tmax, args.points).round()) | {0})
    rows = np.array([[t, analysis.theoretical_bound(t, p, sched)] for t in ts])
    if args.out:
        _check_writable(args.out)
        save_csv(args.out, rows, header=["t", "bound"])
        _write_json(_manifest_path(args.out), {
            "command": "bound", "argv": sys.argv[1:], "version": __version__,
            "params": dataclasses.asdict(p), "c": c, "L": L,
            "outputs": [{"path": os.path.abspath(args.out), "sha1": git_blob_hash(args.out)}],
            "finished": _now(),
        })
    else:
        print("t,bound")
        for t, b in rows:
            print(f"{int(t)},{b:.17g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    started = _now()
    if args.n < 1:
        raise CLIError("n must be >= 1", EXIT_CONFIG)
    try:
        spec = make_covariance(args.d, args.lambda1, args.eigengap, seed=args.spec_seed, kind=args.kind,
                               half_range=args.half_range)
    except ValueError as exc:
        raise CLIError(str(exc), EXIT_CONFIG) from None
    X = sample_stream(spec, args.n, np.random.default_rng(args.seed))
    _check_writable(args.out)
    try:
        save_csv(args.out, X)
    except OSError as exc:
        raise CLIError(f"cannot write {args.out}: {exc}", EXIT_DATA) from None
    meta = {
        "command": "synth", "argv": sys.argv[1:], "version": __version__,
        "n": args.n, "seed": args.seed, "spec_seed": args.spec_seed,
        "spec": spec.metadata(),
        "outputs": [{"path": os.path.abspath(args.out), "sha1": git_blob_hash(args.out)}],
        "started": started, "finished": _now(),
    }
    meta_path = _manifest_path(args.out)
    _write_json(meta_path, meta)
    print(f"wrote {args.n} x {spec.d} samples to {args.out}; metadata: {meta_path}")
    return EXIT_OK


def _add_plan_args(sp):
    sp.add_argument("--c0", type=float, required=True, help="c0 = 2 c (lambda1 - lambda2); must exceed 2")
    sp.add_argument("--eigengap", type=float, required=True)
    sp.add_argument("--lambda1", type=float, default=None, help="top eigenvalue (default max(1, eigengap))")
    sp.add_argument("--d", type=int, required=True)
    sp.add_argument("--r", type=float, default=1.0, help="sample norm bound (>= 1)")
    sp.add_argument("--sigma2", type=float, required=True, help="single-sample variance")
    sp.add_argument("--delta", type=float, default=0.1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dkpca", description="Distributed stochastic PCA: simulate, run and plan.",
                     allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run a Monte-Carlo experiment and write its trace",
                         allow_abbrev=False)
    run.add_argument("--config", help="TOML file with flat ExperimentConfig keys")
    run.add_argument("--preset", choices=sorted(PRESETS))
    run.add_argument("--scale", type=float, default=1.0, help="divide the preset's T by this factor")
    run.add_argument("--seed", type=int)
    run.add_argument("--trials", type=int)
    run.add_argument("--samples", type=int, help="total samples T reaching the system")
    run.add_argument("--minibatch", type=int, help="mini-batch size for --variant single")
    run.add_argument("--nodes", type=int)
    run.add_argument("--local-batch", dest="local_batch", type=int)
    run.add_argument("--mu", type=int, help="samples discarded per iteration")
    run.add_argument("--step-c", dest="step_c", type=float)
    run.add_argument("--step-L", dest="step_L", type=float)
    run.add_argument("--algo", choices=["krasulina", "oja"])
    run.add_argument("--variant", choices=["single", "dk", "dmk"])
    run.add_argument("--data", help="dataset file (CSV or idx)")
    run.add_argument("--trace-stride", dest="trace_stride", type=int,
                     help="record every k-th iteration instead of log-spaced points")
    run.add_argument("--threads", type=int, default=1, help="parallel trials (output does not depend on it)")
    run.add_argument("--out", default="trace.csv", help="trace CSV path (sweeps add a suffix per curve)")
    run.set_defaults(func=cmd_run)

    plan = sub.add_parser("plan", help="print the step-size and mini-batch plan for a budget",
                          allow_abbrev=False)
    plan.add_argument("--T", type=int, required=True, help="total sample budget")
    _add_plan_args(plan)
    grp = plan.add_mutually_exclusive_group()
    grp.add_argument("--minibatch", type=int, help="network-wide mini-batch B")
    grp.add_argument("--nodes", type=int, default=1)
    plan.add_argument("--local-batch", dest="local_batch", type=int, default=1)
    plan.add_argument("--mu", type=int, default=0)
    plan.add_argument("--json", action="store_true", help="print the plan as JSON")
    plan.set_defaults(func=cmd_plan)

    bound = sub.add_parser("bound", help="evaluate the expected-potential bound over t",
                           allow_abbrev=False)
    _add_plan_args(bound)
    bound.add_argument("--L", type=float, default=None, help="step offset (default: the L1 + L2 lower bound)")
    bound.add_argument("--t", type=int, nargs="+", help="iterations to evaluate")
    bound.add_argument("--tmax", type=int, default=10**6)
    bound.add_argument("--points", type=int, default=50)
    bound.add_argument("--out", help="CSV path (default: print to stdout)")
    bound.set_defaults(func=cmd_bound)

    synth = sub.add_parser("synth", help="write synthetic samples to CSV", allow_abbrev=False)
    synth.add_argument("--n", type=int, required=True)
    synth.add_argument("--d", type=int, default=5)
    synth.add_argument("--lambda1", type=float, default=1.0)
    synth.add_argument("--eigengap", type=float, default=0.2)
    synth.add_argument("--kind", choices=["gaussian", "bounded"], default="gaussian")
    synth.add_argument("--half-range", dest="half_range", type=float, default=1.0)
    synth.add_argument("--spec-seed", dest="spec_seed", type=int, default=0)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--out", required=True)
    synth.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except UnsupportedRegimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericOverflowError, NonConvergenceError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
