"""Command-line interface: ``simulate``, ``fit``, ``verify``, ``bench`` and ``eval``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure,
4 a verification or acceptance check failed.
"""

from __future__ import annotations

import argparse
import itertools
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .errors import ArlmmError, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 0, 1, 2, 3, 4

log = logging.getLogger("arlmm")


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return int(args.threads)
    env = os.environ.get("ARLMM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"ARLMM_THREADS must be an integer, got {env!r}") from None
    return 1


def _epsilon(value: str) -> float:
    eps = float(value)
    if not 0.0 < eps < 1.0:
        raise argparse.ArgumentTypeError(f"epsilon must lie in (0, 1), got {value}")
    return eps


def _positive(value: str) -> float:
    v = float(value)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be > 0, got {value}")
    return v


def _phi(args, p):
    from .fileio import read_matrix
    from .model import PriorPhi

    if args.phi is not None:
        diag = read_matrix(args.phi).ravel()
        if diag.size != p:
            raise UsageError(f"{args.phi}: {diag.size} prior entries for p={p} covariates")
        return PriorPhi(diag)
    return PriorPhi.isotropic(args.tau, p)


def cmd_simulate(args) -> int:
    from .datagen import SimConfig, simulate
    from .fileio import write_dataset

    if args.preset:
        cfg = SimConfig.preset(args.preset, seed=args.seed)
    else:
        missing = [k for k in ("n", "p", "d", "m") if getattr(args, k) is None]
        if missing:
            raise UsageError(f"without --preset, give {', '.join('--' + k for k in missing)}")
        cfg = SimConfig(n=args.n, p=args.p, d=args.d, m=args.m, s_nonzero=args.sparsity,
                        seed=args.seed)
    data, truth = simulate(cfg)
    digests = write_dataset(args.out, data, truth, fmt=args.format)
    for name, dig in digests.items():
        print(f"{name} {dig}")
    print(f"wrote n={data.n} p={data.p} m={data.m} d={data.d} to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    from .fileio import read_dataset, read_matrix, write_json
    from .fit import METHODS, fit
    from .metrics import standard_lmm_nll
    from .metrics import admissible_components

    if args.method not in METHODS:
        raise UsageError(f"unknown method {args.method!r}; choose from {', '.join(METHODS)}")
    data = read_dataset(args.data)
    phi = _phi(args, data.p)
    d_matrix = read_matrix(args.d_matrix) if args.d_matrix else None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = fit(data, phi, method=args.method, epsilon=args.epsilon, seed=args.seed,
                  tol=args.tol, max_iter=args.max_iter, d_matrix=d_matrix,
                  threads=_threads(args))
    try:
        nll = standard_lmm_nll(data, admissible_components(res.vc, data), res.beta, res.intercept)
    except ArlmmError:
        nll = None
    record = {
        "method": res.method, "beta": res.beta, "intercept": res.intercept,
        "variance_components": res.vc.to_dict(), "converged": res.converged,
        "iterations": res.n_iter, "nll": nll, "nll_trace": res.nll_trace,
        "flags": {**res.vc.flags, **res.flags}, "timings": res.timings, "seed": res.seed,
        "sketch": res.sketch_info,
        "config": {"method": args.method, "epsilon": args.epsilon, "tau": args.tau,
                   "phi": args.phi, "d_matrix": args.d_matrix, "seed": args.seed,
                   "tol": args.tol, "max_iter": args.max_iter, "data": str(args.data)},
    }
    write_json(args.out, record)
    if args.out not in (None, "-"):
        print(f"{res.method}: converged={res.converged} iterations={res.n_iter} "
              f"sigma2={res.vc.sigma2:.6g} -> {args.out}")
    return EXIT_OK


def _random_instance(n, p, seed, m=1, d=None):
    from .model import MixedModelData

    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, p))
    d = d or max(1, min(3, n // 4))
    sizes = [n // m + (1 if i < n % m else 0) for i in range(m)]
    blocks = tuple(rng.uniform(0.0, 1.0, size=(k, d)) for k in sizes)
    y = rng.standard_normal(n) + x @ rng.standard_normal(p) / np.sqrt(p)
    return MixedModelData(x, blocks, y, tuple(sizes))


def _oracle_reports(seed):
    from .estimators import dual_beta
    from .model import PriorPhi, VarianceComponents, build_marginal_variance
    from .oracle import compare, dense_srht, primal_beta_exact
    from .sketch import build_sketch

    data = _random_instance(20, 50, seed)
    phi = PriorPhi.isotropic(1.0, data.p)
    mv = build_marginal_variance(VarianceComponents(1.0, h=np.eye(data.d)), data.z_blocks)
    yield compare("primal_vs_dual", primal_beta_exact(data.x, phi, mv, data.y),
                  dual_beta(data.x, phi, mv, data.y).beta, 1e-8, inputs=(data.x, data.y))
    sk = build_sketch(300, s=64, seed=seed)
    v = np.random.default_rng(seed).standard_normal(300)
    pad = np.zeros(sk.p_padded)
    pad[:300] = v
    yield compare("srht_forward", dense_srht(sk) @ pad, sk.apply(v), 1e-12, inputs=(v,))


def cmd_verify(args) -> int:
    from .fileio import dumps_line
    from .model import PriorPhi, VarianceComponents, build_marginal_variance
    from . import verify as vf

    ok = True
    if args.theorem == "oracle":
        for rep in _oracle_reports(args.seed):
            print(dumps_line(rep.to_dict()))
            ok &= rep.passed
        return EXIT_OK if ok else EXIT_CHECK
    defaults = {"1": (10, 128), "2": (10, 256), "3": (12, 256), "lemma1": (None, 256)}
    n_def, p_def = defaults[args.theorem]
    n = args.n or n_def
    p = args.p or p_def
    if args.theorem == "lemma1":
        chk = vf.check_srht_row_norms(p, k=args.k, trials=args.trials, seed=args.seed)
    else:
        q = 3 if args.theorem == "3" else None
        data = _random_instance(n, p, args.seed, m=3 if q else 1, d=1 if q else None)
        phi = PriorPhi.isotropic(args.tau, p)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            if args.theorem == "2":
                chk = vf.check_theorem2(data.x, phi, args.epsilon, args.trials, args.seed)
            elif args.theorem == "1":
                mv = build_marginal_variance(VarianceComponents(1.0, h=np.eye(data.d)),
                                             data.z_blocks)
                chk = vf.check_theorem1(data.x, phi, mv, data.y, args.epsilon, args.trials,
                                        args.seed)
            else:
                chk = vf.check_theorem3(data.x, phi, data.z_blocks, data.y, args.epsilon,
                                        args.trials, args.seed)
    rec = chk.record()
    for key in ("tight", "loose"):
        if key in chk.extra:
            rec[key + "_bound"] = chk.extra[key]
    print(dumps_line(rec))
    return EXIT_OK if chk.passed else EXIT_CHECK


def _parse_grid(tokens):
    axes = {}
    for tok in tokens:
        if "=" not in tok:
            raise UsageError(f"grid entries look like key=v1,v2; got {tok!r}")
        key, vals = tok.split("=", 1)
        if key not in ("n", "p", "epsilon", "d", "m"):
            raise UsageError(f"unknown grid key {key!r}")
        conv = float if key == "epsilon" else int
        try:
            axes[key] = [conv(v) for v in vals.split(",") if v]
        except ValueError:
            raise UsageError(f"bad grid values in {tok!r}") from None
    for key in ("n", "p"):
        if key not in axes:
            raise UsageError(f"grid needs {key}=...")
    keys = list(axes)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]


def cmd_bench(args) -> int:
    from .metrics import bench_fit, write_csv

    grid = _parse_grid(args.grid)
    for cell in grid:
        cell.setdefault("epsilon", args.epsilon)
    rows = bench_fit(grid, method=args.method, repeats=args.repeats, seed=args.seed,
                     tau=args.tau, max_iter=args.max_iter, tol=args.tol)
    write_csv(rows, args.out if args.out not in (None, "-") else sys.stdout)
    return EXIT_OK


def cmd_eval(args) -> int:
    import json
    from .fileio import read_dataset, read_truth_beta, write_json
    from .metrics import EvalReport, beta_correlation, signal_recovery

    data = read_dataset(args.data)
    beta_true = read_truth_beta(args.data)
    try:
        with open(args.result) as fh:
            rec = json.load(fh)
    except (OSError, ValueError) as exc:
        from .errors import DataError
        raise DataError(f"{args.result}: {exc}") from None
    beta = np.asarray(rec["beta"], dtype=np.float64)
    if beta.size != data.p:
        from .errors import DataError
        raise DataError(f"{args.result}: beta has {beta.size} entries, data has p={data.p}")
    support = np.flatnonzero(beta_true)
    rec_val = None
    if 0 < support.size < data.p:
        rec_val = signal_recovery(beta, support, args.k or 2 * support.size)
    report = EvalReport(beta_correlation(beta, beta_true), rec.get("nll") or float("nan"),
                        None, rec_val, rec.get("timings", {}))
    write_json(args.out, report.to_dict())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="arlmm", description="Sketched ridge linear mixed models")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (default: $ARLMM_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write a synthetic dataset")
    p.add_argument("--preset", choices=["LOW", "MOD", "HIGH"])
    for k in ("n", "p", "d", "m"):
        p.add_argument(f"--{k}", type=int)
    p.add_argument("--sparsity", type=int, default=0, help="non-zero coefficients (0 = dense)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["bin", "csv"], default="bin")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit a dataset directory")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--method", default="avc", help="avc, em or exact")
    p.add_argument("--epsilon", type=_epsilon, default=0.5)
    p.add_argument("--tau", type=_positive, default=1.0, help="isotropic prior Phi = tau I")
    p.add_argument("--phi", help="matrix file with per-covariate prior variances")
    p.add_argument("--d-matrix", dest="d_matrix", help="q x q reference matrix for Lambda = theta D")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=_positive, default=1e-6)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=500)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("verify", help="Monte-Carlo bound checks and oracle cross-checks")
    p.add_argument("--theorem", choices=["1", "2", "3", "lemma1", "oracle"], required=True)
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--epsilon", type=_epsilon, default=0.3)
    p.add_argument("--tau", type=_positive, default=1.0)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=int)
    p.add_argument("--k", type=int, default=4, help="columns of V for lemma1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="per-phase timing table as CSV")
    p.add_argument("--grid", nargs="+", required=True, help="e.g. n=64 p=4096,8192")
    p.add_argument("--method", choices=["avc", "em", "exact"], default="em")
    p.add_argument("--epsilon", type=_epsilon, default=0.5)
    p.add_argument("--tau", type=_positive, default=1.0)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-6, help="EM tolerance; 0 runs max-iter steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("eval", help="score a fit result against simulated truth")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--result", required=True, type=Path)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--out", default="-")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ArlmmError as exc:
        print(f"arlmm {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"arlmm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
