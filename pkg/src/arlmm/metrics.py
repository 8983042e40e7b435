"""Evaluation metrics and phase timing."""

from __future__ import annotations

import csv
import io
import statistics
import time
import warnings
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy.stats import rankdata

from .errors import ArlmmError, UsageError
from .model import MixedModelData, VarianceComponents, build_marginal_variance


class UndefinedMetricError(ArlmmError, ValueError):
    exit_code = 1


def beta_correlation(a, b) -> float:
    """Pearson correlation of two coefficient vectors."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise UsageError(f"length mismatch: {a.size} vs {b.size}")
    da = a - a.mean()
    db = b - b.mean()
    na, nb = np.linalg.norm(da), np.linalg.norm(db)
    if na == 0 or nb == 0:
        raise UndefinedMetricError("correlation undefined for a constant vector")
    return float(np.clip(da @ db / (na * nb), -1.0, 1.0))


def standard_lmm_nll(data: MixedModelData, vc: VarianceComponents, beta, c: float) -> float:
    """Negative log marginal density of y, ``1/2 logdet(2 pi V) + 1/2 r^T V^-1 r``."""
    mv = build_marginal_variance(vc, data.z_blocks)
    r = data.y - data.x @ np.asarray(beta, dtype=np.float64) - c
    return float(0.5 * (data.n * np.log(2.0 * np.pi) + mv.logdet()) + 0.5 * r @ mv.solve(r))


def top_k(beta_hat, k: int) -> np.ndarray:
    """Indices of the k largest ``|beta_hat|``; equal magnitudes go to the lower index."""
    mag = np.abs(np.asarray(beta_hat, dtype=np.float64))
    if not 0 <= k <= mag.size:
        raise UsageError(f"k must lie in [0, {mag.size}], got {k}")
    return np.argsort(-mag, kind="stable")[:k]


def signal_recovery(beta_hat, true_support, k: int) -> float:
    """Fraction of the true support found among the top-k coefficients by magnitude."""
    support = np.unique(np.asarray(list(true_support), dtype=np.int64))
    if support.size == 0:
        raise UndefinedMetricError("empty true support")
    if k == 0:
        return 0.0
    hits = np.intersect1d(top_k(beta_hat, k), support).size
    return hits / support.size


def auc(scores, labels) -> float:
    """Area under the ROC curve from the Mann-Whitney statistic with midranks."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise UsageError("scores and labels differ in length")
    pos = labels > 0
    n_pos = int(pos.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class EvalReport:
    correlation: float
    nll: float
    auc: Optional[float] = None
    signal_recovery: Optional[float] = None
    timings: dict = field(default_factory=dict)

    def __post_init__(self):
        if not -1.0 <= self.correlation <= 1.0:
            raise UsageError("correlation outside [-1, 1]")
        for name in ("auc", "signal_recovery"):
            val = getattr(self, name)
            if val is not None and not 0.0 <= val <= 1.0:
                raise UsageError(f"{name} outside [0, 1]")
        if any(t < 0 for t in self.timings.values()):
            raise UsageError("negative timing")

    def to_dict(self):
        return asdict(self)


def evaluate(result, data: MixedModelData, truth, k: Optional[int] = None) -> EvalReport:
    """Correlation with the true beta, standard-LMM NLL and (sparse truth) signal recovery."""
    rec = None
    support = np.flatnonzero(truth.beta_true)
    if 0 < support.size < truth.beta_true.size:
        rec = signal_recovery(result.beta, support, k if k is not None else 2 * support.size)
    vc = result.vc
    try:
        nll = standard_lmm_nll(data, admissible_components(vc, data), result.beta, result.intercept)
    except ArlmmError:
        nll = float("nan")
    return EvalReport(beta_correlation(result.beta, truth.beta_true), nll, None, rec,
                      dict(result.timings))


def admissible_components(vc: VarianceComponents, data):
    if vc.is_admissible():
        return vc
    if vc.kind == "blocked":
        lam, vec = np.linalg.eigh(vc.h)
        h = (vec * np.clip(lam, 0.0, None)) @ vec.T
        return VarianceComponents(max(vc.sigma2, 1e-8 * float(np.var(data.y))), h=h)
    return VarianceComponents(max(vc.sigma2, 1e-8 * float(np.var(data.y))),
                              theta=max(vc.theta, 0.0), d_matrix=vc.d_matrix)


def median_time(fn, repeats: int = 5):
    """Median wall time of ``fn()`` over ``repeats`` runs and the last return value."""
    if repeats < 1:
        raise UsageError("repeats must be >= 1")
    times, out = [], None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times), times, out


BENCH_PHASES = ("sketch", "transform", "variance_components", "em", "lift", "total")


def bench_fit(grid: Iterable[dict], method: str = "em", repeats: int = 5, seed: int = 0,
              tau: Optional[float] = None, max_iter: int = 500, tol: float = 1e-6, out=None):
    """Median per-phase wall time for each ``{n, p, epsilon}`` grid cell.

    Every cell fits the same simulated dataset (m=1, d=5 groups unless
    overridden) ``repeats`` times and reports medians of each phase plus the
    spread of total time.  Repeats run round-robin over the cells, so slow
    drift in machine speed affects all cells alike.  ``tol=0`` pins EM to
    exactly ``max_iter`` iterations, which keeps per-cell work comparable.
    Returns the rows and writes CSV to ``out`` if given (a path or text
    stream).
    """
    from .datagen import SimConfig, simulate
    from .fit import fit
    from .model import PriorPhi

    _warm_up()
    cells = []
    for cell in grid:
        n, p = int(cell["n"]), int(cell["p"])
        eps = float(cell.get("epsilon", 0.5))
        d, m = int(cell.get("d", 5)), int(cell.get("m", 1))
        data, _ = simulate(SimConfig(n=n, p=p, d=d, m=m, seed=seed))
        phi = PriorPhi.isotropic(tau if tau is not None else 1.0, p)
        cells.append({"n": n, "p": p, "eps": eps, "data": data, "phi": phi, "last": None,
                      "phases": {k: [] for k in BENCH_PHASES}})
    for _ in range(repeats):
        for c in cells:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                res = fit(c["data"], c["phi"], method=method, epsilon=c["eps"], seed=seed,
                          tol=tol, max_iter=max_iter)
            for k in BENCH_PHASES:
                c["phases"][k].append(res.timings.get(k, 0.0))
            c["last"] = res
    rows = []
    for c in cells:
        res, ph = c["last"], c["phases"]
        row = {"n": c["n"], "p": c["p"], "epsilon": c["eps"], "method": method,
               "s": res.sketch_info.get("s"), "iterations": res.n_iter, "repeats": repeats}
        for k in BENCH_PHASES:
            row[k] = statistics.median(ph[k])
        # fit phases that never touch p-dimensional data
        row["post_sketch"] = statistics.median(
            [t - a - b - l for t, a, b, l in zip(ph["total"], ph["sketch"], ph["transform"],
                                                 ph["lift"])])
        row["total_stdev"] = statistics.stdev(ph["total"]) if repeats > 1 else 0.0
        rows.append(row)
    if out is not None:
        write_csv(rows, out)
    return rows


def _warm_up():
    """Compile the FWHT kernels outside the timed region."""
    from .model import PriorPhi
    from .sketch import build_sketch, transform_covariates

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        transform_covariates(np.ones((2, 4)), PriorPhi.isotropic(1.0, 4), build_sketch(4, s=2))


def write_csv(rows, out):
    if not rows:
        return
    fields = list(rows[0].keys())
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        with open(out, "w", newline="") as fh:
            _write(rows, fields, fh)
    else:
        _write(rows, fields, out)


def _write(rows, fields, fh):
    w = csv.DictWriter(fh, fieldnames=fields)
    w.writeheader()
    w.writerows(rows)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()
