"""Monte-Carlo checks of the sketch error bounds.

Each check draws ``N`` independent sketches from seeds derived from one
master seed, evaluates the observed error and the corresponding bound per
trial, and passes when the empirical failure rate stays within
``rate + 2 sqrt(rate (1 - rate) / N)`` of the nominal failure rate.  A
single violated trial is expected behaviour, not a defect.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .avc import avc_unstructured, build_s_matrix
from .errors import DataError, UsageError
from .estimators import dual_beta, fast_beta
from .model import MarginalVariance, PriorPhi, symmetrize
from .sketch import (KernelApprox, SketchClampWarning, build_sketch, fwht_in_place, gram,
                     padded_dim, transform_covariates)

SQRT23 = math.sqrt(2.0 / 3.0)


def allowed_failure_rate(rate: float, trials: int) -> float:
    rate = min(1.0, max(0.0, rate))
    return rate + 2.0 * math.sqrt(rate * (1.0 - rate) / trials)


def trial_seeds(seed: int, trials: int) -> np.ndarray:
    return np.random.SeedSequence(int(seed)).generate_state(trials, dtype=np.uint64)


@dataclass
class BoundCheck:
    """Per-trial observed errors, bounds and the resulting verdict."""

    tag: str
    params: dict
    observed: np.ndarray
    bound: np.ndarray
    failed: np.ndarray
    nominal_rate: float
    extra: dict = field(default_factory=dict)

    @property
    def trials(self) -> int:
        return int(self.observed.shape[0])

    @property
    def failures(self) -> int:
        return int(np.count_nonzero(self.failed))

    @property
    def failure_rate(self) -> float:
        return self.failures / self.trials

    @property
    def allowed_rate(self) -> float:
        return allowed_failure_rate(self.nominal_rate, self.trials)

    @property
    def passed(self) -> bool:
        return self.failure_rate <= self.allowed_rate

    def record(self) -> dict:
        return {"check": self.tag, **self.params, "trials": self.trials,
                "failures": self.failures, "failure_rate": self.failure_rate,
                "allowed_rate": self.allowed_rate, "passed": self.passed,
                "max_observed": float(np.max(self.observed)),
                "min_bound": float(np.min(self.bound))}


def _sketch(p, r, epsilon, seed, s):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SketchClampWarning)
        return build_sketch(p, r, epsilon, int(seed), s=s)


def _range_basis(k, rel_tol=1e-10):
    lam, vec = np.linalg.eigh(k)
    keep = lam > rel_tol * max(lam.max(), 0.0)
    return lam[keep], vec[:, keep]


def sandwich_eigenvalues(k, k_hat):
    """Generalized eigenvalues of ``(k_hat, k)`` on the range of ``k``."""
    lam, u = _range_basis(k)
    if lam.size == 0:
        raise DataError("covariate matrix has rank zero")
    scale = 1.0 / np.sqrt(lam)
    inner = (u.T @ k_hat @ u) * np.outer(scale, scale)
    return np.linalg.eigvalsh(symmetrize(inner, "sandwich"))


def check_theorem2(x, phi: PriorPhi, epsilon: float, trials: int = 200, seed: int = 0,
                   s: Optional[int] = None, rank: Optional[int] = None) -> BoundCheck:
    """Two-sided PSD sandwich ``(1-eps) A A^T <= A_hat A_hat^T <= (1+sqrt(2/3) eps) A A^T``."""
    x = np.asarray(x, dtype=np.float64)
    n, p = x.shape
    a = x * phi.sqrt
    k = gram(a)
    lo, hi = 1.0 - epsilon, 1.0 + SQRT23 * epsilon
    dev = np.empty(trials)
    failed = np.zeros(trials, dtype=bool)
    ranges = np.empty((trials, 2))
    used_s = None
    for t, sd in enumerate(trial_seeds(seed, trials)):
        sk = _sketch(p, rank or n, epsilon, sd, s)
        used_s = sk.s
        ka = transform_covariates(x, phi, sk)
        ev = sandwich_eigenvalues(k, ka.k_hat)
        ranges[t] = ev.min(), ev.max()
        dev[t] = np.max(np.abs(ev - 1.0))
        failed[t] = ev.min() < lo or ev.max() > hi
    bound = np.full(trials, max(epsilon, SQRT23 * epsilon))
    return BoundCheck("theorem2", {"n": n, "p": p, "epsilon": epsilon, "s": used_s, "seed": seed},
                      dev, bound, failed, 3.0 / n, {"eig_range": ranges})


def _whitened_design(x, mv: MarginalVariance):
    """``Y`` with ``X^T V^{-1} L X = Y^T Y`` (intercept-profiled precision)."""
    chol = np.linalg.cholesky(mv.v)
    y = np.linalg.solve(chol, x)
    w = np.linalg.solve(chol, np.ones(mv.n))
    w /= np.linalg.norm(w)
    return y - np.outer(w, w @ y)


def gamma_spectrum(x, phi: PriorPhi, mv: MarginalVariance):
    """Extreme eigenvalues of ``Gamma = Phi^-1 + X^T P X`` and of ``X^T P X``.

    Isotropic priors with ``p > n`` use the n x n Gram of the whitened design
    (``X^T P X`` then has a zero eigenvalue); otherwise the p x p matrix is
    built densely.
    """
    x = np.asarray(x, dtype=np.float64)
    n, p = x.shape
    yw = _whitened_design(x, mv)
    if phi.is_isotropic and p > n:
        ev = np.linalg.eigvalsh(gram(yw))
        xpx_max = max(float(ev.max()), 0.0)
        xpx_min = 0.0
        inv_tau = 1.0 / float(phi.diag[0])
        return inv_tau + xpx_min, inv_tau + xpx_max, xpx_min
    xpx = yw.T @ yw
    ev = np.linalg.eigvalsh(0.5 * (xpx + xpx.T))
    gev = np.linalg.eigvalsh(np.diag(1.0 / phi.diag) + 0.5 * (xpx + xpx.T))
    return float(gev.min()), float(gev.max()), max(float(ev.min()), 0.0)


def theorem1_bounds(x, phi: PriorPhi, mv: MarginalVariance, epsilon: float):
    """``(tight, loose)`` relative-error bounds for the fast estimator."""
    g_min, g_max, xpx_min = gamma_spectrum(x, phi, mv)
    kappa_g = g_max / g_min
    tight = (epsilon / (1.0 - epsilon) * phi.inv_norm2() * kappa_g
             / (1.0 / (phi.norm2() * (1.0 + SQRT23 * epsilon)) + xpx_min))
    loose = epsilon * (1.0 + SQRT23 * epsilon) / (1.0 - epsilon) * phi.cond() * kappa_g
    return tight, loose


def check_theorem1(x, phi: PriorPhi, mv: MarginalVariance, y, epsilon: float, trials: int = 200,
                   seed: int = 0, s: Optional[int] = None, rank: Optional[int] = None) -> BoundCheck:
    """Relative error of the fast estimator against the exact dual one with a shared ``V``."""
    x = np.asarray(x, dtype=np.float64)
    n, p = x.shape
    exact = dual_beta(x, phi, mv, y).beta
    norm = np.linalg.norm(exact)
    if norm == 0:
        raise DataError("exact estimate is zero; relative error undefined")
    tight, loose = theorem1_bounds(x, phi, mv, epsilon)
    err = np.empty(trials)
    used_s = None
    for t, sd in enumerate(trial_seeds(seed, trials)):
        sk = _sketch(p, rank or n, epsilon, sd, s)
        used_s = sk.s
        ka = transform_covariates(x, phi, sk)
        err[t] = np.linalg.norm(fast_beta(ka, sk, phi, mv, y).beta - exact) / norm
    return BoundCheck("theorem1", {"n": n, "p": p, "epsilon": epsilon, "s": used_s, "seed": seed},
                      err, np.full(trials, tight), err > tight, 3.0 / n,
                      {"tight": tight, "loose": loose})


def ky_fan(k, order: int) -> float:
    """Sum of the ``order`` largest singular values of a symmetric matrix."""
    sv = np.sort(np.abs(np.linalg.eigvalsh(k)))[::-1]
    return float(sv[:order].sum())


def theorem3_bounds(k, z_blocks, epsilon: float):
    """``(sigma2_bound, lambda_bound)`` for AVC perturbations."""
    n = k.shape[0]
    q = sum(b.shape[1] for b in z_blocks)
    frac = ky_fan(k, n - q) / (n - q)
    smin = min(np.linalg.svd(b, compute_uv=False).min() for b in z_blocks)
    spectral = float(np.abs(np.linalg.eigvalsh(k)).max())
    return epsilon * frac, epsilon / smin ** 2 * (spectral + frac), frac, spectral


def check_theorem3(x, phi: PriorPhi, z_blocks, y, epsilon: float, trials: int = 200,
                   seed: int = 0, s: Optional[int] = None, rank: Optional[int] = None,
                   c_hat: Optional[float] = None) -> BoundCheck:
    """Joint check of the sigma2 and Lambda AVC perturbation bounds."""
    x = np.asarray(x, dtype=np.float64)
    n, p = x.shape
    q = sum(b.shape[1] for b in z_blocks)
    if q >= n:
        raise DataError(f"need q < n, got q={q}, n={n}")
    k = KernelApprox.exact(x, phi).k_hat
    s_exact = build_s_matrix(y, c_hat, k, "exact")
    sig_ref, lam_ref = avc_unstructured(s_exact, z_blocks)
    b_sig, b_lam, frac, spectral = theorem3_bounds(k, z_blocks, epsilon)
    obs = np.empty((trials, 2))
    used_s = None
    for t, sd in enumerate(trial_seeds(seed, trials)):
        sk = _sketch(p, rank or n, epsilon, sd, s)
        used_s = sk.s
        ka = transform_covariates(x, phi, sk)
        sig, lam = avc_unstructured(build_s_matrix(y, s_exact.c_hat, ka.k_hat, "sketched"), z_blocks)
        obs[t] = abs(sig - sig_ref), np.linalg.norm(lam - lam_ref, 2)
    failed = (obs[:, 0] > b_sig) | (obs[:, 1] > b_lam)
    ratio = np.maximum(obs[:, 0] / b_sig if b_sig > 0 else obs[:, 0],
                       obs[:, 1] / b_lam if b_lam > 0 else obs[:, 1])
    return BoundCheck("theorem3", {"n": n, "p": p, "q": q, "epsilon": epsilon, "s": used_s,
                                   "seed": seed},
                      ratio, np.ones(trials), failed, 3.0 / n,
                      {"sigma2_err": obs[:, 0], "lambda_err": obs[:, 1], "sigma2_bound": b_sig,
                       "lambda_bound": b_lam, "ky_fan_fraction": frac, "spectral_norm": spectral})


def row_norm_bound(p_padded: int, k: int, delta: float) -> float:
    return math.sqrt(k / p_padded) + math.sqrt(8.0 * math.log(p_padded / delta) / p_padded)


def randomized_rotation(v, signs, rotate=True):
    """``W D v / sqrt(p')`` column-wise; ``rotate=False`` returns ``v`` unchanged."""
    if not rotate:
        return np.array(v, dtype=np.float64)
    buf = np.ascontiguousarray((np.asarray(v, dtype=np.float64) * signs[:, None]).T)
    fwht_in_place(buf)
    return buf.T / math.sqrt(v.shape[0])


def check_srht_row_norms(p: int, k: int = 4, trials: int = 200, seed: int = 0, delta: float = 0.1,
                         v=None, rotate: bool = True) -> BoundCheck:
    """Max row norm of a randomly rotated orthonormal ``V`` against the leverage bound.

    ``v`` fixes the p' x k orthonormal matrix; by default a fresh random one
    is drawn per trial.
    """
    p_padded = padded_dim(p)
    if v is not None:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape[0] != p_padded:
            raise UsageError(f"v must have {p_padded} rows, got {v.shape[0]}")
        k = v.shape[1]
    bound = row_norm_bound(p_padded, k, delta)
    obs = np.empty(trials)
    for t, sd in enumerate(trial_seeds(seed, trials)):
        rng = np.random.Generator(np.random.Philox(int(sd)))
        signs = rng.integers(0, 2, size=p_padded) * 2.0 - 1.0
        vt = v if v is not None else np.linalg.qr(rng.standard_normal((p_padded, k)))[0]
        rv = randomized_rotation(vt, signs, rotate)
        obs[t] = np.sqrt(np.max(np.sum(rv * rv, axis=1)))
    return BoundCheck("lemma1", {"p_padded": p_padded, "k": k, "delta": delta, "seed": seed,
                                 "rotate": rotate},
                      obs, np.full(trials, bound), obs >= bound, delta)
