"""Fixed-effects estimators: the intercept, the exact dual form and the SRHT form.

All three work in the n-dimensional observation space.  With
``P = V^{-1} L`` (symmetric, rank n-1) the dual estimator is

    beta = Phi X^T P (K P + I)^{-1} y,        K = X Phi X^T,

and the fast estimator replaces ``K`` by ``A A^T`` and ``Phi X^T`` by
``sqrt(Phi) Pi^T A^T``, so no p x p (or even n x p) work is needed once
``A`` is available.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .errors import NumericalError, UsageError
from .model import MarginalVariance, PriorPhi
from .sketch import KernelApprox, Sketch


@dataclass(frozen=True)
class FixedEffectsEstimate:
    beta: np.ndarray
    intercept: float
    method: str
    seed: Optional[int] = None


def estimate_intercept(mv: MarginalVariance, x, beta, y) -> float:
    """GLS intercept ``1^T V^{-1} (y - X beta) / 1^T V^{-1} 1``."""
    xb = np.asarray(x, dtype=np.float64) @ np.asarray(beta, dtype=np.float64)
    return intercept_from_fitted(mv, xb, y)


def intercept_from_fitted(mv: MarginalVariance, xb, y) -> float:
    """Same as :func:`estimate_intercept` given the fitted values ``X beta``."""
    return float(mv.v_inv_one @ (np.asarray(y) - xb) / mv.one_v_inv_one)


def _solve_dense(b, rhs, what):
    """LU solve that refuses numerically singular systems."""
    lu, piv, info = lapack.dgetrf(b)
    if info > 0:
        raise NumericalError(f"{what} is exactly singular (zero pivot at {info})")
    anorm = np.linalg.norm(b, 1)
    rcond, _ = lapack.dgecon(lu, anorm, norm="1")
    if not rcond > np.finfo(float).eps:
        raise NumericalError(f"{what} is numerically singular (reciprocal condition {rcond:.2e})")
    return sla.lu_solve((lu, piv), rhs, check_finite=False)


def _kernel_system(kernel, mv: MarginalVariance, y, profile_intercept=True):
    """Solve ``(K P + I) alpha = y`` and return ``P alpha``.

    ``profile_intercept=False`` uses ``P = V^{-1}`` (intercept fixed at zero).
    """
    n = mv.n
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (n, n) or np.shape(y) != (n,):
        raise UsageError(f"kernel {kernel.shape} / response {np.shape(y)} do not match V of size {n}")
    apply_p = mv.projector_apply if profile_intercept else mv.solve
    # K P = (P K)^T because both K and P are symmetric
    kp = apply_p(kernel).T
    kp[np.diag_indices(n)] += 1.0
    alpha = _solve_dense(kp, y, "kernel system (K P + I)")
    return apply_p(alpha)


def dual_beta(x, phi: PriorPhi, mv: MarginalVariance, y, kernel=None,
              profile_intercept: bool = True) -> FixedEffectsEstimate:
    """Exact dual ridge-LMM estimator.

    Cost is dominated by the kernel ``X Phi X^T`` (``O(n^2 p)``) unless a
    precomputed ``kernel`` is passed.  By default the intercept is profiled
    out and then estimated by GLS; ``profile_intercept=False`` fixes it at
    zero, which gives ``Phi X^T (V + K)^{-1} y``.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if kernel is None:
        xs = x * phi.sqrt
        kernel = xs @ xs.T
    pa = _kernel_system(kernel, mv, y, profile_intercept)
    beta = phi.diag * (x.T @ pa)
    c = intercept_from_fitted(mv, kernel @ pa, y) if profile_intercept else 0.0
    return FixedEffectsEstimate(beta, c, "dual")


def fast_beta(ka: KernelApprox, sk: Sketch, phi: PriorPhi, mv: MarginalVariance, y) -> FixedEffectsEstimate:
    """SRHT estimator of all p coefficients from the sketched factor ``A``.

    The n-space solve costs ``O(max(n^2 s, n^3))``; lifting the length-s
    vector back to p coordinates costs one FWHT, ``O(p' log p')``.
    """
    if ka.sketch is not sk or sk.p != phi.p:
        raise UsageError("kernel approximation was not built with this sketch / prior")
    y = np.asarray(y, dtype=np.float64)
    pa = _kernel_system(ka.k_hat, mv, y)
    w = ka.a.T @ pa
    beta = phi.sqrt * sk.adjoint(w)
    c = intercept_from_fitted(mv, ka.a @ w, y)
    return FixedEffectsEstimate(beta, c, "fast", seed=sk.seed)
