"""End-to-end fitting pipelines: sketched AVC, exact AVC and EM."""

from __future__ import annotations

import time
import warnings
from typing import Optional


from .avc import admissible_marginal_variance, avc_for_data
from .em import EMConfig, FitResult, em_fit
from .errors import UsageError
from .estimators import dual_beta, fast_beta
from .model import MixedModelData, PriorPhi
from .sketch import KernelApprox, SketchClampWarning, build_sketch, transform_covariates

METHODS = ("avc", "em", "exact")


def _finish_avc(data, s, vc, mv, est, method, timings, seed, sketch_info, flags):
    flags = dict(flags)
    flags.update(vc.flags)
    if mv.repaired:
        flags["v_repaired"] = True
    if vc.flags.get("indefinite_lambda"):
        flags["lambda_projected"] = True
    return FitResult(beta=est.beta, intercept=est.intercept, vc=vc, method=method,
                     converged=True, n_iter=0, timings=timings, seed=seed, flags=flags,
                     sketch_info=sketch_info, c_used=s.c_hat)


def fit_avc(data: MixedModelData, phi: PriorPhi, epsilon: float = 0.5, seed: int = 0,
            d_matrix=None, c_hat: Optional[float] = None, rank: Optional[int] = None,
            threads: int = 1) -> FitResult:
    """Sketch, AVCs on ``A A^T``, then the fast estimator lifted to all p covariates."""
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SketchClampWarning)
        sk = build_sketch(data.p, rank or data.n, epsilon, seed)
    t1 = time.perf_counter()
    ka = transform_covariates(data.x, phi, sk, threads=threads)
    t2 = time.perf_counter()
    s, vc = avc_for_data(data, ka.k_hat, "sketched", c_hat, d_matrix)
    mv = admissible_marginal_variance(vc, s, data.z_blocks)
    t3 = time.perf_counter()
    est = fast_beta(ka, sk, phi, mv, data.y)
    t4 = time.perf_counter()
    timings = {"sketch": t1 - t0, "transform": t2 - t1, "variance_components": t3 - t2,
               "lift": t4 - t3, "total": t4 - t0}
    flags = {"sketch_clamped": True} if sk.clamped else {}
    return _finish_avc(data, s, vc, mv, est, "avc", timings, seed, sk.info(), flags)


def fit_exact(data: MixedModelData, phi: PriorPhi, d_matrix=None,
              c_hat: Optional[float] = None) -> FitResult:
    """AVCs on the exact kernel followed by the dual estimator (no sketch)."""
    t0 = time.perf_counter()
    ka = KernelApprox.exact(data.x, phi)
    t1 = time.perf_counter()
    s, vc = avc_for_data(data, ka.k_hat, "exact", c_hat, d_matrix)
    mv = admissible_marginal_variance(vc, s, data.z_blocks)
    t2 = time.perf_counter()
    est = dual_beta(data.x, phi, mv, data.y, kernel=ka.k_hat)
    t3 = time.perf_counter()
    timings = {"kernel": t1 - t0, "variance_components": t2 - t1, "lift": t3 - t2,
               "total": t3 - t0}
    return _finish_avc(data, s, vc, mv, est, "exact", timings, None, {"exact": True}, {})


def fit(data: MixedModelData, phi: PriorPhi, method: str = "avc", epsilon: float = 0.5,
        seed: int = 0, tol: float = 1e-6, max_iter: int = 500, d_matrix=None,
        threads: int = 1) -> FitResult:
    """Dispatch on ``method`` in ``{"avc", "em", "exact"}``."""
    if method == "avc":
        return fit_avc(data, phi, epsilon, seed, d_matrix, threads=threads)
    if method == "exact":
        return fit_exact(data, phi, d_matrix)
    if method == "em":
        if d_matrix is not None:
            raise UsageError("EM fits block-diagonal H; d_matrix applies to the AVC paths only")
        cfg = EMConfig(max_iter=max_iter, tol=tol, epsilon=epsilon, seed=seed, threads=threads)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", SketchClampWarning)
            return em_fit(data, phi, cfg)
    raise UsageError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
