"""Fast EM for multi-group ridge LMMs on a (sketched) kernel.

The latent variables are ``beta`` (prior ``N(0, Phi)``) and the per-group
random effects; the parameters are ``H``, ``sigma2`` and the intercept.  The
marginal covariance of ``y`` is ``M = Z Lambda Z^T + sigma2 I + K``, and
every E-step quantity is expressed through ``M^{-1}``:

* ``gamma_i = H Z_i^T alpha_i`` with ``alpha = M^{-1} (y - c 1)``
* ``Sigma_i = H - H Z_i^T (M^{-1})_{ii} Z_i H``
* ``X beta = K alpha`` (no p-dimensional work)

Two interchangeable backends factor ``M``: a dense Cholesky (general) and a
Woodbury form ``M = sigma2 I + W W^T`` with ``W = [Z H^{1/2}, A]`` whose
per-iteration cost is ``O((q + s)^3)`` instead of ``O(n^3)``.  The latter is
picked automatically when ``q + s`` is well below ``n``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .errors import FactorizationError, UsageError
from .estimators import fast_beta
from .model import MixedModelData, PriorPhi, VarianceComponents, build_marginal_variance
from .sketch import KernelApprox, build_sketch, transform_covariates

log = logging.getLogger(__name__)

SIGMA2_FLOOR_REL = 1e-10


def _psd_sqrt(h):
    lam, vec = np.linalg.eigh(0.5 * (h + h.T))
    return (vec * np.sqrt(np.clip(lam, 0.0, None))) @ vec.T


class _DenseMarginal:
    """Cholesky of the explicit n x n ``M``; ``M^{-1}`` via LAPACK potri."""

    def __init__(self, kernel, z_blocks, slices, h, sigma2):
        n = kernel.shape[0]
        mat = kernel.copy()
        for b, sl in zip(z_blocks, slices):
            mat[sl, sl] += b @ h @ b.T
        mat[np.diag_indices(n)] += sigma2
        chol, info = lapack.dpotrf(mat, lower=1, clean=1)
        if info != 0:
            lam = float(np.linalg.eigvalsh(0.5 * (mat + mat.T)).min())
            raise FactorizationError(
                f"M = V + K is not positive definite: smallest eigenvalue {lam:.3e}", lam)
        self._chol = chol
        inv, info = lapack.dpotri(chol, lower=1)
        if info != 0:
            raise FactorizationError("inversion of M failed")
        inv = np.tril(inv) + np.tril(inv, -1).T
        self.m_inv = inv
        self._z = z_blocks
        self._slices = slices

    def solve(self, r):
        return sla.cho_solve((self._chol, True), r, check_finite=False)

    def logdet(self):
        return float(2.0 * np.sum(np.log(np.diag(self._chol))))

    def trace_inv(self):
        return float(np.trace(self.m_inv))

    def zt_minv_z(self):
        return [b.T @ self.m_inv[sl, sl] @ b for b, sl in zip(self._z, self._slices)]


class _LowRankStats:
    """Fit-constant Gram blocks reused by every Woodbury factorization."""

    def __init__(self, a, z_blocks, slices):
        self.a = a
        self.ata = a.T @ a
        self.c = [b.T @ b for b in z_blocks]
        self.zta = [b.T @ a[sl] for b, sl in zip(z_blocks, slices)]


class _LowRankMarginal:
    def __init__(self, stats: _LowRankStats, z_blocks, slices, h, sigma2):
        if sigma2 <= 0:
            raise FactorizationError("low-rank factorization needs sigma2 > 0", sigma2)
        self._stats = stats
        self._z = z_blocks
        self._slices = slices
        m = len(z_blocks)
        d = h.shape[0]
        s = stats.a.shape[1]
        q = m * d
        self.k = q + s
        self.n = sum(b.shape[0] for b in z_blocks)
        self.sigma2 = sigma2
        root = _psd_sqrt(h)
        self._root = root
        g = np.zeros((self.k, self.k))
        for i in range(m):
            blk = slice(i * d, (i + 1) * d)
            g[blk, blk] = root @ stats.c[i] @ root
            za = root @ stats.zta[i]
            g[blk, q:] = za
            g[q:, blk] = za.T
        g[q:, q:] = stats.ata
        g[np.diag_indices(self.k)] += sigma2
        chol, info = lapack.dpotrf(g, lower=1, clean=1)
        if info != 0:
            raise FactorizationError("Woodbury inner matrix is not positive definite")
        self._chol = chol
        inv, _ = lapack.dpotri(chol, lower=1)
        self._g_inv = np.tril(inv) + np.tril(inv, -1).T
        self._q = q
        self._d = d

    def _wt(self, r):
        parts = [self._root @ (b.T @ r[sl]) for b, sl in zip(self._z, self._slices)]
        parts.append(self._stats.a.T @ r)
        return np.concatenate(parts)

    def _w(self, g):
        d = self._d
        out = self._stats.a @ g[self._q:]
        for i, (b, sl) in enumerate(zip(self._z, self._slices)):
            out[sl] += b @ (self._root @ g[i * d:(i + 1) * d])
        return out

    def solve(self, r):
        g = sla.cho_solve((self._chol, True), self._wt(r), check_finite=False)
        return (r - self._w(g)) / self.sigma2

    def logdet(self):
        return float((self.n - self.k) * np.log(self.sigma2)
                     + 2.0 * np.sum(np.log(np.diag(self._chol))))

    def trace_inv(self):
        return float((self.n - self.k) / self.sigma2 + np.trace(self._g_inv))

    def zt_minv_z(self):
        d, q = self._d, self._q
        out = []
        for i, c_i in enumerate(self._stats.c):
            idx = np.r_[i * d:(i + 1) * d, q:self.k]
            f = np.hstack([c_i @ self._root, self._stats.zta[i]])
            out.append((c_i - f @ self._g_inv[np.ix_(idx, idx)] @ f.T) / self.sigma2)
        return out


@dataclass
class EMState:
    """Current parameters and the posterior moments they imply."""

    vc: VarianceComponents
    c_hat: float
    gamma_hat: np.ndarray
    gamma_cov_blocks: np.ndarray
    alpha: np.ndarray
    m_inv_handle: object
    nll: float
    iteration: int = 0
    nll_trace: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)

    @property
    def h(self):
        return self.vc.h

    @property
    def sigma2(self):
        return self.vc.sigma2


def _kernel_parts(kernel):
    if isinstance(kernel, KernelApprox):
        return kernel.k_hat, kernel.a
    kernel = np.asarray(kernel, dtype=np.float64)
    return kernel, None


class _Posterior:
    """Binds data and kernel so repeated E-steps reuse the fit-constant work."""

    def __init__(self, data: MixedModelData, kernel, backend="auto"):
        k, a = _kernel_parts(kernel)
        if k.shape != (data.n, data.n):
            raise UsageError(f"kernel has shape {k.shape}, expected ({data.n}, {data.n})")
        self.data = data
        self.k = k
        self.a = a
        self.slices = data.group_slices()
        if backend == "auto":
            lowrank_ok = a is not None and data.q + a.shape[1] <= data.n // 2
            backend = "lowrank" if lowrank_ok else "dense"
        if backend == "lowrank":
            if a is None:
                raise UsageError("the low-rank backend needs the kernel factor A")
            self._stats = _LowRankStats(a, data.z_blocks, self.slices)
        elif backend != "dense":
            raise UsageError(f"unknown EM backend {backend!r}")
        self.backend = backend

    def factor(self, h, sigma2):
        if self.backend == "lowrank":
            return _LowRankMarginal(self._stats, self.data.z_blocks, self.slices, h, sigma2)
        return _DenseMarginal(self.k, self.data.z_blocks, self.slices, h, sigma2)

    def kernel_apply(self, v):
        if self.a is not None and self.a.shape[1] < self.data.n:
            return self.a @ (self.a.T @ v)
        return self.k @ v

    def state(self, vc: VarianceComponents, c_hat: float, iteration=0, trace=None, flags=None):
        if vc.kind != "blocked":
            raise UsageError("EM supports block-diagonal random-effects covariance only")
        data = self.data
        h = vc.h
        handle = self.factor(h, vc.sigma2)
        r = data.y - c_hat
        alpha = handle.solve(r)
        gamma = np.stack([h @ (b.T @ alpha[sl]) for b, sl in zip(data.z_blocks, self.slices)])
        covs = np.stack([h - h @ zmz @ h for zmz in handle.zt_minv_z()])
        covs = 0.5 * (covs + covs.transpose(0, 2, 1))
        nll = 0.5 * handle.logdet() + 0.5 * float(r @ alpha)
        trace = list(trace or [])
        trace.append(nll)
        return EMState(vc, float(c_hat), gamma, covs, alpha, handle, nll, iteration, trace,
                       dict(flags or {}))


def em_posteriors(data: MixedModelData, phi: Optional[PriorPhi], vc: VarianceComponents, kernel,
                  c_hat: Optional[float] = None, backend="auto") -> EMState:
    """Posterior moments of the random effects at fixed ``(H, sigma2, c)``.

    ``kernel`` is an n x n PSD matrix or a :class:`KernelApprox` (whose factor
    enables the low-rank backend).  ``c_hat`` defaults to the mean response.
    """
    c = float(np.mean(data.y)) if c_hat is None else float(c_hat)
    return _Posterior(data, kernel, backend).state(vc, c)


def _m_step(post: _Posterior, state: EMState):
    data = post.data
    n, m = data.n, data.m
    h_new = (np.einsum("ia,ib->ab", state.gamma_hat, state.gamma_hat)
             + state.gamma_cov_blocks.sum(axis=0)) / m
    xb = post.kernel_apply(state.alpha)
    zg = np.concatenate([b @ g for b, g in zip(data.z_blocks, state.gamma_hat)])
    e_hat = data.y - xb - zg - state.c_hat
    s2 = state.sigma2
    sigma2_new = s2 + (float(e_hat @ e_hat) - s2 * s2 * state.m_inv_handle.trace_inv()) / n
    c_new = float(np.mean(data.y - xb - zg))
    flags = dict(state.flags)
    floor = SIGMA2_FLOOR_REL * float(np.var(data.y))
    if not sigma2_new > floor:
        sigma2_new = floor
        flags["sigma2_floored"] = True
    return h_new, sigma2_new, c_new, flags


def em_step(state: EMState, data: MixedModelData, phi: Optional[PriorPhi], kernel,
            backend="auto", _post: Optional[_Posterior] = None) -> EMState:
    """One M-step followed by the E-step at the updated parameters."""
    post = _post if _post is not None else _Posterior(data, kernel, backend)
    h_new, sigma2_new, c_new, flags = _m_step(post, state)
    vc = VarianceComponents(sigma2_new, h=h_new)
    return post.state(vc, c_new, state.iteration + 1, state.nll_trace, flags)


@dataclass(frozen=True)
class EMConfig:
    max_iter: int = 500
    tol: float = 1e-6
    epsilon: float = 0.5
    seed: int = 0
    exact_kernel: bool = False
    backend: str = "auto"
    rank: Optional[int] = None
    threads: int = 1


@dataclass
class FitResult:
    """Outcome of a complete fit (EM or AVC)."""

    beta: np.ndarray
    intercept: float
    vc: VarianceComponents
    method: str
    converged: bool = True
    n_iter: int = 0
    nll_trace: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)
    seed: Optional[int] = None
    flags: dict = field(default_factory=dict)
    sketch_info: dict = field(default_factory=dict)
    c_used: Optional[float] = None


def initial_components(data: MixedModelData):
    """Moment-flavoured starting point: half of var(y) to noise, half to H."""
    var_y = float(np.var(data.y))
    vc = VarianceComponents(var_y / 2.0, h=np.eye(data.d) * var_y / (2.0 * data.d))
    return vc, float(np.mean(data.y))


def relative_change(old: VarianceComponents, new: VarianceComponents) -> float:
    ds = abs(new.sigma2 - old.sigma2) / abs(old.sigma2)
    hn = np.linalg.norm(old.h)
    dh = np.linalg.norm(new.h - old.h) / hn if hn > 0 else np.linalg.norm(new.h)
    return float(max(ds, dh))


def run_em(data: MixedModelData, kernel, config: EMConfig = EMConfig(), init=None,
           callback=None) -> EMState:
    """Iterate EM on a fixed kernel until the relative parameter change drops below ``tol``."""
    post = _Posterior(data, kernel, config.backend)
    vc, c = init if init is not None else initial_components(data)
    state = post.state(vc, c)
    converged = False
    for _ in range(config.max_iter):
        new = em_step(state, data, None, kernel, _post=post)
        change = relative_change(state.vc, new.vc)
        state = new
        if callback is not None:
            callback(state)
        if change < config.tol:
            converged = True
            break
    state.flags["converged"] = converged
    state.flags["backend"] = post.backend
    return state


def em_fit(data: MixedModelData, phi: PriorPhi, config: EMConfig = EMConfig()) -> FitResult:
    """Sketch once, run EM on ``A A^T``, then lift the coefficients to all p covariates."""
    timings = {}
    t0 = time.perf_counter()
    if config.exact_kernel:
        ka = KernelApprox.exact(data.x, phi)
        sk = None
        timings["transform"] = 0.0
    else:
        sk = build_sketch(data.p, config.rank or data.n, config.epsilon, config.seed)
        t1 = time.perf_counter()
        ka = transform_covariates(data.x, phi, sk, threads=config.threads)
        timings["sketch"] = t1 - t0
        timings["transform"] = time.perf_counter() - t1
    t2 = time.perf_counter()
    state = run_em(data, ka, config)
    timings["em"] = time.perf_counter() - t2
    timings["em_per_iter"] = timings["em"] / max(1, state.iteration)
    t3 = time.perf_counter()
    mv = build_marginal_variance(state.vc, data.z_blocks)
    if sk is None:
        from .estimators import dual_beta
        est = dual_beta(data.x, phi, mv, data.y, kernel=ka.k_hat)
    else:
        est = fast_beta(ka, sk, phi, mv, data.y)
    timings["lift"] = time.perf_counter() - t3
    timings["total"] = time.perf_counter() - t0
    converged = bool(state.flags.get("converged"))
    if not converged:
        log.warning("EM stopped at max_iter=%d without converging", config.max_iter)
    flags = {k: v for k, v in state.flags.items() if k != "converged"}
    if sk is not None and sk.clamped:
        flags["sketch_clamped"] = True
    return FitResult(
        beta=est.beta, intercept=est.intercept, vc=state.vc, method="em",
        converged=converged, n_iter=state.iteration, nll_trace=list(state.nll_trace),
        timings=timings, seed=config.seed, flags=flags,
        sketch_info=sk.info() if sk is not None else {"exact": True}, c_used=state.c_hat,
    )


def posterior_beta(state: EMState, phi: PriorPhi, x=None, ka: Optional[KernelApprox] = None):
    """Posterior mean of beta, ``Phi X^T alpha`` (exact) or ``sqrt(Phi) Pi^T A^T alpha``."""
    if ka is not None and ka.sketch is not None:
        return phi.sqrt * ka.sketch.adjoint(ka.a.T @ state.alpha)
    if x is None:
        raise UsageError("posterior_beta needs x or a sketched kernel")
    return phi.diag * (np.asarray(x).T @ state.alpha)
