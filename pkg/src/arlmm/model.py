"""Core LMM data types and the marginal variance ``V = Z Lambda Z^T + sigma^2 I``.

Observations are stored group-contiguous: rows ``offsets[i]:offsets[i+1]`` of
``x`` and ``y`` belong to group ``i`` and are paired with ``z_blocks[i]``.
The random-effects covariance for the blocked kind is never stored as a q x q
matrix; every product with it goes through the per-group ``d x d`` block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.linalg as sla

from .errors import DataError, FactorizationError, UsageError

SYMMETRY_RTOL = 1e-8


def _as_f64(a, name, ndim):
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class MixedModelData:
    """Observed ``(X, Z, y)`` with the group partition.

    Parameters
    ----------
    x : (n, p) array
        Fixed-effects covariates.
    z_blocks : sequence of (n_i, d) arrays
        Random-effects design of each group; ``Z`` is their block diagonal.
    y : (n,) array
        Response.
    group_sizes : sequence of int
        ``n_i`` for each group, in storage order.
    """

    x: np.ndarray
    z_blocks: tuple
    y: np.ndarray
    group_sizes: tuple

    def __post_init__(self):
        x = _as_f64(self.x, "x", 2)
        y = _as_f64(self.y, "y", 1)
        blocks = tuple(_as_f64(b, f"z_blocks[{i}]", 2) for i, b in enumerate(self.z_blocks))
        sizes = tuple(int(s) for s in self.group_sizes)
        if not blocks:
            raise DataError("at least one group is required")
        if len(sizes) != len(blocks):
            raise DataError(f"{len(sizes)} group sizes given for {len(blocks)} z blocks")
        if any(s <= 0 for s in sizes):
            raise DataError(f"group sizes must be positive, got {sizes}")
        n = sum(sizes)
        if x.shape[0] != n or y.shape[0] != n:
            raise DataError(
                f"group sizes sum to {n} but x has {x.shape[0]} rows and y has {y.shape[0]} entries"
            )
        d = blocks[0].shape[1]
        for i, (b, s) in enumerate(zip(blocks, sizes)):
            if b.shape != (s, d):
                raise DataError(f"z_blocks[{i}] has shape {b.shape}, expected ({s}, {d})")
        for name, arr in (("x", x), ("y", y)):
            if not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "z_blocks", blocks)
        object.__setattr__(self, "group_sizes", sizes)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]

    @property
    def m(self) -> int:
        return len(self.z_blocks)

    @property
    def d(self) -> int:
        return self.z_blocks[0].shape[1]

    @property
    def q(self) -> int:
        return self.m * self.d

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.group_sizes)])

    def group_slices(self):
        off = self.offsets
        return [slice(int(off[i]), int(off[i + 1])) for i in range(self.m)]

    def check_rank(self):
        """Raise :class:`DataError` unless every Z block has full column rank."""
        for i, b in enumerate(self.z_blocks):
            rank = np.linalg.matrix_rank(b)
            if rank < self.d:
                raise DataError(f"z block {i} is rank deficient (rank {rank} < d={self.d})")

    def z_dense(self) -> np.ndarray:
        """Materialize the n x q block-diagonal Z (small problems and oracles only)."""
        return sla.block_diag(*self.z_blocks)

    def permuted_groups(self, order):
        """Return a copy with groups reordered by ``order``."""
        sl = self.group_slices()
        idx = np.concatenate([np.arange(sl[i].start, sl[i].stop) for i in order])
        return MixedModelData(
            self.x[idx],
            tuple(self.z_blocks[i] for i in order),
            self.y[idx],
            tuple(self.group_sizes[i] for i in order),
        )


def z_matmul(z_blocks: Sequence[np.ndarray], mat: np.ndarray) -> np.ndarray:
    """``Z @ mat`` for block-diagonal Z, with ``mat`` of shape (q, k) or (q,)."""
    d = z_blocks[0].shape[1]
    out = [b @ mat[i * d:(i + 1) * d] for i, b in enumerate(z_blocks)]
    return np.concatenate(out, axis=0)


def zt_matmul(z_blocks: Sequence[np.ndarray], mat: np.ndarray) -> np.ndarray:
    """``Z.T @ mat`` for block-diagonal Z, with ``mat`` of shape (n, k) or (n,)."""
    out = []
    start = 0
    for b in z_blocks:
        stop = start + b.shape[0]
        out.append(b.T @ mat[start:stop])
        start = stop
    return np.concatenate(out, axis=0)


@dataclass(frozen=True)
class PriorPhi:
    """Diagonal prior covariance of the fixed effects, ``beta ~ N(0, diag(diag))``."""

    diag: np.ndarray

    def __post_init__(self):
        diag = np.asarray(self.diag, dtype=np.float64).ravel()
        if diag.size == 0 or not np.all(np.isfinite(diag)) or np.any(diag <= 0):
            raise UsageError("prior covariance entries must be finite and strictly positive")
        object.__setattr__(self, "diag", diag)

    @classmethod
    def isotropic(cls, tau: float, p: int) -> "PriorPhi":
        return cls(np.full(p, float(tau)))

    @property
    def p(self) -> int:
        return self.diag.size

    @property
    def sqrt(self) -> np.ndarray:
        return np.sqrt(self.diag)

    @property
    def is_isotropic(self) -> bool:
        return bool(np.all(self.diag == self.diag[0]))

    def norm2(self) -> float:
        return float(self.diag.max())

    def inv_norm2(self) -> float:
        return float(1.0 / self.diag.min())

    def cond(self) -> float:
        return float(self.diag.max() / self.diag.min())


def symmetrize(h, name="h"):
    """Accept a nearly symmetric matrix and return its symmetric part."""
    h = np.atleast_2d(np.asarray(h, dtype=np.float64))
    if h.shape[0] != h.shape[1]:
        raise UsageError(f"{name} must be square, got shape {h.shape}")
    scale = np.max(np.abs(h)) if h.size else 0.0
    if np.max(np.abs(h - h.T), initial=0.0) > SYMMETRY_RTOL * scale:
        raise UsageError(f"{name} is not symmetric")
    return 0.5 * (h + h.T)


@dataclass(frozen=True)
class VarianceComponents:
    """Variance components ``(Lambda, sigma^2)``.

    ``kind="blocked"`` means ``Lambda = blockdiag(h, ..., h)``;
    ``kind="parameterized"`` means ``Lambda = theta * d_matrix`` with a fixed
    q x q reference matrix.  Indefinite ``h`` and negative ``sigma2`` are
    allowed here because approximate estimates may produce them; ``flags``
    records such conditions.
    """

    sigma2: float
    h: Optional[np.ndarray] = None
    theta: Optional[float] = None
    d_matrix: Optional[np.ndarray] = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "sigma2", float(self.sigma2))
        if self.h is not None:
            if self.theta is not None:
                raise UsageError("give either h or (theta, d_matrix), not both")
            object.__setattr__(self, "h", symmetrize(self.h))
        elif self.theta is not None and self.d_matrix is not None:
            object.__setattr__(self, "theta", float(self.theta))
            object.__setattr__(self, "d_matrix", symmetrize(self.d_matrix, "d_matrix"))
        else:
            raise UsageError("variance components need h or (theta, d_matrix)")

    @property
    def kind(self) -> str:
        return "blocked" if self.h is not None else "parameterized"

    def is_admissible(self, tol=0.0) -> bool:
        """True when the components define a valid Gaussian model (PSD, sigma2 > 0)."""
        if self.sigma2 <= 0:
            return False
        if self.kind == "blocked":
            return bool(np.linalg.eigvalsh(self.h).min() >= -tol)
        return self.theta * np.linalg.eigvalsh(self.d_matrix).min() >= -tol

    def z_lambda_zt(self, z_blocks, offsets=None) -> np.ndarray:
        """Dense ``Z Lambda Z^T`` (n x n)."""
        if self.kind == "blocked":
            sizes = [b.shape[0] for b in z_blocks]
            n = sum(sizes)
            out = np.zeros((n, n))
            start = 0
            for b in z_blocks:
                stop = start + b.shape[0]
                out[start:stop, start:stop] = b @ self.h @ b.T
                start = stop
            return out
        q = sum(b.shape[1] for b in z_blocks)
        if self.d_matrix.shape != (q, q):
            raise UsageError(f"d_matrix has shape {self.d_matrix.shape}, expected ({q}, {q})")
        zd = z_matmul(z_blocks, self.d_matrix)
        return self.theta * z_matmul(z_blocks, zd.T).T

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "sigma2": self.sigma2, "flags": dict(self.flags)}
        if self.kind == "blocked":
            out["h"] = self.h.tolist()
        else:
            out["theta"] = self.theta
        return out


class MarginalVariance:
    """Cholesky-factored symmetric positive definite ``V``.

    Construct through :func:`build_marginal_variance` or :meth:`from_matrix`.
    Solves always go through the factor; ``V^{-1}`` is never formed.
    """

    def __init__(self, v: np.ndarray, components: Optional[VarianceComponents] = None,
                 repaired: bool = False):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise UsageError(f"V must be square, got shape {v.shape}")
        self.v = 0.5 * (v + v.T)
        self.components = components
        self.repaired = repaired
        self._chol = _cholesky_or_raise(self.v, "marginal variance V")
        self._v_inv_one = None

    @classmethod
    def from_matrix(cls, v, components=None):
        return cls(v, components)

    @property
    def n(self) -> int:
        return self.v.shape[0]

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        return sla.cho_solve(self._chol, rhs, check_finite=False)

    def logdet(self) -> float:
        return float(2.0 * np.sum(np.log(np.diag(self._chol[0]))))

    def matvec(self, w: np.ndarray) -> np.ndarray:
        return self.v @ w

    @property
    def v_inv_one(self) -> np.ndarray:
        """Cached ``V^{-1} 1``."""
        if self._v_inv_one is None:
            self._v_inv_one = self.solve(np.ones(self.n))
        return self._v_inv_one

    @property
    def one_v_inv_one(self) -> float:
        return float(self.v_inv_one.sum())

    def projector_apply(self, rhs: np.ndarray) -> np.ndarray:
        """``V^{-1} L rhs``, the intercept-profiled precision applied to ``rhs``.

        Symmetric; equals ``V^{-1} rhs - u (u^T rhs) / (1^T u)`` with ``u = V^{-1} 1``.
        """
        u = self.v_inv_one
        coef = (u @ rhs) / self.one_v_inv_one
        return self.solve(rhs) - np.multiply.outer(u, coef)


def _cholesky_or_raise(mat, what):
    try:
        return sla.cho_factor(mat, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError):
        lam = float(np.linalg.eigvalsh(mat).min()) if np.all(np.isfinite(mat)) else float("nan")
        sign = "negative" if lam < 0 else ("zero" if lam == 0 else "tiny positive")
        raise FactorizationError(
            f"{what} is not positive definite: smallest eigenvalue {lam:.3e} ({sign})",
            min_eigenvalue=lam,
        ) from None


def build_marginal_variance(vc: VarianceComponents, z_blocks, repair: bool = False,
                            sigma2_floor: Optional[float] = None) -> MarginalVariance:
    """Form and factor ``V = Z Lambda Z^T + sigma^2 I``.

    Parameters
    ----------
    vc : VarianceComponents
    z_blocks : sequence of (n_i, d) arrays
    repair : bool
        If the assembled V is not positive definite, floor its eigenvalues at
        ``1e-8 * ||V||_2`` instead of raising.  Used when V comes from
        approximate variance components, which may be indefinite.
    sigma2_floor : float, optional
        Lower bound applied to ``sigma2`` before assembly.
    """
    sigma2 = vc.sigma2 if sigma2_floor is None else max(vc.sigma2, sigma2_floor)
    v = vc.z_lambda_zt(z_blocks)
    v[np.diag_indices_from(v)] += sigma2
    if not repair:
        return MarginalVariance(v, vc)
    try:
        return MarginalVariance(v, vc)
    except FactorizationError:
        lam, vecs = np.linalg.eigh(0.5 * (v + v.T))
        floor = 1e-8 * np.max(np.abs(lam))
        lam = np.maximum(lam, floor)
        return MarginalVariance((vecs * lam) @ vecs.T, vc, repaired=True)


def centering_projector_apply(mv: MarginalVariance, rhs: np.ndarray) -> np.ndarray:
    """Apply ``L = I - 1 1^T V^{-1} / (1^T V^{-1} 1)`` to a vector or matrix."""
    rhs = np.asarray(rhs, dtype=np.float64)
    u = mv.v_inv_one
    coef = (u @ rhs) / mv.one_v_inv_one
    return rhs - np.multiply.outer(np.ones(mv.n), coef)
