"""Dense, deliberately naive reference computations.

Nothing here calls the fast paths: inverses are explicit, the Walsh matrix
is built by Kronecker products and least-squares problems are written out
in vectorized form.  Guards keep the instances small.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import DegenerateParameterizationError, FactorizationError, UsageError
from .model import MarginalVariance, VarianceComponents

PRIMAL_MAX_P = 2000
FROBENIUS_MAX_N = 50
DENSE_SRHT_MAX_P = 4096


def _dense(v):
    if isinstance(v, MarginalVariance):
        return np.asarray(v.v, dtype=np.float64)
    return np.asarray(v, dtype=np.float64)


def primal_beta_exact(x, phi, v, y, c_hat: Optional[float] = None):
    """Primal ridge-LMM normal equations with a dense p x p inverse.

    With ``c_hat=None`` the intercept is profiled out through
    ``L = I - 1 1^T V^{-1} / (1^T V^{-1} 1)``; a number fixes the intercept
    and regresses ``y - c_hat`` without centering.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, p = x.shape
    if p > PRIMAL_MAX_P:
        raise UsageError(f"primal oracle limited to p <= {PRIMAL_MAX_P}, got {p}")
    phi_diag = np.asarray(getattr(phi, "diag", phi), dtype=np.float64)
    v_inv = np.linalg.inv(_dense(v))
    if c_hat is None:
        one = np.ones(n)
        u = v_inv @ one
        ell = np.eye(n) - np.outer(one, u) / (one @ u)
        w = v_inv @ ell
        rhs_y = y
    else:
        w = v_inv
        rhs_y = y - c_hat
    lhs = x.T @ w @ x + np.diag(1.0 / phi_diag)
    return np.linalg.inv(lhs) @ (x.T @ w @ rhs_y)


def intercept_exact(v, x, beta, y) -> float:
    v_inv = np.linalg.inv(_dense(v))
    one = np.ones(len(y))
    return float((one @ v_inv @ y - one @ v_inv @ (np.asarray(x) @ beta)) / (one @ v_inv @ one))


def naive_kernel(x, phi):
    """``X Phi X^T`` accumulated as a sum of per-column outer products."""
    x = np.asarray(x, dtype=np.float64)
    phi_diag = np.broadcast_to(np.asarray(getattr(phi, "diag", phi), dtype=np.float64), (x.shape[1],))
    k = np.zeros((x.shape[0], x.shape[0]))
    for j in range(x.shape[1]):
        k += phi_diag[j] * np.outer(x[:, j], x[:, j])
    return k


def reml_criterion(m_matrix, y, c_hat) -> float:
    """``-1/2 log det M - 1/2 (y - c 1)^T M^{-1} (y - c 1)`` by dense algebra."""
    m_matrix = np.asarray(m_matrix, dtype=np.float64)
    lam_min = float(np.linalg.eigvalsh(0.5 * (m_matrix + m_matrix.T)).min())
    if lam_min <= 0:
        raise FactorizationError(f"M is not positive definite (smallest eigenvalue {lam_min:.3e})",
                                 lam_min)
    r = np.asarray(y, dtype=np.float64) - c_hat
    _, logdet = np.linalg.slogdet(m_matrix)
    return float(-0.5 * logdet - 0.5 * r @ np.linalg.inv(m_matrix) @ r)


def standard_nll_exact(v, r) -> float:
    """Gaussian negative log density of residual ``r`` under covariance ``V``."""
    v = _dense(v)
    _, logdet = np.linalg.slogdet(2.0 * np.pi * v)
    return float(0.5 * logdet + 0.5 * r @ np.linalg.inv(v) @ r)


def _sym_basis(k):
    out = []
    for a in range(k):
        for b in range(a, k):
            e = np.zeros((k, k))
            e[a, b] = e[b, a] = 1.0
            out.append(e)
    return out


def _basis_from_sym(coef, k):
    out = np.zeros((k, k))
    idx = 0
    for a in range(k):
        for b in range(a, k):
            out[a, b] = out[b, a] = coef[idx]
            idx += 1
    return out


def frobenius_fit_oracle(s_mat, z_blocks, parameterization="blocked", d_matrix=None):
    """Minimize ``||Z Lambda Z^T + sigma2 I - S||_F^2`` as an explicit linear least-squares problem.

    ``parameterization`` is ``"blocked"`` (Lambda = blockdiag(H, ..., H)),
    ``"unstructured"`` (any symmetric q x q Lambda) or ``"theta"``
    (Lambda = theta * d_matrix).  Returns ``(VarianceComponents, residual)``;
    for ``"unstructured"`` the first element is ``(sigma2, Lambda)``.
    """
    s_mat = np.asarray(getattr(s_mat, "s_mat", s_mat), dtype=np.float64)
    n = s_mat.shape[0]
    if n > FROBENIUS_MAX_N:
        raise UsageError(f"Frobenius oracle limited to n <= {FROBENIUS_MAX_N}, got {n}")
    z_blocks = [np.asarray(b, dtype=np.float64) for b in z_blocks]
    m = len(z_blocks)
    d = z_blocks[0].shape[1]
    z = np.zeros((n, m * d))
    row = 0
    for i, b in enumerate(z_blocks):
        z[row:row + b.shape[0], i * d:(i + 1) * d] = b
        row += b.shape[0]
    if parameterization == "blocked":
        lams = [np.kron(np.eye(m), e) for e in _sym_basis(d)]
    elif parameterization == "unstructured":
        lams = _sym_basis(m * d)
    elif parameterization == "theta":
        if d_matrix is None:
            raise UsageError("theta parameterization needs d_matrix")
        lams = [np.asarray(d_matrix, dtype=np.float64)]
    else:
        raise UsageError(f"unknown parameterization {parameterization!r}")
    cols = [(z @ lam @ z.T).ravel() for lam in lams]
    cols.append(np.eye(n).ravel())
    design = np.column_stack(cols)
    normal = design.T @ design
    if np.linalg.cond(normal) > 1e12:
        raise DegenerateParameterizationError("normal equations of the Frobenius fit are singular")
    coef = np.linalg.inv(normal) @ (design.T @ s_mat.ravel())
    residual = float(np.linalg.norm(design @ coef - s_mat.ravel()))
    sigma2 = float(coef[-1])
    if parameterization == "blocked":
        vc = VarianceComponents(sigma2, h=_basis_from_sym(coef[:-1], d))
    elif parameterization == "theta":
        vc = VarianceComponents(sigma2, theta=float(coef[0]), d_matrix=lams[0])
    else:
        vc = (sigma2, _basis_from_sym(coef[:-1], m * d))
    return vc, residual


def frobenius_objective(s_mat, z_dense, lam, sigma2) -> float:
    s_mat = np.asarray(getattr(s_mat, "s_mat", s_mat), dtype=np.float64)
    n = s_mat.shape[0]
    return float(np.linalg.norm(z_dense @ lam @ z_dense.T + sigma2 * np.eye(n) - s_mat))


def walsh_matrix(p_padded: int):
    """Sylvester-ordered Walsh matrix by repeated Kronecker products."""
    w = np.ones((1, 1))
    base = np.array([[1.0, 1.0], [1.0, -1.0]])
    while w.shape[0] < p_padded:
        w = np.kron(base, w)
    if w.shape[0] != p_padded:
        raise UsageError(f"{p_padded} is not a power of two")
    return w


def dense_srht(sk):
    """The s x p' matrix ``R W D / sqrt(s)`` of a sketch."""
    if sk.p_padded > DENSE_SRHT_MAX_P:
        raise UsageError(f"dense SRHT limited to p' <= {DENSE_SRHT_MAX_P}, got {sk.p_padded}")
    w = walsh_matrix(sk.p_padded)
    return w[np.asarray(sk.rows)] * np.asarray(sk.signs) / np.sqrt(sk.s)


def conditional_moments(x, phi_diag, z_dense, lam, sigma2, y, c):
    """Posterior of ``(beta, gamma)`` given ``y`` by joint-Gaussian conditioning.

    Returns ``(beta_mean, gamma_mean, gamma_cov)``, all from explicit
    covariance blocks and an explicit inverse of ``Cov(y)``.
    """
    x = np.asarray(x, dtype=np.float64)
    phi_mat = np.diag(np.asarray(phi_diag, dtype=np.float64))
    n = x.shape[0]
    cov_y = x @ phi_mat @ x.T + z_dense @ lam @ z_dense.T + sigma2 * np.eye(n)
    cov_by = phi_mat @ x.T
    cov_gy = lam @ z_dense.T
    inv = np.linalg.inv(cov_y)
    r = np.asarray(y) - c
    return cov_by @ inv @ r, cov_gy @ inv @ r, lam - cov_gy @ inv @ cov_gy.T


def digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class OracleReport:
    name: str
    inputs_digest: str
    reference: list
    target: str
    abs_err: float
    rel_err: float
    tol: float
    passed: bool

    def to_dict(self):
        return asdict(self)


def compare(name, reference, candidate, tol, target="rel", inputs=()) -> OracleReport:
    """Compare ``candidate`` with ``reference`` and record both error measures."""
    ref = np.atleast_1d(np.asarray(reference, dtype=np.float64))
    cand = np.atleast_1d(np.asarray(candidate, dtype=np.float64))
    abs_err = float(np.max(np.abs(ref - cand))) if ref.size else 0.0
    scale = float(np.linalg.norm(ref))
    rel_err = float(np.linalg.norm(ref - cand) / scale) if scale > 0 else float(np.linalg.norm(cand))
    err = rel_err if target == "rel" else abs_err
    shown = ref.ravel()[:8].tolist()
    return OracleReport(name, digest(*inputs) if inputs else "", shown, target, abs_err, rel_err,
                        float(tol), bool(err <= tol))
