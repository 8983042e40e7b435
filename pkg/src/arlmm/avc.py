"""Approximate variance components (AVCs).

AVCs are the closed-form least-squares fit of ``Z Lambda Z^T + sigma^2 I``
to the moment matrix ``S = (y - c 1)(y - c 1)^T - K`` in Frobenius norm,
where ``K`` is the exact kernel ``X Phi X^T`` or its sketch ``A A^T``.
They may be indefinite; callers that need a solvable ``V`` floor them (see
:func:`admissible_marginal_variance`).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .errors import DataError, DegenerateParameterizationError, UsageError
from .model import (MarginalVariance, MixedModelData, VarianceComponents,
                    build_marginal_variance, symmetrize, z_matmul)

SIGMA2_FLOOR_REL = 1e-8


@dataclass(frozen=True)
class SMatrix:
    s_mat: np.ndarray
    kernel_tag: str
    c_hat: float

    @property
    def n(self) -> int:
        return self.s_mat.shape[0]

    def spectral_norm(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvalsh(self.s_mat))))


def build_s_matrix(y, c_hat: Optional[float], kernel, kernel_tag: str = "exact") -> SMatrix:
    """``S = (y - c 1)(y - c 1)^T - kernel``; ``c_hat=None`` uses the mean response."""
    y = np.asarray(y, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.shape != (y.size, y.size):
        raise UsageError(f"kernel shape {kernel.shape} does not match n={y.size}")
    c = float(y.mean()) if c_hat is None else float(c_hat)
    r = y - c
    s = np.outer(r, r) - kernel
    return SMatrix(0.5 * (s + s.T), kernel_tag, c)


def _block_qr(z_blocks):
    qs, rs = [], []
    for i, b in enumerate(z_blocks):
        q, r = np.linalg.qr(b)
        diag = np.abs(np.diag(r))
        if diag.size and diag.min() <= max(b.shape) * np.finfo(float).eps * diag.max():
            raise DataError(f"z block {i} is rank deficient")
        qs.append(q)
        rs.append(r)
    return qs, rs


def _flags(sigma2, blocks):
    flags = {}
    if sigma2 < 0:
        flags["negative_sigma2"] = True
    if any(np.linalg.eigvalsh(h).min() < 0 for h in blocks):
        flags["indefinite_lambda"] = True
    return flags


def avc_unstructured(s: SMatrix, z_blocks):
    """The unconstrained Frobenius minimizer over any symmetric q x q Lambda.

    Returns ``(sigma2, Lambda)`` with
    ``sigma2 = tr[S (I - Z Z^+)] / (n - q)`` and
    ``Lambda = Z^+ S Z^{+T} - sigma2 (Z^T Z)^{-1}``.  Lambda is dense q x q,
    so this is meant for moderate q (verification, single-group fits).
    """
    n = s.n
    q = sum(b.shape[1] for b in z_blocks)
    if q >= n:
        raise DataError(f"need q < n for approximate variance components, got q={q}, n={n}")
    qs, rs = _block_qr(z_blocks)
    qz = sla.block_diag(*qs)
    rz = sla.block_diag(*rs)
    qsq = qz.T @ s.s_mat @ qz
    sigma2 = (np.trace(s.s_mat) - np.trace(qsq)) / (n - q)
    inner = qsq - sigma2 * np.eye(q)
    # Z^+ = R^{-1} Q^T, (Z^T Z)^{-1} = R^{-1} R^{-T}
    t = sla.solve_triangular(rz, inner, lower=False)
    lam = sla.solve_triangular(rz, t.T, lower=False)
    return float(sigma2), symmetrize(0.5 * (lam + lam.T), "Lambda")


def avc_general(s: SMatrix, z_blocks) -> VarianceComponents:
    """Closed-form AVCs for ``Lambda = blockdiag(H, ..., H)``.

    For one group this is exactly the unconstrained minimizer
    (:func:`avc_unstructured`).  For several groups sharing H it solves the
    ``d*d + 1`` normal equations of the Frobenius objective restricted to
    block-constant Lambda, which only involve the per-group statistics
    ``C_i = Z_i^T Z_i``, ``T_i = Z_i^T S_ii Z_i`` and ``tr S_ii``.
    """
    n = s.n
    m = len(z_blocks)
    d = z_blocks[0].shape[1]
    if m * d >= n:
        raise DataError(f"need q < n for approximate variance components, got q={m * d}, n={n}")
    if m == 1:
        sigma2, h = avc_unstructured(s, z_blocks)
        return VarianceComponents(sigma2, h=h, flags=_flags(sigma2, [h]))
    _block_qr(z_blocks)
    c_sum = np.zeros((d, d))
    t_sum = np.zeros((d, d))
    kron_sum = np.zeros((d * d, d * d))
    tr_diag = 0.0
    start = 0
    for b in z_blocks:
        stop = start + b.shape[0]
        s_ii = s.s_mat[start:stop, start:stop]
        c_i = b.T @ b
        c_sum += c_i
        t_sum += b.T @ s_ii @ b
        kron_sum += np.kron(c_i, c_i)
        tr_diag += np.trace(s_ii)
        start = stop
    # unknowns: vec(H) (row-major) and sigma2
    lhs = np.zeros((d * d + 1, d * d + 1))
    lhs[:d * d, :d * d] = kron_sum
    lhs[:d * d, d * d] = c_sum.ravel()
    lhs[d * d, :d * d] = c_sum.ravel()
    lhs[d * d, d * d] = n
    rhs = np.concatenate([t_sum.ravel(), [tr_diag]])
    sol = np.linalg.solve(lhs, rhs)
    h = sol[:d * d].reshape(d, d)
    h = 0.5 * (h + h.T)
    sigma2 = float(sol[d * d])
    return VarianceComponents(sigma2, h=h, flags=_flags(sigma2, [h]))


def avc_parameterized(s: SMatrix, z_blocks, d_matrix) -> VarianceComponents:
    """AVCs for ``Lambda = theta * D`` with a fixed PSD q x q matrix ``D``.

    With ``G = Z D Z^T`` the two stationarity conditions give

        sigma2 = (tr S - tr(G) tr(G S) / tr(G^2)) / (n - tr(G)^2 / tr(G^2))
        theta  = (tr(G S) - sigma2 tr G) / tr(G^2)
    """
    n = s.n
    d_matrix = symmetrize(d_matrix, "d_matrix")
    g = z_matmul(z_blocks, z_matmul(z_blocks, d_matrix).T).T
    g = 0.5 * (g + g.T)
    tr_g = np.trace(g)
    tr_g2 = float(np.sum(g * g))
    if tr_g2 <= 0:
        raise DegenerateParameterizationError("Z D Z^T is zero; theta is not identifiable")
    tr_gs = float(np.sum(g * s.s_mat))
    alpha = tr_g ** 2 / tr_g2
    if n - alpha <= 1e-10 * n:
        raise DegenerateParameterizationError(
            "Z D Z^T is proportional to the identity; theta and sigma2 are not separately identifiable"
        )
    sigma2 = (np.trace(s.s_mat) - tr_g * tr_gs / tr_g2) / (n - alpha)
    theta = (tr_gs - sigma2 * tr_g) / tr_g2
    flags = {}
    if sigma2 < 0:
        flags["negative_sigma2"] = True
    if theta < 0:
        flags["indefinite_lambda"] = True
    return VarianceComponents(float(sigma2), theta=float(theta), d_matrix=d_matrix, flags=flags)


def project_psd(vc: VarianceComponents) -> VarianceComponents:
    """Nearest (Frobenius) PSD random-effects covariance; sigma2 untouched."""
    if vc.kind == "blocked":
        lam, vec = np.linalg.eigh(vc.h)
        if lam.min() >= 0:
            return vc
        h = (vec * np.clip(lam, 0.0, None)) @ vec.T
        return VarianceComponents(vc.sigma2, h=h, flags=dict(vc.flags))
    if vc.theta >= 0:
        return vc
    return VarianceComponents(vc.sigma2, theta=0.0, d_matrix=vc.d_matrix, flags=dict(vc.flags))


def admissible_marginal_variance(vc: VarianceComponents, s: SMatrix, z_blocks,
                                 mode: str = "project") -> MarginalVariance:
    """Factorizable ``V`` from possibly indefinite AVCs.

    ``sigma2`` is floored at ``1e-8 ||S||_2``.  With ``mode="project"`` the
    random-effects covariance is first projected onto the PSD cone, which
    makes V positive definite.  With ``mode="floor"`` (and as a fallback in
    both modes) the eigenvalues of the assembled V are floored at
    ``1e-8 ||V||_2``.  A single-group AVC ``H`` is typically rank one plus a
    negative part, and the floored V then puts almost no variance on those
    directions, so projection is the default for estimation.
    """
    if mode not in ("project", "floor"):
        raise UsageError(f"unknown repair mode {mode!r}")
    floor = None
    if vc.sigma2 <= 0:
        floor = SIGMA2_FLOOR_REL * s.spectral_norm()
    target = project_psd(vc) if mode == "project" else vc
    return build_marginal_variance(target, z_blocks, repair=True, sigma2_floor=floor)


def avc_for_data(data: MixedModelData, kernel, kernel_tag="exact", c_hat=None,
                 d_matrix=None):
    """S matrix plus AVCs for a dataset; parameterized when ``d_matrix`` is given."""
    s = build_s_matrix(data.y, c_hat, kernel, kernel_tag)
    if d_matrix is None:
        vc = avc_general(s, data.z_blocks)
    else:
        vc = avc_parameterized(s, data.z_blocks, d_matrix)
    return s, vc
