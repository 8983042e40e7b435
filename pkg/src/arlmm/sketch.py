"""Subsampled randomized Hadamard transform (SRHT) and the approximate kernel.

``Pi = R W D / sqrt(s)`` where ``D`` is a Rademacher diagonal, ``W`` the
(unnormalized, Sylvester-ordered) Walsh-Hadamard matrix of the padded
dimension ``p'`` and ``R`` selects ``s`` distinct rows.  ``W`` is never
formed; all products go through the in-place butterfly.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import UsageError
from .model import PriorPhi

try:
    from numba import njit
except ImportError:  # pragma: no cover - exercised only without numba
    njit = None

# rows of X per FWHT block; keeps the work buffer near 32 MiB
BLOCK_ELEMENTS = 1 << 22


class SketchClampWarning(UserWarning):
    """The sample-size formula asked for more rows than the padded dimension."""


def padded_dim(p: int) -> int:
    """Smallest power of two ``>= p``."""
    if p < 1:
        raise UsageError(f"dimension must be >= 1, got {p}")
    return 1 << (int(p) - 1).bit_length()


def _is_pow2(k):
    return k >= 1 and (k & (k - 1)) == 0


def _fwht_rows_numpy(buf):
    rows, p = buf.shape
    h = 1
    while h < p:
        view = buf.reshape(rows, p // (2 * h), 2, h)
        top = view[:, :, 0, :].copy()
        view[:, :, 0, :] += view[:, :, 1, :]
        np.subtract(top, view[:, :, 1, :], out=view[:, :, 1, :])
        h *= 2
    return buf


if njit is not None:

    @njit(cache=True, nogil=True)
    def _fwht_rows_jit(buf):  # pragma: no cover - compiled
        rows, p = buf.shape
        for r in range(rows):
            h = 1
            while h < p:
                for i in range(0, p, 2 * h):
                    for j in range(i, i + h):
                        a = buf[r, j]
                        b = buf[r, j + h]
                        buf[r, j] = a + b
                        buf[r, j + h] = a - b
                h *= 2
        return buf

    _fwht_rows = _fwht_rows_jit
else:  # pragma: no cover
    _fwht_rows = _fwht_rows_numpy


def fwht_in_place(v: np.ndarray) -> np.ndarray:
    """Replace ``v`` by ``W_{p'} v`` along its last axis.

    Uses the radix-2 butterfly of the recursion
    ``W_{2k} = [[W_k, W_k], [W_k, -W_k]]``, ``W_1 = 1``, in
    ``O(p' log p')`` operations per vector.  ``v`` must be a C-contiguous
    float64 array whose last axis has power-of-two length; it is modified
    and returned.
    """
    if not isinstance(v, np.ndarray) or v.dtype != np.float64 or not v.flags.c_contiguous:
        raise UsageError("fwht_in_place needs a C-contiguous float64 ndarray")
    p = v.shape[-1]
    if not _is_pow2(p):
        raise UsageError(f"FWHT length must be a power of two, got {p}")
    _fwht_rows(v.reshape(-1, p))
    return v


def fwht(v) -> np.ndarray:
    """Out-of-place convenience wrapper around :func:`fwht_in_place`."""
    return fwht_in_place(np.array(v, dtype=np.float64, order="C", copy=True))


def raw_sample_size(r: int, p_padded: int, epsilon: float) -> float:
    """Unrounded ``6 (sqrt(r) + sqrt(8 ln(r p')))^2 ln(r) / eps^2`` (natural logs)."""
    if not (0.0 < epsilon < 1.0):
        raise UsageError(f"epsilon must lie in (0, 1), got {epsilon}")
    if r < 1 or p_padded < 1:
        raise UsageError(f"rank bound and padded dimension must be >= 1, got r={r}, p'={p_padded}")
    root = math.sqrt(r) + math.sqrt(8.0 * math.log(r * p_padded))
    return 6.0 * root * root * math.log(r) / (epsilon * epsilon)


def sample_size(r: int, p_padded: int, epsilon: float) -> int:
    """Number of sampled Walsh rows, ``ceil`` of the formula clamped to ``[1, p']``.

    A :class:`SketchClampWarning` is emitted when the formula exceeds ``p'``.
    """
    raw = raw_sample_size(r, p_padded, epsilon)
    s = math.ceil(raw)
    if s > p_padded:
        warnings.warn(
            f"sample size {s} exceeds padded dimension {p_padded}; using s = p'",
            SketchClampWarning,
            stacklevel=2,
        )
        return int(p_padded)
    return max(1, int(s))


@dataclass(frozen=True)
class Sketch:
    """An SRHT ``Pi`` of shape ``(s, p')`` acting on zero-padded p-vectors."""

    p: int
    p_padded: int
    signs: np.ndarray
    rows: np.ndarray
    s: int
    scale: float
    seed: int
    epsilon: Optional[float] = None
    rank: Optional[int] = None
    clamped: bool = False

    def apply(self, v: np.ndarray) -> np.ndarray:
        """``Pi v`` for a length-p vector (or rows of a (k, p) array)."""
        v = np.atleast_2d(np.asarray(v, dtype=np.float64))
        buf = np.zeros((v.shape[0], self.p_padded))
        buf[:, :self.p] = v
        buf *= self.signs
        fwht_in_place(buf)
        out = buf[:, self.rows] * self.scale
        return out[0] if out.shape[0] == 1 else out

    def adjoint(self, w: np.ndarray) -> np.ndarray:
        """``Pi^T w`` truncated to the first p coordinates."""
        w = np.asarray(w, dtype=np.float64)
        buf = np.zeros(self.p_padded)
        buf[self.rows] = w * self.scale
        fwht_in_place(buf)
        buf *= self.signs
        return buf[:self.p]

    def info(self) -> dict:
        return {"p": self.p, "p_padded": self.p_padded, "s": self.s, "seed": self.seed,
                "epsilon": self.epsilon, "rank": self.rank, "clamped": self.clamped}


def build_sketch(p: int, r: Optional[int] = None, epsilon: float = 0.5, seed: int = 0,
                 s: Optional[int] = None) -> Sketch:
    """Draw an SRHT for covariate dimension ``p``.

    Parameters
    ----------
    p : int
        Number of covariates; the transform works on ``p' = 2**ceil(log2 p)``.
    r : int, optional
        Rank bound of X fed to the sample-size rule.  Callers pass ``n`` when
        the rank is unknown.  Required unless ``s`` is given.
    epsilon : float
        Target approximation error in ``(0, 1)``.
    seed : int
        Seeds two independent Philox streams (signs, rows).
    s : int, optional
        Explicit number of sampled rows, bypassing the formula.
    """
    p_padded = padded_dim(p)
    clamped = False
    if s is None:
        if r is None:
            raise UsageError("build_sketch needs a rank bound r or an explicit s")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", SketchClampWarning)
            s = sample_size(r, p_padded, epsilon)
        clamped = any(issubclass(w.category, SketchClampWarning) for w in caught)
        if clamped:
            warnings.warn(f"SRHT degenerates to a full transform (s = p' = {p_padded})",
                          SketchClampWarning, stacklevel=2)
    else:
        s = int(s)
        if not 1 <= s <= p_padded:
            raise UsageError(f"explicit sample size must lie in [1, {p_padded}], got {s}")
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    sign_ss, row_ss = np.random.SeedSequence(seed).spawn(2)
    sign_rng = np.random.Generator(np.random.Philox(sign_ss))
    row_rng = np.random.Generator(np.random.Philox(row_ss))
    signs = sign_rng.integers(0, 2, size=p_padded).astype(np.float64) * 2.0 - 1.0
    rows = row_rng.choice(p_padded, size=s, replace=False)
    signs.setflags(write=False)
    rows.setflags(write=False)
    return Sketch(p=int(p), p_padded=p_padded, signs=signs, rows=rows, s=s,
                  scale=1.0 / math.sqrt(s), seed=seed, epsilon=epsilon, rank=r,
                  clamped=clamped)


def gram(a: np.ndarray) -> np.ndarray:
    """Exactly symmetric ``a @ a.T``."""
    k = a @ a.T
    return 0.5 * (k + k.T)


@dataclass(frozen=True)
class KernelApprox:
    """``A = X sqrt(Phi) Pi^T`` (n x s) and the kernel ``A A^T``.

    With ``sketch=None`` the object holds an exact factor ``A = X sqrt(Phi)``.
    """

    a: np.ndarray
    k_hat: np.ndarray
    sketch: Optional[Sketch] = None

    @classmethod
    def exact(cls, x, phi: PriorPhi) -> "KernelApprox":
        a = np.asarray(x, dtype=np.float64) * phi.sqrt
        return cls(a, gram(a), None)


def _transform_block(x_block, sqrt_phi, sk):
    buf = np.zeros((x_block.shape[0], sk.p_padded))
    np.multiply(x_block, sqrt_phi, out=buf[:, :sk.p])
    buf *= sk.signs
    fwht_in_place(buf)
    out = buf[:, sk.rows]
    out *= sk.scale
    return out


def transform_covariates(x, phi: PriorPhi, sk: Sketch, threads: int = 1,
                         block_rows: Optional[int] = None) -> KernelApprox:
    """Compute ``A = X sqrt(Phi) Pi^T`` and ``A A^T``.

    Rows of X are processed in blocks through a reusable padded buffer, so
    peak extra memory is one block of width ``p'`` plus the output.  Each
    row goes through the same sequence of floating-point operations
    regardless of blocking or ``threads``, so the output is identical for
    every setting.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != sk.p or phi.p != sk.p:
        raise UsageError(
            f"x has shape {x.shape}, prior has {phi.p} entries, sketch expects p={sk.p}"
        )
    n = x.shape[0]
    if block_rows is None:
        block_rows = max(1, BLOCK_ELEMENTS // sk.p_padded)
    sqrt_phi = phi.sqrt
    a = np.empty((n, sk.s))
    starts = range(0, n, block_rows)

    def work(start):
        stop = min(n, start + block_rows)
        a[start:stop] = _transform_block(x[start:stop], sqrt_phi, sk)

    if threads > 1 and n > block_rows:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, starts))
    else:
        for start in starts:
            work(start)
    return KernelApprox(a, gram(a), sk)
