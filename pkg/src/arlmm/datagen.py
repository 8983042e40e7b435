"""Seeded synthetic multi-group LMM data.

Draws ``X ~ N(0, 1)``, ``Z^(k) ~ U(0, 1)``, ``H = K^T K`` with
``K ~ N(0, 1)``, ``gamma^(k) ~ N(0, H)``, ``beta ~ N(0, I)``,
``sigma2 ~ U(0, d)``, ``c ~ N(0, 1)`` and group fractions from a flat
Dirichlet.  Every quantity has its own child random stream, so changing
``p`` only changes ``X`` and ``beta``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import ClassVar, Optional

import numpy as np

from .errors import UsageError
from .model import MixedModelData

_STREAMS = ("groups", "z", "h", "gamma", "sigma2", "c", "noise", "x", "beta", "support")


@dataclass(frozen=True)
class SimConfig:
    n: int
    p: int
    d: int
    m: int
    s_nonzero: int = 0
    seed: int = 0

    PRESETS: ClassVar[dict] = {
        "LOW": (100, 1000, 5, 3, 10),
        "MOD": (200, 10_000, 5, 3, 10),
        "HIGH": (10_000, 1_000_000, 10, 100, 100),
    }

    def __post_init__(self):
        for name in ("n", "p", "d", "m"):
            if int(getattr(self, name)) < 1:
                raise UsageError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n < self.m * (self.d + 1):
            raise UsageError(
                f"infeasible configuration: n={self.n} < m*(d+1)={self.m * (self.d + 1)}"
            )
        if not 0 <= self.s_nonzero <= self.p:
            raise UsageError(f"s_nonzero must lie in [0, p], got {self.s_nonzero}")

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "SimConfig":
        try:
            n, p, d, m, s = cls.PRESETS[name.upper()]
        except KeyError:
            raise UsageError(f"unknown preset {name!r}; choose from {sorted(cls.PRESETS)}") from None
        return cls(n=n, p=p, d=d, m=m, s_nonzero=s, seed=seed)

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, seed=seed)


@dataclass(frozen=True)
class SimTruth:
    beta_true: np.ndarray
    c_true: float
    h_true: np.ndarray
    sigma2_true: float
    gamma_blocks: np.ndarray
    group_sizes: tuple
    noise: np.ndarray

    @property
    def support(self) -> np.ndarray:
        return np.flatnonzero(self.beta_true)

    def to_dict(self) -> dict:
        return {"c_true": self.c_true, "sigma2_true": self.sigma2_true,
                "h_true": self.h_true.tolist(), "gamma_blocks": self.gamma_blocks.tolist(),
                "group_sizes": list(self.group_sizes), "support": self.support.tolist()}


def _streams(seed):
    children = np.random.SeedSequence(int(seed)).spawn(len(_STREAMS))
    return {name: np.random.Generator(np.random.Philox(ss)) for name, ss in zip(_STREAMS, children)}


def group_sizes(n: int, m: int, d: int, fractions) -> tuple:
    """Each group gets ``d + 1`` rows, the rest is split by largest-remainder rounding."""
    spare = n - m * (d + 1)
    if spare < 0:
        raise UsageError(f"infeasible configuration: n={n} < m*(d+1)={m * (d + 1)}")
    quota = np.asarray(fractions, dtype=np.float64) * spare
    extra = np.floor(quota).astype(np.int64)
    left = spare - int(extra.sum())
    # stable sort keeps the lowest index first among equal remainders
    order = np.argsort(-(quota - extra), kind="stable")
    extra[order[:left]] += 1
    return tuple(int(v) for v in extra + d + 1)


def simulate(cfg: SimConfig):
    """Draw one dataset; returns ``(MixedModelData, SimTruth)``."""
    rng = _streams(cfg.seed)
    n, p, d, m = cfg.n, cfg.p, cfg.d, cfg.m
    fractions = rng["groups"].dirichlet(np.ones(m)) if m > 1 else np.ones(1)
    sizes = group_sizes(n, m, d, fractions)
    z_blocks = tuple(rng["z"].uniform(0.0, 1.0, size=(nk, d)) for nk in sizes)
    k = rng["h"].standard_normal((d, d))
    h = k.T @ k
    gamma = rng["gamma"].standard_normal((m, d)) @ k
    sigma2 = float(rng["sigma2"].uniform(0.0, d))
    c = float(rng["c"].standard_normal())
    noise = rng["noise"].standard_normal(n) * np.sqrt(sigma2)
    x = rng["x"].standard_normal((n, p))
    beta = rng["beta"].standard_normal(p)
    if cfg.s_nonzero:
        keep = rng["support"].choice(p, size=cfg.s_nonzero, replace=False)
        mask = np.zeros(p, dtype=bool)
        mask[keep] = True
        beta = np.where(mask, beta, 0.0)
    zg = np.concatenate([b @ g for b, g in zip(z_blocks, gamma)])
    y = x @ beta + zg + c + noise
    data = MixedModelData(x, z_blocks, y, sizes)
    truth = SimTruth(beta, c, h, sigma2, gamma, sizes, noise)
    return data, truth


def simulate_with(cfg: SimConfig, sigma2: Optional[float] = None, h: Optional[np.ndarray] = None,
                  c: Optional[float] = None):
    """Like :func:`simulate` but with chosen variance components and intercept.

    The same random streams are used, so designs and ``beta`` match the
    default draw exactly.
    """
    data, truth = simulate(cfg)
    sig = truth.sigma2_true if sigma2 is None else float(sigma2)
    h_new = truth.h_true if h is None else np.asarray(h, dtype=np.float64)
    c_new = truth.c_true if c is None else float(c)
    rng = _streams(cfg.seed)
    gamma_std = rng["gamma"].standard_normal((cfg.m, cfg.d))
    lam, vec = np.linalg.eigh(h_new)
    root = vec * np.sqrt(np.clip(lam, 0.0, None))
    gamma = gamma_std @ root.T
    noise = rng["noise"].standard_normal(cfg.n) * np.sqrt(sig)
    zg = np.concatenate([b @ g for b, g in zip(data.z_blocks, gamma)])
    y = data.x @ truth.beta_true + zg + c_new + noise
    data = MixedModelData(data.x, data.z_blocks, y, data.group_sizes)
    return data, replace(truth, c_true=c_new, h_true=h_new, sigma2_true=sig, gamma_blocks=gamma,
                         noise=noise)
