import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from arlmm.errors import DegenerateParameterizationError, FactorizationError, UsageError
from arlmm.estimators import dual_beta
from arlmm.model import MarginalVariance
from arlmm.oracle import (compare, dense_srht, frobenius_fit_oracle, naive_kernel,
                          primal_beta_exact, reml_criterion, standard_nll_exact, walsh_matrix)
from arlmm.sketch import Sketch, build_sketch

from conftest import iso, marginal, random_blocks, random_data, rel_err


def test_flat_prior_limit_is_centered_ols(rng):
    x = rng.standard_normal((30, 4))
    y = rng.standard_normal(30) + 2.0
    beta = primal_beta_exact(x, np.full(4, 1e8), np.eye(30), y)
    xc = x - x.mean(axis=0)
    ols = np.linalg.lstsq(xc, y - y.mean(), rcond=None)[0]
    assert rel_err(beta, ols) <= 1e-6


@settings(max_examples=50)
@given(st.integers(2, 30), st.integers(1, 100), st.integers(0, 2 ** 31))
def test_primal_matches_dual(n, p, seed):
    rng = np.random.default_rng(seed)
    data = random_data(rng, n, p, m=1, d=1)
    phi = iso(rng.uniform(0.1, 5.0), p)
    mv = marginal(rng, data)
    assert rel_err(dual_beta(data.x, phi, mv, data.y).beta,
                   primal_beta_exact(data.x, phi, mv, data.y)) <= 1e-8


def test_scalar_covariate_closed_form(rng):
    n = 7
    x = rng.standard_normal((n, 1))
    y = rng.standard_normal(n)
    v = np.diag(rng.uniform(0.5, 2.0, n))
    w = 1.0 / np.diag(v)
    # GLS-centred scalar ridge: (x^T P x + 1/phi)^-1 x^T P y with P = W - w w^T / sum(w)
    xp = x[:, 0] * w - w * (w @ x[:, 0]) / w.sum()
    ref = (xp @ y) / (xp @ x[:, 0] + 1 / 0.5)
    assert primal_beta_exact(x, np.array([0.5]), v, y)[0] == pytest.approx(ref, rel=1e-12)


def test_primal_guard():
    with pytest.raises(UsageError):
        primal_beta_exact(np.zeros((2, 2001)), np.ones(2001), np.eye(2), np.zeros(2))


def test_naive_kernel_examples(rng):
    np.testing.assert_array_equal(naive_kernel(np.eye(4), np.ones(4)), np.eye(4))
    assert np.abs(naive_kernel(rng.standard_normal((3, 5)), np.full(5, 1e-300))).max() <= 1e-290
    x = rng.standard_normal((8, 32))
    phi = rng.uniform(0.5, 2.0, 32)
    assert rel_err(naive_kernel(x, phi), (x * phi) @ x.T) <= 1e-13


def test_reml_examples(rng):
    assert reml_criterion(np.eye(3), np.full(3, 2.0), 2.0) == 0.0
    val = reml_criterion(2 * np.eye(2), np.array([1.0, 0.0]), 0.0)
    assert val == pytest.approx(-0.5 * 2 * math.log(2) - 0.25, rel=1e-14)
    a = rng.standard_normal((10, 10))
    m = a @ a.T + np.eye(10)
    y = rng.standard_normal(10)
    ev, vec = np.linalg.eigh(m)
    ref = -0.5 * np.log(ev).sum() - 0.5 * np.sum((vec.T @ (y - 0.4)) ** 2 / ev)
    assert reml_criterion(m, y, 0.4) == pytest.approx(ref, rel=1e-10)
    with pytest.raises(FactorizationError):
        reml_criterion(-np.eye(2), np.zeros(2), 0.0)


def test_standard_nll_scalar():
    assert standard_nll_exact(np.array([[2.0]]), np.array([1.0])) == pytest.approx(
        0.5 * math.log(2 * math.pi * 2.0) + 0.25)


def test_frobenius_examples(rng):
    blocks = random_blocks(rng, [6, 6], 2)
    vc, res = frobenius_fit_oracle(np.eye(12), blocks)
    assert vc.sigma2 == pytest.approx(1.0, abs=1e-10) and np.abs(vc.h).max() <= 1e-10
    assert res <= 1e-9
    h0 = np.array([[1.0, 0.3], [0.3, 0.5]])
    s = np.kron(np.eye(2), h0)
    from scipy.linalg import block_diag
    z = block_diag(*blocks)
    vc, res = frobenius_fit_oracle(z @ s @ z.T + 0.8 * np.eye(12), blocks)
    assert np.abs(vc.h - h0).max() <= 1e-8 and abs(vc.sigma2 - 0.8) <= 1e-8


def test_frobenius_degenerate():
    with pytest.raises(DegenerateParameterizationError):
        frobenius_fit_oracle(np.eye(4), (np.eye(4),), "theta", d_matrix=np.eye(4))
    with pytest.raises(UsageError):
        frobenius_fit_oracle(np.eye(51), (np.ones((51, 1)),))


def test_walsh_recursion():
    np.testing.assert_array_equal(walsh_matrix(2), [[1, 1], [1, -1]])
    w = walsh_matrix(16)
    np.testing.assert_array_equal(w @ w, 16 * np.eye(16))
    with pytest.raises(UsageError):
        walsh_matrix(12)


def test_dense_srht_examples(rng):
    sk = Sketch(p=2, p_padded=2, signs=np.ones(2), rows=np.array([0, 1]), s=2,
                scale=1 / math.sqrt(2), seed=0)
    np.testing.assert_allclose(dense_srht(sk), [[1 / math.sqrt(2), 1 / math.sqrt(2)],
                                                [1 / math.sqrt(2), -1 / math.sqrt(2)]])
    sk = build_sketch(128, s=32, seed=3)
    pi = dense_srht(sk)
    np.testing.assert_allclose(pi @ pi.T, 4 * np.eye(32), atol=1e-12)
    x = rng.standard_normal(128)
    assert rel_err(sk.apply(x), pi @ x) <= 1e-12
    with pytest.raises(UsageError):
        dense_srht(build_sketch(8192, s=4))


def test_compare_report():
    rep = compare("x", [1.0, 2.0], [1.0, 2.0 + 1e-12], 1e-10, inputs=(np.ones(2),))
    assert rep.passed and rep.abs_err >= 0 and rep.rel_err >= 0 and len(rep.inputs_digest) == 16
    assert not compare("x", [1.0], [2.0], 1e-3, target="abs").passed
    assert set(rep.to_dict()) >= {"name", "passed", "abs_err", "rel_err"}


def test_oracle_is_deterministic(rng):
    data = random_data(rng, 10, 12)
    mv = marginal(rng, data)
    a = primal_beta_exact(data.x, iso(1.0, 12), mv, data.y)
    b = primal_beta_exact(data.x, iso(1.0, 12), MarginalVariance(mv.v), data.y)
    np.testing.assert_array_equal(a, b)
