import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import arc_cosine_relu, brute_wick, gelu, mc_pair_expect, numeric_softmax_jacobian, relu, step
from wideformer.gaussian_oracle import (
    AttnKernel,
    attention_moments,
    gauss_pair_expect,
    gauss_pair_matrix,
    pairings_count,
    qk_covariance,
    softmax_jacobian_rows,
    softmax_rows,
    wick_even_moment,
)
from wideformer.pair_kernel import PairKernel


def test_identity_pair_is_covariance():
    assert math.isclose(gauss_pair_expect("identity", "identity", 2.0, 0.7, 1.5), 0.7, rel_tol=1e-12)


def test_relu_diagonal_is_half_variance():
    assert math.isclose(gauss_pair_expect("relu", "relu", 3.0, 3.0, 3.0), 1.5, rel_tol=1e-12)


def test_relu_uncorrelated_unit_matches_monte_carlo():
    got = gauss_pair_expect("relu", "relu", 1.0, 0.0, 1.0)
    assert math.isclose(got, 1 / (2 * math.pi), rel_tol=1e-12)
    mc, se = mc_pair_expect(relu, relu, 1.0, 0.0, 1.0)
    assert abs(got - mc) < 3 * se


@pytest.mark.parametrize("K", [(1.0, 0.3, 2.0), (0.5, -0.4, 0.9), (2.0, 1.9, 2.0)])
def test_gelu_quadrature_matches_monte_carlo(K):
    got = gauss_pair_expect("gelu", "gelu", *K)
    mc, se = mc_pair_expect(gelu, gelu, *K)
    assert abs(got - mc) < 4 * se


@pytest.mark.parametrize("K", [(1.0, 0.3, 2.0), (0.5, -0.4, 0.9)])
def test_relu_derivative_pair_matches_monte_carlo(K):
    got = gauss_pair_expect("relu'", "relu'", *K)
    mc, se = mc_pair_expect(step, step, *K)
    assert abs(got - mc) < 4 * se


@settings(max_examples=60, deadline=None)
@given(
    a=st.floats(0.05, 5.0),
    b=st.floats(0.05, 5.0),
    rho=st.floats(-0.99, 0.99),
)
def test_arc_cosine_forms_agree_with_quadrature(a, b, rho):
    c = rho * math.sqrt(a * b)
    exact = gauss_pair_expect("relu", "relu", a, c, b)
    assert math.isclose(exact, arc_cosine_relu(a, c, b), rel_tol=1e-10, abs_tol=1e-14)
    quad = gauss_pair_expect("relu", "relu", a, c, b, order=200, exact=False)
    assert abs(exact - quad) < 2e-3 * math.sqrt(a * b)
    for f, g in (("relu'", "relu'"), ("relu", "relu'"), ("relu'", "relu")):
        e = gauss_pair_expect(f, g, a, c, b)
        q = gauss_pair_expect(f, g, a, c, b, order=200, exact=False)
        assert abs(e - q) < 2e-2 * max(1.0, math.sqrt(a))


def test_pair_matrix_symmetric_and_psd():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((5, 8))
    K = X @ X.T / 8
    for act in ("relu", "gelu", "tanh"):
        M = gauss_pair_matrix(act, act, K)
        assert np.array_equal(M, M.T)
        assert np.linalg.eigvalsh(M).min() > -1e-10


def test_qk_covariance_entries():
    F = PairKernel(np.array([[1.0, 0.5], [0.5, 1.0]]), B=1, T=2, role="F")
    A = qk_covariance(F, 2.0, 3.0).matrix
    assert np.allclose(np.diag(A), 6.0)
    # (t,t')=(0,0) against (u,u')=(1,1): C_Q C_K F01 F01
    assert math.isclose(A[0, 3], 6.0 * 0.25)


def test_qk_covariance_identity_kernel_is_pair_indicator():
    F = PairKernel(np.eye(4), B=2, T=2, role="F")
    A = qk_covariance(F, 1.0, 1.0).matrix
    assert np.array_equal(A, np.eye(8))


@pytest.mark.parametrize("idx", [(0, 1), (0, 1, 2, 3), (0, 0, 1, 1), (1, 2, 2, 3, 0, 1), (0, 1, 2)])
def test_wick_matches_brute_force(idx):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((4, 6))
    A = X @ X.T
    assert math.isclose(wick_even_moment(A, idx), brute_wick(A, idx), rel_tol=1e-12, abs_tol=1e-12)


def test_wick_four_point_has_three_terms():
    A = np.arange(16.0).reshape(4, 4)
    A = A + A.T
    want = A[0, 1] * A[2, 3] + A[0, 2] * A[1, 3] + A[0, 3] * A[1, 2]
    assert wick_even_moment(A, [0, 1, 2, 3]) == want
    assert [pairings_count(m) for m in (1, 2, 3)] == [1, 3, 15]


def test_single_token_attention_is_constant():
    A = AttnKernel(np.eye(2), B=2, T=1)
    m = attention_moments(A, n_samples=64)
    assert np.all(m.omega2 == 1.0)
    assert np.all(m.domega2 == 0.0)


def test_zero_logit_covariance_gives_uniform_attention():
    T = 3
    A = AttnKernel(np.zeros((T * T, T * T)), B=1, T=T)
    m = attention_moments(A, n_samples=16)
    assert np.allclose(m.omega2, 1 / T ** 2)
    J = softmax_jacobian_rows(np.full((T, T), 1 / T))
    want = (np.eye(T) - 1 / T) / T
    for t in range(T):
        assert np.allclose(J[t], want)


def test_softmax_jacobian_matches_finite_differences():
    x = np.array([[0.3, -1.2, 2.0, 0.1]])
    J = softmax_jacobian_rows(softmax_rows(x))[0]
    assert np.allclose(J, numeric_softmax_jacobian(x[0]), atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(
    logits=st.lists(st.floats(-30, 30), min_size=9, max_size=9),
    masked=st.booleans(),
)
def test_softmax_rows_are_stochastic(logits, masked):
    x = np.array(logits).reshape(3, 3)
    om = softmax_rows(x, "masked" if masked else "bidirectional")
    assert np.allclose(om.sum(axis=-1), 1.0)
    assert np.all(om >= 0)
    if masked:
        assert np.all(om[np.triu_indices(3, 1)] == 0.0)


def test_moments_bit_identical_for_same_seed():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((8, 8))
    A = AttnKernel(X @ X.T / 8, B=2, T=2)
    a = attention_moments(A, n_samples=300, seed=7)
    b = attention_moments(A, n_samples=300, seed=7)
    assert np.array_equal(a.omega2, b.omega2) and np.array_equal(a.domega2, b.domega2)


def test_masked_and_bidirectional_moments_differ():
    F = PairKernel(np.eye(3) * 0.5 + 0.5, B=1, T=3, role="F")
    A = qk_covariance(F, 1.0, 1.0)
    bi = attention_moments(A, "bidirectional", n_samples=512, derivatives=False)
    ma = attention_moments(A, "masked", n_samples=512, derivatives=False)
    assert not np.allclose(bi.omega2, ma.omega2)
