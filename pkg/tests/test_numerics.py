import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from zakai_galerkin.errors import GramError
from zakai_galerkin.hermite import BasisSpec, basis_eval, basis_values, build_coeff_table, project_gaussian
from zakai_galerkin.numerics import (
    default_nodes,
    gauss_hermite,
    inner_product,
    integrate,
    matrix_exp,
    solve_gram,
)


def taylor_exp(M, squarings=4, terms=40):
    """Oracle: truncated Taylor series of exp(M / 2^s) squared s times."""
    A = np.asarray(M, dtype=float) / 2.0**squarings
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    for _ in range(squarings):
        out = out @ out
    return out


# -- Gauss-Hermite rules ---------------------------------------------------------

def test_gauss_hermite_small_rules():
    r1 = gauss_hermite(1)
    np.testing.assert_array_equal(r1.nodes, [0.0])
    np.testing.assert_array_equal(r1.weights, [1.0])
    r2 = gauss_hermite(2)
    np.testing.assert_allclose(r2.nodes, [-1.0, 1.0], atol=1e-15)
    np.testing.assert_allclose(r2.weights, [0.5, 0.5], atol=1e-15)
    assert np.dot(r2.weights, r2.nodes**2) == pytest.approx(1.0, abs=1e-14)
    r3 = gauss_hermite(3)
    s3 = math.sqrt(3)
    np.testing.assert_allclose(r3.nodes, [-s3, 0.0, s3], atol=1e-14)
    np.testing.assert_allclose(r3.weights, [1 / 6, 2 / 3, 1 / 6], atol=1e-14)
    assert np.dot(r3.weights, r3.nodes**4) == pytest.approx(3.0, abs=1e-13)


@pytest.mark.parametrize("m", range(1, 11))
def test_gauss_hermite_exactness(m):
    r = gauss_hermite(m)
    assert r.weights.sum() == pytest.approx(1.0, abs=1e-12)
    for deg in range(2 * m):
        exact = 0.0 if deg % 2 else float(math.prod(range(deg - 1, 0, -2)))  # (deg-1)!!
        scale = np.dot(r.weights, np.abs(r.nodes) ** deg)  # odd moments cancel terms of this size
        assert abs(np.dot(r.weights, r.nodes**deg) - exact) <= 1e-10 * max(scale, 1.0)


@pytest.mark.parametrize("m", [20, 120, 300, 512])
def test_gauss_hermite_large_rules(m):
    r = gauss_hermite(m)
    assert r.size == m
    assert r.weights.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.isfinite(r.scaled_weights))
    assert np.all(np.diff(r.nodes) > 0)
    np.testing.assert_allclose(r.nodes, -r.nodes[::-1], atol=1e-12)


def test_gauss_hermite_range():
    with pytest.raises(ValueError):
        gauss_hermite(0)
    with pytest.raises(ValueError):
        gauss_hermite(513)


def test_scaled_weights_consistent_with_weights():
    r = gauss_hermite(40)
    phi = np.exp(-0.5 * r.nodes**2) / math.sqrt(2 * math.pi)
    np.testing.assert_allclose(r.scaled_weights * phi, r.weights, rtol=1e-10)


def test_default_nodes():
    assert default_nodes(1) == 120
    assert default_nodes(45) == 130
    assert default_nodes(300) == 512
    assert all(default_nodes(n) % 2 == 0 for n in range(1, 100))


# -- inner products ------------------------------------------------------------

def test_inner_product_examples():
    b = BasisSpec(n=3)
    rule = gauss_hermite(120)
    e1 = lambda x: basis_eval(b, 1, x)
    e3 = lambda x: basis_eval(b, 3, x)
    assert inner_product(e1, e1, rule) == pytest.approx(1.0, abs=1e-12)
    assert abs(inner_product(e1, e3, rule)) <= 1e-10
    q0 = lambda x: np.exp(-0.5 * x**2) / math.sqrt(2 * math.pi)
    proj = project_gaussian(build_coeff_table(), 0.0, 1.0, 1)[0]
    assert inner_product(q0, e1, rule) == pytest.approx(proj, abs=1e-12)
    assert proj == pytest.approx(0.5157146, abs=1e-7)


def test_integrate_adapted_coordinates():
    b = BasisSpec(n=6, mu=3.0, sigma=0.2)
    rule = gauss_hermite(40)
    G = np.array([[integrate(lambda x: basis_values(b, x)[..., i] * basis_values(b, x)[..., j], rule, 3.0, 0.2)
                   for j in range(6)] for i in range(6)])
    np.testing.assert_allclose(G, np.eye(6), atol=1e-12)
    with pytest.raises(ValueError):
        integrate(np.cos, rule, 0.0, 0.0)


# -- matrix exponential ----------------------------------------------------------

def test_matrix_exp_examples():
    np.testing.assert_allclose(matrix_exp(np.zeros((2, 2))), np.eye(2), atol=1e-15)
    np.testing.assert_allclose(matrix_exp(np.diag([1.0, -1.0])), np.diag([math.e, 1 / math.e]), rtol=1e-15)
    np.testing.assert_allclose(matrix_exp([[0.0, 1.0], [0.0, 0.0]]), [[1.0, 1.0], [0.0, 1.0]], atol=1e-15)


def test_matrix_exp_rejects_bad_input():
    with pytest.raises(ValueError):
        matrix_exp(np.array([[np.nan, 0.0], [0.0, 1.0]]))
    with pytest.raises(ValueError):
        matrix_exp(np.ones((2, 3)))


def test_matrix_exp_against_taylor(rng):
    for _ in range(50):
        n = int(rng.integers(1, 12))
        M = rng.standard_normal((n, n))
        M *= rng.uniform(0.1, 5.0) / np.linalg.norm(M, 2)
        ref = taylor_exp(M)
        err = np.linalg.norm(matrix_exp(M) - ref) / np.linalg.norm(ref)
        assert err <= 1e-12


def test_matrix_exp_large_norm_against_scipy(rng):
    M = 40.0 * rng.standard_normal((30, 30)) / math.sqrt(30)
    M = M - M.T - 5 * np.eye(30)  # normal matrix, well-conditioned exponential
    ref = scipy.linalg.expm(M)
    assert np.linalg.norm(matrix_exp(M) - ref) <= 1e-10 * np.linalg.norm(ref)


def test_matrix_exp_inverse_property():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        M = rng.standard_normal((n, n))
        M *= rng.uniform(0.0, 3.0) / max(np.linalg.norm(M, 2), 1e-300)
        np.testing.assert_allclose(matrix_exp(M) @ matrix_exp(-M), np.eye(n), atol=1e-9)


@pytest.mark.parametrize("s", [0.25, 0.5])
@pytest.mark.parametrize("t", [0.25, 0.5])
def test_matrix_exp_semigroup(s, t):
    M = np.random.default_rng(3).standard_normal((6, 6))
    np.testing.assert_allclose(matrix_exp((s + t) * M), matrix_exp(s * M) @ matrix_exp(t * M), atol=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=1, max_size=8))
def test_matrix_exp_diagonal_property(diag):
    d = np.array(diag)
    np.testing.assert_allclose(matrix_exp(np.diag(d)), np.diag(np.exp(d)), rtol=1e-13)


# -- Gram solves ---------------------------------------------------------------------

def test_solve_gram_examples():
    V = np.arange(6.0).reshape(3, 2)
    X, cond = solve_gram(np.eye(3), V)
    np.testing.assert_allclose(X, V)
    assert cond == pytest.approx(1.0)
    X, cond = solve_gram(np.diag([2.0, 4.0]), np.array([[2.0], [4.0]]))
    np.testing.assert_allclose(X, [[1.0], [1.0]])
    assert cond == pytest.approx(2.0)


def test_solve_gram_gaussian_bumps():
    centres = np.array([-2.0, -1.0, 0.0, 1.0, 2.0])
    # Gram of unit-L2 bumps with width 1: exp(-(c_i - c_j)^2 / 4)
    D = np.exp(-0.25 * (centres[:, None] - centres[None, :]) ** 2)
    V = np.random.default_rng(0).standard_normal((5, 3))
    X, cond = solve_gram(D, V)
    assert np.max(np.abs(D @ X - V)) <= 1e-8 * np.max(np.abs(V))
    assert cond > 1.0


def test_solve_gram_failure_names_pivot():
    D = np.array([[1.0, 1.0], [1.0, 1.0]])
    with pytest.raises(GramError) as info:
        solve_gram(D, np.ones((2, 1)))
    assert info.value.smallest_pivot is not None
    with pytest.raises(GramError):
        solve_gram(np.array([[1.0, 0.0], [0.0, -1.0]]), np.ones((2, 1)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(0, 10_000))
def test_solve_gram_residual_property(n, seed):
    r = np.random.default_rng(seed)
    G = r.standard_normal((n, n))
    D = G @ G.T + 0.5 * np.eye(n)
    V = r.standard_normal((n, 2))
    X, _ = solve_gram(D, V)
    assert np.max(np.abs(D @ X - V)) <= 1e-8 * max(np.max(np.abs(V)), 1e-300)
