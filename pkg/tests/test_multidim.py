import math

import numpy as np
import pytest

from zakai_galerkin.adaptive import AgaConfig, rebase
from zakai_galerkin.errors import ConfigError
from zakai_galerkin.galerkin import FilterState, assemble_quadrature, kalman_matrices, run_filter
from zakai_galerkin.hermite import BasisSpec, basis_eval
from zakai_galerkin.model import LinearMDParams, LinearModelParams, ModelSpec, make_linear_md_model, make_linear_model, simulate_bundle
from zakai_galerkin.multidim import (
    MAX_TENSOR_SIZE,
    TensorBasisSpec,
    assemble_md,
    initial_coefficients_md,
    initial_tensor_basis,
    kronecker_matrices,
    moments_md,
    rebase_md,
    run_filter_md,
    tensor_basis_eval,
    tensor_basis_values,
    tensor_index,
    tensor_multi_index,
)
from zakai_galerkin.numerics import gauss_hermite
from zakai_galerkin.reference import kalman_bucy, particle_filter


def decoupled(b=0.5, sigma=2.0, h=5.5, lam=10.0, mu0=(5.0, 5.0), var0=0.01):
    """Two independent copies of the scalar linear model; intensity depends on x_1 only."""
    return LinearMDParams(
        drift=b * np.eye(2), diffusion=sigma * np.eye(2), obs=h * np.eye(2),
        intensity_weights=[lam, 0.0], mu0=list(mu0), cov0=var0 * np.eye(2),
    )


# -- indexing and evaluation ---------------------------------------------------------

def test_tensor_index_examples():
    s = TensorBasisSpec(d=2, n_per_dim=3)
    assert tensor_index(s, (1, 1)) == 1
    assert tensor_index(s, (2, 3)) == 6
    assert tensor_index(s, (3, 3)) == 9
    for flat in range(1, 10):
        assert tensor_index(s, tensor_multi_index(s, flat)) == flat
    with pytest.raises(IndexError):
        tensor_index(s, (0, 1))
    with pytest.raises(IndexError):
        tensor_index(s, (1, 4))
    with pytest.raises(IndexError):
        tensor_multi_index(s, 10)


def test_tensor_index_row_major_formula():
    s = TensorBasisSpec(d=3, n_per_dim=4)
    for multi in [(1, 2, 3), (4, 4, 4), (2, 1, 1)]:
        expected = sum((i - 1) * 4 ** (3 - k) for k, i in enumerate(multi, start=1)) + 1
        assert tensor_index(s, multi) == expected


def test_tensor_spec_validation():
    with pytest.raises(ConfigError):
        TensorBasisSpec(d=0, n_per_dim=3)
    with pytest.raises(ConfigError):
        TensorBasisSpec(d=2, n_per_dim=3, mu=(0.0,))
    with pytest.raises(ConfigError):
        TensorBasisSpec(d=2, n_per_dim=3, sigma=(1.0, -1.0))
    with pytest.raises(ConfigError):
        TensorBasisSpec(d=5, n_per_dim=7)
    assert TensorBasisSpec(d=5, n_per_dim=6).m == MAX_TENSOR_SIZE


def test_tensor_basis_eval_examples():
    s = TensorBasisSpec(d=2, n_per_dim=3)
    assert tensor_basis_eval(s, 1, (0.0, 0.0)) == pytest.approx(1 / math.sqrt(2 * math.pi), abs=1e-15)
    assert tensor_basis_eval(s, 1, (0.0, 0.0)) == pytest.approx(0.39894, abs=1e-5)
    a = TensorBasisSpec(d=2, n_per_dim=3, mu=(1.0, -2.0), sigma=(0.5, 2.0))
    assert tensor_basis_eval(a, tensor_index(a, (2, 1)), (1.0, 0.7)) == 0.0
    assert tensor_basis_eval(a, tensor_index(a, (3, 2)), (0.3, -2.0)) == 0.0


def test_tensor_basis_separable():
    s = TensorBasisSpec(d=2, n_per_dim=4, mu=(1.0, -2.0), sigma=(0.5, 2.0))
    x = np.array([0.8, -1.1])
    vals = tensor_basis_values(s, x[None, :])[0]
    for flat in range(1, s.m + 1):
        i, j = tensor_multi_index(s, flat)
        expected = basis_eval(s.axes[0], i, x[0]) * basis_eval(s.axes[1], j, x[1])
        assert tensor_basis_eval(s, flat, x) == pytest.approx(expected, rel=1e-14, abs=1e-300)
        assert vals[flat - 1] == pytest.approx(expected, rel=1e-14, abs=1e-300)


def test_tensor_basis_orthonormal():
    s = TensorBasisSpec(d=2, n_per_dim=4, mu=(0.5, 0.0), sigma=(1.5, 0.7))
    r = gauss_hermite(30)
    g = np.meshgrid(r.nodes, r.nodes, indexing="ij")
    w = np.outer(r.scaled_weights * 1.5, r.scaled_weights * 0.7).ravel()
    X = np.stack([0.5 + 1.5 * g[0].ravel(), 0.7 * g[1].ravel()], axis=1)
    V = tensor_basis_values(s, X)
    np.testing.assert_allclose(V.T @ (V * w[:, None]), np.eye(16), atol=1e-12)


# -- assembly --------------------------------------------------------------------------

def test_kronecker_sum_identity():
    n = 6
    p1 = LinearModelParams(h=5.5, lam=10.0)
    m = kronecker_matrices(make_linear_md_model(decoupled()), TensorBasisSpec(d=2, n_per_dim=n))
    k1 = kalman_matrices(n, p1)
    I = np.eye(n)
    np.testing.assert_allclose(m.A, np.kron(k1.A, I) + np.kron(I, k1.A), atol=1e-8)
    np.testing.assert_allclose(m.B[0], np.kron(k1.B[0], I), atol=1e-12)
    np.testing.assert_allclose(m.B[1], np.kron(I, k1.B[0]), atol=1e-12)
    np.testing.assert_allclose(m.C, np.kron(k1.C, I), atol=1e-12)


def test_kronecker_sum_identity_adapted():
    n = 5
    mu, s = (5.0, -1.0), (0.3, 1.2)
    m = kronecker_matrices(make_linear_md_model(decoupled()), TensorBasisSpec(2, n, mu, s))
    A1 = kalman_matrices(n, LinearModelParams(), BasisSpec(n=n, mu=mu[0], sigma=s[0])).A
    A2 = kalman_matrices(n, LinearModelParams(), BasisSpec(n=n, mu=mu[1], sigma=s[1])).A
    np.testing.assert_allclose(m.A, np.kron(A1, np.eye(n)) + np.kron(np.eye(n), A2), atol=1e-8)


def test_kronecker_matches_quadrature():
    p = LinearMDParams(
        drift=np.array([[-0.5, 0.3], [0.2, 0.4]]), diffusion=np.array([[1.0, 0.0], [0.5, 0.8]]),
        obs=np.array([[1.0, -2.0]]), intensity_weights=[2.0, 1.0], mu0=[0.5, -0.5], cov0=0.2 * np.eye(2),
        intensity_const=0.5,
    )
    spec = make_linear_md_model(p)
    basis = TensorBasisSpec(2, 5, (0.5, -0.5), (0.8, 1.3))
    exact = kronecker_matrices(spec, basis)
    quad = assemble_md(spec, basis, gauss_hermite(30))
    for name in ("A", "C", "D"):
        np.testing.assert_allclose(getattr(quad, name), getattr(exact, name), atol=1e-9, err_msg=name)
    np.testing.assert_allclose(quad.B[0], exact.B[0], atol=1e-9)


def test_unit_intensity_gives_zero_c():
    spec = ModelSpec(
        dim_x=2, dim_z=1, dim_w=2,
        drift=lambda x: -x, diffusion=lambda x: np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)),
        obs_fn=lambda x: np.zeros((x.shape[0], 1)), intensity_fn=lambda x: np.ones(x.shape[0]),
        mu0=[0.0, 0.0], cov0=np.eye(2),
    )
    m = assemble_md(spec, TensorBasisSpec(2, 4))
    np.testing.assert_allclose(m.C, 0.0, atol=1e-15)
    np.testing.assert_allclose(m.D, np.eye(16), atol=1e-12)


def test_d1_reduces_to_scalar_assembly():
    spec = make_linear_model(LinearModelParams(h=2.0, lam=3.0))
    rule = gauss_hermite(60)
    one = assemble_md(spec, TensorBasisSpec(1, 8, (1.0,), (0.5,)), rule)
    ref = assemble_quadrature(spec, BasisSpec(n=8, mu=1.0, sigma=0.5), rule)
    for name in ("A", "C", "D"):
        np.testing.assert_array_equal(getattr(one, name), getattr(ref, name))
    np.testing.assert_array_equal(one.B[0], ref.B[0])


def test_assembly_dimension_guards():
    spec = make_linear_md_model(decoupled())
    with pytest.raises(ConfigError):
        assemble_md(spec, TensorBasisSpec(3, 3))
    with pytest.raises(ConfigError):
        kronecker_matrices(make_linear_model(LinearModelParams()), TensorBasisSpec(1, 3))


# -- projection, moments and rebasing --------------------------------------------------

def test_initial_coefficients_product_form():
    spec = make_linear_md_model(decoupled(mu0=(0.0, 0.0), var0=1.0))
    # with sigma = sqrt(var / 2) the first basis function is the square root of the density
    s = math.sqrt(0.5)
    basis = TensorBasisSpec(2, 4, (0.0, 0.0), (s, s))
    psi = initial_coefficients_md(spec, basis)
    np.testing.assert_allclose(psi[1:], 0.0, atol=1e-14)
    e = moments_md(FilterState(coeffs=psi, basis=basis))
    np.testing.assert_allclose(e.mean, 0.0, atol=1e-12)
    np.testing.assert_allclose(e.variance, 1.0, atol=1e-12)


def test_correlated_initial_law_by_quadrature():
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    p = LinearMDParams(drift=-np.eye(2), diffusion=np.eye(2), obs=np.eye(2), intensity_weights=[0, 0],
                       mu0=[0.2, -0.1], cov0=cov)
    spec = make_linear_md_model(p)
    basis = TensorBasisSpec(2, 20, (0.2, -0.1), (1.0, 0.7))
    e = moments_md(FilterState(coeffs=initial_coefficients_md(spec, basis), basis=basis))
    np.testing.assert_allclose(e.mean, [0.2, -0.1], atol=1e-6)
    # 20-term truncation of the marginals: 0.99981 and 0.49993
    np.testing.assert_allclose(e.variance, [1.0, 0.5], atol=5e-4)


def test_rebase_md_keeps_moments():
    spec = make_linear_md_model(decoupled(mu0=(1.0, -1.0), var0=0.25))
    basis = TensorBasisSpec(2, 20, (1.0, -1.0), (0.5, 0.5))
    s = FilterState(coeffs=initial_coefficients_md(spec, basis), basis=basis)
    r = rebase_md(s, (1.1, -0.9), (0.55, 0.45))
    e0, e1 = moments_md(s), moments_md(r)
    np.testing.assert_allclose(e1.mean, e0.mean, atol=1e-3)
    np.testing.assert_allclose(e1.variance, e0.variance, atol=1e-3)
    assert r.basis.mu == (1.1, -0.9)


def test_rebase_md_is_per_axis_rebase():
    n = 8
    ax = [BasisSpec(n=n, mu=1.0, sigma=0.5), BasisSpec(n=n, mu=-1.0, sigma=0.8)]
    rng = np.random.default_rng(1)
    u, v = rng.standard_normal(n), rng.standard_normal(n)
    basis = TensorBasisSpec(2, n, (1.0, -1.0), (0.5, 0.8))
    r = rebase_md(FilterState(coeffs=np.kron(u, v), basis=basis), (1.2, -0.7), (0.6, 0.7))
    ru = rebase(FilterState(coeffs=u, basis=ax[0]), 1.2, 0.6).coeffs
    rv = rebase(FilterState(coeffs=v, basis=ax[1]), -0.7, 0.7).coeffs
    np.testing.assert_allclose(r.coeffs, np.kron(ru, rv), atol=1e-12)


# -- filtering ---------------------------------------------------------------------------

def test_decoupled_filter_matches_kalman_bucy():
    p1 = LinearModelParams(h=5.5, lam=0.0, mu0=0.0, var0=0.25)
    spec = make_linear_md_model(decoupled(lam=0.0, mu0=(0.0, 0.0), var0=0.25))
    bundle = simulate_bundle(spec, 1e-4, 2000, seed=4)
    res = run_filter_md(spec, TensorBasisSpec(2, 12, (0.0, 0.0), (0.5, 0.5)), "su", bundle)
    for a in range(2):
        axis = simulate_bundle(make_linear_model(p1), 1e-4, 2000, seed=4)
        axis.dz[:, 0] = bundle.dz[:, a]
        m, P = kalman_bucy(p1, axis)
        assert np.max(np.abs(res.mean[:, a] - m)) <= 0.05 * math.sqrt(P.min())


def test_zero_observation_prior_mean():
    spec = make_linear_md_model(decoupled(b=-0.5, sigma=1.0, h=0.0, lam=0.0, mu0=(0.0, 0.0), var0=1.0))
    bundle = simulate_bundle(spec, 1e-3, 500, seed=0)
    s = math.sqrt(0.5)
    res = run_filter_md(spec, TensorBasisSpec(2, 12, (0.0, 0.0), (s, s)), "su", bundle)
    np.testing.assert_allclose(res.mean, 0.0, atol=1e-2)
    # N(0, 1) is stationary for dX = -X/2 dt + dW
    np.testing.assert_allclose(res.variance[-1], 1.0, atol=2e-2)


def test_permutation_equivariance():
    F = np.array([[0.3, 0.0], [0.2, -0.5]])
    H = np.array([[2.0, 1.0]])
    p = LinearMDParams(drift=F, diffusion=np.diag([1.0, 1.5]), obs=H, intensity_weights=[1.0, 0.0],
                       mu0=[0.5, -0.5], cov0=np.diag([0.2, 0.3]))
    perm = [1, 0]
    q = LinearMDParams(drift=F[np.ix_(perm, perm)], diffusion=np.diag([1.5, 1.0]), obs=H[:, perm],
                       intensity_weights=[0.0, 1.0], mu0=[-0.5, 0.5], cov0=np.diag([0.3, 0.2]))
    spec_p, spec_q = make_linear_md_model(p), make_linear_md_model(q)
    bundle = simulate_bundle(spec_p, 1e-3, 300, seed=2)
    a = run_filter_md(spec_p, initial_tensor_basis(spec_p, 6), "su", bundle)
    b = run_filter_md(spec_q, initial_tensor_basis(spec_q, 6), "su", bundle)
    np.testing.assert_allclose(b.mean[:, perm], a.mean, atol=1e-10)
    np.testing.assert_allclose(b.variance[:, perm], a.variance, atol=1e-10)


def test_d1_filter_matches_scalar_filter():
    p = LinearModelParams(h=2.0, lam=2.0, mu0=1.0, var0=0.25)
    spec1 = make_linear_model(p)
    specd = make_linear_md_model(LinearMDParams(drift=[[p.b]], diffusion=[[p.sigma]], obs=[[p.h]],
                                                intensity_weights=[p.lam], mu0=[p.mu0], cov0=[[p.var0]]))
    bundle = simulate_bundle(spec1, 1e-3, 300, seed=6)
    a = run_filter(spec1, BasisSpec(n=10, mu=1.0, sigma=0.5), "su", bundle)
    b = run_filter_md(specd, TensorBasisSpec(1, 10, (1.0,), (0.5,)), "su", bundle)
    np.testing.assert_allclose(b.mean[:, 0], a.mean, atol=1e-10)
    np.testing.assert_allclose(b.variance[:, 0], a.variance, atol=1e-10)


def test_adaptive_md_tracks_particle_filter():
    spec = make_linear_md_model(decoupled())
    bundle = simulate_bundle(spec, 1e-4, 1000, seed=1)
    res = run_filter_md(spec, initial_tensor_basis(spec, 12), "su", bundle, adaptive=AgaConfig())
    pf = particle_filter(spec, bundle, 2000, seed=1)
    assert res.n_rebases > 0
    assert res.mean.shape == (1001, 2)
    assert np.max(np.abs(res.mean - pf.mean)) <= 0.1


def test_estimate_csv_columns():
    spec = make_linear_md_model(decoupled(lam=0.0, mu0=(0.0, 0.0), var0=0.25))
    bundle = simulate_bundle(spec, 1e-3, 10, seed=0)
    res = run_filter_md(spec, TensorBasisSpec(2, 4, (0.0, 0.0), (0.5, 0.5)), "em", bundle)
    header = res.to_csv_string().splitlines()[0].split(",")
    assert header[:5] == ["t", "mean_1", "mean_2", "var_1", "var_2"]
