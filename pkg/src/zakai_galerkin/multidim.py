"""
Tensor-product Hermite bases for d-dimensional signals.

Basis functions are products ``e_{i_1}^{(1)}(x_1) ... e_{i_d}^{(d)}(x_d)`` of
per-axis adapted Hermite functions, flattened in row-major order (the first
axis varies slowest), so every matrix below is an ``m x m`` array with
``m = n^d``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .adaptive import AgaConfig, transfer_matrix, _projection_rule
from .errors import ConfigError, DegenerateStateError, RebaseError
from .galerkin import (
    CoefficientMatrices,
    FilterEstimate,
    FilterResult,
    FilterState,
    Method,
    assemble_quadrature,
    initial_state,
    run_loop,
)
from .hermite import BasisFamily, BasisSpec, basis_values, hermite_operators, moment_weights, project_gaussian_adapted
from .model import ModelSpec, PathBundle
from .numerics import QuadratureRule, default_nodes, gauss_hermite

MAX_TENSOR_SIZE = 7776
MAX_QUADRATURE_DIM = 3


@dataclass(frozen=True)
class TensorBasisSpec:
    d: int
    n_per_dim: int
    mu: tuple = ()
    sigma: tuple = ()

    def __post_init__(self):
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"dimension must be a positive integer, got {self.d}")
        mu = tuple(float(v) for v in (self.mu if len(self.mu) else (0.0,) * self.d))
        sigma = tuple(float(v) for v in (self.sigma if len(self.sigma) else (1.0,) * self.d))
        if len(mu) != self.d or len(sigma) != self.d:
            raise ConfigError("mu and sigma need one entry per axis")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)
        # validates size and scales per axis
        self.axes  # noqa: B018
        if self.m > MAX_TENSOR_SIZE:
            raise ConfigError(f"tensor basis size {self.m} exceeds the dense limit {MAX_TENSOR_SIZE}")

    @property
    def m(self) -> int:
        return self.n_per_dim**self.d

    @property
    def n(self) -> int:
        return self.m

    @property
    def orthonormal(self) -> bool:
        return True

    @property
    def axes(self) -> tuple:
        return tuple(BasisSpec(BasisFamily.HERMITE, self.n_per_dim, mu, s) for mu, s in zip(self.mu, self.sigma))

    def moved(self, mu, sigma) -> "TensorBasisSpec":
        return TensorBasisSpec(self.d, self.n_per_dim, tuple(mu), tuple(sigma))


def tensor_index(spec: TensorBasisSpec, multi) -> int:
    """Row-major flat index (1-based) of a 1-based multi-index."""
    multi = tuple(int(i) for i in multi)
    if len(multi) != spec.d or any(not 1 <= i <= spec.n_per_dim for i in multi):
        raise IndexError(f"multi-index {multi} outside {{1..{spec.n_per_dim}}}^{spec.d}")
    flat = 0
    for i in multi:
        flat = flat * spec.n_per_dim + (i - 1)
    return flat + 1


def tensor_multi_index(spec: TensorBasisSpec, flat: int) -> tuple:
    """Inverse of :func:`tensor_index`."""
    if not 1 <= flat <= spec.m:
        raise IndexError(f"flat index {flat} outside 1..{spec.m}")
    return tuple(int(i) + 1 for i in np.unravel_index(flat - 1, (spec.n_per_dim,) * spec.d))


def tensor_basis_values(spec: TensorBasisSpec, X) -> np.ndarray:
    """All tensor basis functions at points ``X`` of shape ``(P, d)``; returns ``(P, m)``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    out = np.ones((X.shape[0], 1))
    for a, ax in enumerate(spec.axes):
        out = (out[:, :, None] * basis_values(ax, X[:, a])[:, None, :]).reshape(X.shape[0], -1)
    return out


def tensor_basis_eval(spec: TensorBasisSpec, flat: int, x) -> float:
    multi = tensor_multi_index(spec, flat)
    x = np.asarray(x, dtype=float).reshape(spec.d)
    val = 1.0
    for ax, i, xa in zip(spec.axes, multi, x):
        val *= float(basis_values(ax, xa)[i - 1])
    return val


def _kron_all(mats) -> np.ndarray:
    out = np.ones((1, 1))
    for M in mats:
        out = np.kron(out, M)
    return out


def _axis_op(spec: TensorBasisSpec, ops: dict) -> np.ndarray:
    """Kronecker product with ``ops[a]`` on axis ``a`` and the identity elsewhere."""
    n = spec.n_per_dim
    return _kron_all([ops.get(a, np.eye(n)) for a in range(spec.d)])


def kronecker_matrices(spec: ModelSpec, basis: TensorBasisSpec) -> CoefficientMatrices:
    """Exact matrices for a linear multi-dimensional model.

    Drift ``F x``, diffusion covariance ``a = S S^T``, observations ``H x``
    and intensity ``c0 + sum_k c_k x_k^2`` only involve per-axis factors
    ``x_k``, ``x_k^2``, ``d/dx_k``, ``x_k d/dx_k`` and ``d^2/dx_k^2``, so every
    matrix is a sum of Kronecker products of the 1-d closed forms.
    """
    p = spec.linear_md
    if p is None:
        raise ConfigError("closed-form tensor assembly needs a linear model")
    if p.dim != basis.d:
        raise ConfigError("model and basis dimensions differ")
    n, d = basis.n_per_dim, basis.d
    ops = hermite_operators(n)
    ident = np.eye(n)
    mu, s = basis.mu, basis.sigma
    X = [mu[k] * ident + s[k] * ops["y"] for k in range(d)]
    X2 = [mu[k] ** 2 * ident + 2 * mu[k] * s[k] * ops["y"] + s[k] ** 2 * ops["y2"] for k in range(d)]
    D1 = [ops["d1"] / s[k] for k in range(d)]
    m = basis.m
    A = np.zeros((m, m))
    F = p.drift
    a = p.diffusion @ p.diffusion.T
    for i in range(d):
        for k in range(d):
            if F[i, k] == 0:
                continue
            if k == i:
                term = _axis_op(basis, {i: (mu[i] / s[i]) * ops["d1"] + ops["yd1"]})
            else:
                term = _axis_op(basis, {i: D1[i], k: X[k]})
            A += F[i, k] * term
    for i in range(d):
        for j in range(d):
            if a[i, j] == 0:
                continue
            if i == j:
                term = _axis_op(basis, {i: ops["d2"] / s[i] ** 2})
            else:
                term = _axis_op(basis, {i: D1[i], j: D1[j]})
            A += 0.5 * a[i, j] * term
    Bs = []
    for row in p.obs:
        B = np.zeros((m, m))
        for k in range(d):
            if row[k]:
                B += row[k] * _axis_op(basis, {k: X[k]})
        Bs.append(B)
    if p.point_process:
        C = (p.intensity_const - 1.0) * np.eye(m)
        for k in range(d):
            if p.intensity_weights[k]:
                C += p.intensity_weights[k] * _axis_op(basis, {k: X2[k]})
    else:
        C = -np.eye(m)
    return CoefficientMatrices(A=A, B=tuple(Bs), C=C, D=np.eye(m), basis=basis)


def _tensor_rule(basis: TensorBasisSpec, rule: Optional[QuadratureRule]):
    if rule is None:
        # products of two basis functions times a coefficient of degree <= 2
        # (plus two derivatives) are integrated exactly with n + 3 nodes
        rule = gauss_hermite(max(basis.n_per_dim + 20, 30))
    grids = np.meshgrid(*([rule.nodes] * basis.d), indexing="ij")
    Y = np.stack([g.ravel() for g in grids], axis=1)
    W = np.ones(Y.shape[0])
    for g in np.meshgrid(*([rule.scaled_weights] * basis.d), indexing="ij"):
        W = W * g.ravel()
    X = np.asarray(basis.mu) + Y * np.asarray(basis.sigma)
    return X, W * float(np.prod(basis.sigma))


def _axis_factors(basis: TensorBasisSpec, X: np.ndarray):
    """Per-axis values and first/second derivatives at the quadrature points."""
    return [basis_values(ax, X[:, a], derivatives=2) for a, ax in enumerate(basis.axes)]


def _tensor_product(factors, choice) -> np.ndarray:
    P = factors[0][0].shape[0]
    out = np.ones((P, 1))
    for f, c in zip(factors, choice):
        out = (out[:, :, None] * f[c][:, None, :]).reshape(P, -1)
    return out


def assemble_md(spec: ModelSpec, basis: TensorBasisSpec, rule: Optional[QuadratureRule] = None) -> CoefficientMatrices:
    """Matrices for a tensor basis.

    Linear models use the exact Kronecker form.  Otherwise entries are
    computed by tensor Gauss-Hermite quadrature (``d <= 3``).  For ``d = 1``
    this defers to the one-dimensional assembly.
    """
    if spec.dim_x != basis.d:
        raise ConfigError("model and basis dimensions differ")
    if spec.linear_md is not None and rule is None:
        return kronecker_matrices(spec, basis)
    if basis.d == 1:
        ax = basis.axes[0]
        mats = assemble_quadrature(spec, ax, rule or gauss_hermite(default_nodes(ax.n)))
        return CoefficientMatrices(A=mats.A, B=mats.B, C=mats.C, D=mats.D, basis=basis)
    if basis.d > MAX_QUADRATURE_DIM:
        raise ConfigError(f"quadrature assembly is limited to d <= {MAX_QUADRATURE_DIM}; use a linear model")
    X, w = _tensor_rule(basis, rule)
    d = basis.d
    f = _axis_factors(basis, X)
    V = _tensor_product(f, [0] * d)
    Vw = V * w[:, None]
    drift = spec.drift(X)
    diff = spec.diffusion(X)
    a = np.einsum("pim,pjm->pij", diff, diff)
    G = np.zeros_like(V)
    for i in range(d):
        choice = [0] * d
        choice[i] = 1
        G += drift[:, i : i + 1] * _tensor_product(f, choice)
        for j in range(d):
            choice = [0] * d
            if i == j:
                choice[i] = 2
            else:
                choice[i] = choice[j] = 1
            G += 0.5 * a[:, i, j : j + 1] * _tensor_product(f, choice)
    A = G.T @ Vw
    del G
    obs = spec.obs_fn(X)
    Bs = tuple((V * obs[:, l : l + 1]).T @ Vw for l in range(spec.dim_z))
    lam = spec.intensity(X)
    C = (V * (lam - 1.0)[:, None]).T @ Vw
    D = V.T @ Vw
    return CoefficientMatrices(A=A, B=Bs, C=C, D=D, basis=basis)


# --------------------------------------------------------------------------
# estimates and projection


def moments_md(state: FilterState) -> FilterEstimate:
    """Per-axis conditional means and variances of a tensor-basis state."""
    basis: TensorBasisSpec = state.basis
    d, n = basis.d, basis.n_per_dim
    W = [moment_weights(ax, 2) for ax in basis.axes]
    psi = state.coeffs.reshape((n,) * d)

    def contract(rows):
        t = psi
        for w in rows:
            t = np.tensordot(t, w, axes=([0], [0]))
        return float(t)

    w0 = [Wa[0] for Wa in W]
    z = contract(w0)
    if abs(z) <= 1e-12 * float(np.sqrt(state.coeffs @ state.coeffs)):
        raise DegenerateStateError("normalising integral of the approximate density vanished")
    mean = np.empty(d)
    var = np.empty(d)
    for a in range(d):
        rows = list(w0)
        rows[a] = W[a][1]
        m1 = contract(rows) / z
        rows[a] = W[a][2]
        m2 = contract(rows) / z
        mean[a], var[a] = m1, m2 - m1 * m1
    return FilterEstimate(mean=mean, variance=var, t=state.t)


def initial_coefficients_md(spec: ModelSpec, basis: TensorBasisSpec, rule: Optional[QuadratureRule] = None) -> np.ndarray:
    """Projection of the Gaussian initial law on the tensor basis.

    A diagonal covariance factorises into per-axis closed forms; otherwise
    the density is integrated with the tensor quadrature rule.
    """
    cov = spec.cov0
    if np.count_nonzero(cov - np.diag(np.diag(cov))) == 0 and np.all(np.diag(cov) > 0):
        return _kron_all(
            [project_gaussian_adapted(ax, spec.mu0[a], cov[a, a])[None, :] for a, ax in enumerate(basis.axes)]
        )[0]
    if basis.d > MAX_QUADRATURE_DIM:
        raise ConfigError("correlated initial laws need quadrature projection, limited to d <= 3")
    X, w = _tensor_rule(basis, rule)
    inv = np.linalg.inv(cov)
    diff = X - spec.mu0
    dens = np.exp(-0.5 * np.einsum("pi,ij,pj->p", diff, inv, diff)) / math.sqrt(
        (2 * math.pi) ** basis.d * np.linalg.det(cov)
    )
    return tensor_basis_values(basis, X).T @ (dens * w)


def rebase_md(state: FilterState, new_mu, new_sigma, rule: Optional[QuadratureRule] = None) -> FilterState:
    """Per-axis relocation of a tensor-basis state (separable transfer)."""
    basis: TensorBasisSpec = state.basis
    rule = rule or _projection_rule(200)
    new = basis.moved(new_mu, new_sigma)
    n, d = basis.n_per_dim, basis.d
    psi = state.coeffs.reshape((n,) * d)
    for a, (old_ax, new_ax) in enumerate(zip(basis.axes, new.axes)):
        T = transfer_matrix(old_ax, new_ax, rule)
        psi = np.moveaxis(np.tensordot(T, psi, axes=([1], [a])), 0, a)
    psi = psi.ravel()
    before, after = float(state.coeffs @ state.coeffs), float(psi @ psi)
    if not after >= 0.5 * before:
        raise RebaseError(f"tensor rebase keeps only {after / before:.3%} of the L2 mass")
    return FilterState(coeffs=psi, basis=new, log_scale=state.log_scale, t=state.t)


class _AdapterMD:
    def __init__(self, cfg: AgaConfig, sigma0):
        self.cfg = cfg
        self.rule = _projection_rule(cfg.projection_rule_nodes)
        self.last_sigma = np.array(sigma0, dtype=float)
        self.count = 0

    def __call__(self, state: FilterState, est: FilterEstimate, step: int):
        basis = state.basis
        var = np.asarray(est.variance)
        valid = np.isfinite(var) & (var > 0)
        self.last_sigma = np.where(valid, np.sqrt(np.where(valid, var, 1.0)), self.last_sigma)
        mu_b, s_b = np.array(basis.mu), np.array(basis.sigma)
        trigger = (
            np.any(~valid)
            or np.any(np.abs(est.mean - mu_b) > self.cfg.threshold_mu * s_b)
            or np.any(np.abs(self.last_sigma / s_b - 1.0) > self.cfg.threshold_sigma)
        )
        if not trigger:
            return None
        if self.count >= self.cfg.max_rebases:
            raise ConfigError(f"step {step}: more than max_rebases={self.cfg.max_rebases} rebases")
        self.count += 1
        try:
            return rebase_md(state, est.mean, self.last_sigma, self.rule)
        except RebaseError as exc:
            raise RebaseError(f"step {step}: {exc}") from exc


def initial_tensor_basis(spec: ModelSpec, n_per_dim: int) -> TensorBasisSpec:
    """Tensor basis located at the initial mean with per-axis initial standard deviations."""
    return TensorBasisSpec(spec.dim_x, n_per_dim, tuple(spec.mu0), tuple(np.sqrt(np.diag(spec.cov0))))


def run_filter_md(
    spec: ModelSpec,
    basis: TensorBasisSpec,
    method,
    bundle: PathBundle,
    q0_coeffs=None,
    *,
    adaptive: Optional[AgaConfig] = None,
    rule: Optional[QuadratureRule] = None,
    renormalize: bool = True,
) -> FilterResult:
    """Galerkin filter on a tensor basis; ``adaptive`` enables per-axis rebasing."""
    method = Method(method)
    if q0_coeffs is None:
        q0_coeffs = initial_coefficients_md(spec, basis)
    state = initial_state(spec, basis, q0_coeffs, renormalize)
    mats = assemble_md(spec, basis, rule)
    adapter = None
    if adaptive is not None and adaptive.enabled:
        adapter = _AdapterMD(adaptive, basis.sigma)
    return run_loop(
        state,
        mats,
        method,
        bundle,
        moments_md,
        adapt=adapter,
        reassemble=lambda b: assemble_md(spec, b, rule),
        renormalize=renormalize,
    )
