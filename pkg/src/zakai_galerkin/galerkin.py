"""
Galerkin projection of the Zakai equation and time stepping of its coefficients.

With basis functions ``e_1..e_n`` the projected unnormalised density is
``q(x) = sum_i psi_i e_i(x)`` and the coefficient vector solves

    dPsi = D^{-1} ((A - C) Psi dt + sum_l B^l Psi dZ^l + C Psi dN)

where, with row index ``j`` and column index ``i``,

    A[j, i] = (e_i, L e_j),   B^l[j, i] = (e_i, h_l e_j),
    C[j, i] = (e_i, (lambda - 1) e_j),   D[j, i] = (e_i, e_j)

and ``L`` is the generator of the signal.
"""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, DegenerateStateError, FilterDivergenceError, QuadratureError
from .hermite import (
    BasisFamily,
    BasisSpec,
    HermiteCoeffTable,
    basis_values,
    hermite_operators,
    moment_weights,
    project_initial,
)
from .model import LinearModelParams, ModelSpec, PathBundle
from .numerics import QuadratureRule, default_nodes, gauss_hermite, matrix_exp, solve_gram


class Method(str, Enum):
    EM = "em"
    SU = "su"


@dataclass(eq=False)
class CoefficientMatrices:
    A: np.ndarray
    B: tuple
    C: np.ndarray
    D: np.ndarray
    basis: object

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def orthonormal(self) -> bool:
        return bool(getattr(self.basis, "orthonormal", True))

    def _solve(self, M):
        if self.orthonormal:
            return M
        return solve_gram(self.D, M)[0]

    @cached_property
    def drift_op(self) -> np.ndarray:
        """``D^{-1} (A - C)``."""
        return self._solve(self.A - self.C)

    @cached_property
    def obs_ops(self) -> tuple:
        return tuple(self._solve(B) for B in self.B)

    @cached_property
    def jump_op(self) -> np.ndarray:
        return self._solve(self.C)

    @cached_property
    def obs_squares(self) -> tuple:
        return tuple(B @ B for B in self.B)

    @cached_property
    def gram_condition(self) -> float:
        if self.orthonormal:
            return 1.0
        return solve_gram(self.D, np.eye(self.n))[1]


@dataclass(frozen=True)
class FilterState:
    """Fourier coefficients plus the log of the normalisation folded out of them."""

    coeffs: np.ndarray
    basis: object
    log_scale: float = 0.0
    t: float = 0.0


@dataclass(frozen=True)
class FilterEstimate:
    mean: object
    variance: object
    t: float


# --------------------------------------------------------------------------
# assembly


def kalman_matrices(n: int, p: LinearModelParams, basis: Optional[BasisSpec] = None) -> CoefficientMatrices:
    """Closed-form matrices for the linear model in a (possibly adapted) Hermite basis.

    With ``x = mu + s y`` and ``L f = b x f' + sigma^2/2 f''``:

        A = (b mu / s) D1 + b YD1 + sigma^2 / (2 s^2) D2
        B = h (mu I + s Y)
        C = lam (mu^2 I + 2 mu s Y + s^2 Y2) - I

    For ``mu = 0, s = 1`` these are the familiar banded forms, e.g.
    ``a_jj = -b/2 + sigma^2 (1 - 2j) / 8`` and ``c_jj = lam (2j - 1) - 1``.
    """
    if n < 1:
        raise ConfigError("basis size must be at least 1")
    if basis is None:
        basis = BasisSpec(BasisFamily.HERMITE, n)
    elif basis.family is not BasisFamily.HERMITE or basis.n != n:
        raise ConfigError("closed-form matrices need a Hermite basis of matching size")
    ops = hermite_operators(n)
    mu, s = basis.mu, basis.sigma
    ident = np.eye(n)
    A = (p.b * mu / s) * ops["d1"] + p.b * ops["yd1"] + (p.sigma**2 / (2 * s * s)) * ops["d2"]
    B = p.h * (mu * ident + s * ops["y"])
    C = p.lam * (mu * mu * ident + 2 * mu * s * ops["y"] + s * s * ops["y2"]) - ident
    return CoefficientMatrices(A=A, B=(B,), C=C, D=ident.copy(), basis=basis)


def _gaussian_grid(basis: BasisSpec) -> tuple[np.ndarray, np.ndarray]:
    centres, w = basis.gaussian_layout()
    h = w / 12.0
    lo, hi = centres[0] - 10 * w, centres[-1] + 10 * w
    x = np.arange(lo, hi + h, h)
    return x, np.full(x.shape, h)


def assemble_quadrature(
    spec: ModelSpec, basis: BasisSpec, rule: Optional[QuadratureRule] = None
) -> CoefficientMatrices:
    """Matrices of the projected equation by numerical integration.

    Hermite bases use the Gauss-Hermite ``rule`` placed at the basis
    location and scale.  Gaussian-bump bases are integrated with a fine
    uniform trapezoidal grid instead, since their narrow products are not
    resolved by a single Gauss-Hermite rule.
    """
    if spec.dim_x != 1:
        raise ConfigError("assemble_quadrature handles one-dimensional signals; use multidim")
    if basis.family is BasisFamily.HERMITE:
        rule = rule or gauss_hermite(default_nodes(basis.n))
        x = basis.mu + basis.sigma * rule.nodes
        w = basis.sigma * rule.scaled_weights
    else:
        x, w = _gaussian_grid(basis)
    V, V1, V2 = basis_values(basis, x, derivatives=2)
    X = x[:, None]
    drift = spec.drift(X)[:, 0]
    diff = spec.diffusion(X)
    a = np.einsum("pm,pm->p", diff[:, 0, :], diff[:, 0, :])
    G = drift[:, None] * V1 + 0.5 * a[:, None] * V2
    Vw = V * w[:, None]
    A = G.T @ Vw
    obs = spec.obs_fn(X)
    Bs = tuple((V * obs[:, l : l + 1]).T @ Vw for l in range(spec.dim_z))
    lam = spec.intensity(X)
    C = (V * (lam - 1.0)[:, None]).T @ Vw
    D = V.T @ Vw
    diag = np.diag(D)
    if np.any(diag < 0.5):
        bad = int(np.argmin(diag)) + 1
        raise QuadratureError(
            f"quadrature misses basis function {bad}: integral of its square is {diag[bad - 1]:.3e}"
        )
    return CoefficientMatrices(A=A, B=Bs, C=C, D=D, basis=basis)


def assemble(spec: ModelSpec, basis: BasisSpec, rule: Optional[QuadratureRule] = None) -> CoefficientMatrices:
    """Closed forms for the linear model in a Hermite basis, quadrature otherwise."""
    if spec.linear is not None and basis.family is BasisFamily.HERMITE and rule is None:
        return kalman_matrices(basis.n, spec.linear, basis)
    return assemble_quadrature(spec, basis, rule)


# --------------------------------------------------------------------------
# stepping


def _finish(state: FilterState, psi: np.ndarray, dt: float, renormalize: bool) -> FilterState:
    if not np.all(np.isfinite(psi)):
        raise FilterDivergenceError(f"non-finite coefficients at t={state.t + dt:.6g}", t=state.t + dt)
    log_scale = state.log_scale
    if renormalize:
        norm = float(np.sqrt(psi @ psi))
        if norm == 0.0:
            raise FilterDivergenceError(f"coefficients collapsed to zero at t={state.t + dt:.6g}", t=state.t + dt)
        psi = psi / norm
        log_scale += math.log(norm)
    return FilterState(coeffs=psi, basis=state.basis, log_scale=log_scale, t=state.t + dt)


def em_step(state: FilterState, mats: CoefficientMatrices, dz, dn: int, dt: float, renormalize: bool = True) -> FilterState:
    """One Euler-Maruyama step driven by the counting process itself."""
    if dt < 0:
        raise ConfigError("dt must be nonnegative")
    psi = state.coeffs
    dz = np.atleast_1d(dz)
    incr = (mats.drift_op @ psi) * dt
    for op, z in zip(mats.obs_ops, dz):
        incr = incr + (op @ psi) * z
    if dn:
        incr = incr + (mats.jump_op @ psi) * dn
    return _finish(state, psi + incr, dt, renormalize)


def su_precompute(mats: CoefficientMatrices, dt: float) -> np.ndarray:
    return matrix_exp((mats.A - mats.C) * dt)


def su_step(
    state: FilterState,
    mats: CoefficientMatrices,
    precomp: np.ndarray,
    dz,
    dn: int,
    dt: float,
    renormalize: bool = True,
) -> FilterState:
    """Splitting-up step: deterministic semigroup, diffusive update, then jumps.

    Stages: ``exp((A - C) dt)``, then ``exp(sum_l (B^l dz_l - (B^l)^2 dt / 2))``,
    then ``(I + C)^dn``.  Needs an orthonormal basis (``D = I``).
    """
    if not mats.orthonormal:
        raise ConfigError("the splitting-up stepper needs an orthonormal basis")
    psi = precomp @ state.coeffs
    dz = np.atleast_1d(dz)
    G = np.zeros_like(mats.A)
    for B, B2, z in zip(mats.B, mats.obs_squares, dz):
        G += B * z - 0.5 * dt * B2
    psi = matrix_exp(G) @ psi
    for _ in range(int(dn)):
        psi = psi + mats.C @ psi
    return _finish(state, psi, dt, renormalize)


# --------------------------------------------------------------------------
# estimates


def _normalizer(psi: np.ndarray, w0: np.ndarray) -> float:
    z = float(psi @ w0)
    if abs(z) <= 1e-12 * float(np.sqrt(psi @ psi)):
        raise DegenerateStateError("normalising integral of the approximate density vanished")
    return z


def conditional_moments(state: FilterState, table: Optional[HermiteCoeffTable] = None) -> FilterEstimate:
    """Normalised conditional mean and variance of a 1-d filter state.

    ``table`` is accepted for symmetry with the closed-form moment weights;
    the weights of each basis are cached internally.
    """
    W = moment_weights(state.basis, 2)
    psi = state.coeffs
    z = _normalizer(psi, W[0])
    mean = float(psi @ W[1]) / z
    second = float(psi @ W[2]) / z
    return FilterEstimate(mean=mean, variance=second - mean * mean, t=state.t)


def density_eval(state: FilterState, x, clamp: bool = False):
    """Normalised approximate density ``sum_i psi_i e_i(x) / sum_i psi_i (1, e_i)``.

    Values can be negative; ``clamp=True`` sets them to zero (the result
    is then no longer exactly normalised).
    """
    W = moment_weights(state.basis, 0)
    z = _normalizer(state.coeffs, W[0])
    p = basis_values(state.basis, x) @ state.coeffs / z
    return np.maximum(p, 0.0) if clamp else p


class _NegMass:
    """Fraction of absolute mass carried by the negative part of the density."""

    def __init__(self):
        self._basis = None

    def __call__(self, state: FilterState) -> float:
        basis = state.basis
        if basis is not self._basis:
            self._basis = basis
            if basis.family is BasisFamily.HERMITE:
                rule = gauss_hermite(default_nodes(basis.n))
                x = basis.mu + basis.sigma * rule.nodes
                w = basis.sigma * rule.scaled_weights
            else:
                x, w = _gaussian_grid(basis)
            self._V = basis_values(basis, x) * w[:, None]
        q = self._V @ state.coeffs  # weighted values
        total = float(np.abs(q).sum())
        if total == 0.0:
            return 0.0
        z = float(q.sum())
        neg = float(-q[q * np.sign(z) < 0].sum() * np.sign(z))
        return neg / total


def negative_mass_fraction(state: FilterState) -> float:
    return _NegMass()(state)


def initial_coefficients(spec: ModelSpec, basis: BasisSpec) -> np.ndarray:
    """``D^{-1} (q0, e_i)`` for the Gaussian initial law of a scalar model."""
    q = project_initial(basis, float(spec.mu0[0]), float(spec.cov0[0, 0]))
    if basis.orthonormal:
        return q
    x, w = _gaussian_grid(basis)
    V = basis_values(basis, x)
    return solve_gram(V.T @ (V * w[:, None]), q)[0]


def initial_state(spec: ModelSpec, basis, q0_coeffs=None, renormalize: bool = True) -> FilterState:
    """Filter state at t=0 from given coefficients or the model's initial law."""
    if q0_coeffs is None:
        q0_coeffs = initial_coefficients(spec, basis)
    q0 = np.asarray(q0_coeffs, dtype=float)
    if q0.shape != (basis.n,):
        raise ConfigError(f"initial coefficients must have length {basis.n}")
    state = FilterState(coeffs=q0, basis=basis)
    if renormalize:
        state = _finish(state, q0, 0.0, True)
    return state


# --------------------------------------------------------------------------
# driver


@dataclass
class FilterResult:
    """Per-grid-point output of a filter run (row 0 is the initial state)."""

    t: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    log_scale: np.ndarray
    neg_mass_fraction: np.ndarray
    rebased: np.ndarray
    mu_basis: np.ndarray
    sigma_basis: np.ndarray
    final_state: Optional[FilterState] = None
    wall_time: float = 0.0

    def __len__(self):
        return len(self.t)

    @property
    def n_rebases(self) -> int:
        return int(self.rebased.sum())

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.clip(self.variance, 0.0, None))

    def estimates(self) -> list[FilterEstimate]:
        return [FilterEstimate(m, v, float(t)) for t, m, v in zip(self.t, self.mean, self.variance)]

    def to_csv_string(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        multi = self.mean.ndim == 2
        if multi:
            d = self.mean.shape[1]
            w.writerow(
                ["t"] + [f"mean_{i + 1}" for i in range(d)] + [f"var_{i + 1}" for i in range(d)]
                + ["log_scale", "neg_mass_fraction", "rebased"]
            )
        else:
            w.writerow(["t", "mean", "variance", "log_scale", "neg_mass_fraction", "rebased", "mu_basis", "sigma_basis"])
        for k in range(len(self.t)):
            if multi:
                row = [self.t[k], *self.mean[k], *self.variance[k], self.log_scale[k], self.neg_mass_fraction[k]]
                w.writerow([f"{v:.17g}" for v in row] + [int(self.rebased[k])])
            else:
                head = [self.t[k], self.mean[k], self.variance[k], self.log_scale[k], self.neg_mass_fraction[k]]
                w.writerow(
                    [f"{v:.17g}" for v in head]
                    + [int(self.rebased[k]), f"{self.mu_basis[k]:.17g}", f"{self.sigma_basis[k]:.17g}"]
                )
        return buf.getvalue()

    def to_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_string())


def run_loop(
    state: FilterState,
    mats: CoefficientMatrices,
    method,
    bundle: PathBundle,
    estimate: Callable[[FilterState], FilterEstimate],
    adapt: Optional[Callable] = None,
    reassemble: Optional[Callable] = None,
    neg_mass: Optional[Callable[[FilterState], float]] = None,
    renormalize: bool = True,
) -> FilterResult:
    """Shared time loop for fixed and adaptive, 1-d and tensor bases.

    ``adapt(state, estimate)`` returns a relocated state or ``None``;
    ``reassemble(basis)`` returns the matrices for a new basis.
    """
    method = Method(method)
    dt, K = bundle.dt, bundle.steps
    precomp = su_precompute(mats, dt) if method is Method.SU else None
    est = estimate(state)
    means, variances = [est.mean], [est.variance]
    logs = [state.log_scale]
    negs = [neg_mass(state) if neg_mass else math.nan]
    rebased = [0]
    locs = [(state.basis.mu, state.basis.sigma)]
    t0 = time.perf_counter()
    for k in range(K):
        try:
            if method is Method.EM:
                state = em_step(state, mats, bundle.dz[k], int(bundle.dn[k]), dt, renormalize)
            else:
                state = su_step(state, mats, precomp, bundle.dz[k], int(bundle.dn[k]), dt, renormalize)
            est = estimate(state)
        except FilterDivergenceError as exc:
            raise FilterDivergenceError(f"step {k + 1}: {exc}", t=state.t + dt, step=k + 1) from exc
        except DegenerateStateError as exc:
            raise FilterDivergenceError(
                f"step {k + 1}: degenerate state at t={state.t:.6g}: {exc}", t=state.t, step=k + 1
            ) from exc
        means.append(est.mean)
        variances.append(est.variance)
        logs.append(state.log_scale)
        negs.append(neg_mass(state) if neg_mass else math.nan)
        flag = 0
        if adapt is not None:
            moved = adapt(state, est, k + 1)
            if moved is not None:
                state = moved
                mats = reassemble(state.basis)
                if method is Method.SU:
                    precomp = su_precompute(mats, dt)
                flag = 1
        rebased.append(flag)
        locs.append((state.basis.mu, state.basis.sigma))
    wall = time.perf_counter() - t0
    mus = np.array([l[0] for l in locs], dtype=float)
    sigmas = np.array([l[1] for l in locs], dtype=float)
    return FilterResult(
        t=bundle.times,
        mean=np.array(means, dtype=float),
        variance=np.array(variances, dtype=float),
        log_scale=np.array(logs),
        neg_mass_fraction=np.array(negs),
        rebased=np.array(rebased, dtype=np.int8),
        mu_basis=mus,
        sigma_basis=sigmas,
        final_state=state,
        wall_time=wall,
    )


def run_filter(
    spec: ModelSpec,
    basis: BasisSpec,
    method,
    bundle: PathBundle,
    q0_coeffs: Optional[np.ndarray] = None,
    *,
    rule: Optional[QuadratureRule] = None,
    mats: Optional[CoefficientMatrices] = None,
    renormalize: bool = True,
    track_negative_mass: bool = True,
) -> FilterResult:
    """Fixed-basis Galerkin filter over one observation path."""
    if Method(method) is Method.SU and not basis.orthonormal:
        raise ConfigError("the splitting-up stepper needs an orthonormal (Hermite) basis")
    mats = mats or assemble(spec, basis, rule)
    state = initial_state(spec, basis, q0_coeffs, renormalize)
    return run_loop(
        state,
        mats,
        method,
        bundle,
        conditional_moments,
        neg_mass=_NegMass() if track_negative_mass else None,
        renormalize=renormalize,
    )
