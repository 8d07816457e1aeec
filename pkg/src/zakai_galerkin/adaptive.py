"""
Adaptive Galerkin filter: relocate the Hermite basis when the filter drifts.

After each step the normalised mean and standard deviation are compared
with the location and scale of the current basis.  When either has moved
too far the basis is re-centred at the estimates and the coefficients are
re-projected, ``psi'_i = (sum_j psi_j e_j^old, e_i^new)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np

from .errors import ConfigError, RebaseError
from .galerkin import (
    FilterEstimate,
    FilterResult,
    FilterState,
    Method,
    _NegMass,
    assemble,
    conditional_moments,
    initial_state,
    run_loop,
)
from .hermite import BasisFamily, BasisSpec, basis_values
from .model import ModelSpec, PathBundle
from .numerics import QuadratureRule, gauss_hermite


@dataclass(frozen=True)
class AgaConfig:
    """Rebase thresholds.

    ``threshold_mu`` is measured in units of the current basis scale and
    ``threshold_sigma`` is relative.  Infinite thresholds disable rebasing.
    """

    threshold_mu: float = 0.25
    threshold_sigma: float = 0.25
    max_rebases: int = 100_000
    projection_rule_nodes: int = 200

    def __post_init__(self):
        if not (self.threshold_mu > 0 and self.threshold_sigma > 0):
            raise ConfigError("rebase thresholds must be positive")
        if int(self.max_rebases) != self.max_rebases or self.max_rebases < 0:
            raise ConfigError("max_rebases must be a nonnegative integer")
        if not 2 <= self.projection_rule_nodes <= 512:
            raise ConfigError("projection_rule_nodes must lie in 2..512")

    @property
    def enabled(self) -> bool:
        return math.isfinite(self.threshold_mu) or math.isfinite(self.threshold_sigma)

    @classmethod
    def disabled(cls) -> "AgaConfig":
        return cls(threshold_mu=math.inf, threshold_sigma=math.inf)


def should_rebase(est: FilterEstimate, basis: BasisSpec, cfg: AgaConfig) -> bool:
    """Whether the estimate has left the region the basis resolves well.

    A negative or non-finite variance always asks for a rebase (unless
    rebasing is disabled); the caller then substitutes the last valid scale.
    """
    if not cfg.enabled:
        return False
    var = est.variance
    if not (var >= 0 and math.isfinite(var)):
        return True
    if abs(est.mean - basis.mu) > cfg.threshold_mu * basis.sigma:
        return True
    return abs(math.sqrt(var) / basis.sigma - 1.0) > cfg.threshold_sigma


@lru_cache(maxsize=8)
def _projection_rule(m: int) -> QuadratureRule:
    return gauss_hermite(m)


def transfer_matrix(old: BasisSpec, new: BasisSpec, rule: QuadratureRule) -> np.ndarray:
    """``T[i, j] = (e_j^old, e_i^new)`` by quadrature centred on the new basis."""
    if old.family is not BasisFamily.HERMITE or new.family is not BasisFamily.HERMITE:
        raise ConfigError("rebasing needs Hermite bases")
    x = new.mu + new.sigma * rule.nodes
    w = new.sigma * rule.scaled_weights
    return (basis_values(new, x) * w[:, None]).T @ basis_values(old, x)


def rebase(state: FilterState, new_mu: float, new_sigma: float, rule: Optional[QuadratureRule] = None) -> FilterState:
    """Re-project the state onto the basis relocated to ``(new_mu, new_sigma)``.

    Raises :class:`RebaseError` when the new basis retains less than half
    of the L2 mass of the current approximation.
    """
    if not (new_sigma > 0 and math.isfinite(new_sigma)):
        raise RebaseError(f"new basis scale must be positive, got {new_sigma}")
    if not math.isfinite(new_mu):
        raise RebaseError(f"new basis location must be finite, got {new_mu}")
    rule = rule or _projection_rule(200)
    new = state.basis.moved(new_mu, new_sigma)
    psi = transfer_matrix(state.basis, new, rule) @ state.coeffs
    before = float(state.coeffs @ state.coeffs)
    after = float(psi @ psi)
    if not after >= 0.5 * before:
        raise RebaseError(
            f"rebasing to ({new_mu:.6g}, {new_sigma:.6g}) keeps only {after / before:.3%} of the L2 mass"
        )
    return FilterState(coeffs=psi, basis=new, log_scale=state.log_scale, t=state.t)


class _Adapter:
    """Rebase hook for the shared filter loop."""

    def __init__(self, cfg: AgaConfig, sigma0: float):
        self.cfg = cfg
        self.rule = _projection_rule(cfg.projection_rule_nodes)
        self.last_sigma = sigma0
        self.count = 0

    def __call__(self, state: FilterState, est: FilterEstimate, step: int) -> Optional[FilterState]:
        var = est.variance
        valid = var >= 0 and math.isfinite(var)
        if valid:
            sigma = math.sqrt(var)
            if sigma > 0:
                self.last_sigma = sigma
        if not should_rebase(est, state.basis, self.cfg):
            return None
        if self.count >= self.cfg.max_rebases:
            raise ConfigError(f"step {step}: more than max_rebases={self.cfg.max_rebases} rebases")
        sigma = math.sqrt(var) if valid and var > 0 else self.last_sigma
        try:
            moved = rebase(state, est.mean, sigma, self.rule)
        except RebaseError as exc:
            raise RebaseError(f"step {step}: {exc}") from exc
        self.count += 1
        return moved


def initial_basis(spec: ModelSpec, n: int) -> BasisSpec:
    """Hermite basis located at the mean and standard deviation of the initial law."""
    return BasisSpec(BasisFamily.HERMITE, n, float(spec.mu0[0]), math.sqrt(float(spec.cov0[0, 0])))


def run_aga(
    spec: ModelSpec,
    basis0: BasisSpec,
    method,
    bundle: PathBundle,
    cfg: AgaConfig = AgaConfig(),
    q0_coeffs=None,
    *,
    renormalize: bool = True,
    track_negative_mass: bool = True,
) -> FilterResult:
    """Adaptive Galerkin filter over one path; matrices are rebuilt only on rebase."""
    if basis0.family is not BasisFamily.HERMITE:
        raise ConfigError("the adaptive filter needs a Hermite basis")
    method = Method(method)
    state = initial_state(spec, basis0, q0_coeffs, renormalize)
    adapter = _Adapter(cfg, basis0.sigma)
    return run_loop(
        state,
        assemble(spec, basis0),
        method,
        bundle,
        conditional_moments,
        adapt=adapter if cfg.enabled else None,
        reassemble=lambda b: assemble(spec, b),
        neg_mass=_NegMass() if track_negative_mass else None,
        renormalize=renormalize,
    )
