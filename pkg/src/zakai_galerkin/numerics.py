"""Gauss-Hermite quadrature, dense matrix exponential and Gram-matrix solves."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import cho_factor, cho_solve, eigh_tridiagonal

from .errors import GramError
from .hermite import hermite_functions

MAX_NODES = 512


@dataclass(frozen=True)
class QuadratureRule:
    """Probabilists' Gauss-Hermite rule.

    ``sum(weights * f(nodes))`` approximates the integral of ``f`` against the
    standard normal density.  ``scaled_weights`` equal ``weights / phi(nodes)``
    and integrate against Lebesgue measure, computed without forming
    ``exp(nodes**2 / 2)`` so the outermost nodes of large rules stay finite.
    """

    nodes: np.ndarray
    weights: np.ndarray
    scaled_weights: np.ndarray
    normalization: str = "probabilists"

    @property
    def size(self) -> int:
        return self.nodes.size


@lru_cache(maxsize=64)
def gauss_hermite(m: int) -> QuadratureRule:
    """Golub-Welsch rule with ``m`` nodes for the standard normal weight."""
    if not 1 <= m <= MAX_NODES:
        raise ValueError(f"number of nodes must lie in 1..{MAX_NODES}, got {m}")
    if m == 1:
        nodes, weights = np.zeros(1), np.ones(1)
    else:
        # Jacobi matrix of the monic probabilists' recurrence: off-diagonal sqrt(k)
        nodes, vecs = eigh_tridiagonal(np.zeros(m), np.sqrt(np.arange(1.0, m)))
        weights = vecs[0, :] ** 2
        nodes = 0.5 * (nodes - nodes[::-1])
        weights = 0.5 * (weights + weights[::-1])
    # Christoffel numbers against Lebesgue measure: 1 / sum_i e_i(x_k)^2
    scaled = 1.0 / np.sum(hermite_functions(nodes, m) ** 2, axis=-1)
    for arr in (nodes, weights, scaled):
        arr.setflags(write=False)
    return QuadratureRule(nodes=nodes, weights=weights, scaled_weights=scaled)


def default_nodes(n: int) -> int:
    """Default rule size for a basis of size ``n`` (always even)."""
    m = max(2 * n + 40, 120)
    return min(m + (m % 2), MAX_NODES)


def integrate(F, rule: QuadratureRule, center: float = 0.0, scale: float = 1.0) -> float:
    """Integral of ``F`` over the real line after ``x = center + scale * y``.

        int F(x) dx = scale * sum_k scaled_weights[k] * F(center + scale * y_k)

    Exact whenever ``F(center + scale*y)`` is a polynomial of degree
    ``< 2m`` times ``exp(-y**2 / 2)``, which is the case for products of two
    basis functions adapted to (center, scale) times a polynomial.
    """
    if not scale > 0:
        raise ValueError("scale must be positive")
    x = center + scale * rule.nodes
    return float(scale * np.dot(rule.scaled_weights, F(x)))


def inner_product(f, g, rule: QuadratureRule, center: float = 0.0, scale: float = 1.0) -> float:
    """L2 inner product of two vectorised real functions by quadrature."""
    return integrate(lambda x: f(x) * g(x), rule, center, scale)


# Pade(13) coefficients and the backward-error threshold for scaling and squaring.
_PADE13 = (
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
)
_THETA13 = 5.371920351148152


def matrix_exp(M) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a degree-13 Pade approximant."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError("matrix_exp needs a square matrix")
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix_exp received non-finite entries")
    n = M.shape[0]
    if n == 0:
        return M.copy()
    norm = np.abs(M).sum(axis=0).max()
    s = 0
    if norm > _THETA13:
        s = int(math.ceil(math.log2(norm / _THETA13)))
        M = M / 2.0**s
    b = _PADE13
    ident = np.eye(n)
    M2 = M @ M
    M4 = M2 @ M2
    M6 = M4 @ M2
    U = M @ (M6 @ (b[13] * M6 + b[11] * M4 + b[9] * M2) + b[7] * M6 + b[5] * M4 + b[3] * M2 + b[1] * ident)
    V = M6 @ (b[12] * M6 + b[10] * M4 + b[8] * M2) + b[6] * M6 + b[4] * M4 + b[2] * M2 + b[0] * ident
    R = np.linalg.solve(V - U, V + U)
    for _ in range(s):
        R = R @ R
    return R


def solve_gram(D, V) -> tuple[np.ndarray, float]:
    """Solve ``D X = V`` for a symmetric positive definite Gram matrix.

    Returns ``(X, cond)`` where ``cond`` is the 2-norm condition number
    estimate from the Cholesky pivots.  Raises :class:`GramError` when the
    factorisation fails or the smallest pivot is at round-off level.
    """
    D = np.asarray(D, dtype=float)
    V = np.asarray(V, dtype=float)
    try:
        factor = cho_factor(D, lower=True, check_finite=True)
    except np.linalg.LinAlgError as exc:
        evals = np.linalg.eigvalsh(0.5 * (D + D.T))
        raise GramError(
            f"Cholesky factorisation failed ({exc}); smallest eigenvalue {evals[0]:.3e}",
            smallest_pivot=float(evals[0]),
        ) from exc
    pivots = np.diag(factor[0]) ** 2
    smallest, largest = float(pivots.min()), float(pivots.max())
    if smallest <= 1e3 * np.finfo(float).eps * largest:
        raise GramError(
            f"Gram matrix numerically singular: smallest pivot {smallest:.3e} vs largest {largest:.3e}",
            smallest_pivot=smallest,
        )
    X = cho_solve(factor, V)
    evals = np.linalg.eigvalsh(0.5 * (D + D.T))
    cond = float(evals[-1] / evals[0]) if evals[0] > 0 else math.inf
    return X, cond
