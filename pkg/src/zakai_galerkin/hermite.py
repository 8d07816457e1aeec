"""
Hermite polynomials and the orthonormal Hermite basis of L2(R).

The probabilists' polynomials ``f_i`` satisfy ``f_{i+1} = x f_i - i f_{i-1}``
and are orthogonal against the standard normal density ``phi``.  The basis
functions are

    e_i(x) = sqrt(phi(x) / (i-1)!) * f_{i-1}(x),      i = 1, 2, ...

and the adapted (relocated, rescaled) basis is

    e_i^{mu,s}(x) = s^{-1/2} e_i((x - mu) / s).

Polynomial coefficient tables are kept as exact Python integers; every
closed-form sum over them is carried out exactly and rounded once.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from enum import Enum
from fractions import Fraction
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DegreeOverflowError

MAX_DEGREE = 40
# second moments of e_n need polynomial degree n + 1
MAX_HERMITE_N = MAX_DEGREE - 1
MAX_GAUSSIAN_N = 60

_FOURTH_ROOT_2PI = (2.0 * math.pi) ** 0.25


class BasisFamily(str, Enum):
    HERMITE = "hermite"
    GAUSSIAN = "gaussian"


@dataclass(frozen=True)
class BasisSpec:
    """Size, family and placement of a one-dimensional basis.

    For the Gaussian family the ``n`` bumps are centred on an equispaced
    grid over ``[mu - 4 sigma, mu + 4 sigma]`` with common width equal to
    the grid spacing.
    """

    family: BasisFamily = BasisFamily.HERMITE
    n: int = 12
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "family", BasisFamily(self.family))
        if int(self.n) != self.n or self.n < 1:
            raise ConfigError(f"basis size must be a positive integer, got {self.n}")
        cap = MAX_HERMITE_N if self.family is BasisFamily.HERMITE else MAX_GAUSSIAN_N
        if self.n > cap:
            raise ConfigError(f"{self.family.value} basis size is capped at {cap}, got {self.n}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ConfigError(f"basis scale must be positive, got {self.sigma}")
        if not math.isfinite(self.mu):
            raise ConfigError(f"basis location must be finite, got {self.mu}")

    @property
    def orthonormal(self) -> bool:
        return self.family is BasisFamily.HERMITE

    def moved(self, mu: float, sigma: float) -> "BasisSpec":
        return replace(self, mu=float(mu), sigma=float(sigma))

    def gaussian_layout(self) -> tuple[np.ndarray, float]:
        """Centres and common width of the Gaussian-bump family."""
        if self.n == 1:
            return np.array([self.mu]), self.sigma
        centres = np.linspace(self.mu - 4 * self.sigma, self.mu + 4 * self.sigma, self.n)
        return centres, float(centres[1] - centres[0])


@dataclass(frozen=True)
class HermiteCoeffTable:
    """Exact coefficient tables up to ``max_degree``.

    ``theta[i][k]`` is the coefficient of ``x**k`` in ``f_i``;
    ``iota[i][k]`` is the coefficient of ``f_k`` in ``x**i``.
    """

    max_degree: int
    theta: tuple
    iota: tuple

    def theta_array(self) -> np.ndarray:
        out = np.zeros((self.max_degree + 1, self.max_degree + 1))
        for i, row in enumerate(self.theta):
            out[i, : len(row)] = [float(v) for v in row]
        return out

    def iota_array(self) -> np.ndarray:
        out = np.zeros((self.max_degree + 1, self.max_degree + 1))
        for i, row in enumerate(self.iota):
            out[i, : len(row)] = [float(v) for v in row]
        return out


@lru_cache(maxsize=None)
def build_coeff_table(max_degree: int = MAX_DEGREE) -> HermiteCoeffTable:
    if max_degree < 0:
        raise ValueError("max_degree must be nonnegative")
    if max_degree > MAX_DEGREE:
        raise DegreeOverflowError(
            f"degree {max_degree} exceeds the supported maximum {MAX_DEGREE}"
        )
    theta = [[1]]
    if max_degree >= 1:
        theta.append([0, 1])
    for i in range(1, max_degree):
        # f_{i+1} = x f_i - i f_{i-1}
        nxt = [0] + theta[i]
        for k, c in enumerate(theta[i - 1]):
            nxt[k] -= i * c
        theta.append(nxt)

    iota = [[1]]
    for i in range(max_degree):
        # x * f_k = f_{k+1} + k f_{k-1}
        cur = iota[i]
        nxt = [0] * (i + 2)
        for k, c in enumerate(cur):
            if c == 0:
                continue
            nxt[k + 1] += c
            if k >= 1:
                nxt[k - 1] += k * c
        iota.append(nxt)
    return HermiteCoeffTable(
        max_degree=max_degree,
        theta=tuple(tuple(r) for r in theta),
        iota=tuple(tuple(r) for r in iota),
    )


def hermite_functions(y, n: int) -> np.ndarray:
    """Standard basis values ``e_1..e_n`` at ``y``; shape ``y.shape + (n,)``.

    Uses the three-term recurrence for the normalised functions, which stays
    bounded where the polynomial form would overflow.
    """
    y = np.asarray(y, dtype=float)
    out = np.empty(y.shape + (n,))
    out[..., 0] = np.exp(-0.25 * y * y) / _FOURTH_ROOT_2PI
    if n > 1:
        out[..., 1] = y * out[..., 0]
    for k in range(2, n):
        out[..., k] = (y * out[..., k - 1] - math.sqrt(k - 1) * out[..., k - 2]) / math.sqrt(k)
    return out


def _hermite_derivatives(vals: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """First and second derivatives of e_1..e_n from values of e_1..e_{n+2}.

    e_i'  = (sqrt(i-1) e_{i-1} - sqrt(i) e_{i+1}) / 2
    e_i'' = (sqrt((i-1)(i-2)) e_{i-2} + (1-2i) e_i + sqrt(i(i+1)) e_{i+2}) / 4
    """
    padded = np.concatenate([np.zeros(vals.shape[:-1] + (2,)), vals], axis=-1)
    i = np.arange(1, n + 1, dtype=float)
    em1 = padded[..., 1 : n + 1]
    ep1 = padded[..., 3 : n + 3]
    em2 = padded[..., 0:n]
    e0 = padded[..., 2 : n + 2]
    ep2 = padded[..., 4 : n + 4]
    d1 = 0.5 * (np.sqrt(i - 1) * em1 - np.sqrt(i) * ep1)
    d2 = 0.25 * (np.sqrt((i - 1) * (i - 2)) * em2 + (1 - 2 * i) * e0 + np.sqrt(i * (i + 1)) * ep2)
    return d1, d2


def basis_values(basis: BasisSpec, x, derivatives: int = 0):
    """Evaluate all basis functions (and optionally x-derivatives) at ``x``.

    Returns an array of shape ``x.shape + (n,)``, or a tuple
    ``(values, first, second)`` when ``derivatives == 2``.
    """
    x = np.asarray(x, dtype=float)
    n = basis.n
    if basis.family is BasisFamily.HERMITE:
        s = basis.sigma
        y = (x - basis.mu) / s
        if derivatives == 0:
            return hermite_functions(y, n) / math.sqrt(s)
        raw = hermite_functions(y, n + 2)
        d1, d2 = _hermite_derivatives(raw, n)
        return raw[..., :n] / math.sqrt(s), d1 / s**1.5, d2 / s**2.5

    centres, w = basis.gaussian_layout()
    u = x[..., None] - centres
    g = (math.pi * w * w) ** -0.25 * np.exp(-0.5 * u * u / (w * w))
    if derivatives == 0:
        return g
    return g, -u / (w * w) * g, (u * u / w**4 - 1.0 / (w * w)) * g


def basis_eval(spec: BasisSpec, i: int, x):
    """Value of the ``i``-th (1-based) basis function of ``spec`` at ``x``."""
    if not 1 <= i <= spec.n:
        raise IndexError(f"basis index {i} outside 1..{spec.n}")
    return basis_values(spec, x)[..., i - 1]


def moment_weight(table: HermiteCoeffTable, j: int, i: int) -> float:
    """Closed-form integral of ``x**j * e_i(x)`` over the real line.

    (x^j, e_i) = sqrt(2) 2^{j/2} (2 pi)^{1/4} / sqrt((i-1)!)
                 * sum_k theta^{i-1}_k 2^{k/2} iota^{k+j}_0

    The 2^{j/2} factor comes from substituting x = sqrt(2) y in x^j.
    """
    if j < 0 or i < 1:
        raise ValueError("need j >= 0 and i >= 1")
    deg = i - 1
    if deg + j > table.max_degree:
        raise DegreeOverflowError(
            f"moment (x^{j}, e_{i}) needs degree {deg + j} > table degree {table.max_degree}"
        )
    # Only k with k + j even survive (odd Gaussian moments vanish), so 2^{k/2}
    # splits into an integer power of two and one shared sqrt(2) when j is odd.
    total = 0
    for k in range(j % 2, deg + 1, 2):
        th = table.theta[deg][k]
        if th:
            total += th * 2 ** (k // 2) * table.iota[k + j][0]
    factor = math.sqrt(2.0) * 2.0 ** (j / 2) * _FOURTH_ROOT_2PI / math.sqrt(math.factorial(deg))
    if j % 2:
        factor *= math.sqrt(2.0)
    return factor * float(total)


def standard_moment_weights(table: HermiteCoeffTable, n: int, j_max: int = 2) -> np.ndarray:
    """Array ``W[j, i-1] = (x^j, e_i)`` for the unadapted basis."""
    return np.array([[moment_weight(table, j, i) for i in range(1, n + 1)] for j in range(j_max + 1)])


@lru_cache(maxsize=256)
def _moment_weights_cached(basis: BasisSpec, j_max: int) -> np.ndarray:
    if basis.family is BasisFamily.GAUSSIAN:
        centres, w = basis.gaussian_layout()
        mass = (math.pi * w * w) ** -0.25 * math.sqrt(2 * math.pi) * w * np.ones_like(centres)
        rows = [mass, centres * mass, (centres**2 + w * w) * mass]
        if j_max > 2:
            raise ValueError("Gaussian family supports moments up to order 2")
        out = np.array(rows[: j_max + 1])
        out.setflags(write=False)
        return out

    table = build_coeff_table(MAX_DEGREE)
    std = standard_moment_weights(table, basis.n, j_max)
    mu, s = basis.mu, basis.sigma
    # (x^j, e_i^{mu,s}) = sqrt(s) * sum_r C(j,r) mu^{j-r} s^r (y^r, e_i)
    out = np.zeros_like(std)
    for j in range(j_max + 1):
        for r in range(j + 1):
            out[j] += math.comb(j, r) * mu ** (j - r) * s**r * std[r]
    out = out * math.sqrt(s)
    out.setflags(write=False)
    return out


def moment_weights(basis: BasisSpec, j_max: int = 2) -> np.ndarray:
    """``W[j, i-1] = (x^j, e_i)`` for the (possibly adapted) basis."""
    return _moment_weights_cached(basis, j_max)


def project_gaussian(table: HermiteCoeffTable, mu0: float, var0: float, n: int) -> np.ndarray:
    """Closed-form coefficients ``(q0, e_j)``, j = 1..n, of the N(mu0, var0) density.

    Completing the square in the exponent,

        (x - mu0)^2 / (2 var0) + x^2 / 4 = (x - a)^2 / (2 b^2) - d,

    gives b^2 = 2 var0 / (2 + var0), a = 2 mu0 / (2 + var0) and
    d = -mu0^2 / (2 (2 + var0)).  After x = a + b y the remaining integral is
    b sqrt(2 pi) E[f_{j-1}(a + b Y)], Y standard normal, so

        (q0, e_j) = (b / sqrt(var0)) (2 pi)^{-1/4} e^d E[f_{j-1}(a + bY)] / sqrt((j-1)!)

    with E[f_k(a + bY)] = sum_m sum_{k'>=m} theta^k_{k'} C(k', m) a^{k'-m} b^m iota^m_0.
    """
    if not var0 > 0:
        raise ValueError(f"variance must be positive, got {var0}")
    if n - 1 > table.max_degree:
        raise DegreeOverflowError(f"projection size {n} exceeds table degree {table.max_degree}")
    b2 = 2.0 * var0 / (2.0 + var0)
    a = 2.0 * mu0 / (2.0 + var0)
    d = -(mu0**2) / (2.0 * (2.0 + var0))
    fa, fb2 = Fraction(a), Fraction(b2)
    a_pow = [Fraction(1)]
    for _ in range(n):
        a_pow.append(a_pow[-1] * fa)
    # iota^m_0 vanishes for odd m, so b only enters through b^2.
    even_terms = [fb2 ** (m // 2) * table.iota[m][0] for m in range(0, n, 2)]
    vals = np.empty(n)
    for j in range(1, n + 1):
        deg = j - 1
        acc = Fraction(0)
        for k in range(deg + 1):
            th = table.theta[deg][k]
            if not th:
                continue
            for m in range(0, k + 1, 2):
                acc += th * math.comb(k, m) * a_pow[k - m] * even_terms[m // 2]
        vals[j - 1] = float(acc) / math.sqrt(math.factorial(deg))
    return math.sqrt(b2 / var0) / _FOURTH_ROOT_2PI * math.exp(d) * vals


def project_gaussian_adapted(basis: BasisSpec, mu0: float, var0: float) -> np.ndarray:
    """Coefficients of the N(mu0, var0) density against an adapted Hermite basis."""
    s = basis.sigma
    # q0(mu + s y) = N(y; (mu0 - mu)/s, var0/s^2) / s and dx = s dy
    table = build_coeff_table(MAX_DEGREE)
    return project_gaussian(table, (mu0 - basis.mu) / s, var0 / s**2, basis.n) / math.sqrt(s)


def project_gaussian_bumps(basis: BasisSpec, mu0: float, var0: float) -> np.ndarray:
    """Inner products of the N(mu0, var0) density with Gaussian-family bumps."""
    centres, w = basis.gaussian_layout()
    tot = var0 + w * w
    # integral of N(x; mu0, var0) * exp(-(x-c)^2 / (2 w^2)) = w / sqrt(tot) * exp(-(c-mu0)^2 / (2 tot))
    return (math.pi * w * w) ** -0.25 * w / math.sqrt(tot) * np.exp(-0.5 * (centres - mu0) ** 2 / tot)


def project_initial(basis: BasisSpec, mu0: float, var0: float) -> np.ndarray:
    """Inner products ``(q0, e_i)`` of a Gaussian initial law with any 1-d basis."""
    if basis.family is BasisFamily.HERMITE:
        return project_gaussian_adapted(basis, mu0, var0)
    return project_gaussian_bumps(basis, mu0, var0)


@lru_cache(maxsize=64)
def hermite_operators(n: int) -> dict:
    """Exact Galerkin matrices of elementary operators in the standard basis.

    Entry ``[j, i]`` (0-based) of each matrix is ``(e_i, op e_j)``, obtained
    from the recurrences ``y e_j = sqrt(j-1) e_{j-1} + sqrt(j) e_{j+1}`` and
    their derivative counterparts.  Keys: ``"y"``, ``"y2"``, ``"d1"``,
    ``"yd1"`` (y times derivative) and ``"d2"``.
    """
    j = np.arange(1, n + 1, dtype=float)
    up1 = np.sqrt(j[:-1])            # coefficient linking e_j to e_{j+1}
    up2 = np.sqrt(j[:-2] * (j[:-2] + 1))  # linking e_j to e_{j+2}
    y = np.diag(up1, 1) + np.diag(up1, -1)
    y2 = np.diag(2 * j - 1) + np.diag(up2, 2) + np.diag(up2, -2)
    d1 = 0.5 * (np.diag(up1, -1) - np.diag(up1, 1))
    yd1 = 0.5 * (np.diag(up2, -2) - np.eye(n) - np.diag(up2, 2))
    d2 = 0.25 * (np.diag(up2, -2) + np.diag(1 - 2 * j) + np.diag(up2, 2))
    ops = {"y": y, "y2": y2, "d1": d1, "yd1": yd1, "d2": d2}
    for mat in ops.values():
        mat.setflags(write=False)
    return ops
