"""
Signal/observation model and forward simulation.

The hidden signal solves ``dX = b(X) dt + sigma(X) dV`` on R^d.  It is seen
through a diffusive channel ``dZ = h(X) dt + dW`` in R^l and a Cox process
``N`` with intensity ``lambda(X_t)``.

All model callables are vectorised: they take an array of shape ``(P, d)``
and return ``(P, d)`` (drift), ``(P, d, m)`` (diffusion), ``(P, l)``
(observation function) and ``(P,)`` (intensity).
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError

logger = logging.getLogger(__name__)

LAMBDA_MIN_DEFAULT = 1e-6
LAMBDA_MAX_DEFAULT = 1e4


@dataclass(frozen=True)
class LinearModelParams:
    """Scalar Ornstein-Uhlenbeck signal with ``h(x) = h x`` and ``lambda(x) = lam x^2``.

    ``lam = 0`` switches the point-process channel off entirely.
    """

    b: float = 0.5
    sigma: float = 2.0
    h: float = 5.5
    lam: float = 10.0
    mu0: float = 5.0
    var0: float = 0.01

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {self.lam}")
        if not self.var0 > 0:
            raise ConfigError(f"var0 must be positive, got {self.var0}")


@dataclass(frozen=True, eq=False)
class LinearMDParams:
    """Linear signal in R^d with linear observations and quadratic intensity.

    ``dX = drift X dt + diffusion dV``, ``h(x) = obs x`` and
    ``lambda(x) = intensity_const + sum_k intensity_weights[k] * x_k**2``.
    An all-zero intensity (weights and constant) disables the point process.
    """

    drift: np.ndarray
    diffusion: np.ndarray
    obs: np.ndarray
    intensity_weights: np.ndarray
    mu0: np.ndarray
    cov0: np.ndarray
    intensity_const: float = 0.0

    def __post_init__(self):
        for name in ("drift", "diffusion", "obs", "intensity_weights", "mu0", "cov0"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), dtype=float)))
        d = self.mu0.size
        if self.drift.shape != (d, d):
            raise ConfigError(f"drift matrix must be {d}x{d}")
        if self.diffusion.ndim != 2 or self.diffusion.shape[0] != d:
            raise ConfigError(f"diffusion matrix must have {d} rows")
        if self.obs.ndim != 2 or self.obs.shape[1] != d:
            raise ConfigError(f"observation matrix must have {d} columns")
        if self.intensity_weights.shape != (d,) or np.any(self.intensity_weights < 0):
            raise ConfigError("intensity weights must be a nonnegative vector of length d")
        if self.cov0.shape != (d, d):
            raise ConfigError(f"cov0 must be {d}x{d}")

    @property
    def dim(self) -> int:
        return self.mu0.size

    @property
    def point_process(self) -> bool:
        return bool(np.any(self.intensity_weights > 0) or self.intensity_const > 0)


@dataclass(frozen=True, eq=False)
class ModelSpec:
    dim_x: int
    dim_z: int
    dim_w: int
    drift: Callable[[np.ndarray], np.ndarray]
    diffusion: Callable[[np.ndarray], np.ndarray]
    obs_fn: Callable[[np.ndarray], np.ndarray]
    intensity_fn: Optional[Callable[[np.ndarray], np.ndarray]]
    mu0: np.ndarray
    cov0: np.ndarray
    lambda_min: float = LAMBDA_MIN_DEFAULT
    lambda_max: float = LAMBDA_MAX_DEFAULT
    linear: Optional[LinearModelParams] = None
    linear_md: Optional[LinearMDParams] = None
    _warned: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        cov0 = np.atleast_2d(np.asarray(self.cov0, dtype=float))
        if mu0.shape != (self.dim_x,) or cov0.shape != (self.dim_x, self.dim_x):
            raise ConfigError("initial mean/covariance do not match the state dimension")
        if not np.allclose(cov0, cov0.T):
            raise ConfigError("cov0 must be symmetric")
        if np.linalg.eigvalsh(cov0)[0] < -1e-12:
            raise ConfigError("cov0 must be positive semi-definite")
        if not 0 < self.lambda_min < self.lambda_max:
            raise ConfigError("need 0 < lambda_min < lambda_max")
        object.__setattr__(self, "mu0", mu0)
        object.__setattr__(self, "cov0", cov0)

    @property
    def point_process(self) -> bool:
        return self.intensity_fn is not None

    def intensity(self, x: np.ndarray) -> np.ndarray:
        """Intensity clamped to ``[lambda_min, lambda_max]``; zeros when disabled."""
        x = np.asarray(x, dtype=float)
        if self.intensity_fn is None:
            return np.zeros(x.shape[0])
        raw = np.asarray(self.intensity_fn(x), dtype=float)
        clipped = np.clip(raw, self.lambda_min, self.lambda_max)
        # lam * x^2 dipping under lambda_min near x = 0 is routine; only warn on real violations
        if not self._warned and (np.any(raw > self.lambda_max) or np.any(raw < 0)):
            logger.warning("intensity left [%g, %g]; values were clamped", self.lambda_min, self.lambda_max)
            self._warned.append(True)
        return clipped


class _Affine:
    """Picklable ``x -> x @ M.T`` map on batches of states."""

    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def __call__(self, x):
        return np.asarray(x, dtype=float) @ self.matrix.T


class _Constant:
    def __init__(self, matrix):
        self.matrix = np.atleast_2d(np.asarray(matrix, dtype=float))

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.matrix, (x.shape[0],) + self.matrix.shape)


class _Quadratic:
    def __init__(self, weights, const=0.0):
        self.weights = np.asarray(weights, dtype=float)
        self.const = float(const)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        return self.const + (x * x) @ self.weights


def make_linear_model(
    p: LinearModelParams,
    lambda_min: float = LAMBDA_MIN_DEFAULT,
    lambda_max: float = LAMBDA_MAX_DEFAULT,
) -> ModelSpec:
    """Scalar model with ``b(x) = b x``, ``sigma(x) = sigma``, ``h(x) = h x``, ``lambda(x) = lam x^2``."""
    return ModelSpec(
        dim_x=1,
        dim_z=1,
        dim_w=1,
        drift=_Affine([[p.b]]),
        diffusion=_Constant([[p.sigma]]),
        obs_fn=_Affine([[p.h]]),
        intensity_fn=_Quadratic([p.lam]) if p.lam > 0 else None,
        mu0=np.array([p.mu0]),
        cov0=np.array([[p.var0]]),
        lambda_min=lambda_min,
        lambda_max=lambda_max,
        linear=p,
    )


def make_linear_md_model(
    p: LinearMDParams,
    lambda_min: float = LAMBDA_MIN_DEFAULT,
    lambda_max: float = LAMBDA_MAX_DEFAULT,
) -> ModelSpec:
    return ModelSpec(
        dim_x=p.dim,
        dim_z=p.obs.shape[0],
        dim_w=p.diffusion.shape[1],
        drift=_Affine(p.drift),
        diffusion=_Constant(p.diffusion),
        obs_fn=_Affine(p.obs),
        intensity_fn=_Quadratic(p.intensity_weights, p.intensity_const) if p.point_process else None,
        mu0=p.mu0,
        cov0=p.cov0,
        lambda_min=lambda_min,
        lambda_max=lambda_max,
        linear_md=p,
    )


def _streams(seed: int):
    signal = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    observation = np.random.default_rng(np.random.SeedSequence([int(seed), 1]))
    return signal, observation


def _cov_sqrt(cov: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(cov)
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def euler_maruyama(spec: ModelSpec, x0: np.ndarray, dt: float, steps: int, rng) -> np.ndarray:
    """Propagate a batch ``x0`` of shape ``(P, d)``; returns ``(steps + 1, P, d)``."""
    x = np.array(x0, dtype=float)
    out = np.empty((steps + 1,) + x.shape)
    out[0] = x
    sq = math.sqrt(dt)
    for k in range(steps):
        xi = rng.standard_normal((x.shape[0], spec.dim_w))
        x = x + spec.drift(x) * dt + np.einsum("pdm,pm->pd", spec.diffusion(x), xi) * sq
        out[k + 1] = x
    return out


def simulate_signal(spec: ModelSpec, dt: float, steps: int, seed: int) -> np.ndarray:
    """Euler-Maruyama signal path of shape ``(steps + 1, d)``, deterministic in ``seed``."""
    if not dt > 0 or steps < 1:
        raise ConfigError("need dt > 0 and steps >= 1")
    rng, _ = _streams(seed)
    x0 = spec.mu0 + _cov_sqrt(spec.cov0) @ rng.standard_normal(spec.dim_x)
    return euler_maruyama(spec, x0[None, :], dt, steps, rng)[:, 0, :]


def simulate_observations(spec: ModelSpec, x_path: np.ndarray, dt: float, seed: int):
    """Observation increments over each step, using the left-end signal value.

    Returns ``dz`` of shape ``(K, l)`` and integer counts ``dn`` of shape ``(K,)``.
    """
    x_path = np.asarray(x_path, dtype=float)
    if x_path.ndim == 1:
        x_path = x_path[:, None]
    if x_path.shape[0] < 2:
        raise ConfigError("signal path needs at least two points")
    _, rng = _streams(seed)
    left = x_path[:-1]
    K = left.shape[0]
    eta = rng.standard_normal((K, spec.dim_z))
    dz = spec.obs_fn(left) * dt + math.sqrt(dt) * eta
    if spec.point_process:
        dn = rng.poisson(spec.intensity(left) * dt)
    else:
        dn = np.zeros(K, dtype=np.int64)
    return dz, dn.astype(np.int64)


@dataclass
class PathBundle:
    """Time grid, true signal and observation increments for one path.

    Row ``k`` of ``dz``/``dn`` is the increment over ``(t_k, t_{k+1}]``.
    """

    dt: float
    x_path: np.ndarray
    dz: np.ndarray
    dn: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.x_path = np.asarray(self.x_path, dtype=float)
        if self.x_path.ndim == 1:
            self.x_path = self.x_path[:, None]
        self.dn = np.asarray(self.dn, dtype=np.int64).reshape(-1)
        self.dz = np.asarray(self.dz, dtype=float)
        if self.dz.ndim == 1:
            self.dz = self.dz[:, None]
        if self.dz.shape[0] != self.dn.shape[0]:
            raise ConfigError("dz and dn must have one row per step")
        if self.x_path.shape[0] != self.steps + 1:
            raise ConfigError("signal path must have one more point than there are increments")
        if np.any(self.dn < 0):
            raise ConfigError("event counts must be nonnegative")

    @property
    def steps(self) -> int:
        return int(self.dn.shape[0])

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.steps + 1)

    @property
    def T(self) -> float:
        return self.dt * self.steps

    def coarsen(self, factor: int) -> "PathBundle":
        """Aggregate increments over blocks of ``factor`` steps."""
        if factor < 1 or self.steps % factor:
            raise ConfigError(f"cannot coarsen {self.steps} steps by {factor}")
        K = self.steps // factor
        dz = self.dz.reshape(K, factor, -1).sum(axis=1)
        dn = self.dn.reshape(K, factor).sum(axis=1)
        return PathBundle(self.dt * factor, self.x_path[::factor], dz, dn, self.seed)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (np.array([self.dt]), self.x_path, self.dz, self.dn):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def to_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_string())

    def to_csv_string(self) -> str:
        d, l = self.x_path.shape[1], self.dz.shape[1]
        buf = io.StringIO()
        buf.write(f"# dt={self.dt!r} seed={self.seed}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x_{i + 1}" for i in range(d)] + [f"dz_{i + 1}" for i in range(l)] + ["dn"])
        times = self.times
        for k in range(self.steps + 1):
            if k == 0:
                inc, cnt = [0.0] * l, 0
            else:
                inc, cnt = self.dz[k - 1], int(self.dn[k - 1])
            w.writerow([f"{times[k]:.17g}"] + [f"{v:.17g}" for v in self.x_path[k]] + [f"{v:.17g}" for v in inc] + [cnt])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path) -> "PathBundle":
        text = Path(path).read_text()
        lines = text.splitlines()
        meta = {}
        if lines and lines[0].startswith("#"):
            for tok in lines[0][1:].split():
                key, _, val = tok.partition("=")
                meta[key] = val
            lines = lines[1:]
        rows = list(csv.reader(lines))
        if not rows:
            raise ConfigError(f"{path}: empty path file")
        header, body = rows[0], rows[1:]
        xcols = [i for i, c in enumerate(header) if c.startswith("x_")]
        zcols = [i for i, c in enumerate(header) if c.startswith("dz_")]
        if header[0] != "t" or header[-1] != "dn" or not xcols or not zcols:
            raise ConfigError(f"{path}: unexpected header {header}")
        data = np.array([[float(v) for v in r] for r in body])
        times = data[:, 0]
        dt = float(meta["dt"]) if "dt" in meta else float(times[1] - times[0])
        seed = int(meta.get("seed", 0))
        return cls(
            dt=dt,
            x_path=data[:, xcols],
            dz=data[1:, zcols],
            dn=data[1:, -1].astype(np.int64),
            seed=seed,
        )


def simulate_bundle(spec: ModelSpec, dt: float, steps: int, seed: int) -> PathBundle:
    x = simulate_signal(spec, dt, steps, seed)
    dz, dn = simulate_observations(spec, x, dt, seed)
    return PathBundle(dt=dt, x_path=x, dz=dz, dn=dn, seed=seed)
