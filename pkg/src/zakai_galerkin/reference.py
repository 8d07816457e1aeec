"""Reference filters: a bootstrap particle filter and the Kalman-Bucy filter."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, ParticleCollapseError
from .galerkin import FilterResult
from .model import LinearModelParams, ModelSpec, PathBundle, _cov_sqrt


@dataclass
class ParticleCloud:
    """Particle positions ``(N, d)`` with log-weights normalised to sum to one."""

    positions: np.ndarray
    log_weights: np.ndarray

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def normalize(self, step=None) -> None:
        lse = logsumexp(self.log_weights)
        if not math.isfinite(lse):
            where = f"step {step}: " if step is not None else ""
            raise ParticleCollapseError(f"{where}all particle weights vanished", step=step)
        self.log_weights = self.log_weights - lse

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights - logsumexp(self.log_weights))

    @property
    def ess(self) -> float:
        w = self.weights
        return float(1.0 / np.dot(w, w))

    def moments(self) -> tuple[np.ndarray, np.ndarray]:
        w = self.weights
        mean = w @ self.positions
        return mean, w @ (self.positions - mean) ** 2

    def resample(self, u: float) -> None:
        self.positions = self.positions[systematic_resample(self.weights, u)]
        self.log_weights = np.full(self.n, -math.log(self.n))


def systematic_resample(weights: np.ndarray, u: float) -> np.ndarray:
    """Indices drawn by systematic resampling with a single uniform ``u`` in [0, 1)."""
    n = weights.size
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, (u + np.arange(n)) / n, side="right")


def particle_filter(
    spec: ModelSpec,
    bundle: PathBundle,
    n_particles: int,
    seed: int,
    *,
    resample_threshold: float = 0.5,
    stream: int = 2,
) -> FilterResult:
    """Bootstrap particle filter for both observation channels.

    Particles move by Euler-Maruyama.  Per step the log-weight gains

        h(x) . dz - |h(x)|^2 dt / 2 + dn log lambda(x) - (lambda(x) - 1) dt

    and the cloud is resampled systematically when the effective sample
    size drops below ``resample_threshold * n_particles``.  ``stream``
    selects an independent generator for the same ``seed`` (signal and
    observation simulation use streams 0 and 1).
    """
    if n_particles < 2:
        raise ConfigError("need at least 2 particles")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(stream)]))
    dt = bundle.dt
    sq = math.sqrt(dt)
    x0 = spec.mu0 + rng.standard_normal((n_particles, spec.dim_x)) @ _cov_sqrt(spec.cov0).T
    cloud = ParticleCloud(x0, np.full(n_particles, -math.log(n_particles)))
    t0 = time.perf_counter()
    m, v = cloud.moments()
    means, variances = [m], [v]
    for k in range(bundle.steps):
        x = cloud.positions
        noise = rng.standard_normal((n_particles, spec.dim_w))
        h = spec.obs_fn(x)
        logw = cloud.log_weights + h @ bundle.dz[k] - 0.5 * dt * np.einsum("pl,pl->p", h, h)
        if spec.intensity_fn is not None:
            lam = spec.intensity(x)
            dn = int(bundle.dn[k])
            if dn:
                logw = logw + dn * np.log(lam)
            logw = logw - (lam - 1.0) * dt
        cloud.positions = x + spec.drift(x) * dt + np.einsum("pij,pj->pi", spec.diffusion(x), noise) * sq
        cloud.log_weights = logw
        cloud.normalize(step=k + 1)
        m, v = cloud.moments()
        means.append(m)
        variances.append(v)
        if cloud.ess < resample_threshold * n_particles:
            cloud.resample(rng.random())
    wall = time.perf_counter() - t0
    means = np.array(means)
    variances = np.array(variances)
    if spec.dim_x == 1:
        means, variances = means[:, 0], variances[:, 0]
    K = bundle.steps + 1
    return FilterResult(
        t=bundle.times,
        mean=means,
        variance=variances,
        log_scale=np.zeros(K),
        neg_mass_fraction=np.zeros(K),
        rebased=np.zeros(K, dtype=np.int8),
        mu_basis=np.full(K, math.nan),
        sigma_basis=np.full(K, math.nan),
        wall_time=wall,
    )


def kalman_bucy(p: LinearModelParams, bundle: PathBundle) -> tuple[np.ndarray, np.ndarray]:
    """Euler discretisation of the Kalman-Bucy filter for the linear model.

        dm = b m dt + P h (dz - h m dt),    dP = (2 b P + sigma^2 - h^2 P^2) dt

    The counting channel is ignored, so ``bundle`` should come from a model
    without point-process observations.
    """
    dt = bundle.dt
    dz = bundle.dz[:, 0]
    K = bundle.steps
    m = np.empty(K + 1)
    P = np.empty(K + 1)
    m[0], P[0] = p.mu0, p.var0
    b, s2, h = p.b, p.sigma**2, p.h
    for k in range(K):
        m[k + 1] = m[k] + b * m[k] * dt + P[k] * h * (dz[k] - h * m[k] * dt)
        P[k + 1] = P[k] + (2 * b * P[k] + s2 - h * h * P[k] ** 2) * dt
    return m, P


def kalman_bucy_stationary_variance(p: LinearModelParams) -> float:
    """Positive root of ``2 b P + sigma^2 - h^2 P^2 = 0``."""
    if p.h == 0:
        raise ValueError("no stationary variance without observations")
    return (p.b + math.sqrt(p.b**2 + p.sigma**2 * p.h**2)) / p.h**2
