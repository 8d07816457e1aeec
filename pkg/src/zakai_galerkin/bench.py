"""
Experiment harness: tracking error and deviation from a reference filter
over repeated simulated paths, plus basis-size and time-step sweeps.

Every method in one experiment sees the same simulated bundle for a given
path index (path ``j`` uses seed ``seed + j``), so differences between
methods are not diluted by path-to-path noise.
"""
from __future__ import annotations

import csv
import hashlib
import io
import math
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .adaptive import AgaConfig, initial_basis, run_aga
from .errors import ConfigError, ZakaiError
from .galerkin import FilterResult, Method, assemble, run_filter
from .hermite import BasisFamily, BasisSpec
from .model import LinearModelParams, PathBundle, make_linear_model, simulate_bundle
from .reference import kalman_bucy, particle_filter

KINDS = ("GAH", "AGAH", "GAG", "PF", "KB")
WORKERS_ENV = "ZAKAI_WORKERS"


# --------------------------------------------------------------------------
# metrics


def _paired(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim < 2:
        raise ValueError("expected arrays of shape (paths, steps[, d])")
    return a, b


def _per_path_mse(a, b) -> np.ndarray:
    a, b = _paired(a, b)
    sq = (a - b) ** 2
    if sq.ndim == 3:
        sq = sq.sum(axis=2)
    return sq.mean(axis=1)


def rmse(estimates, truths) -> float:
    """``sqrt(1/(mK) sum_j sum_k |X^j(t_k) - xhat^j(t_k)|^2)`` over ``(m, K[, d])`` arrays."""
    return float(math.sqrt(_per_path_mse(estimates, truths).mean()))


def edm_edv(estimates, reference_estimates, variances, reference_variances) -> tuple[float, float]:
    """Mean squared deviation of means and of variances from a reference filter."""
    return (
        float(_per_path_mse(estimates, reference_estimates).mean()),
        float(_per_path_mse(variances, reference_variances).mean()),
    )


def jackknife_se(per_path: np.ndarray, transform=lambda v: v) -> float:
    """Leave-one-path-out standard error of ``transform(mean(per_path))``."""
    v = np.asarray(per_path, dtype=float)
    m = v.size
    if m < 2:
        return math.nan
    loo = np.array([transform((v.sum() - x) / (m - 1)) for x in v])
    return float(math.sqrt((m - 1) / m * np.sum((loo - loo.mean()) ** 2)))


# --------------------------------------------------------------------------
# configuration


_METHOD_RE = re.compile(r"^\s*(GAH|AGAH|GAG|PF|KB)(?:-(em|su))?(?::(\d+))?\s*$", re.IGNORECASE)


@dataclass(frozen=True)
class MethodSpec:
    """One filter in an experiment: kind, basis size or particle count, stepper."""

    kind: str
    size: int = 0
    stepper: str = "em"

    def __post_init__(self):
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "stepper", Method(self.stepper.lower()).value)
        if kind not in KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}")
        if kind != "KB" and self.size < (2 if kind == "PF" else 1):
            raise ConfigError(f"{kind} needs a positive size")
        if kind == "GAG" and self.stepper == "su":
            raise ConfigError("the splitting-up stepper needs the Hermite basis")

    @property
    def label(self) -> str:
        if self.kind in ("PF", "KB"):
            return self.kind
        return f"{self.kind}({self.stepper.upper()})"

    @classmethod
    def parse(cls, text: str) -> "MethodSpec":
        """Parse ``KIND[-em|-su][:size]``, e.g. ``AGAH-su:12`` or ``PF:100``."""
        match = _METHOD_RE.match(text)
        if not match:
            raise ConfigError(f"cannot parse method {text!r}; expected KIND[-em|-su][:size]")
        kind, stepper, size = match.groups()
        return cls(kind.upper(), int(size) if size else 0, (stepper or "em").lower())


@dataclass(frozen=True)
class ExperimentConfig:
    params: LinearModelParams = LinearModelParams()
    dt: float = 1e-4
    T: float = 0.5
    paths: int = 20
    seed: int = 0
    methods: tuple = ()
    burn_in: float = 0.02
    reference_particles: int = 1000
    basis_mu: Optional[float] = None
    basis_sigma: Optional[float] = None
    aga: AgaConfig = AgaConfig()
    lambda_min: float = 1e-6
    lambda_max: float = 1e4

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(
            m if isinstance(m, MethodSpec) else MethodSpec.parse(m) for m in self.methods
        ))
        if not self.dt > 0 or not self.T > 0:
            raise ConfigError("dt and T must be positive")
        if self.steps < 1:
            raise ConfigError("T must cover at least one step")
        if self.paths < 1:
            raise ConfigError("need at least one path")
        if not 0 <= self.burn_in < self.T:
            raise ConfigError("burn_in must lie in [0, T)")
        if self.reference_particles == 1 or self.reference_particles < 0:
            raise ConfigError("reference_particles must be 0 (off) or at least 2")
        if any(m.kind == "KB" for m in self.methods) and self.params.lam > 0:
            raise ConfigError("the Kalman-Bucy method needs lambda = 0")
        if self.basis_sigma is not None and not self.basis_sigma > 0:
            raise ConfigError("basis_sigma must be positive")

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    def spec(self):
        return make_linear_model(self.params, self.lambda_min, self.lambda_max)

    def fixed_basis(self, family: BasisFamily, n: int) -> BasisSpec:
        """Fixed basis location; defaults to the mean and spread of the initial law."""
        mu = self.params.mu0 if self.basis_mu is None else self.basis_mu
        sigma = math.sqrt(self.params.var0) if self.basis_sigma is None else self.basis_sigma
        return BasisSpec(family, n, mu, sigma)


@dataclass
class ExperimentReport:
    method: str
    n: int
    wall_time: float
    rmse: float
    rmse_se: float
    edm: float
    edm_se: float
    edv: float
    edv_se: float
    paths: int
    steps: int
    status: str = "ok"
    bundles: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


# --------------------------------------------------------------------------
# running


def _run_method(cfg: ExperimentConfig, spec, method: MethodSpec, bundle: PathBundle, path_seed: int, mats_cache: dict):
    kind = method.kind
    if kind == "PF":
        return particle_filter(spec, bundle, method.size, path_seed)
    if kind == "KB":
        t0 = time.perf_counter()
        m, P = kalman_bucy(cfg.params, bundle)
        K = bundle.steps + 1
        return FilterResult(
            t=bundle.times, mean=m, variance=P, log_scale=np.zeros(K), neg_mass_fraction=np.zeros(K),
            rebased=np.zeros(K, dtype=np.int8), mu_basis=np.full(K, math.nan), sigma_basis=np.full(K, math.nan),
            wall_time=time.perf_counter() - t0,
        )
    if kind == "AGAH":
        return run_aga(spec, initial_basis(spec, method.size), method.stepper, bundle, cfg.aga,
                       track_negative_mass=False)
    family = BasisFamily.HERMITE if kind == "GAH" else BasisFamily.GAUSSIAN
    basis = cfg.fixed_basis(family, method.size)
    key = (family, method.size)
    if key not in mats_cache:
        mats = assemble(spec, basis)
        # factor the Gram matrix and build the operators outside the timed loop
        mats.drift_op, mats.obs_ops, mats.jump_op
        mats_cache[key] = mats
    return run_filter(spec, basis, method.stepper, bundle, mats=mats_cache[key], track_negative_mass=False)


def _run_path(cfg: ExperimentConfig, j: int) -> dict:
    """All methods (and the reference filter) on path ``j``."""
    spec = cfg.spec()
    seed = cfg.seed + j
    bundle = simulate_bundle(spec, cfg.dt, cfg.steps, seed)
    out = {"digest": bundle.digest(), "truth": bundle.x_path[:, 0], "methods": [], "reference": None}
    if cfg.reference_particles:
        ref = particle_filter(spec, bundle, cfg.reference_particles, seed, stream=3)
        out["reference"] = (ref.mean, ref.variance)
    cache: dict = {}
    for method in cfg.methods:
        try:
            res = _run_method(cfg, spec, method, bundle, seed, cache)
            out["methods"].append(("ok", res.mean, res.variance, res.wall_time))
        except ZakaiError as exc:
            out["methods"].append((f"failed: {type(exc).__name__}", None, None, 0.0))
    return out


def _workers(workers: Optional[int]) -> int:
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    return max(1, workers)


def _map_paths(cfg: ExperimentConfig, workers: Optional[int]) -> list:
    workers = _workers(workers)
    if workers == 1 or cfg.paths == 1:
        return [_run_path(cfg, j) for j in range(cfg.paths)]
    with ProcessPoolExecutor(max_workers=min(workers, cfg.paths)) as pool:
        return list(pool.map(_run_path, [cfg] * cfg.paths, range(cfg.paths)))


def run_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> list[ExperimentReport]:
    """Run every configured method on ``cfg.paths`` common simulated paths.

    Metrics use grid points with ``t >= burn_in``.  A method that fails on
    any path yields a row with a ``failed`` status and NaN statistics.
    Reports are identical for a given config regardless of ``workers``,
    apart from wall times.
    """
    if not cfg.methods:
        raise ConfigError("no methods configured")
    results = _map_paths(cfg, workers)
    digest = hashlib.sha256("".join(r["digest"] for r in results).encode()).hexdigest()[:16]
    t = np.arange(cfg.steps + 1) * cfg.dt
    keep = t >= cfg.burn_in - 1e-12
    truths = np.array([r["truth"][keep] for r in results])
    have_ref = cfg.reference_particles > 0
    if have_ref:
        ref_m = np.array([r["reference"][0][keep] for r in results])
        ref_v = np.array([r["reference"][1][keep] for r in results])
    reports = []
    for i, method in enumerate(cfg.methods):
        rows = [r["methods"][i] for r in results]
        failed = [row[0] for row in rows if row[0] != "ok"]
        n_size = method.size
        if failed:
            reports.append(ExperimentReport(
                method.label, n_size, math.nan, *([math.nan] * 6), cfg.paths, cfg.steps,
                status=f"{failed[0]} on {len(failed)}/{cfg.paths} paths", bundles=digest,
            ))
            continue
        means = np.array([row[1][keep] for row in rows])
        variances = np.array([row[2][keep] for row in rows])
        wall = float(sum(row[3] for row in rows))
        mse = _per_path_mse(means, truths)
        if have_ref:
            dm = _per_path_mse(means, ref_m)
            dv = _per_path_mse(variances, ref_v)
            edm, edv = float(dm.mean()), float(dv.mean())
            edm_se, edv_se = jackknife_se(dm), jackknife_se(dv)
        else:
            edm = edv = edm_se = edv_se = math.nan
        reports.append(ExperimentReport(
            method=method.label, n=n_size, wall_time=wall,
            rmse=float(math.sqrt(mse.mean())), rmse_se=jackknife_se(mse, math.sqrt),
            edm=edm, edm_se=edm_se, edv=edv, edv_se=edv_se,
            paths=cfg.paths, steps=cfg.steps, bundles=digest,
        ))
    return reports


def convergence_sweep(cfg: ExperimentConfig, kind: str, sizes: Sequence[int], stepper: str = "em",
                      workers: Optional[int] = None) -> list[ExperimentReport]:
    """One experiment over basis sizes ``sizes`` for a single Galerkin kind."""
    methods = tuple(MethodSpec(kind, n, stepper) for n in sizes)
    return run_experiment(replace(cfg, methods=methods), workers)


@dataclass
class StabilityRow:
    dt: float
    method: str
    sup_error: float
    rmse: float
    status: str = "ok"


def stability_sweep(cfg: ExperimentConfig, dts: Sequence[float], n: int = 12, adaptive: bool = True,
                    path: int = 0) -> list[StabilityRow]:
    """EM and SU on one signal path observed at several step sizes.

    The path is simulated once at the finest step and coarsened, so every
    step size sees the same signal and aggregated observations.
    """
    dts = sorted(float(d) for d in dts)
    fine = dts[0]
    factors = [d / fine for d in dts]
    if any(abs(f - round(f)) > 1e-9 for f in factors):
        raise ConfigError("every dt must be an integer multiple of the smallest")
    spec = cfg.spec()
    steps = int(round(cfg.T / fine))
    base = simulate_bundle(spec, fine, steps, cfg.seed + path)
    rows = []
    for dt, factor in zip(dts, factors):
        bundle = base.coarsen(int(round(factor)))
        truth = bundle.x_path[:, 0]
        for stepper in ("su", "em"):
            label = f"{'AGAH' if adaptive else 'GAH'}({stepper.upper()})"
            try:
                if adaptive:
                    res = run_aga(spec, initial_basis(spec, n), stepper, bundle, cfg.aga, track_negative_mass=False)
                else:
                    res = run_filter(spec, cfg.fixed_basis(BasisFamily.HERMITE, n), stepper, bundle,
                                     track_negative_mass=False)
                err = np.abs(res.mean - truth)
                if not np.all(np.isfinite(err)):
                    raise ZakaiError("non-finite estimate")
                rows.append(StabilityRow(dt, label, float(err.max()), float(math.sqrt(np.mean(err**2)))))
            except ZakaiError as exc:
                rows.append(StabilityRow(dt, label, math.nan, math.nan, f"failed: {type(exc).__name__}"))
    return rows


# --------------------------------------------------------------------------
# output


def rows_to_csv_string(rows) -> str:
    rows = list(rows)
    if not rows:
        return ""
    names = [f.name for f in fields(rows[0])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(names)
    for r in rows:
        w.writerow([_fmt(getattr(r, n)) for n in names])
    return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def write_rows(rows, path) -> None:
    Path(path).write_text(rows_to_csv_string(rows))


def format_table(rows) -> str:
    """Fixed-width text rendering of report or sweep rows."""
    rows = list(rows)
    if not rows:
        return ""
    names = [f.name for f in fields(rows[0]) if f.name != "bundles"]
    cells = [[_short(getattr(r, n)) for n in names] for r in rows]
    widths = [max(len(n), *(len(c[i]) for c in cells)) for i, n in enumerate(names)]
    lines = ["  ".join(n.rjust(w) for n, w in zip(names, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _short(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)
