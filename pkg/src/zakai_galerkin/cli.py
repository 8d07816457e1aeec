"""Command-line interface: simulate paths, run filters and benchmarks."""
from __future__ import annotations

import argparse
import configparser
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .adaptive import AgaConfig, initial_basis, run_aga
from .bench import (
    ExperimentConfig,
    MethodSpec,
    convergence_sweep,
    format_table,
    rows_to_csv_string,
    run_experiment,
    stability_sweep,
)
from .errors import (
    ConfigError,
    DegenerateStateError,
    FilterDivergenceError,
    ParticleCollapseError,
    RebaseError,
    ZakaiError,
)
from .galerkin import FilterResult, run_filter
from .hermite import BasisFamily, BasisSpec
from .model import (
    LinearMDParams,
    LinearModelParams,
    PathBundle,
    make_linear_md_model,
    make_linear_model,
    simulate_bundle,
)
from .multidim import initial_tensor_basis, run_filter_md
from .numerics import gauss_hermite
from .reference import kalman_bucy, particle_filter

EXIT_OK, EXIT_INVALID, EXIT_DIVERGED = 0, 1, 2
NUMERICAL_ERRORS = (FilterDivergenceError, DegenerateStateError, RebaseError, ParticleCollapseError)

CONFIG_HELP = """\
configuration file (INI style, every key optional):

  [model]   b, sigma, h, lambda, mu0, var0, lambda_min, lambda_max
            multi-dimensional linear model instead: drift, diffusion, obs
            (matrices, rows separated by ';'), intensity_weights, mu0, cov0,
            intensity_const
  [time]    T, dt
  [filter]  family (hermite|gaussian), n, method (em|su|pf|kb), adaptive,
            threshold_mu, threshold_sigma, max_rebases, quad_nodes,
            basis_mu, basis_sigma
  [pf]      particles
  [rng]     seed
  [output]  paths
  [bench]   methods (e.g. "AGAH-em:12, PF:100"), burn_in,
            reference_particles, kind, sizes, stepper, dts

numbers may be decimal or scientific (1e-4); unknown keys are rejected.
the worker count for benchmarks is read from ZAKAI_WORKERS.
"""

_KEYS = {
    "model": {"b", "sigma", "h", "lambda", "mu0", "var0", "lambda_min", "lambda_max",
              "drift", "diffusion", "obs", "intensity_weights", "cov0", "intensity_const"},
    "time": {"t", "dt"},
    "filter": {"family", "n", "method", "adaptive", "threshold_mu", "threshold_sigma",
               "max_rebases", "quad_nodes", "basis_mu", "basis_sigma"},
    "pf": {"particles"},
    "rng": {"seed"},
    "output": {"paths"},
    "bench": {"methods", "burn_in", "reference_particles", "kind", "sizes", "stepper", "dts"},
}
_MD_KEYS = {"drift", "diffusion", "obs", "intensity_weights", "cov0", "intensity_const"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


@dataclass
class RunConfig:
    """Validated contents of a configuration file plus command-line overrides."""

    params: LinearModelParams = field(default_factory=LinearModelParams)
    md: Optional[LinearMDParams] = None
    lambda_min: float = 1e-6
    lambda_max: float = 1e4
    T: float = 0.5
    dt: float = 1e-4
    family: str = "hermite"
    n: int = 12
    method: str = "su"
    adaptive: bool = False
    aga: AgaConfig = field(default_factory=AgaConfig)
    quad_nodes: Optional[int] = None
    basis_mu: Optional[float] = None
    basis_sigma: Optional[float] = None
    particles: int = 1000
    seed: int = 0
    paths: int = 20
    methods: tuple = ("AGAH-em:12", "PF:100")
    burn_in: float = 0.02
    reference_particles: int = 1000
    kind: str = "GAH"
    sizes: tuple = (8, 12, 24)
    stepper: str = "em"
    dts: tuple = (1e-4, 1e-3, 1e-2)

    @property
    def steps(self) -> int:
        return int(round(self.T / self.dt))

    def model(self):
        if self.md is not None:
            return make_linear_md_model(self.md, self.lambda_min, self.lambda_max)
        return make_linear_model(self.params, self.lambda_min, self.lambda_max)

    def experiment(self) -> ExperimentConfig:
        if self.md is not None:
            raise ConfigError("benchmarks support the scalar linear model only")
        return ExperimentConfig(
            params=self.params, dt=self.dt, T=self.T, paths=self.paths, seed=self.seed,
            methods=tuple(self.methods), burn_in=self.burn_in, reference_particles=self.reference_particles,
            basis_mu=self.basis_mu, basis_sigma=self.basis_sigma, aga=self.aga,
            lambda_min=self.lambda_min, lambda_max=self.lambda_max,
        )


def _float(section, key, text) -> float:
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"[{section}] {key}: expected a number, got {text!r}") from None


def _int(section, key, text) -> int:
    v = _float(section, key, text)
    if v != int(v):
        raise ConfigError(f"[{section}] {key}: expected an integer, got {text!r}")
    return int(v)


def _bool(section, key, text) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"[{section}] {key}: expected a boolean, got {text!r}")


def _matrix(section, key, text) -> np.ndarray:
    rows = [r for r in text.split(";") if r.strip()]
    try:
        return np.array([[float(v) for v in r.replace(",", " ").split()] for r in rows])
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse matrix {text!r}") from None


def _vector(section, key, text) -> np.ndarray:
    return _matrix(section, key, text.replace(";", " ")).ravel()


def load_config(path: Optional[str]) -> RunConfig:
    """Parse and validate a configuration file (``None`` gives the defaults)."""
    cfg = RunConfig()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for section in parser.sections():
        if section not in _KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        unknown = set(parser[section]) - _KEYS[section]
        if unknown:
            raise ConfigError(f"unknown keys in [{section}]: {', '.join(sorted(unknown))}")
    get = lambda s, k: parser.get(s, k, fallback=None)  # noqa: E731

    m = parser["model"] if parser.has_section("model") else {}
    if _MD_KEYS & set(m):
        need = {"drift", "diffusion", "obs", "mu0", "cov0"}
        missing = need - set(m)
        if missing:
            raise ConfigError(f"multi-dimensional model needs keys: {', '.join(sorted(missing))}")
        mu0 = _vector("model", "mu0", m["mu0"])
        cfg.md = LinearMDParams(
            drift=_matrix("model", "drift", m["drift"]),
            diffusion=_matrix("model", "diffusion", m["diffusion"]),
            obs=_matrix("model", "obs", m["obs"]),
            intensity_weights=(_vector("model", "intensity_weights", m["intensity_weights"])
                               if "intensity_weights" in m else np.zeros(mu0.size)),
            mu0=mu0,
            cov0=_matrix("model", "cov0", m["cov0"]),
            intensity_const=_float("model", "intensity_const", m.get("intensity_const", "0")),
        )
        scalar = {"b", "sigma", "h", "lambda", "var0"} & set(m)
        if scalar:
            raise ConfigError(f"scalar keys {', '.join(sorted(scalar))} conflict with a multi-dimensional model")
    else:
        names = {"b": "b", "sigma": "sigma", "h": "h", "lambda": "lam", "mu0": "mu0", "var0": "var0"}
        kw = {names[k]: _float("model", k, m[k]) for k in names if k in m}
        cfg.params = LinearModelParams(**kw)
    for k in ("lambda_min", "lambda_max"):
        if get("model", k) is not None:
            setattr(cfg, k, _float("model", k, get("model", k)))

    if get("time", "t") is not None:
        cfg.T = _float("time", "T", get("time", "t"))
    if get("time", "dt") is not None:
        cfg.dt = _float("time", "dt", get("time", "dt"))

    f = parser["filter"] if parser.has_section("filter") else {}
    if "family" in f:
        cfg.family = f["family"].strip().lower()
    if "n" in f:
        cfg.n = _int("filter", "n", f["n"])
    if "method" in f:
        cfg.method = f["method"].strip().lower()
    if "adaptive" in f:
        cfg.adaptive = _bool("filter", "adaptive", f["adaptive"])
    aga_kw = {k: _float("filter", k, f[k]) for k in ("threshold_mu", "threshold_sigma") if k in f}
    if "max_rebases" in f:
        aga_kw["max_rebases"] = _int("filter", "max_rebases", f["max_rebases"])
    cfg.aga = AgaConfig(**aga_kw)
    if "quad_nodes" in f:
        cfg.quad_nodes = _int("filter", "quad_nodes", f["quad_nodes"])
    for k in ("basis_mu", "basis_sigma"):
        if k in f:
            setattr(cfg, k, _float("filter", k, f[k]))

    if get("pf", "particles") is not None:
        cfg.particles = _int("pf", "particles", get("pf", "particles"))
    if get("rng", "seed") is not None:
        cfg.seed = _int("rng", "seed", get("rng", "seed"))
    if get("output", "paths") is not None:
        cfg.paths = _int("output", "paths", get("output", "paths"))

    b = parser["bench"] if parser.has_section("bench") else {}
    if "methods" in b:
        cfg.methods = tuple(s.strip() for s in b["methods"].split(",") if s.strip())
    if "burn_in" in b:
        cfg.burn_in = _float("bench", "burn_in", b["burn_in"])
    if "reference_particles" in b:
        cfg.reference_particles = _int("bench", "reference_particles", b["reference_particles"])
    if "kind" in b:
        cfg.kind = b["kind"].strip().upper()
    if "sizes" in b:
        cfg.sizes = tuple(_int("bench", "sizes", s) for s in b["sizes"].replace(",", " ").split())
    if "stepper" in b:
        cfg.stepper = b["stepper"].strip().lower()
    if "dts" in b:
        cfg.dts = tuple(_float("bench", "dts", s) for s in b["dts"].replace(",", " ").split())
    return cfg


def validate(cfg: RunConfig) -> None:
    if not (cfg.T > 0 and cfg.dt > 0 and math.isfinite(cfg.T) and math.isfinite(cfg.dt)):
        raise ConfigError("T and dt must be positive")
    if cfg.steps < 1:
        raise ConfigError("T must cover at least one time step")
    if cfg.family not in ("hermite", "gaussian"):
        raise ConfigError(f"unknown basis family {cfg.family!r}")
    if cfg.method not in ("em", "su", "pf", "kb"):
        raise ConfigError(f"unknown filter method {cfg.method!r}")
    if cfg.particles < 2:
        raise ConfigError("particles must be at least 2")
    if cfg.paths < 1:
        raise ConfigError("paths must be at least 1")
    if cfg.quad_nodes is not None:
        gauss_hermite(cfg.quad_nodes)  # range check
    for text in cfg.methods:
        MethodSpec.parse(text)
    if cfg.kind not in ("GAH", "AGAH", "GAG"):
        raise ConfigError("convergence sweeps need kind GAH, AGAH or GAG")
    if cfg.n < 1:
        raise ConfigError("n must be positive")
    cfg.model()


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for name in ("seed", "method", "n", "particles", "dt", "paths"):
        v = getattr(args, name, None)
        if v is not None:
            setattr(cfg, name, v)
    if getattr(args, "adaptive", False):
        cfg.adaptive = True
    validate(cfg)
    return cfg


def _emit(text: str, out: Optional[str]) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: RunConfig, args) -> int:
    bundle = simulate_bundle(cfg.model(), cfg.dt, cfg.steps, cfg.seed)
    _emit(bundle.to_csv_string(), args.out)
    return EXIT_OK


def _run_one_filter(cfg: RunConfig, spec, bundle: PathBundle) -> FilterResult:
    if cfg.method == "pf":
        return particle_filter(spec, bundle, cfg.particles, cfg.seed)
    if cfg.method == "kb":
        if cfg.md is not None or cfg.params.lam > 0:
            raise ConfigError("the Kalman-Bucy filter needs the scalar model with lambda = 0")
        m, P = kalman_bucy(cfg.params, bundle)
        K = bundle.steps + 1
        return FilterResult(bundle.times, m, P, np.zeros(K), np.zeros(K), np.zeros(K, dtype=np.int8),
                            np.full(K, math.nan), np.full(K, math.nan))
    if cfg.md is not None:
        if cfg.family != "hermite":
            raise ConfigError("multi-dimensional filters use the Hermite family")
        rule = gauss_hermite(cfg.quad_nodes) if cfg.quad_nodes else None
        return run_filter_md(spec, initial_tensor_basis(spec, cfg.n), cfg.method, bundle,
                             adaptive=cfg.aga if cfg.adaptive else None, rule=rule)
    if cfg.adaptive:
        if cfg.family != "hermite":
            raise ConfigError("the adaptive filter uses the Hermite family")
        return run_aga(spec, initial_basis(spec, cfg.n), cfg.method, bundle, cfg.aga)
    family = BasisFamily(cfg.family)
    mu = cfg.params.mu0 if cfg.basis_mu is None else cfg.basis_mu
    sigma = math.sqrt(cfg.params.var0) if cfg.basis_sigma is None else cfg.basis_sigma
    rule = gauss_hermite(cfg.quad_nodes) if cfg.quad_nodes else None
    return run_filter(spec, BasisSpec(family, cfg.n, mu, sigma), cfg.method, bundle, rule=rule)


def cmd_filter(cfg: RunConfig, args) -> int:
    spec = cfg.model()
    if args.inp:
        bundle = PathBundle.from_csv(args.inp)
        if bundle.x_path.shape[1] != spec.dim_x or bundle.dz.shape[1] != spec.dim_z:
            raise ConfigError("path file dimensions do not match the configured model")
    else:
        bundle = simulate_bundle(spec, cfg.dt, cfg.steps, cfg.seed)
    result = _run_one_filter(cfg, spec, bundle)
    _emit(result.to_csv_string(), args.out)
    return EXIT_OK


def _report(rows, out: Optional[str]) -> None:
    print(format_table(rows))
    if out:
        Path(out).write_text(rows_to_csv_string(rows))


def cmd_benchmark(cfg: RunConfig, args) -> int:
    _report(run_experiment(cfg.experiment()), args.out)
    return EXIT_OK


def cmd_convergence(cfg: RunConfig, args) -> int:
    exp = cfg.experiment()
    _report(convergence_sweep(exp, cfg.kind, cfg.sizes, cfg.stepper), args.out)
    return EXIT_OK


def cmd_stability(cfg: RunConfig, args) -> int:
    exp = cfg.experiment()
    _report(stability_sweep(exp, cfg.dts, n=cfg.n, adaptive=cfg.adaptive), args.out)
    return EXIT_OK


COMMANDS = {
    "simulate": (cmd_simulate, "simulate a signal path and its observations (CSV)"),
    "filter": (cmd_filter, "run one filter over a path (CSV of estimates)"),
    "benchmark": (cmd_benchmark, "compare methods over repeated paths"),
    "convergence": (cmd_convergence, "sweep the basis size"),
    "stability": (cmd_stability, "sweep the time step for EM and SU"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="zakai-galerkin",
        description="Galerkin filters for diffusive and point-process observations.",
        epilog=CONFIG_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=CONFIG_HELP,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--seed", type=int, help="master random seed")
        p.add_argument("--out", help="output CSV (stdout if omitted for simulate/filter)")
        p.add_argument("--dt", type=float, help="time step")
        if name == "filter":
            p.add_argument("--in", dest="inp", help="path CSV written by simulate")
            p.add_argument("--method", choices=("em", "su", "pf", "kb"), help="filter method")
            p.add_argument("--n", type=int, help="basis size (per axis for multi-d)")
            p.add_argument("--adaptive", action="store_true", help="relocate the Hermite basis")
            p.add_argument("--particles", type=int, help="particle count for --method pf")
        if name in ("benchmark", "convergence", "stability"):
            p.add_argument("--paths", type=int, help="number of simulated paths")
        if name == "stability":
            p.add_argument("--n", type=int, help="basis size")
            p.add_argument("--adaptive", action="store_true", help="use the adaptive filter")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command][0](cfg, args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except NUMERICAL_ERRORS as exc:
        print(f"error: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ZakaiError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
