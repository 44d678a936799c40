"""Synthetic data generation and Monte Carlo validation harness.

Generates data from a nonlinear regression with an additive tested
regression term and symmetric errors, runs size/power experiments for the
rank-score criteria, and checks the asymptotic linearization and the
location-model equivalence of the scores on doubling sample-size ladders.

Reproducibility contract: replication k draws from a generator seeded by
(seed, k), so every per-replication statistic is a pure function of the
scenario and independent of execution order or parallelism degree.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import special

from .errors import DomainError, McFailureRateError, NlrrsError
from .models import Dataset, ModelSpec, eval_design, eval_g_all, in_box
from .quantile import SolverOptions, fit_quantile
from .ranktests import (
    ScoreFunction,
    asymptotic_power,
    chi_square_quantile,
    chi_square_sf,
    noncentrality,
    normal_quantile,
    normal_sf,
    projection_residual,
    statistic_Tn,
    statistic_Tn_star,
    wilcoxon_score,
)
from .scores import rank_score_grid, ranks_of


# ---------------------------------------------------------------------------
# Error laws
# ---------------------------------------------------------------------------

_LAW_KINDS = ("normal", "logistic", "laplace", "cauchy")


@dataclass(frozen=True)
class ErrorLaw:
    """A symmetric error distribution with closed-form F, F^{-1} and f."""

    kind: str
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in _LAW_KINDS:
            raise DomainError(f"unknown error law {self.kind!r}; use {_LAW_KINDS}")
        if not self.scale > 0:
            raise DomainError("scale must be positive")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "normal":
            return self.scale * rng.standard_normal(n)
        if self.kind == "logistic":
            return rng.logistic(0.0, self.scale, n)
        if self.kind == "laplace":
            return rng.laplace(0.0, self.scale, n)
        return self.scale * rng.standard_cauchy(n)

    def quantile(self, u):
        u = np.asarray(u, dtype=float)
        s = self.scale
        if self.kind == "normal":
            return s * special.ndtri(u)
        if self.kind == "logistic":
            with np.errstate(divide="ignore"):
                return s * (np.log(u) - np.log1p(-u))
        if self.kind == "laplace":
            with np.errstate(divide="ignore"):
                return s * np.where(
                    u < 0.5, np.log(2.0 * u), -np.log(2.0 * (1.0 - u))
                )
        return s * np.tan(np.pi * (u - 0.5))

    def cdf(self, x):
        x = np.asarray(x, dtype=float) / self.scale
        if self.kind == "normal":
            return special.ndtr(x)
        if self.kind == "logistic":
            return special.expit(x)
        if self.kind == "laplace":
            return np.where(x < 0, 0.5 * np.exp(x), 1.0 - 0.5 * np.exp(-x))
        return 0.5 + np.arctan(x) / np.pi

    def density(self, x):
        x = np.asarray(x, dtype=float) / self.scale
        s = self.scale
        if self.kind == "normal":
            return np.exp(-0.5 * x * x) / (math.sqrt(2.0 * math.pi) * s)
        if self.kind == "logistic":
            p = special.expit(x)
            return p * (1.0 - p) / s
        if self.kind == "laplace":
            return 0.5 * np.exp(-np.abs(x)) / s
        return 1.0 / (math.pi * s * (1.0 + x * x))

    def density_quantile(self, u):
        """f(F^{-1}(u)) in closed form; exactly zero at u in {0, 1}."""
        u = np.asarray(u, dtype=float)
        s = self.scale
        if self.kind == "normal":
            z = special.ndtri(u)
            out = np.exp(-0.5 * z * z) / (math.sqrt(2.0 * math.pi) * s)
            return np.where((u <= 0.0) | (u >= 1.0), 0.0, out)
        if self.kind == "logistic":
            return u * (1.0 - u) / s
        if self.kind == "laplace":
            return np.minimum(u, 1.0 - u) / s
        return np.sin(np.pi * u) ** 2 / (math.pi * s)


# ---------------------------------------------------------------------------
# Design builders
# ---------------------------------------------------------------------------


def build_x_design(spec: Optional[dict], n: int) -> np.ndarray:
    """Deterministic design points: a uniform grid, a replicated grid (the
    same measurement times repeated for each group, the natural two-sample
    layout), an explicit matrix, or none at all (intercept-only models)."""
    if spec is None:
        spec = {"kind": "replicated_grid", "low": 0.0, "high": 4.0, "copies": 2}
    kind = spec.get("kind")
    if kind == "none":
        return np.empty((n, 0))
    if kind == "uniform_grid":
        low = float(spec.get("low", 0.0))
        high = float(spec.get("high", 4.0))
        if not 0.0 <= low < high:
            raise DomainError("uniform_grid needs 0 <= low < high")
        return np.linspace(low, high, n)[:, None]
    if kind == "replicated_grid":
        low = float(spec.get("low", 0.0))
        high = float(spec.get("high", 4.0))
        copies = int(spec.get("copies", 2))
        if not 0.0 <= low < high:
            raise DomainError("replicated_grid needs 0 <= low < high")
        if copies < 1 or n % copies:
            raise DomainError("replicated_grid needs copies >= 1 dividing n")
        pts = np.linspace(low, high, n // copies)
        return np.tile(pts, copies)[:, None]
    if kind == "explicit":
        X = np.asarray(spec["values"], dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape[0] != n:
            raise DomainError(f"explicit design has {X.shape[0]} rows, need {n}")
        return X
    raise DomainError(f"unknown x design kind {kind!r}")


def _z_column(spec: dict, n: int) -> np.ndarray:
    kind = spec.get("kind")
    if kind == "two_sample":
        z = np.where(np.arange(n) < (n + 1) // 2, 0.5, -0.5)
        return z - z.mean()
    if kind == "alternating":
        z = np.where(np.arange(n) % 2 == 0, 0.5, -0.5)
        return z - z.mean()
    if kind == "trend":
        t = np.arange(1, n + 1) - (n + 1) / 2.0
        return t / math.sqrt(float(np.mean(t * t)))
    if kind == "explicit":
        z = np.asarray(spec["values"], dtype=float)
        if z.shape != (n,):
            raise DomainError(f"explicit z column must have length {n}")
        return z
    raise DomainError(f"unknown z design kind {kind!r}")


def build_z_design(specs, n: int) -> Optional[np.ndarray]:
    """Tested-regressor matrix from a list of column specs (or None)."""
    if specs is None:
        return None
    if isinstance(specs, dict):
        specs = [specs]
    cols = [_z_column(s, n) for s in specs]
    if not cols:
        return None
    return np.column_stack(cols)


# ---------------------------------------------------------------------------
# Scenario configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    """One Monte Carlo scenario: model, truth, designs, error law and test."""

    model: ModelSpec
    theta_true: np.ndarray
    n: int
    error: ErrorLaw
    replications: int
    seed: int
    beta_true: Optional[np.ndarray] = None
    z_design: Optional[tuple] = None
    x_design: Optional[dict] = None
    score: ScoreFunction = field(default_factory=wilcoxon_score)
    nominal_level: float = 0.05
    grid_m: int = 51
    solver: SolverOptions = field(default_factory=lambda: SolverOptions(multistart=2))
    statistic_kind: str = "tn"
    residualized_sn: bool = False

    def __post_init__(self):
        theta = np.asarray(self.theta_true, dtype=float)
        object.__setattr__(self, "theta_true", theta)
        if not in_box(self.model, theta):
            raise DomainError("theta_true must lie inside the parameter box")
        if self.replications < 1:
            raise DomainError("replications must be >= 1")
        if self.statistic_kind not in ("tn", "tn_star"):
            raise DomainError("statistic_kind must be 'tn' or 'tn_star'")
        if isinstance(self.z_design, dict):
            object.__setattr__(self, "z_design", (self.z_design,))
        elif self.z_design is not None:
            object.__setattr__(self, "z_design", tuple(self.z_design))
        if self.beta_true is not None:
            beta = np.atleast_1d(np.asarray(self.beta_true, dtype=float))
            object.__setattr__(self, "beta_true", beta)
            Z = build_z_design(self.z_design, self.n)
            r = 0 if Z is None else Z.shape[1]
            if beta.shape != (r,):
                raise DomainError(
                    f"beta_true has shape {beta.shape}, z design has {r} columns"
                )

    @property
    def r(self) -> int:
        Z = build_z_design(self.z_design, self.n)
        return 0 if Z is None else Z.shape[1]


def generate_dataset(config: ScenarioConfig, replication: int):
    """One synthetic dataset plus its latent errors and their ranks.

    Deterministic given (config.seed, replication): the error stream is a
    pure function of that pair, the designs are fixed.
    """
    X = build_x_design(config.x_design, config.n)
    Z = build_z_design(config.z_design, config.n)
    rng = np.random.default_rng([config.seed, replication])
    e = config.error.sample(rng, config.n)
    y = eval_g_all(config.model, X, config.theta_true) + e
    if Z is not None and config.beta_true is not None and config.beta_true.size:
        y = y + Z @ config.beta_true
    dataset = Dataset(y=y, X=X, Z=Z)
    return dataset, e, ranks_of(e)


def psi_alpha(u, alpha: float):
    """Quantile influence sign: alpha for u >= 0, alpha - 1 otherwise."""
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    u = np.asarray(u, dtype=float)
    out = np.where(u >= 0, alpha, alpha - 1.0)
    if out.ndim == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# Monte Carlo size and power
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class McReport:
    rejection_rate: float
    statistics: np.ndarray
    ks_distance: float
    failures: int
    wall_time: float
    replications: int
    nominal_level: float
    threshold: float
    statistic_kind: str


def _replication_statistic(config: ScenarioConfig, rep: int) -> float:
    dataset, _, _ = generate_dataset(config, rep)
    if config.statistic_kind == "tn":
        res = statistic_Tn(
            dataset,
            config.model,
            config.score,
            config.solver,
            grid_m=config.grid_m,
            residualized_sn=config.residualized_sn,
        )
    else:
        res = statistic_Tn_star(
            dataset,
            config.model,
            config.score,
            config.solver,
            grid_m=config.grid_m,
            residualized_sn=config.residualized_sn,
        )
    if not res.fit.converged:
        raise McFailureRateError("projection fit did not converge")
    return res.statistic


def _statistic_or_none(args):
    config, rep = args
    try:
        return _replication_statistic(config, rep)
    except NlrrsError:
        return None


def _run_replications(config: ScenarioConfig, n_jobs: int):
    tasks = [(config, rep) for rep in range(config.replications)]
    if n_jobs <= 1:
        return [_statistic_or_none(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n_jobs) as pool:
        return list(pool.map(_statistic_or_none, tasks, chunksize=8))


def _null_cdf(config: ScenarioConfig, x: np.ndarray) -> np.ndarray:
    if config.statistic_kind == "tn":
        r = config.r
        return np.array([1.0 - chi_square_sf(max(v, 0.0), r) for v in x])
    return np.array([1.0 - normal_sf(v) for v in x])


def _ks_distance(stats: np.ndarray, cdf_vals: np.ndarray) -> float:
    n = len(stats)
    order = np.argsort(stats)
    F = cdf_vals[order]
    i = np.arange(1, n + 1)
    return float(np.max(np.maximum(np.abs(i / n - F), np.abs((i - 1) / n - F))))


def _rejection_threshold(config: ScenarioConfig) -> float:
    tau = config.nominal_level
    if not 0.0 < tau <= 1.0:
        raise DomainError("nominal_level must lie in (0, 1]")
    if config.statistic_kind == "tn":
        return chi_square_quantile(1.0 - tau, config.r)
    if tau == 1.0:
        return -np.inf
    return normal_quantile(1.0 - tau)


def monte_carlo_size(config: ScenarioConfig, n_jobs: int = 1) -> McReport:
    """Null rejection rate and distributional distance of the test statistic.

    Failed replications are excluded and counted; more than 2% of them is a
    hard failure because silent exclusion at that rate would bias the size
    estimate.
    """
    threshold = _rejection_threshold(config)  # validates the level up front
    if config.error.kind == "cauchy" and config.n < 400:
        raise DomainError("cauchy size experiments require n >= 400")
    t0 = time.perf_counter()
    results = _run_replications(config, n_jobs)
    failures = sum(1 for v in results if v is None)
    if failures > 0.02 * config.replications:
        raise McFailureRateError(
            f"{failures}/{config.replications} replications failed to converge"
        )
    stats = np.array([v for v in results if v is not None])
    rate = float(np.mean(stats >= threshold)) if len(stats) else float("nan")
    ks = _ks_distance(np.sort(stats), _null_cdf(config, np.sort(stats)))
    return McReport(
        rejection_rate=rate,
        statistics=stats,
        ks_distance=ks,
        failures=failures,
        wall_time=time.perf_counter() - t0,
        replications=config.replications,
        nominal_level=config.nominal_level,
        threshold=threshold,
        statistic_kind=config.statistic_kind,
    )


@dataclass(frozen=True)
class PowerPoint:
    beta0: np.ndarray
    empirical_power: float
    predicted_power: float
    noncentrality: float
    failures: int


@dataclass(frozen=True)
class PowerCurve:
    points: tuple
    nominal_level: float
    n: int


def null_design_covariance(config: ScenarioConfig) -> np.ndarray:
    """Finite-sample covariance of the projected tested regressors at the
    true parameters (the studentizing matrix the limit theory refers to)."""
    X = build_x_design(config.x_design, config.n)
    Z = build_z_design(config.z_design, config.n)
    if Z is None:
        raise DomainError("the scenario has no tested regressors")
    ds = Dataset(y=np.zeros(config.n), X=X, Z=Z)
    V = eval_design(config.model, ds, config.theta_true).V
    Zres, _ = projection_residual(Z, V)
    return Zres.T @ Zres / config.n


def monte_carlo_power(
    config: ScenarioConfig, beta0_grid: Sequence, n_jobs: int = 1
) -> PowerCurve:
    """Rejection rates under local alternatives beta = beta0 / sqrt(n),
    reported next to the noncentral chi-square predictions."""
    D = null_design_covariance(config)
    points = []
    for beta0 in beta0_grid:
        beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
        local = replace(config, beta_true=beta0 / math.sqrt(config.n))
        report = monte_carlo_size(local, n_jobs=n_jobs)
        points.append(
            PowerPoint(
                beta0=beta0,
                empirical_power=report.rejection_rate,
                predicted_power=asymptotic_power(
                    beta0, D, config.score, config.error, config.nominal_level
                ),
                noncentrality=noncentrality(beta0, D, config.score, config.error),
                failures=report.failures,
            )
        )
    return PowerCurve(
        points=tuple(points), nominal_level=config.nominal_level, n=config.n
    )


# ---------------------------------------------------------------------------
# Asymptotic-representation diagnostics
# ---------------------------------------------------------------------------


def _require_null(config: ScenarioConfig):
    if config.beta_true is not None and np.any(config.beta_true != 0):
        raise DomainError("this diagnostic requires beta_true = 0")


def _bahadur_replication(args):
    config, rep, alphas = args
    dataset, e, _ = generate_dataset(config, rep)
    n = config.n
    ds_null = Dataset(y=dataset.y, X=dataset.X)  # drop Z: null submodel
    V = eval_design(config.model, ds_null, config.theta_true).V
    out = {}
    prev = config.theta_true
    try:
        for alpha in alphas:
            fit = fit_quantile(
                ds_null, config.model, alpha, config.solver, initial_points=[prev]
            )
            prev = fit.theta_hat
            qa = float(config.error.quantile(alpha))
            theta_alpha = config.theta_true.copy()
            theta_alpha[0] += qa
            E_ia = e - qa
            lead = V.T @ psi_alpha(E_ia, alpha) / (
                math.sqrt(n) * float(config.error.density_quantile(alpha))
            )
            delta = math.sqrt(n) * (fit.theta_hat - theta_alpha) - lead
            out[alpha] = float(np.linalg.norm(delta))
    except NlrrsError:
        return None
    return out


@dataclass(frozen=True)
class LadderReport:
    """Medians of a discrepancy across replications, per sample size.

    ``medians`` maps n -> (per-alpha dict for the linearization check, or a
    scalar for the score-equivalence check); ``failures`` maps n -> count.
    """

    medians: dict
    failures: dict

    def non_increasing_steps(self) -> int:
        """Number of consecutive sample-size steps where the (max over
        alphas of the) median does not increase."""
        ns = sorted(self.medians)
        vals = []
        for n in ns:
            v = self.medians[n]
            vals.append(max(v.values()) if isinstance(v, dict) else v)
        return sum(1 for a, b in zip(vals, vals[1:]) if b <= a)


def check_bahadur(
    config: ScenarioConfig,
    alphas: Sequence,
    n_values: Optional[Sequence] = None,
    n_jobs: int = 1,
) -> LadderReport:
    """Median distance between the scaled fit error and its leading
    linearization term, per level and sample size."""
    _require_null(config)
    alphas = sorted(float(a) for a in alphas)
    for a in alphas:
        if not 0.0 < a < 1.0:
            raise DomainError("alphas must lie in (0, 1)")
    if config.error.kind == "cauchy":
        raise DomainError(
            "the linearization diagnostic excludes heavy-tailed cauchy errors"
        )
    n_values = [config.n] if n_values is None else list(n_values)
    medians, failures = {}, {}
    for n in n_values:
        cfg = replace(config, n=n)
        tasks = [(cfg, rep, tuple(alphas)) for rep in range(cfg.replications)]
        if n_jobs <= 1:
            results = [_bahadur_replication(t) for t in tasks]
        else:
            with ProcessPoolExecutor(max_workers=n_jobs) as pool:
                results = list(pool.map(_bahadur_replication, tasks, chunksize=4))
        ok = [r for r in results if r is not None]
        failures[n] = len(results) - len(ok)
        medians[n] = {
            a: float(np.median([r[a] for r in ok])) for a in alphas
        }
    return LadderReport(medians=medians, failures=failures)


def _hajek_replication(args):
    config, rep = args
    dataset, e, ranks = generate_dataset(config, rep)
    n = config.n
    try:
        grid = rank_score_grid(
            dataset,
            config.model,
            config.score.epsilon,
            config.grid_m,
            opts=config.solver,
        )
        V = eval_design(config.model, dataset, config.theta_true).V
        Zres, _ = projection_residual(dataset.Z, V)
        astar = np.clip(ranks[:, None] - n * grid.alphas[None, :], 0.0, 1.0)
        diff = dataset.Z.T @ grid.A - Zres.T @ astar  # (r, m)
        return float(np.max(np.linalg.norm(diff, axis=0))) / math.sqrt(n)
    except NlrrsError:
        return None


def check_hajek_equivalence(
    config: ScenarioConfig,
    n_values: Optional[Sequence] = None,
    n_jobs: int = 1,
) -> LadderReport:
    """Median sup-distance between the rank-score statistic and its
    location-model (projected-coefficient) counterpart, per sample size."""
    _require_null(config)
    if config.z_design is None:
        raise DomainError("this diagnostic requires tested regressors")
    n_values = [config.n] if n_values is None else list(n_values)
    medians, failures = {}, {}
    for n in n_values:
        cfg = replace(config, n=n)
        tasks = [(cfg, rep) for rep in range(cfg.replications)]
        if n_jobs <= 1:
            results = [_hajek_replication(t) for t in tasks]
        else:
            with ProcessPoolExecutor(max_workers=n_jobs) as pool:
                results = list(pool.map(_hajek_replication, tasks, chunksize=4))
        ok = [r for r in results if r is not None]
        failures[n] = len(results) - len(ok)
        medians[n] = float(np.median(ok)) if ok else float("nan")
    return LadderReport(medians=medians, failures=failures)
