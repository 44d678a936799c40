"""Rank-score tests of linear-regression effects under nuisance nonlinear fits.

Pipeline: truncate a monotone score function to be constant outside
[epsilon, 1-epsilon], integrate the rank-score grid against it to get one
score per observation, project the tested regressors off the gradient
design of the location (alpha = 1/2) fit, and studentize.  The quadratic
criterion is asymptotically chi-square with r degrees of freedom under
the null; the one-sided single-regressor criterion is asymptotically
standard normal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import special, stats

from .errors import DomainError, RankDeficiencyError, SingularCovarianceError
from .models import Dataset, ModelSpec, eval_design
from .quantile import QuantileFit, SolverOptions, fit_quantile
from .scores import RankScoreGrid, rank_score_grid


# ---------------------------------------------------------------------------
# Score functions
# ---------------------------------------------------------------------------


def _wilcoxon_phi(u):
    return np.asarray(u, dtype=float) - 0.5


def _median_phi(u):
    u = np.asarray(u, dtype=float)
    return np.where(u < 0.5, -1.0, np.where(u > 0.5, 1.0, 0.0))


class _TruncatedPhi:
    """phi held constant below epsilon and above 1 - epsilon."""

    def __init__(self, phi: Callable, epsilon: float):
        self.phi = phi
        self.epsilon = epsilon

    def __call__(self, u):
        u = np.clip(np.asarray(u, dtype=float), self.epsilon, 1.0 - self.epsilon)
        return self.phi(u)


def truncate_phi(phi: Callable, epsilon: float) -> Callable:
    """Evaluation rule for the truncated score function on [0, 1]."""
    if not 0.0 < epsilon < 0.5:
        raise DomainError("epsilon must lie in (0, 1/2)")
    return _TruncatedPhi(phi, epsilon)


@dataclass(frozen=True)
class ScoreFunction:
    """A monotone score generator with its truncation level.

    ``jump_points`` lists the discontinuity locations inside
    [epsilon, 1-epsilon]; score integration requires them to be grid
    nodes so that their atoms hit exact evaluations.
    """

    kind: str
    epsilon: float
    phi: Callable
    jump_points: tuple = ()

    def __post_init__(self):
        if not 0.0 < self.epsilon < 0.5:
            raise DomainError("epsilon must lie in (0, 1/2)")
        for s in self.jump_points:
            if not self.epsilon <= s <= 1.0 - self.epsilon:
                raise DomainError("jump points must lie in [epsilon, 1-epsilon]")

    def truncated(self) -> Callable:
        return truncate_phi(self.phi, self.epsilon)


def wilcoxon_score(epsilon: float = 0.05) -> ScoreFunction:
    return ScoreFunction("wilcoxon", epsilon, _wilcoxon_phi, ())


def median_score(epsilon: float = 0.05) -> ScoreFunction:
    return ScoreFunction("median", epsilon, _median_phi, (0.5,))


def custom_score(phi: Callable, epsilon: float, jump_points=()) -> ScoreFunction:
    return ScoreFunction("custom", epsilon, phi, tuple(sorted(jump_points)))


def check_score_symmetry(score: ScoreFunction, tol: float = 1e-12) -> None:
    """Require phi(1-u) = -phi(u) on a sample of points (the test statistics
    assume a skew-symmetric score generator)."""
    u = np.linspace(0.01, 0.99, 97)
    gap = np.max(np.abs(np.asarray(score.phi(1.0 - u)) + np.asarray(score.phi(u))))
    if gap > tol:
        raise DomainError(
            f"score function is not skew-symmetric about 1/2 (gap {gap:.2e})"
        )


# ---------------------------------------------------------------------------
# Score integrals
# ---------------------------------------------------------------------------


def score_integrals(grid: RankScoreGrid, score: ScoreFunction) -> np.ndarray:
    """Stieltjes integral of each observation's score path against the
    truncated score function.

    The absolutely continuous part uses midpoint evaluation of the score
    path (linear interpolation between grid columns); each jump of the
    truncated function contributes its mass times the exact grid column
    at the jump.  Jump points must be grid nodes.
    """
    if abs(score.epsilon - grid.epsilon) > 1e-12:
        raise DomainError(
            f"score epsilon {score.epsilon} does not match grid epsilon {grid.epsilon}"
        )
    nodes = grid.alphas
    phie = score.truncated()
    left = np.asarray(phie(nodes), dtype=float).copy()
    right = left.copy()
    offset = 1e-9
    for s in score.jump_points:
        idx = np.nonzero(np.abs(nodes - s) <= 1e-12)[0]
        if len(idx) == 0:
            raise DomainError(f"jump point {s} is not a grid node")
        j = int(idx[0])
        left[j] = float(phie(s - offset))
        right[j] = float(phie(s + offset))
    jumps = right - left
    ac = left[1:] - right[:-1]
    A = grid.A
    mid = 0.5 * (A[:, 1:] + A[:, :-1])
    return mid @ ac + A @ jumps


def a_phi_squared(score: ScoreFunction, panels: int = 10_000) -> float:
    """Variance of the truncated score function over the unit interval,
    by the midpoint rule on ``panels`` uniform panels."""
    mids = (np.arange(panels) + 0.5) / panels
    vals = np.asarray(score.truncated()(mids), dtype=float)
    mean = float(vals.mean())
    return float(np.mean((vals - mean) ** 2))


# ---------------------------------------------------------------------------
# Projection and z diagnostics
# ---------------------------------------------------------------------------


def projection_residual(Z, V, want_hat: bool = False):
    """Residual of Z after projection onto the column span of V.

    Uses a reduced QR factorization; the hat matrix is materialized only
    on request.  Raises RankDeficiencyError when V loses column rank.
    """
    Z = np.asarray(Z, dtype=float)
    V = np.asarray(V, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    s = np.linalg.svd(V, compute_uv=False)
    if s[0] == 0 or s[-1] <= max(V.shape) * np.finfo(float).eps * s[0]:
        raise RankDeficiencyError("projection design is rank deficient")
    Q, _ = np.linalg.qr(V)
    Zres = Z - Q @ (Q.T @ Z)
    H = Q @ Q.T if want_hat else None
    return Zres, H


@dataclass(frozen=True)
class ZDiagnostics:
    column_sums: np.ndarray
    second_moment: np.ndarray
    max_row_norm_ratio: float
    centered_ok: bool
    growth_ok: bool

    @property
    def ok(self) -> bool:
        return self.centered_ok and self.growth_ok


def validate_z(Z) -> ZDiagnostics:
    """Centering and row-growth diagnostics for the tested regressors.

    Warnings only: the projection removes column means whenever the
    gradient design carries an intercept column, so an uncentered Z is
    flagged, not rejected.
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim == 1:
        Z = Z[:, None]
    n = Z.shape[0]
    sums = Z.sum(axis=0)
    second = Z.T @ Z / n
    ratio = float(np.max(np.linalg.norm(Z, axis=1)) / math.sqrt(n))
    return ZDiagnostics(
        column_sums=sums,
        second_moment=second,
        max_row_norm_ratio=ratio,
        centered_ok=bool(np.all(np.abs(sums) <= 1e-8)),
        growth_ok=bool(ratio <= 0.5),
    )


# ---------------------------------------------------------------------------
# Null distribution helpers
# ---------------------------------------------------------------------------


def chi_square_sf(x: float, r: int) -> float:
    """Survival function of the central chi-square with r degrees of freedom."""
    if x < 0:
        raise DomainError("chi-square argument must be >= 0")
    if r < 1:
        raise DomainError("degrees of freedom must be >= 1")
    return float(special.gammaincc(0.5 * r, 0.5 * x))


def chi_square_quantile(p: float, r: int) -> float:
    """Quantile of the central chi-square: sf(result, r) = 1 - p."""
    if not 0.0 <= p < 1.0:
        raise DomainError("p must lie in [0, 1)")
    if r < 1:
        raise DomainError("degrees of freedom must be >= 1")
    return float(special.chdtri(r, 1.0 - p))


def normal_sf(x: float) -> float:
    return float(special.ndtr(-np.asarray(x, dtype=float)))


def normal_quantile(p: float) -> float:
    if not 0.0 < p < 1.0:
        raise DomainError("p must lie in (0, 1)")
    return float(special.ndtri(p))


def noncentral_chi_square_sf(x: float, r: int, noncentrality: float) -> float:
    if x < 0 or noncentrality < 0 or r < 1:
        raise DomainError("invalid noncentral chi-square arguments")
    if noncentrality == 0:
        return chi_square_sf(x, r)
    return float(stats.ncx2.sf(x, r, noncentrality))


# ---------------------------------------------------------------------------
# Test statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestResult:
    """A rank-score test with its intermediate quantities."""

    statistic: float
    kind: str
    df: int
    p_value: float
    S_n: np.ndarray
    D_n: np.ndarray
    A2: float
    theta_half: np.ndarray
    epsilon: float
    score_kind: str
    grid_size: int
    residualized_sn: bool
    fit: QuantileFit


def _test_core(dataset, model, score, opts, grid_m, residualized_sn):
    if dataset.Z is None:
        raise DomainError("the dataset carries no tested regressors Z")
    check_score_symmetry(score)
    opts = opts or SolverOptions()
    n = dataset.n
    if grid_m is None:
        grid_m = max(51, n)
    fit = fit_quantile(dataset, model, 0.5, opts)
    grid = rank_score_grid(
        dataset,
        model,
        score.epsilon,
        grid_m,
        extra_points=score.jump_points,
        opts=opts,
    )
    b = score_integrals(grid, score)
    V = eval_design(model, dataset, fit.theta_hat).V
    Zres, _ = projection_residual(dataset.Z, V)
    zsrc = Zres if residualized_sn else dataset.Z
    S = zsrc.T @ b / math.sqrt(n)
    D = Zres.T @ Zres / n
    eigs = np.linalg.eigvalsh(D)
    zscale = float(np.mean(dataset.Z**2))
    if eigs[0] <= 1e-12 * max(zscale, eigs[-1]):
        raise SingularCovarianceError(
            f"studentizing matrix is numerically singular (eigenvalues {eigs}); "
            "the tested regressors are absorbed by the gradient design"
        )
    A2 = a_phi_squared(score)
    return fit, grid, b, S, D, A2


def statistic_Tn(
    dataset: Dataset,
    model: ModelSpec,
    score: ScoreFunction,
    opts: Optional[SolverOptions] = None,
    *,
    grid_m: Optional[int] = None,
    residualized_sn: bool = False,
) -> TestResult:
    """Quadratic rank-score criterion, chi-square with r df under the null."""
    fit, grid, b, S, D, A2 = _test_core(
        dataset, model, score, opts, grid_m, residualized_sn
    )
    r = dataset.r
    stat = float(S @ np.linalg.solve(D, S)) / A2
    stat = max(stat, 0.0)
    return TestResult(
        statistic=stat,
        kind="two_sided_chi2",
        df=r,
        p_value=chi_square_sf(stat, r),
        S_n=S,
        D_n=D,
        A2=A2,
        theta_half=fit.theta_hat,
        epsilon=score.epsilon,
        score_kind=score.kind,
        grid_size=len(grid.alphas),
        residualized_sn=residualized_sn,
        fit=fit,
    )


def statistic_Tn_star(
    dataset: Dataset,
    model: ModelSpec,
    score: ScoreFunction,
    opts: Optional[SolverOptions] = None,
    *,
    grid_m: Optional[int] = None,
    residualized_sn: bool = False,
) -> TestResult:
    """One-sided studentized criterion for a single tested regressor.

    Standard normal under the null; reject in favor of a positive effect
    when the statistic exceeds the normal (1 - tau)-quantile.
    """
    if dataset.r != 1:
        raise DomainError("the one-sided criterion requires exactly one regressor")
    fit, grid, b, S, D, A2 = _test_core(
        dataset, model, score, opts, grid_m, residualized_sn
    )
    stat = float(S[0]) / math.sqrt(A2 * float(D[0, 0]))
    return TestResult(
        statistic=stat,
        kind="one_sided_normal",
        df=1,
        p_value=normal_sf(stat),
        S_n=S,
        D_n=D,
        A2=A2,
        theta_half=fit.theta_hat,
        epsilon=score.epsilon,
        score_kind=score.kind,
        grid_size=len(grid.alphas),
        residualized_sn=residualized_sn,
        fit=fit,
    )


# ---------------------------------------------------------------------------
# Local power prediction
# ---------------------------------------------------------------------------


def score_density_integral(
    score: ScoreFunction, density, grid_points: int = 20_001
) -> float:
    """Stieltjes integral of the truncated score against u -> f(F^{-1}(u)),
    by midpoint evaluation on a fine uniform grid."""
    if not hasattr(density, "density_quantile"):
        raise DomainError(
            "density must expose density_quantile(u) in closed form"
        )
    u = np.linspace(0.0, 1.0, grid_points)
    fq = np.asarray(density.density_quantile(u), dtype=float)
    mids = 0.5 * (u[1:] + u[:-1])
    vals = np.asarray(score.truncated()(mids), dtype=float)
    return float(vals @ np.diff(fq))


def noncentrality(beta0, D, score: ScoreFunction, density) -> float:
    """Shift parameter of the chi-square limit under local alternatives
    scaled by the root sample size."""
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    D = np.atleast_2d(np.asarray(D, dtype=float))
    integral = score_density_integral(score, density)
    return float(beta0 @ D @ beta0) * integral**2 / a_phi_squared(score)


def asymptotic_power(beta0, D, score: ScoreFunction, density, tau: float) -> float:
    """Predicted rejection probability of the quadratic criterion under the
    local alternative with direction beta0."""
    if not 0.0 < tau <= 1.0:
        raise DomainError("tau must lie in (0, 1]")
    beta0 = np.atleast_1d(np.asarray(beta0, dtype=float))
    r = len(beta0)
    eta = noncentrality(beta0, D, score, density)
    crit = chi_square_quantile(1.0 - tau, r)
    return noncentral_chi_square_sf(crit, r, eta)
