"""Regression rank scores and their location-model oracle.

A converged quantile fit at level alpha splits the observations into
positive residuals (score 1), negative residuals (score 0) and an active
set fitted exactly.  The active scores are the free coordinates of the
linear system that makes the score vector orthogonal to the gradient
design; when the system is underdetermined the tie is broken by
maximizing sum y_i a_i over the remaining box, via the simplex engine.

For an intercept-only model the scores coincide with the classical rank
scores of the location model (``hajek_score``), which is the exact oracle
used throughout the test-suite.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DegenerateActiveSetError,
    DomainError,
    InfeasibleError,
    NlrrsError,
)
from .lp import box_lp, solve_box_lp
from .models import Dataset, ModelSpec, eval_design
from .quantile import (
    QuantileFit,
    SolverOptions,
    activity_threshold,
    check_loss,
    fit_quantile,
)


def hajek_score(R, n: int, alpha):
    """Location-model rank score: clip(R - n*alpha, 0, 1).

    Piecewise linear and continuous in alpha: equals 1 for
    alpha <= (R-1)/n, 0 for alpha >= R/n, and R - n*alpha in between.
    """
    R = np.asarray(R)
    if np.any(R < 1) or np.any(R > n) or not np.all(R == np.floor(R)):
        raise DomainError("ranks must be integers in 1..n")
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha < 0) or np.any(alpha > 1):
        raise DomainError("alpha must lie in [0, 1]")
    out = np.clip(R - n * alpha, 0.0, 1.0)
    if out.ndim == 0:
        return float(out)
    return out


def ranks_of(values) -> np.ndarray:
    """Ranks 1..n of a vector, ties broken by index order (stable)."""
    values = np.asarray(values)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.int64)
    ranks[order] = np.arange(1, len(values) + 1)
    return ranks


def rank_scores_at(
    dataset: Dataset,
    model: ModelSpec,
    alpha: float,
    opts: Optional[SolverOptions] = None,
    *,
    fit: Optional[QuantileFit] = None,
    initial_points: Optional[Sequence] = None,
):
    """Rank-score vector at one level, together with the quantile fit used.

    Raises DegenerateActiveSetError when the fit is not at an optimum of
    the check loss (the orthogonality system then has no solution in the
    unit box).
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    opts = opts or SolverOptions()
    if fit is None:
        fit = fit_quantile(dataset, model, alpha, opts, initial_points=initial_points)
    V = eval_design(model, dataset, fit.theta_hat).V
    resid = fit.residuals
    n, k = V.shape

    # Candidate active sets: the configured activity threshold first, then
    # progressively larger sets of the smallest residuals.  The membership
    # cap keeps the duality identity within budget: freeing a score of a
    # residual of size s perturbs the identity by at most s/n.
    thr = activity_threshold(resid, opts)
    cap = max(thr, 1e-9 * dataset.n * (1.0 + float(np.median(np.abs(resid)))))
    order = np.argsort(np.abs(resid), kind="stable")
    candidates = [np.abs(resid) <= thr]
    for m in range(k, -1, -1):
        act = np.zeros(n, dtype=bool)
        take = order[:m]
        act[take[np.abs(resid[take]) <= cap]] = True
        candidates.append(act)

    last_exc: Optional[Exception] = None
    tried = set()
    for active in candidates:
        key = active.tobytes()
        if key in tried:
            continue
        tried.add(key)
        try:
            a = _scores_for_active(dataset, V, resid, alpha, active)
            _verify_scores(a, V, resid, alpha)
            return a, fit
        except (DegenerateActiveSetError, InfeasibleError) as exc:
            last_exc = exc
    raise DegenerateActiveSetError(
        f"rank-score system infeasible at alpha={alpha:g}: {last_exc}"
    ) from last_exc


def _scores_for_active(dataset, V, resid, alpha, active):
    n, k = V.shape
    pos = (resid > 0) & ~active
    a = np.zeros(n)
    a[pos] = 1.0
    target = (1.0 - alpha) * V.sum(axis=0) - V[pos].sum(axis=0)
    n_act = int(active.sum())
    if n_act == 0:
        return a
    if n_act == k:
        try:
            free = np.linalg.solve(V[active].T, target)
            if np.all(np.isfinite(free)) and free.min() >= -1e-8 and free.max() <= 1.0 + 1e-8:
                a[active] = np.clip(free, 0.0, 1.0)
                return a
        except np.linalg.LinAlgError:
            pass
    sol = box_lp(
        dataset.y[active], V[active].T, target, tol_feas=2e-7
    )
    a[active] = sol.x
    return a


def _verify_scores(a, V, resid, alpha):
    n = len(a)
    sum_gap = abs(float(a.sum()) - n * (1.0 - alpha))
    orth_gap = float(np.max(np.abs(V.T @ (a - (1.0 - alpha)))))
    dual_gap = abs(
        float(resid @ (a - (1.0 - alpha))) - float(np.sum(check_loss(resid, alpha)))
    ) / n
    if sum_gap > 1e-6 or orth_gap > 1e-6 or dual_gap > 1e-8:
        raise DegenerateActiveSetError(
            "rank scores failed the optimality identities "
            f"(sum {sum_gap:.2e}, orthogonality {orth_gap:.2e}, "
            f"duality {dual_gap:.2e}); the quantile fit is likely not optimal"
        )


def verify_duality(fit: QuantileFit, a_hat, alpha: float) -> float:
    """Gap between the score cross-term and the mean check loss at the fit."""
    resid = fit.residuals
    n = len(resid)
    lhs = float(resid @ (np.asarray(a_hat, float) - (1.0 - alpha))) / n
    rhs = float(np.sum(check_loss(resid, alpha))) / n
    return abs(lhs - rhs)


@dataclass(frozen=True)
class RankScoreGrid:
    """Rank scores evaluated over a grid of quantile levels.

    ``A[i, k]`` is the score of observation i at level ``alphas[k]``; the
    per-level quantile fits are retained for diagnostics.
    """

    alphas: np.ndarray
    A: np.ndarray
    fits: tuple
    epsilon: float

    @property
    def n(self) -> int:
        return self.A.shape[0]


def rank_score_grid(
    dataset: Dataset,
    model: ModelSpec,
    epsilon: float,
    m: int,
    extra_points: Sequence = (),
    opts: Optional[SolverOptions] = None,
) -> RankScoreGrid:
    """Scores on the uniform m-point grid over [epsilon, 1-epsilon].

    ``extra_points`` are merged into the grid (sorted, deduplicated).
    Levels are computed in increasing order, each fit warm-started at the
    previous level's parameters, so columns are sequential by design.
    """
    if not 0.0 < epsilon < 0.5:
        raise DomainError("epsilon must lie in (0, 1/2)")
    if m < 2:
        raise DomainError("grid size m must be >= 2")
    extra = np.asarray(sorted(extra_points), dtype=float)
    if extra.size and (extra.min() < epsilon - 1e-12 or extra.max() > 1 - epsilon + 1e-12):
        raise DomainError("extra grid points must lie within [epsilon, 1-epsilon]")
    alphas = np.unique(np.concatenate([np.linspace(epsilon, 1.0 - epsilon, m), extra]))
    opts = opts or SolverOptions()
    warm_opts = replace(opts, multistart=1)

    n = dataset.n
    A = np.empty((n, len(alphas)))
    fits = []
    prev_theta = None
    for kk, alpha in enumerate(alphas):
        alpha = float(alpha)
        try:
            if prev_theta is None:
                a, fit = rank_scores_at(dataset, model, alpha, opts)
            else:
                # Continuation: the previous level's parameters start the
                # fit; a full multistart retry backs up any failure.
                try:
                    a, fit = rank_scores_at(
                        dataset, model, alpha, warm_opts,
                        initial_points=[prev_theta],
                    )
                except NlrrsError:
                    a, fit = rank_scores_at(dataset, model, alpha, opts)
        except NlrrsError as exc:
            raise type(exc)(f"grid column alpha={alpha:g} failed: {exc}") from exc
        A[:, kk] = a
        fits.append(fit)
        prev_theta = fit.theta_hat
    return RankScoreGrid(alphas=alphas, A=A, fits=tuple(fits), epsilon=epsilon)


def boundary_extension(grid: RankScoreGrid) -> Callable[[float], np.ndarray]:
    """Evaluation rule on all of [0, 1].

    Exactly 1 at 0 and 0 at 1; constant equal to the nearest computed
    column outside [epsilon, 1-epsilon]; linear interpolation between
    grid columns inside.
    """
    alphas, A = grid.alphas, grid.A
    n = grid.n

    def evaluate(alpha: float) -> np.ndarray:
        if not 0.0 <= alpha <= 1.0:
            raise DomainError("alpha must lie in [0, 1]")
        if alpha == 0.0:
            return np.ones(n)
        if alpha == 1.0:
            return np.zeros(n)
        if alpha <= alphas[0]:
            return A[:, 0].copy()
        if alpha >= alphas[-1]:
            return A[:, -1].copy()
        j = int(np.searchsorted(alphas, alpha, side="right")) - 1
        if alphas[j] == alpha:
            return A[:, j].copy()
        w = (alpha - alphas[j]) / (alphas[j + 1] - alphas[j])
        return (1.0 - w) * A[:, j] + w * A[:, j + 1]

    return evaluate


def format_grid(grid: RankScoreGrid, precision: int = 12) -> str:
    """Delimited text: first row the levels, then one row per observation."""
    fmt = f"%.{precision}g"
    lines = [",".join(fmt % a for a in grid.alphas)]
    for i in range(grid.n):
        lines.append(",".join(fmt % v for v in grid.A[i]))
    return "\n".join(lines) + "\n"


def parse_grid_text(text: str):
    """Inverse of format_grid up to printed precision: (alphas, A)."""
    rows = [r for r in text.strip().splitlines() if r.strip()]
    alphas = np.array([float(v) for v in rows[0].split(",")])
    A = np.array([[float(v) for v in r.split(",")] for r in rows[1:]])
    if A.size and A.shape[1] != len(alphas):
        raise DomainError("score rows do not match the level row")
    return alphas, A
