"""Check-loss minimization for nonlinear quantile fits.

The linear case is solved exactly: the bounded-variable simplex is run on
the dual box program, whose optimal basis identifies the interpolated
observations, and the coefficients are recovered by solving the
interpolation equations.

The nonlinear case is sequential linearization with the trust region
inside the inner program: each iteration solves the linearized fit
subject to parameter bounds (the trust box intersected with the model's
parameter box), which is again a bounded-variable LP in dual form.  Runs
restart from multiple initial points because the objective is nonconvex
in the parameters, and the final iterate is snapped onto an interpolating
vertex so the rank-score system downstream has its active observations.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import (
    AllRestartsDivergedError,
    DomainError,
    InfeasibleError,
    RankDeficiencyError,
    SimplexNumericalError,
)
from .lp import BIG_UPPER, box_lp
from .models import (
    Dataset,
    ModelSpec,
    box_center,
    box_diameter,
    eval_design,
    eval_g_all,
    project_box,
)


def check_loss(z, alpha: float):
    """Asymmetric absolute loss: alpha*z for z > 0, (1-alpha)*(-z) for z < 0."""
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    z = np.asarray(z, dtype=float)
    out = np.where(z > 0, alpha * z, (alpha - 1.0) * z)
    if out.ndim == 0:
        return float(out)
    return out


def objective(dataset: Dataset, model: ModelSpec, t, alpha: float) -> float:
    """Summed check loss of the residuals at parameter t."""
    resid = dataset.y - eval_g_all(model, dataset.X, t)
    return float(np.sum(check_loss(resid, alpha)))


@dataclass(frozen=True)
class SolverOptions:
    """Knobs of the sequential-linearization quantile solver.

    tol_active is a relative factor: the residual-activity threshold is
    tol_active * (1 + median |residual|).
    """

    tol_obj: float = 1e-10
    tol_step: float = 1e-8
    max_iter: int = 100
    multistart: int = 8
    trust_radius_init: Optional[float] = None
    tol_active: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.tol_obj <= 0 or self.tol_step <= 0 or self.tol_active <= 0:
            raise DomainError("tolerances must be positive")
        if self.max_iter < 1 or self.multistart < 1:
            raise DomainError("max_iter and multistart must be >= 1")
        if self.trust_radius_init is not None and self.trust_radius_init <= 0:
            raise DomainError("trust_radius_init must be positive")


def activity_threshold(residuals: np.ndarray, opts: SolverOptions) -> float:
    return opts.tol_active * (1.0 + float(np.median(np.abs(residuals))))


@dataclass(frozen=True)
class LinearQuantileFit:
    """Exact quantile fit of a linear design."""

    coefficients: np.ndarray
    residuals: np.ndarray
    active_set: np.ndarray
    scores: np.ndarray
    objective: float
    iterations: int


@dataclass(frozen=True)
class QuantileFit:
    """A fitted regression quantile with solver diagnostics."""

    alpha: float
    theta_hat: np.ndarray
    residuals: np.ndarray
    active_set: np.ndarray
    objective: float
    iterations: int
    converged: bool
    restarts_used: int
    start_objectives: tuple = ()
    multistart_disagreement: bool = False


def _check_full_column_rank(V: np.ndarray) -> None:
    n, k = V.shape
    if n < k:
        raise RankDeficiencyError(f"need at least {k} rows, got {n}")
    s = np.linalg.svd(V, compute_uv=False)
    if s[0] == 0 or s[-1] <= max(n, k) * np.finfo(float).eps * s[0]:
        raise RankDeficiencyError("design matrix is rank deficient")


def _linear_quantile_lp(V, y, alpha, start_at_upper=None, warm=None):
    """Dual box program of the unconstrained linear quantile fit:

        max y'a  s.t.  V'a = (1-alpha) V'1,  0 <= a <= 1.

    The optimal basis rows are interpolated exactly by the coefficient
    vector, which is the complementary primal solution.
    """
    n, k = V.shape
    d = (1.0 - alpha) * V.sum(axis=0)
    warm_basis = warm_flags = None
    if warm is not None:
        warm_basis, warm_flags = warm
    sol = box_lp(
        y,
        V.T,
        d,
        start_at_upper=start_at_upper,
        warm_basis=warm_basis,
        warm_at_upper=warm_flags,
    )
    if len(sol.basis) != k:
        raise RankDeficiencyError("simplex basis did not span the design columns")
    coef = np.linalg.solve(V[sol.basis], y[sol.basis])
    return coef, sol


def _boxed_linear_quantile(V, y, alpha, lower, upper, start_at_upper=None, warm=None):
    """Exact minimizer of sum check_loss(y - V t) over lower <= t <= upper.

    Dual form with a in the unit box, w and s the multipliers of the
    parameter bounds:

        max (y - V lower)'a - (upper - lower)'w
        s.t. V'a - w + s = (1-alpha) V'1,  w >= 0, s >= 0.

    The equality multipliers recover t = lower + pi; a basic w_j (s_j)
    column puts parameter j at its upper (lower) bound.
    """
    n, k = V.shape
    span = upper - lower
    E = np.concatenate([V.T, -np.eye(k), np.eye(k)], axis=1)
    c = np.concatenate([y - V @ lower, -span, np.zeros(k)])
    d = (1.0 - alpha) * V.sum(axis=0)
    ub = np.concatenate([np.ones(n), np.full(2 * k, BIG_UPPER)])
    flags = None
    if start_at_upper is not None:
        flags = np.concatenate(
            [np.asarray(start_at_upper, bool), np.zeros(2 * k, dtype=bool)]
        )
    warm_basis = warm_flags = None
    if warm is not None:
        warm_basis, warm_flags = warm
    sol = box_lp(
        c,
        E,
        d,
        upper=ub,
        start_at_upper=flags,
        warm_basis=warm_basis,
        warm_at_upper=warm_flags,
    )
    if len(sol.basis) != k:
        raise SimplexNumericalError("boxed quantile basis is incomplete")
    B = E[:, sol.basis]
    pi = np.linalg.solve(B.T, c[sol.basis])
    t = np.clip(lower + pi, lower, upper)
    return t, sol


def solve_linear_quantile(
    V,
    y,
    alpha: float,
    *,
    opts: Optional[SolverOptions] = None,
    start_at_upper=None,
    warm=None,
) -> LinearQuantileFit:
    """Exact minimizer of sum check_loss(y - V t) over t.

    In general position at least k = V.shape[1] residuals are exactly zero;
    those rows form the simplex basis.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    V = np.asarray(V, dtype=float)
    y = np.asarray(y, dtype=float)
    if V.ndim != 2 or y.shape != (V.shape[0],):
        raise DomainError("V must be (n, k) and y must be (n,)")
    _check_full_column_rank(V)
    opts = opts or SolverOptions()
    coef, sol = _linear_quantile_lp(V, y, alpha, start_at_upper, warm)
    resid = y - V @ coef
    thr = activity_threshold(resid, opts)
    return LinearQuantileFit(
        coefficients=coef,
        residuals=resid,
        active_set=np.nonzero(np.abs(resid) <= thr)[0],
        scores=sol.x,
        objective=float(np.sum(check_loss(resid, alpha))),
        iterations=sol.iterations,
    )


@dataclass
class _RunResult:
    theta: np.ndarray
    objective: float
    iterations: int
    converged: bool
    start_objective: float


def _grad_transpose_weighted(model, X, theta, w):
    """V(theta)' w for a fixed weight vector."""
    V = np.asarray(model.grad(X, theta), dtype=float)
    return V.T @ w


def _newton_polish(dataset, model, alpha, opts, theta, f):
    """Refine a near-optimal iterate to machine-level first-order optimality.

    A minimizer of the check loss interpolates some active observations and
    is stationary for the smooth piece defined by the remaining residual
    signs.  Solving the square system

        y_i - g(x_i, theta)                                  = 0, i active
        sum_i v_ij(theta) (a_i - (1-alpha))                  = 0, j = 0..p

    in (theta, active scores) by Newton with finite-difference curvature
    reaches the accuracy the rank-score identities need, which the
    linearized iteration alone cannot (it is only first order).  Tries a
    ladder of activity thresholds; any sign flip, score outside the unit
    box or objective increase rejects the attempt.
    """
    try:
        resid = dataset.y - eval_g_all(model, dataset.X, theta)
    except DomainError:
        return theta, f, False
    scale = 1.0 + float(np.median(np.abs(resid)))
    f_tol = f + 1e-8 * (1.0 + abs(f))
    # Candidate active sets: whatever is numerically zero already, then the
    # m smallest residuals for each plausible interpolation count m.  Wrong
    # guesses are filtered by the guards inside the attempt.
    order = np.argsort(np.abs(resid), kind="stable")
    candidates = [np.abs(resid) <= 1e-7 * scale]
    for m in range(model.p + 1, -1, -1):
        act = np.zeros(dataset.n, dtype=bool)
        act[order[:m]] = True
        candidates.append(act)
    tried = set()
    for act in candidates:
        key = act.tobytes()
        if key in tried:
            continue
        tried.add(key)
        ok, th2, f2 = _newton_attempt(
            dataset, model, alpha, theta, resid, act, f_tol
        )
        if ok:
            return th2, f2, True
    return theta, f, False


def _newton_attempt(dataset, model, alpha, theta0, resid0, act, f_tol):
    y, X = dataset.y, dataset.X
    box = model.param_box
    n = dataset.n
    p1 = model.p + 1
    idx_act = np.nonzero(act)[0]
    m = len(idx_act)
    signs = np.where(resid0 > 0, 1.0, -1.0)
    w_fixed = np.where(resid0 > 0, alpha, alpha - 1.0)
    w_fixed[idx_act] = 0.0

    theta = theta0.copy()
    c = np.full(m, 1.0 - alpha)
    tolF = 3e-11 * max(n, 20)

    def residual_map(theta, c):
        g = eval_g_all(model, dataset.X, theta)
        V = eval_design(model, dataset, theta).V
        w = w_fixed.copy()
        w[idx_act] = c - (1.0 - alpha)
        F1 = y[idx_act] - g[idx_act]
        F2 = V.T @ w
        return np.concatenate([F1, F2]), V, w

    try:
        F, V, w = residual_map(theta, c)
    except DomainError:
        return False, theta0, np.inf
    for _ in range(14):
        if float(np.max(np.abs(F))) <= tolF:
            break
        J = np.zeros((m + p1, m + p1))
        J[:m, :p1] = -V[idx_act]
        # d(V'w)/d(theta) by central differences, clamped inside the box.
        for j in range(p1):
            h = 1e-6 * (1.0 + abs(theta[j]))
            up = min(h, box[j, 1] - theta[j])
            dn = min(h, theta[j] - box[j, 0])
            if up + dn <= 1e-14:
                continue
            tp, tm = theta.copy(), theta.copy()
            tp[j] += up
            tm[j] -= dn
            gp = _grad_transpose_weighted(model, X, tp, w)
            gm = _grad_transpose_weighted(model, X, tm, w)
            J[m:, j] = (gp - gm) / (up + dn)
        J[m:, p1:] = V[idx_act].T
        try:
            delta = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            return False, theta0, np.inf
        theta = np.clip(theta + delta[:p1], box[:, 0], box[:, 1])
        c = c + delta[p1:]
        try:
            F, V, w = residual_map(theta, c)
        except DomainError:
            return False, theta0, np.inf
    if float(np.max(np.abs(F))) > tolF:
        return False, theta0, np.inf
    if m and (c.min() < -1e-8 or c.max() > 1.0 + 1e-8):
        return False, theta0, np.inf
    resid = y - eval_g_all(model, dataset.X, theta)
    inact = ~act
    if np.any(resid[inact] * signs[inact] <= 0):
        return False, theta0, np.inf
    f_new = float(np.sum(check_loss(resid, alpha)))
    if not np.isfinite(f_new) or f_new > f_tol:
        return False, theta0, np.inf
    return True, theta, f_new


def _slp_run(dataset, model, alpha, opts, start, diam) -> Optional[_RunResult]:
    y = dataset.y
    box = model.param_box
    theta = project_box(model, start)
    try:
        f = objective(dataset, model, theta, alpha)
    except DomainError:
        return None
    if not np.isfinite(f):
        return None
    f_start = f
    radius = opts.trust_radius_init
    if radius is None:
        radius = max(0.25 * diam, 10.0 * opts.tol_step)
    radius_cap = max(diam, radius)
    # The trust radius never collapses entirely: a tiny radius makes the
    # predicted decrease tiny regardless of stationarity, which would turn
    # the objective-decrease stopping rule into a false certificate.
    radius_floor = max(opts.tol_step, 1e-4 * radius)
    warm = None
    converged = False
    polished = False
    rejects = 0
    polish_budget = 12
    iters = 0
    for iters in range(1, opts.max_iter + 1):
        V = eval_design(model, dataset, theta).V
        resid = y - eval_g_all(model, dataset.X, theta)
        pseudo = resid + V @ theta
        lower = np.maximum(box[:, 0], theta - radius)
        upper = np.minimum(box[:, 1], theta + radius)
        try:
            tstar, sol = _boxed_linear_quantile(
                V, pseudo, alpha, lower, upper, start_at_upper=resid > 0, warm=warm
            )
        except (SimplexNumericalError, InfeasibleError):
            return None
        warm = (sol.basis, sol.at_upper)
        lin_obj = float(np.sum(check_loss(pseudo - V @ tstar, alpha)))
        pred = f - lin_obj
        step = tstar - theta
        step_norm = float(np.linalg.norm(step))
        try:
            f_new = objective(dataset, model, tstar, alpha)
        except DomainError:
            f_new = np.inf

        if pred <= opts.tol_obj * (1.0 + abs(f)):
            # The linearized fit cannot improve within the trust box.  Land
            # on the vertex when that costs nothing, then certify first-order
            # optimality with the Newton polish.
            if np.isfinite(f_new) and f_new <= f + 1e-10 * (1.0 + abs(f)):
                theta, f = tstar, f_new
            theta2, f2, ok = _newton_polish(dataset, model, alpha, opts, theta, f)
            if ok:
                theta, f = theta2, f2
                polished = True
            converged = True
            break
        ratio = (f - f_new) / pred if np.isfinite(f_new) else -np.inf
        if ratio >= 0.01:
            rejects = 0
            hit_boundary = float(np.max(np.abs(step))) >= 0.99 * radius
            theta, f = tstar, f_new
            if ratio >= 0.75 and hit_boundary:
                radius = min(2.0 * radius, radius_cap)
            if step_norm < opts.tol_step:
                converged = True
                break
        else:
            rejects += 1
            radius = max(0.5 * radius, radius_floor)
        # Rejections or slow zig-zag mean curvature dominates the
        # linearization: the optimum is likely partially smooth, where the
        # Newton polish converges in a few steps while the LP-only
        # iteration creeps.
        if (rejects >= 2 or iters % 6 == 0) and polish_budget > 0:
            polish_budget -= 1
            theta2, f2, ok = _newton_polish(dataset, model, alpha, opts, theta, f)
            if ok:
                theta, f = theta2, f2
                converged = True
                polished = True
                break
    if not polished:
        theta2, f2, ok = _newton_polish(dataset, model, alpha, opts, theta, f)
        if ok:
            theta, f = theta2, f2
        else:
            theta, f = _lp_vertex_snap(dataset, model, alpha, theta, f, warm)
    return _RunResult(theta, f, iters, converged, f_start)


def _lp_vertex_snap(dataset, model, alpha, theta, f, warm):
    """Fallback finisher: land on a vertex of the full-box linearization.

    Used when the Newton polish rejects (for example at parameter-box
    boundaries).  Accepted only while the check loss does not increase
    beyond rounding scale.
    """
    y = dataset.y
    box = model.param_box
    for _ in range(2):
        V = eval_design(model, dataset, theta).V
        resid = y - eval_g_all(model, dataset.X, theta)
        pseudo = resid + V @ theta
        try:
            tstar, sol = _boxed_linear_quantile(
                V, pseudo, alpha, box[:, 0], box[:, 1],
                start_at_upper=resid > 0, warm=warm,
            )
        except (SimplexNumericalError, InfeasibleError):
            break
        warm = (sol.basis, sol.at_upper)
        if float(np.linalg.norm(tstar - theta)) <= 1e-12 * (
            1.0 + float(np.linalg.norm(theta))
        ):
            break
        try:
            f_cand = objective(dataset, model, tstar, alpha)
        except DomainError:
            break
        if np.isfinite(f_cand) and f_cand <= f + 1e-10 * (1.0 + abs(f)):
            theta, f = tstar, f_cand
        else:
            break
    return theta, f


def fit_quantile(
    dataset: Dataset,
    model: ModelSpec,
    alpha: float,
    opts: Optional[SolverOptions] = None,
    *,
    initial_points: Optional[Sequence] = None,
) -> QuantileFit:
    """Fit the regression quantile at level alpha by sequential linearization.

    Runs from the box center plus uniformly sampled restarts (the sampling
    is driven by opts.seed) and keeps the best run.  ``initial_points``
    prepends extra start points, which grid evaluation uses to warm-start
    neighboring levels.
    """
    if not 0.0 < alpha < 1.0:
        raise DomainError("alpha must lie in (0, 1)")
    opts = opts or SolverOptions()
    if dataset.n < model.p + 2:
        raise DomainError(
            f"need n >= p + 2 = {model.p + 2} observations, got {dataset.n}"
        )
    diam = box_diameter(model)
    rng = np.random.default_rng(opts.seed)
    box = model.param_box
    n_warm = len(initial_points) if initial_points else 0
    starts = list(initial_points) if initial_points else []
    starts.append(box_center(model))
    while len(starts) < opts.multistart:
        starts.append(box[:, 0] + rng.random(model.p + 1) * (box[:, 1] - box[:, 0]))
    n_starts = opts.multistart if initial_points is None else max(
        opts.multistart, len(initial_points)
    )
    starts = starts[:n_starts]
    # Give every generated start the exact best intercept for its curve
    # part: the alpha-order-statistic of y - gtilde.  This both speeds the
    # first iterations up and makes the start set equivariant under
    # intercept shifts of y (warm starts passed by the caller already are).
    for idx in range(n_warm, len(starts)):
        theta0 = np.asarray(starts[idx], dtype=float).copy()
        probe = theta0.copy()
        probe[0] = 0.0
        try:
            resid0 = dataset.y - eval_g_all(model, dataset.X, probe)
        except DomainError:
            continue
        k0 = int(np.ceil(dataset.n * alpha)) - 1
        q = float(np.sort(resid0)[min(max(k0, 0), dataset.n - 1)])
        theta0[0] = min(max(q, box[0, 0]), box[0, 1])
        starts[idx] = theta0

    runs = []
    for start in starts:
        res = _slp_run(dataset, model, alpha, opts, np.asarray(start, float), diam)
        if res is not None:
            runs.append(res)
    if not runs:
        raise AllRestartsDivergedError(
            "every restart of the quantile solver produced non-finite values"
        )
    best = min(runs, key=lambda r: r.objective)
    conv_objs = [r.objective for r in runs if r.converged]
    disagreement = bool(conv_objs and max(conv_objs) - min(conv_objs) > 1e-4)
    resid = dataset.y - eval_g_all(model, dataset.X, best.theta)
    thr = activity_threshold(resid, opts)
    return QuantileFit(
        alpha=alpha,
        theta_hat=best.theta,
        residuals=resid,
        active_set=np.nonzero(np.abs(resid) <= thr)[0],
        objective=best.objective,
        iterations=best.iterations,
        converged=best.converged,
        restarts_used=len(runs),
        start_objectives=tuple(r.start_objective for r in runs),
        multistart_disagreement=disagreement,
    )
