"""Dense bounded-variable primal simplex.

Solves

    maximize c'x   subject to   E x = d,   0 <= x <= upper

with a two-phase method: phase 1 drives signed artificial variables to
zero, phase 2 optimizes c with the artificials pinned at zero.  The
solver always terminates at a vertex (basic solution), which is what the
quantile-fit recovery and the rank-score tie-break rely on: the basic
columns identify exactly-interpolated observations.

The pivot loop is JIT-compiled with numba when available; the pure-Python
fallback is identical but slow.  Warm starts accept a previous basis and
bound flags, which makes repeated solves along a quantile-level grid
nearly free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InfeasibleError, SimplexNumericalError

try:
    from numba import njit
except ImportError:  # pragma: no cover - numba is a hard dep, but stay usable
    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


_OPTIMAL = 0
_ITER_LIMIT = 1
_UNBOUNDED = 2
_NUMERICAL = 3

BIG_UPPER = 1e30


@njit(cache=True)
def _pivot_loop(AT, b, c, upper, basis, at_upper, is_basic, tol_rc, max_iter, xB_out):
    """Run primal simplex pivots in place; returns (status, iterations).

    AT is the constraint matrix stored transposed, (m, k) with row j holding
    column j of E.  basis/at_upper/is_basic are mutated.  Nonbasic variables
    sit at 0 or at upper[j] according to at_upper.  On return xB_out holds
    the basic values of the final basis.
    """
    k = AT.shape[1]
    m = AT.shape[0]
    Bt = np.empty((k, k))
    Bc = np.empty((k, k))
    rhs = np.empty(k)
    cB = np.empty(k)
    bland = False
    stall = 0
    iters = 0

    while iters < max_iter:
        iters += 1

        for i in range(k):
            bi = basis[i]
            for j in range(k):
                Bt[i, j] = AT[bi, j]
            cB[i] = c[bi]
        for i in range(k):
            for j in range(k):
                Bc[i, j] = Bt[j, i]

        for i in range(k):
            rhs[i] = b[i]
        for j in range(m):
            if (not is_basic[j]) and at_upper[j] and upper[j] != 0.0:
                uj = upper[j]
                for i in range(k):
                    rhs[i] -= AT[j, i] * uj

        xB = np.linalg.solve(Bc, rhs)
        pi = np.linalg.solve(Bt, cB)
        for i in range(k):
            xB_out[i] = xB[i]
        ok = True
        for i in range(k):
            if not (np.isfinite(xB[i]) and np.isfinite(pi[i])):
                ok = False
        if not ok:
            return _NUMERICAL, iters

        # Entering variable: nonbasic at lower with positive reduced cost,
        # or nonbasic at upper with negative reduced cost.
        enter = -1
        best = tol_rc
        for j in range(m):
            if is_basic[j]:
                continue
            rc = c[j]
            for i in range(k):
                rc -= pi[i] * AT[j, i]
            viol = -rc if at_upper[j] else rc
            if viol > best:
                enter = j
                best = viol
                if bland:
                    break
        if enter == -1:
            return _OPTIMAL, iters

        sigma = -1.0 if at_upper[enter] else 1.0
        w = np.linalg.solve(Bc, AT[enter].copy())

        # Ratio test: entering moves by t, basics move by -sigma*t*w.
        t_best = upper[enter]
        leave = -1
        leave_upper = False
        wpiv = 0.0
        for i in range(k):
            swi = sigma * w[i]
            if swi > 1e-11:
                ti = xB[i] / swi
                hits_upper = False
            elif swi < -1e-11:
                ub = upper[basis[i]]
                if ub >= BIG_UPPER:
                    continue
                ti = (ub - xB[i]) / (-swi)
                hits_upper = True
            else:
                continue
            if ti < 0.0:
                ti = 0.0
            if ti < t_best - 1e-12:
                t_best = ti
                leave = i
                leave_upper = hits_upper
                wpiv = abs(w[i])
            elif leave >= 0 and ti <= t_best + 1e-12 and abs(w[i]) > wpiv:
                leave = i
                leave_upper = hits_upper
                wpiv = abs(w[i])

        if t_best >= BIG_UPPER:
            return _UNBOUNDED, iters

        if best * t_best <= 1e-13:
            stall += 1
            if stall > 50:
                bland = True
        else:
            stall = 0

        if leave == -1:
            at_upper[enter] = not at_upper[enter]
        else:
            lv = basis[leave]
            basis[leave] = enter
            is_basic[lv] = False
            is_basic[enter] = True
            at_upper[lv] = leave_upper
            at_upper[enter] = False

    return _ITER_LIMIT, iters


@dataclass
class LpSolution:
    """Vertex solution of the box LP with the state needed for warm starts."""

    x: np.ndarray
    basis: np.ndarray
    at_upper: np.ndarray
    objective: float
    iterations: int


def _basic_values(AT, b, upper, basis, at_upper, is_basic):
    rhs = b.copy()
    for j in np.nonzero(~is_basic & at_upper & (upper != 0.0))[0]:
        rhs -= AT[j] * upper[j]
    Bc = AT[basis].T
    xB = np.linalg.solve(Bc, rhs)
    return xB


def _purge_artificials(AT, basis, at_upper, is_basic, nstruct):
    """Pivot basic artificial variables out wherever a structural column can
    replace them (always possible when E has full row rank)."""
    k = len(basis)
    art_rows = [i for i in range(k) if basis[i] >= nstruct]
    if not art_rows:
        return
    nonbasic = np.nonzero(~is_basic[:nstruct])[0]
    if len(nonbasic) == 0:
        return
    Bc = AT[basis].T
    W = np.linalg.solve(Bc, AT[nonbasic].T)  # (k, #nonbasic)
    for i in art_rows:
        cand = np.nonzero(np.abs(W[i]) > 1e-9)[0]
        if len(cand) == 0:
            continue  # redundant row: artificial stays basic, pinned at 0
        j = nonbasic[int(cand[np.argmax(np.abs(W[i, cand]))])]
        lv = basis[i]
        basis[i] = j
        is_basic[lv] = False
        is_basic[j] = True
        at_upper[lv] = False
        at_upper[j] = False
        Bc = AT[basis].T
        W = np.linalg.solve(Bc, AT[nonbasic].T)


def box_lp(
    c,
    E,
    d,
    *,
    upper=None,
    start_at_upper=None,
    warm_basis=None,
    warm_at_upper=None,
    tol_feas=None,
    max_iter=None,
) -> LpSolution:
    """Solve max c'x s.t. Ex = d, 0 <= x <= upper; return the vertex state.

    ``upper`` defaults to all ones (the unit box); entries at or above
    BIG_UPPER mean unbounded above.  ``start_at_upper`` seeds the phase-1
    nonbasic bound pattern (a good guess makes phase 1 nearly trivial).
    ``warm_basis``/``warm_at_upper`` attempt to skip phase 1 entirely by
    reusing a previous vertex; if the old basis is infeasible or singular
    for the new data the solver silently falls back to the two-phase path.
    """
    c = np.ascontiguousarray(c, dtype=float)
    E = np.asarray(E, dtype=float)
    d = np.ascontiguousarray(d, dtype=float)
    if E.ndim != 2:
        raise ValueError("E must be a 2-D matrix")
    k, n = E.shape
    if c.shape != (n,) or d.shape != (k,):
        raise ValueError("incompatible shapes for c, E, d")
    if k:
        # Row equilibration: mixed row scales would let the reduced-cost
        # tolerance stop phase 1 short of feasibility on the small rows.
        row_scale = np.max(np.abs(E), axis=1)
        row_scale[row_scale == 0.0] = 1.0
        E = E / row_scale[:, None]
        d = d / row_scale
    if upper is None:
        ustruct = np.ones(n)
    else:
        ustruct = np.ascontiguousarray(upper, dtype=float)
        if ustruct.shape != (n,) or np.any(ustruct < 0):
            raise ValueError("upper must be a nonnegative (n,) vector")
    if k == 0:
        x = np.where(c > 0, np.minimum(ustruct, BIG_UPPER), 0.0)
        return LpSolution(
            x=x,
            basis=np.empty(0, dtype=np.int64),
            at_upper=c > 0,
            objective=float(c @ x),
            iterations=0,
        )

    m = n + k
    AT = np.empty((m, k))
    AT[:n] = E.T
    if max_iter is None:
        max_iter = 60 * m + 2000
    scale_d = 1.0 + float(np.max(np.abs(d)))
    if tol_feas is None:
        tol_feas = 1e-8 * scale_d
    tol_rc = 1e-9 * (1.0 + float(np.max(np.abs(c))))

    total_iters = 0

    # Warm path: previous vertex of the same constraint system.
    if warm_basis is not None and len(warm_basis) == k:
        basis = np.ascontiguousarray(warm_basis, dtype=np.int64)
        if len(np.unique(basis)) == k and basis.min() >= 0 and basis.max() < n:
            at_upper = np.zeros(m, dtype=np.bool_)
            if warm_at_upper is not None:
                at_upper[:n] = np.asarray(warm_at_upper, dtype=bool)
            at_upper[:n] &= ustruct < BIG_UPPER
            is_basic = np.zeros(m, dtype=np.bool_)
            is_basic[basis] = True
            at_upper[is_basic] = False
            full_upper = np.concatenate([ustruct, np.zeros(k)])
            AT[n:] = 0.0
            try:
                xB = _basic_values(AT, d, full_upper, basis, at_upper, is_basic)
                feasible = np.all(xB >= -1e-9) and np.all(
                    xB <= full_upper[basis] + 1e-9
                )
            except np.linalg.LinAlgError:
                feasible = False
            if feasible:
                cc = np.concatenate([c, np.zeros(k)])
                xB = np.empty(k)
                status, it = _pivot_loop(
                    AT, d, cc, full_upper, basis, at_upper, is_basic, tol_rc,
                    max_iter, xB,
                )
                total_iters += it
                if status == _OPTIMAL:
                    return _finalize(
                        c, full_upper, basis, at_upper, xB, n, total_iters
                    )
                # fall through to the cold path on any trouble

    # Cold path, phase 1.
    at_upper = np.zeros(m, dtype=np.bool_)
    if start_at_upper is not None:
        at_upper[:n] = np.asarray(start_at_upper, dtype=bool)
        at_upper[:n] &= ustruct < BIG_UPPER
    a0 = np.where(at_upper[:n], ustruct, 0.0)
    rho = d - E @ a0
    signs = np.where(rho >= 0.0, 1.0, -1.0)
    AT[n:] = np.diag(signs)
    full_upper = np.concatenate([ustruct, np.maximum(np.abs(rho), 1.0)])
    basis = np.arange(n, n + k, dtype=np.int64)
    is_basic = np.zeros(m, dtype=np.bool_)
    is_basic[basis] = True
    c1 = np.concatenate([np.zeros(n), -np.ones(k)])

    xB = np.empty(k)
    status, it = _pivot_loop(
        AT, d, c1, full_upper, basis, at_upper, is_basic, 1e-9, max_iter, xB
    )
    total_iters += it
    if status in (_UNBOUNDED, _NUMERICAL):
        raise SimplexNumericalError(f"phase 1 failed with status {status}")

    infeas = float(np.sum(np.abs(xB[basis >= n]))) + float(
        np.sum(full_upper[n:][at_upper[n:] & ~is_basic[n:]])
    )
    if infeas > tol_feas or status == _ITER_LIMIT:
        if infeas > tol_feas:
            raise InfeasibleError(
                "equality constraints are inconsistent with the variable box "
                f"(phase-1 residual {infeas:.3e} exceeds {tol_feas:.3e})"
            )
        raise SimplexNumericalError("phase 1 hit the iteration limit")

    _purge_artificials(AT, basis, at_upper, is_basic, n)

    # Phase 2: pin artificials at zero and optimize the real objective.
    full_upper[n:] = 0.0
    at_upper[n:] = False
    cc = np.concatenate([c, np.zeros(k)])
    status, it = _pivot_loop(
        AT, d, cc, full_upper, basis, at_upper, is_basic, tol_rc, max_iter, xB
    )
    total_iters += it
    if status != _OPTIMAL:
        raise SimplexNumericalError(f"phase 2 failed with status {status}")
    return _finalize(c, full_upper, basis, at_upper, xB, n, total_iters)


def _finalize(c, full_upper, basis, at_upper, xB, n, iters):
    x = np.zeros(n)
    is_basic_struct = np.zeros(n, dtype=bool)
    is_basic_struct[basis[basis < n]] = True
    for j in np.nonzero(at_upper[:n] & ~is_basic_struct)[0]:
        x[j] = full_upper[j]
    for i, bi in enumerate(basis):
        if bi < n:
            x[bi] = min(max(xB[i], 0.0), full_upper[bi])
    struct = basis < n
    return LpSolution(
        x=x,
        basis=basis[struct].copy(),
        at_upper=at_upper[:n].copy(),
        objective=float(c @ x),
        iterations=iters,
    )


def solve_box_lp(c, E, d) -> np.ndarray:
    """Return a vertex maximizer of c'a over {a : Ea = d, 0 <= a <= 1}.

    Raises InfeasibleError when the polytope is empty.  Ties between
    maximizers are resolved by whichever vertex the pivot order reaches,
    deterministically for fixed inputs.
    """
    return box_lp(c, E, d).x
