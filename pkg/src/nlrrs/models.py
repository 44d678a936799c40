"""Nonlinear regression families with an intercept.

A model is a function g(x, theta) = theta_0 + gtilde(x, theta_1..theta_p)
over a compact parameter box, together with its analytic gradient (whose
intercept component is identically one) and an optional Hessian over the
non-intercept block.  Everything downstream — the quantile solver, the
rank scores, the tests — only touches models through this module.

Built-in families:

    linear            theta_0 + sum_j theta_j * x_j            (p = q)
    exponential       theta_0 + theta_1 * exp(-theta_2 * x)    (p = 2)
    two_exponential   theta_0 + theta_1 * (exp(-theta_2 * x)
                                           - exp(-theta_3 * x))  (p = 3)
    logistic_growth   theta_0 + theta_1 / (1 + exp(theta_2
                                           - theta_3 * x))      (p = 3)

The eval/grad callables are vectorized over the rows of the design matrix;
they must be module-level functions (not closures) so model specs can be
pickled into worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import DomainError

# Absolute slack when testing parameter-box membership: solvers are allowed
# to land exactly on the boundary, so strict containment is too brittle.
BOX_SLACK = 1e-9


# ---------------------------------------------------------------------------
# Built-in family callables (module level: picklable)
# ---------------------------------------------------------------------------


def _linear_eval(X, theta):
    return theta[0] + X @ theta[1:]


def _linear_grad(X, theta):
    n = X.shape[0]
    return np.column_stack([np.ones(n), X])


def _linear_hess(X, theta):
    n = X.shape[0]
    p = len(theta) - 1
    return np.zeros((n, p, p))


def _exp_eval(X, theta):
    x = X[:, 0]
    return theta[0] + theta[1] * np.exp(-theta[2] * x)


def _exp_grad(X, theta):
    x = X[:, 0]
    e = np.exp(-theta[2] * x)
    return np.column_stack([np.ones(x.shape[0]), e, -theta[1] * x * e])


def _exp_hess(X, theta):
    x = X[:, 0]
    e = np.exp(-theta[2] * x)
    H = np.zeros((x.shape[0], 2, 2))
    H[:, 0, 1] = H[:, 1, 0] = -x * e
    H[:, 1, 1] = theta[1] * x * x * e
    return H


def _expmix_eval(X, theta):
    x = X[:, 0]
    return theta[0] + theta[1] * (np.exp(-theta[2] * x) - np.exp(-theta[3] * x))


def _expmix_grad(X, theta):
    x = X[:, 0]
    e2 = np.exp(-theta[2] * x)
    e3 = np.exp(-theta[3] * x)
    return np.column_stack(
        [np.ones(x.shape[0]), e2 - e3, -theta[1] * x * e2, theta[1] * x * e3]
    )


def _expmix_hess(X, theta):
    x = X[:, 0]
    e2 = np.exp(-theta[2] * x)
    e3 = np.exp(-theta[3] * x)
    H = np.zeros((x.shape[0], 3, 3))
    H[:, 0, 1] = H[:, 1, 0] = -x * e2
    H[:, 0, 2] = H[:, 2, 0] = x * e3
    H[:, 1, 1] = theta[1] * x * x * e2
    H[:, 2, 2] = -theta[1] * x * x * e3
    return H


def _sigmoid(z):
    # Clipped to keep exp() finite for parameter boxes that allow large
    # |theta_2 - theta_3 * x|.
    return 1.0 / (1.0 + np.exp(np.clip(-z, -700.0, 700.0)))


def _logistic_eval(X, theta):
    x = X[:, 0]
    s = _sigmoid(theta[3] * x - theta[2])
    return theta[0] + theta[1] * s


def _logistic_grad(X, theta):
    x = X[:, 0]
    s = _sigmoid(theta[3] * x - theta[2])
    sp = s * (1.0 - s)
    return np.column_stack(
        [np.ones(x.shape[0]), s, -theta[1] * sp, theta[1] * x * sp]
    )


def _logistic_hess(X, theta):
    x = X[:, 0]
    s = _sigmoid(theta[3] * x - theta[2])
    sp = s * (1.0 - s)
    w = (1.0 - 2.0 * s) * sp
    H = np.zeros((x.shape[0], 3, 3))
    H[:, 0, 1] = H[:, 1, 0] = -sp
    H[:, 0, 2] = H[:, 2, 0] = x * sp
    H[:, 1, 1] = theta[1] * w
    H[:, 1, 2] = H[:, 2, 1] = -theta[1] * x * w
    H[:, 2, 2] = theta[1] * x * x * w
    return H


_FAMILIES = {
    "linear": (None, _linear_eval, _linear_grad, _linear_hess),
    "exponential": (2, _exp_eval, _exp_grad, _exp_hess),
    "two_exponential": (3, _expmix_eval, _expmix_grad, _expmix_hess),
    "logistic_growth": (3, _logistic_eval, _logistic_grad, _logistic_hess),
}


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ModelSpec:
    """A regression family g(x, theta) = theta_0 + gtilde(x, theta*).

    ``eval`` maps (X, theta) -> (n,) predictions and ``grad`` maps
    (X, theta) -> (n, p+1) gradient rows whose first column is one.
    ``hess``, when present, returns the (n, p, p) second derivatives over
    the non-intercept block.  ``param_box`` is a (p+1, 2) array of finite
    closed interval bounds.
    """

    family: str
    p: int
    param_box: np.ndarray
    eval: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hess: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        box = np.asarray(self.param_box, dtype=float)
        if box.shape != (self.p + 1, 2):
            raise DomainError(
                f"param_box must have shape ({self.p + 1}, 2), got {box.shape}"
            )
        if not np.all(np.isfinite(box)):
            raise DomainError("param_box must have finite endpoints")
        if np.any(box[:, 0] > box[:, 1]):
            raise DomainError("param_box lower bounds exceed upper bounds")
        object.__setattr__(self, "param_box", box)


@dataclass(frozen=True)
class Dataset:
    """Responses y, nonnegative design points X, optional tested regressors Z."""

    y: np.ndarray
    X: np.ndarray
    Z: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if y.ndim != 1 or X.ndim != 2 or X.shape[0] != y.shape[0]:
            raise DomainError("y must be (n,) and X must be (n, q)")
        if not np.all(np.isfinite(y)) or not np.all(np.isfinite(X)):
            raise DomainError("y and X entries must be finite")
        if X.size and np.min(X) < 0:
            raise DomainError("design points must be nonnegative")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        if self.Z is not None:
            Z = np.asarray(self.Z, dtype=float)
            if Z.ndim == 1:
                Z = Z[:, None]
            if Z.shape[0] != y.shape[0]:
                raise DomainError("Z must have one row per observation")
            if not np.all(np.isfinite(Z)):
                raise DomainError("Z entries must be finite")
            if np.linalg.matrix_rank(Z) < Z.shape[1]:
                raise DomainError("Z must have full column rank")
            object.__setattr__(self, "Z", Z)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def r(self) -> int:
        return 0 if self.Z is None else self.Z.shape[1]


@dataclass(frozen=True)
class DesignEval:
    """Gradient design V (n, p+1) and its scaled Gram matrix Q = V'V / n."""

    V: np.ndarray
    Q: np.ndarray


@dataclass(frozen=True)
class RegularityReport:
    """Sampling diagnostics for the model regularity conditions.

    ``identification_ratio_*`` bracket the sampled values of
    mean[(g(x, t2) - g(x, t1))^2] / ||t2 - t1||^2 over random parameter
    pairs; a vanishing lower bound flags a direction in which the model is
    locally unidentified on this design.  ``min_gram_eigenvalue`` is the
    smallest eigenvalue of Q over the sampled parameters.  ``column_sign_
    constant[j]`` records whether gradient column j kept a single sign
    across all observations and samples (a monotonicity diagnostic).
    ``max_fourth_moment`` is the largest sampled value of
    mean ||v_i||^4 (reported, never flagged).
    """

    identification_ratio_min: float
    identification_ratio_max: float
    min_gram_eigenvalue: float
    max_gram_eigenvalue: float
    column_sign_constant: tuple
    max_fourth_moment: float
    identification_ok: bool
    gram_ok: bool
    monotone_ok: bool
    samples: int
    seed: int

    @property
    def ok(self) -> bool:
        return self.identification_ok and self.gram_ok and self.monotone_ok


# ---------------------------------------------------------------------------
# Constructors and box helpers
# ---------------------------------------------------------------------------


def make_model(family: str, param_box, p: int | None = None) -> ModelSpec:
    """Build a ModelSpec for one of the built-in families.

    For the linear family ``p`` is inferred from the box length; the other
    families have a fixed parameter count.
    """
    if family not in _FAMILIES:
        raise DomainError(
            f"unknown family {family!r}; available: {sorted(_FAMILIES)}"
        )
    fixed_p, ev, gr, he = _FAMILIES[family]
    box = np.asarray(param_box, dtype=float)
    if fixed_p is None:
        inferred = p if p is not None else box.shape[0] - 1
    else:
        inferred = fixed_p
        if p is not None and p != fixed_p:
            raise DomainError(f"family {family!r} has p={fixed_p}, got p={p}")
    return ModelSpec(family=family, p=inferred, param_box=box, eval=ev, grad=gr, hess=he)


def in_box(model: ModelSpec, theta, slack: float = BOX_SLACK) -> bool:
    theta = np.asarray(theta, dtype=float)
    box = model.param_box
    return bool(
        theta.shape == (model.p + 1,)
        and np.all(theta >= box[:, 0] - slack)
        and np.all(theta <= box[:, 1] + slack)
    )


def project_box(model: ModelSpec, theta) -> np.ndarray:
    return np.clip(np.asarray(theta, dtype=float), model.param_box[:, 0], model.param_box[:, 1])


def box_center(model: ModelSpec) -> np.ndarray:
    return model.param_box.mean(axis=1)


def box_diameter(model: ModelSpec) -> float:
    return float(np.linalg.norm(model.param_box[:, 1] - model.param_box[:, 0]))


def _require_in_box(model: ModelSpec, theta) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if not in_box(model, theta):
        raise DomainError(
            f"theta {theta} outside param_box (slack {BOX_SLACK:g})"
        )
    return theta


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------


def eval_g_all(model: ModelSpec, X: np.ndarray, theta) -> np.ndarray:
    """Vectorized g over the rows of X, with box and finiteness checks."""
    theta = _require_in_box(model, theta)
    g = np.asarray(model.eval(X, theta), dtype=float)
    if not np.all(np.isfinite(g)):
        raise DomainError("model evaluation produced non-finite values")
    return g


def eval_g(model: ModelSpec, x, theta) -> float:
    """Evaluate g(x, theta) = theta_0 + gtilde(x, theta*) at one point."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(eval_g_all(model, x[None, :], theta)[0])


def eval_design(model: ModelSpec, dataset: Dataset, theta) -> DesignEval:
    """Gradient design V(theta) with v_i0 = 1 and the Gram matrix Q = V'V/n."""
    theta = _require_in_box(model, theta)
    V = np.asarray(model.grad(dataset.X, theta), dtype=float)
    if V.shape != (dataset.n, model.p + 1):
        raise DomainError(
            f"gradient must have shape ({dataset.n}, {model.p + 1}), got {V.shape}"
        )
    if not np.all(np.isfinite(V)):
        raise DomainError("model gradient produced non-finite values")
    if not np.allclose(V[:, 0], 1.0, rtol=0.0, atol=1e-12):
        raise DomainError("gradient intercept column must be identically one")
    Q = V.T @ V / dataset.n
    return DesignEval(V=V, Q=Q)


def check_gradient(model: ModelSpec, dataset: Dataset, theta, h: float) -> float:
    """Max relative error between analytic and central finite-difference gradients.

    The relative error uses max(1, |analytic|) in the denominator so that
    exactly-zero gradient entries do not blow up the ratio.
    """
    if not (h > 0):
        raise DomainError("finite-difference step h must be > 0")
    theta = np.asarray(theta, dtype=float)
    box = model.param_box
    if np.any(theta - h < box[:, 0]) or np.any(theta + h > box[:, 1]):
        raise DomainError("theta must be interior to param_box by at least h")
    V = eval_design(model, dataset, theta).V
    worst = 0.0
    for j in range(model.p + 1):
        step = np.zeros_like(theta)
        step[j] = h
        fd = (
            eval_g_all(model, dataset.X, theta + step)
            - eval_g_all(model, dataset.X, theta - step)
        ) / (2.0 * h)
        err = np.abs(fd - V[:, j]) / np.maximum(1.0, np.abs(V[:, j]))
        worst = max(worst, float(err.max()))
    return worst


def check_regularity(
    model: ModelSpec, dataset: Dataset, samples: int, seed: int
) -> RegularityReport:
    """Sample-based diagnostics for identification, Gram rank and monotonicity.

    Draws ``samples`` random parameter pairs from the box and reports the
    extremes of the identification ratio, the Gram eigenvalue range, the
    per-column gradient sign constancy, and the largest fourth-moment
    statistic.  Violations are flagged, never raised.
    """
    if samples < 2:
        raise DomainError("samples must be >= 2")
    rng = np.random.default_rng(seed)
    box = model.param_box
    lo, hi = box[:, 0], box[:, 1]

    ratio_min, ratio_max = np.inf, -np.inf
    eig_min, eig_max = np.inf, -np.inf
    v4_max = -np.inf
    pos = np.zeros(model.p + 1, dtype=bool)
    neg = np.zeros(model.p + 1, dtype=bool)

    for _ in range(samples):
        t1 = lo + rng.random(model.p + 1) * (hi - lo)
        t2 = lo + rng.random(model.p + 1) * (hi - lo)
        dist2 = float(np.sum((t2 - t1) ** 2))
        if dist2 > 0:
            g1 = eval_g_all(model, dataset.X, t1)
            g2 = eval_g_all(model, dataset.X, t2)
            ratio = float(np.mean((g2 - g1) ** 2)) / dist2
            ratio_min = min(ratio_min, ratio)
            ratio_max = max(ratio_max, ratio)
        de = eval_design(model, dataset, t1)
        eigs = np.linalg.eigvalsh(de.Q)
        eig_min = min(eig_min, float(eigs[0]))
        eig_max = max(eig_max, float(eigs[-1]))
        v4_max = max(v4_max, float(np.mean(np.sum(de.V**2, axis=1) ** 2)))
        pos |= np.any(de.V > 1e-12, axis=0)
        neg |= np.any(de.V < -1e-12, axis=0)

    sign_constant = tuple(bool(not (pos[j] and neg[j])) for j in range(model.p + 1))
    return RegularityReport(
        identification_ratio_min=ratio_min,
        identification_ratio_max=ratio_max,
        min_gram_eigenvalue=eig_min,
        max_gram_eigenvalue=eig_max,
        column_sign_constant=sign_constant,
        max_fourth_moment=v4_max,
        identification_ok=bool(ratio_min > 1e-10 * max(1.0, ratio_max)),
        gram_ok=bool(eig_min > 1e-10 * max(1.0, eig_max)),
        monotone_ok=all(sign_constant),
        samples=samples,
        seed=seed,
    )
