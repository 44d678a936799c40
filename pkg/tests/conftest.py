import numpy as np
import pytest

from nlrrs import Dataset, ErrorLaw, ScenarioConfig, SolverOptions, make_model, wilcoxon_score


@pytest.fixture(scope="session")
def exp_model():
    return make_model("exponential", [[-5, 5], [0.3, 9], [0.05, 5]])


@pytest.fixture(scope="session")
def intercept_model():
    return make_model("linear", [[-50, 50]])


def make_exp_dataset(n=50, seed=0, scale=0.3, theta=(1.0, 2.0, 1.0)):
    rng = np.random.default_rng(seed)
    x = np.linspace(0.0, 4.0, n)
    y = theta[0] + theta[1] * np.exp(-theta[2] * x) + rng.normal(scale=scale, size=n)
    return Dataset(y=y, X=x)


def make_intercept_dataset(y):
    y = np.asarray(y, dtype=float)
    return Dataset(y=y, X=np.empty((len(y), 0)))


def null_scenario(n=100, seed=11, law="normal", scale=0.5, r=2, reps=60, **kw):
    """The well-identified exponential-nuisance scenario used across the
    Monte Carlo tests."""
    model = make_model("exponential", [[-5, 5], [0.3, 9], [0.05, 5]])
    z = [{"kind": "two_sample"}, {"kind": "alternating"}][:r]
    args = dict(
        model=model,
        theta_true=[1.0, 3.0, 1.0],
        n=n,
        error=ErrorLaw(law, scale),
        replications=reps,
        seed=seed,
        x_design={"kind": "replicated_grid", "low": 0.0, "high": 4.0, "copies": 2},
        z_design=tuple(z),
        beta_true=[0.0] * r,
        score=wilcoxon_score(0.05),
        grid_m=51,
        solver=SolverOptions(multistart=2),
    )
    args.update(kw)
    return ScenarioConfig(**args)
