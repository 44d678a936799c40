import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from nlrrs import (
    Dataset,
    DomainError,
    SolverOptions,
    boundary_extension,
    fit_quantile,
    format_grid,
    hajek_score,
    make_model,
    parse_grid_text,
    rank_score_grid,
    rank_scores_at,
    ranks_of,
    verify_duality,
)
from conftest import make_exp_dataset, make_intercept_dataset


def hajek_by_dual_lp(y, alpha):
    """Vertex enumeration of max y'a s.t. sum a = n(1-alpha), 0 <= a <= 1."""
    n = len(y)
    target = n * (1 - alpha)
    best, best_val = None, -np.inf
    # a vertex has at most one fractional coordinate
    for frac_idx in range(n):
        others = [j for j in range(n) if j != frac_idx]
        for pattern in itertools.product([0.0, 1.0], repeat=n - 1):
            s = sum(pattern)
            f = target - s
            if -1e-12 <= f <= 1 + 1e-12:
                a = np.zeros(n)
                a[others] = pattern
                a[frac_idx] = min(max(f, 0.0), 1.0)
                val = float(np.dot(y, a))
                if val > best_val + 1e-12:
                    best, best_val = a, val
    return best


class TestHajekScore:
    def test_top_rank(self):
        assert hajek_score(5, 5, 0.5) == 1.0

    def test_bottom_rank(self):
        assert hajek_score(1, 5, 0.5) == 0.0

    def test_fractional_from_dual_lp(self):
        y = np.array([0.3, 0.9, 0.1, 0.5])
        ranks = ranks_of(y)
        a = hajek_by_dual_lp(y, 0.3)
        for i in range(4):
            assert_allclose(hajek_score(ranks[i], 4, 0.3), a[i], atol=1e-12)
        assert_allclose(hajek_score(2, 4, 0.3), 0.8)

    def test_rank_domain(self):
        with pytest.raises(DomainError):
            hajek_score(0, 5, 0.5)
        with pytest.raises(DomainError):
            hajek_score(6, 5, 0.5)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30))
    def test_monotone_continuous_in_alpha(self, R, n):
        if R > n:
            R = n
        alphas = np.linspace(0.0, 1.0, 101)
        vals = hajek_score(R, n, alphas)
        assert vals[0] == 1.0 and vals[-1] == 0.0
        assert np.all(np.diff(vals) <= 1e-12)
        # Lipschitz in alpha with constant n
        assert np.max(np.abs(np.diff(vals))) <= n * (alphas[1] - alphas[0]) + 1e-12


class TestRankScoresAt:
    def test_square_interpolation_gives_constant(self):
        # n = p + 2 keeps the fit legal; choose y so that p+1 points are
        # interpolated and the design is nonsingular
        m = make_model("linear", [[-10, 10], [-10, 10]])
        ds = Dataset(y=np.array([0.0, 1.0, 2.1]), X=np.array([0.0, 1.0, 2.0]))
        alpha = 0.4
        a, fit = rank_scores_at(ds, m, alpha, SolverOptions(multistart=2))
        assert_allclose(a.sum(), 3 * (1 - alpha), atol=1e-8)
        assert np.all((a >= 0) & (a <= 1))

    def test_intercept_only_equals_hajek(self, intercept_model):
        rng = np.random.default_rng(8)
        y = rng.normal(size=15)
        ds = make_intercept_dataset(y)
        ranks = ranks_of(y)
        for alpha in (0.1, 0.33, 0.5, 0.71, 0.9):
            a, _ = rank_scores_at(ds, intercept_model, alpha, SolverOptions(multistart=2))
            assert_allclose(a, hajek_score(ranks, 15, alpha), atol=1e-8)

    def test_sum_identity(self, exp_model):
        ds = make_exp_dataset(n=30, seed=14, scale=0.3)
        for alpha in (0.2, 0.5, 0.8):
            a, _ = rank_scores_at(ds, exp_model, alpha, SolverOptions(multistart=2))
            assert_allclose(a.sum(), 30 * (1 - alpha), atol=1e-6)

    def test_orthogonality_identity(self, exp_model):
        ds = make_exp_dataset(n=30, seed=15, scale=0.3)
        alpha = 0.45
        a, fit = rank_scores_at(ds, exp_model, alpha, SolverOptions(multistart=2))
        V = exp_model.grad(ds.X, fit.theta_hat)
        assert np.max(np.abs(V.T @ (a - (1 - alpha)))) <= 1e-6

    def test_intercept_shift_leaves_scores(self, exp_model):
        ds = make_exp_dataset(n=25, seed=16, scale=0.3)
        opts = SolverOptions(multistart=3)
        a1, _ = rank_scores_at(ds, exp_model, 0.3, opts)
        ds2 = Dataset(y=ds.y + 1.3, X=ds.X)
        a2, _ = rank_scores_at(ds2, exp_model, 0.3, opts)
        assert_allclose(a1, a2, atol=1e-8)


class TestVerifyDuality:
    def test_exact_interpolation(self):
        m = make_model("linear", [[-10, 10], [-10, 10]])
        ds = Dataset(y=np.array([0.0, 1.0, 2.0]), X=np.array([0.0, 1.0, 2.0]))
        alpha = 0.5
        a, fit = rank_scores_at(ds, m, alpha, SolverOptions(multistart=2))
        assert verify_duality(fit, a, alpha) <= 1e-12

    def test_hand_computed_median(self, intercept_model):
        ds = make_intercept_dataset([1.0, 2.0, 3.0])
        fit = fit_quantile(ds, intercept_model, 0.5, SolverOptions(multistart=2))
        # theta = 2, residuals (-1, 0, 1), scores (0, 1/2, 1):
        # (1/3)[(-1)(-.5) + 0 + (1)(.5)] = 1/3 = mean check loss
        a = np.array([0.0, 0.5, 1.0])
        assert verify_duality(fit, a, 0.5) <= 1e-10

    def test_random_instances(self, exp_model):
        for seed in range(5):
            ds = make_exp_dataset(n=24, seed=seed, scale=0.35)
            alpha = 0.25 + 0.1 * seed
            a, fit = rank_scores_at(ds, exp_model, alpha, SolverOptions(multistart=2))
            assert verify_duality(fit, a, alpha) <= 1e-8


class TestRankScoreGrid:
    def test_grid_endpoints(self, intercept_model):
        ds = make_intercept_dataset(np.arange(5.0))
        grid = rank_score_grid(ds, intercept_model, 0.25, 2, opts=SolverOptions(multistart=1))
        assert_allclose(grid.alphas, [0.25, 0.75])

    def test_extra_points_merged(self, intercept_model):
        ds = make_intercept_dataset(np.arange(5.0))
        grid = rank_score_grid(
            ds, intercept_model, 0.1, 2, extra_points=[0.5], opts=SolverOptions(multistart=1)
        )
        assert_allclose(grid.alphas, [0.1, 0.5, 0.9])

    def test_intercept_only_matches_hajek_everywhere(self, intercept_model):
        rng = np.random.default_rng(2)
        y = rng.normal(size=12)
        ds = make_intercept_dataset(y)
        grid = rank_score_grid(ds, intercept_model, 0.05, 31, opts=SolverOptions(multistart=1))
        ranks = ranks_of(y)
        astar = np.clip(ranks[:, None] - 12 * grid.alphas[None, :], 0.0, 1.0)
        assert np.max(np.abs(grid.A - astar)) <= 1e-8

    def test_epsilon_domain(self, intercept_model):
        ds = make_intercept_dataset(np.arange(5.0))
        with pytest.raises(DomainError):
            rank_score_grid(ds, intercept_model, 0.6, 5)
        with pytest.raises(DomainError):
            rank_score_grid(ds, intercept_model, 0.1, 1)
        with pytest.raises(DomainError):
            rank_score_grid(ds, intercept_model, 0.2, 5, extra_points=[0.05])


class TestBoundaryExtension:
    def test_endpoints_and_constant_tails(self, intercept_model):
        rng = np.random.default_rng(4)
        y = rng.normal(size=8)
        ds = make_intercept_dataset(y)
        grid = rank_score_grid(ds, intercept_model, 0.2, 5, opts=SolverOptions(multistart=1))
        rule = boundary_extension(grid)
        assert_allclose(rule(0.0), np.ones(8))
        assert_allclose(rule(1.0), np.zeros(8))
        assert_allclose(rule(0.2), grid.A[:, 0])
        assert_allclose(rule(0.05), grid.A[:, 0])
        assert_allclose(rule(0.97), grid.A[:, -1])
        mid = 0.5 * (grid.alphas[1] + grid.alphas[2])
        assert_allclose(rule(mid), 0.5 * (grid.A[:, 1] + grid.A[:, 2]))


class TestGridSerialization:
    def test_round_trip(self, intercept_model):
        ds = make_intercept_dataset(np.arange(6.0))
        grid = rank_score_grid(ds, intercept_model, 0.1, 7, opts=SolverOptions(multistart=1))
        text = format_grid(grid)
        first_row = text.splitlines()[0].split(",")
        assert len(first_row) == len(grid.alphas)
        alphas, A = parse_grid_text(text)
        assert_allclose(alphas, grid.alphas, rtol=1e-11)
        assert_allclose(A, grid.A, rtol=1e-11, atol=1e-11)
