import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from nlrrs import (
    Dataset,
    DomainError,
    ErrorLaw,
    RankScoreGrid,
    SingularCovarianceError,
    SolverOptions,
    a_phi_squared,
    asymptotic_power,
    chi_square_quantile,
    chi_square_sf,
    custom_score,
    hajek_score,
    make_model,
    median_score,
    noncentral_chi_square_sf,
    noncentrality,
    normal_quantile,
    normal_sf,
    projection_residual,
    rank_score_grid,
    ranks_of,
    score_integrals,
    statistic_Tn,
    statistic_Tn_star,
    truncate_phi,
    validate_z,
    wilcoxon_score,
)
from nlrrs.ranktests import score_density_integral
from conftest import make_intercept_dataset, null_scenario
from nlrrs import generate_dataset


def wilcoxon_a2_analytic(eps):
    # 2*eps*(1/2-eps)^2 + (2/3)*(1/2-eps)^3, by piecewise integration
    h = 0.5 - eps
    return 2 * eps * h**2 + (2.0 / 3.0) * h**3


class TestTruncatePhi:
    def test_wilcoxon_lower_tail(self):
        phi = truncate_phi(lambda u: np.asarray(u) - 0.5, 0.1)
        assert_allclose(phi(0.05), -0.4)

    def test_identity_in_middle(self):
        phi = truncate_phi(lambda u: np.asarray(u) - 0.5, 0.1)
        assert_allclose(phi(0.5), 0.0)
        assert_allclose(phi(0.3), -0.2)

    def test_median_upper_tail(self):
        sf = median_score(0.1)
        assert_allclose(sf.truncated()(0.95), 1.0)

    def test_epsilon_domain(self):
        with pytest.raises(DomainError):
            truncate_phi(lambda u: u, 0.0)
        with pytest.raises(DomainError):
            truncate_phi(lambda u: u, 0.5)


class TestScoreIntegrals:
    def _hajek_grid(self, y, eps, m, extra=()):
        n = len(y)
        ds = make_intercept_dataset(y)
        model = make_model("linear", [[-50, 50]])
        return rank_score_grid(
            ds, model, eps, m, extra_points=extra, opts=SolverOptions(multistart=1)
        )

    def test_median_score_single_atom(self):
        rng = np.random.default_rng(0)
        y = rng.normal(size=9)
        grid = self._hajek_grid(y, 0.1, 9, extra=(0.5,))
        sf = median_score(0.1)
        b = score_integrals(grid, sf)
        j = int(np.nonzero(grid.alphas == 0.5)[0][0])
        assert np.array_equal(b, 2.0 * grid.A[:, j])

    def test_constant_score_is_zero(self):
        rng = np.random.default_rng(1)
        y = rng.normal(size=7)
        grid = self._hajek_grid(y, 0.1, 7)
        sf = custom_score(lambda u: np.zeros_like(np.asarray(u, dtype=float)), 0.1)
        assert_allclose(score_integrals(grid, sf), 0.0, atol=1e-15)

    def test_wilcoxon_small_epsilon_matches_midranks(self):
        rng = np.random.default_rng(2)
        y = rng.normal(size=10)
        grid = self._hajek_grid(y, 0.01, 201)
        b = score_integrals(grid, wilcoxon_score(0.01))
        ranks = ranks_of(y)
        assert np.max(np.abs(b - (ranks - 0.5) / 10.0)) <= 0.03

    def test_epsilon_mismatch_rejected(self):
        y = np.arange(6.0)
        grid = self._hajek_grid(y, 0.1, 5)
        with pytest.raises(DomainError):
            score_integrals(grid, wilcoxon_score(0.2))

    def test_missing_jump_node_rejected(self):
        y = np.arange(6.0)
        grid = self._hajek_grid(y, 0.1, 4)  # 0.5 is not a node
        with pytest.raises(DomainError):
            score_integrals(grid, median_score(0.1))


class TestAPhiSquared:
    def test_median_is_one(self):
        for eps in (0.05, 0.1, 0.3):
            assert_allclose(a_phi_squared(median_score(eps)), 1.0, atol=1e-12)

    def test_wilcoxon_untruncated_limit(self):
        assert_allclose(a_phi_squared(wilcoxon_score(1e-9)), 1.0 / 12.0, atol=1e-6)

    def test_wilcoxon_at_tenth(self):
        got = a_phi_squared(wilcoxon_score(0.1))
        assert_allclose(got, 0.0746667, atol=1e-6)
        assert_allclose(got, wilcoxon_a2_analytic(0.1), atol=1e-9)

    def test_centering_invariance(self):
        base = custom_score(lambda u: np.asarray(u) ** 2, 0.05)
        shifted = custom_score(lambda u: np.asarray(u) ** 2 + 3.7, 0.05)
        assert_allclose(
            a_phi_squared(base), a_phi_squared(shifted), rtol=0, atol=1e-12
        )


class TestProjectionResidual:
    def test_column_in_span(self):
        rng = np.random.default_rng(0)
        V = np.column_stack([np.ones(10), rng.random(10)])
        Zres, _ = projection_residual(V[:, [1]], V)
        assert_allclose(Zres, 0.0, atol=1e-12)

    def test_orthogonal_complement(self):
        V = np.column_stack([np.ones(4), np.array([1.0, -1.0, 1.0, -1.0])])
        z = np.array([1.0, 1.0, -1.0, -1.0])[:, None]
        Zres, _ = projection_residual(z, V)
        assert_allclose(Zres, z, atol=1e-12)

    def test_idempotence(self):
        rng = np.random.default_rng(3)
        V = np.column_stack([np.ones(20), rng.random(20), rng.random(20)])
        Z = rng.normal(size=(20, 2))
        Z1, _ = projection_residual(Z, V)
        Z2, _ = projection_residual(Z1, V)
        assert np.max(np.abs(Z2 - Z1)) <= 1e-10

    def test_residual_centered_with_intercept(self):
        rng = np.random.default_rng(4)
        V = np.column_stack([np.ones(30), rng.random(30)])
        Z = rng.normal(size=(30, 2)) + 3.0
        Zres, _ = projection_residual(Z, V)
        assert np.max(np.abs(Zres.sum(axis=0))) <= 1e-8

    def test_hat_matrix_on_request(self):
        rng = np.random.default_rng(5)
        V = np.column_stack([np.ones(8), rng.random(8)])
        Zres, H = projection_residual(rng.normal(size=(8, 1)), V, want_hat=True)
        assert H.shape == (8, 8)
        assert_allclose(H @ H, H, atol=1e-10)

    def test_rank_deficient(self):
        from nlrrs import RankDeficiencyError

        V = np.column_stack([np.ones(6), np.ones(6)])
        with pytest.raises(RankDeficiencyError):
            projection_residual(np.arange(6.0)[:, None], V)


class TestValidateZ:
    def test_balanced_contrast_clean(self):
        z = np.concatenate([np.full(10, 0.5), np.full(10, -0.5)])
        rep = validate_z(z)
        assert rep.centered_ok and rep.growth_ok

    def test_uncentered_flagged(self):
        rep = validate_z(np.ones(20))
        assert not rep.centered_ok

    def test_huge_row_flagged(self):
        z = np.zeros(20)
        z[3] = 50.0
        z -= z.mean()
        rep = validate_z(z)
        assert not rep.growth_ok


class TestDistributions:
    def test_chi_square_sf_at_zero(self):
        for r in (1, 2, 5):
            assert chi_square_sf(0.0, r) == 1.0

    def test_chi_square_sf_two_df_closed_form(self):
        for x in (0.1, 1.0, 5.0, 5.9915, 20.0):
            assert abs(chi_square_sf(x, 2) - math.exp(-x / 2)) <= 1e-12
        assert_allclose(chi_square_sf(5.9915, 2), 0.05, atol=1e-4)

    def test_normal_quantile_against_erf_bisection(self):
        def phi_cdf(x):
            return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))

        for p in (0.5, 0.8, 0.95, 0.975, 0.999):
            lo, hi = -10.0, 10.0
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                if phi_cdf(mid) < p:
                    lo = mid
                else:
                    hi = mid
            assert abs(normal_quantile(p) - 0.5 * (lo + hi)) <= 1e-9
        assert_allclose(normal_quantile(0.95), 1.64485, atol=1e-5)

    def test_normal_sf_symmetry(self):
        assert_allclose(normal_sf(0.0), 0.5)
        assert_allclose(normal_sf(1.3) + normal_sf(-1.3), 1.0, atol=1e-14)

    def test_quantile_sf_inverse(self):
        for r in (1, 2, 7):
            for p in (0.5, 0.9, 0.99):
                x = chi_square_quantile(p, r)
                assert_allclose(chi_square_sf(x, r), 1 - p, atol=1e-10)

    def test_domains(self):
        with pytest.raises(DomainError):
            chi_square_sf(-1.0, 2)
        with pytest.raises(DomainError):
            normal_quantile(0.0)
        with pytest.raises(DomainError):
            chi_square_quantile(1.0, 2)


class TestStatistics:
    def test_constant_scores_give_zero_statistic(self):
        # a synthetic grid with identical score paths: every observation
        # integrates to the same value, so a centered Z nulls the statistic
        n, m = 8, 11
        alphas = np.linspace(0.05, 0.95, m)
        grid = RankScoreGrid(
            alphas=alphas, A=np.full((n, m), 0.5), fits=(), epsilon=0.05
        )
        b = score_integrals(grid, wilcoxon_score(0.05))
        assert_allclose(b, b[0])
        z = np.concatenate([np.full(4, 0.5), np.full(4, -0.5)])
        S = z @ b / math.sqrt(n)
        assert_allclose(S, 0.0, atol=1e-14)
        assert chi_square_sf(0.0, 1) == 1.0

    def test_one_sided_squares_to_quadratic(self):
        cfg = null_scenario(n=60, r=1, reps=1, seed=3)
        ds, _, _ = generate_dataset(cfg, 0)
        res2 = statistic_Tn(ds, cfg.model, cfg.score, cfg.solver, grid_m=21)
        res1 = statistic_Tn_star(ds, cfg.model, cfg.score, cfg.solver, grid_m=21)
        assert_allclose(res1.statistic**2, res2.statistic, atol=1e-10)
        assert res2.kind == "two_sided_chi2" and res1.kind == "one_sided_normal"
        assert 0.0 <= res2.p_value <= 1.0

    def test_residualized_switch_changes_sn(self):
        cfg = null_scenario(n=60, r=1, reps=1, seed=4)
        ds, _, _ = generate_dataset(cfg, 0)
        raw = statistic_Tn(ds, cfg.model, cfg.score, cfg.solver, grid_m=21)
        res = statistic_Tn(
            ds, cfg.model, cfg.score, cfg.solver, grid_m=21, residualized_sn=True
        )
        assert raw.residualized_sn is False and res.residualized_sn is True
        # with a group contrast on a replicated grid the two agree closely
        assert abs(raw.statistic - res.statistic) <= 0.5

    def test_tn_star_requires_single_regressor(self):
        cfg = null_scenario(n=60, r=2, reps=1, seed=5)
        ds, _, _ = generate_dataset(cfg, 0)
        with pytest.raises(DomainError):
            statistic_Tn_star(ds, cfg.model, cfg.score, cfg.solver, grid_m=21)

    def test_missing_z_rejected(self):
        cfg = null_scenario(n=60, r=1, reps=1, seed=6)
        ds, _, _ = generate_dataset(cfg, 0)
        bare = Dataset(y=ds.y, X=ds.X)
        with pytest.raises(DomainError):
            statistic_Tn(bare, cfg.model, cfg.score, cfg.solver, grid_m=21)

    def test_singular_studentizer_rejected(self):
        # z equal to the intercept direction is fully absorbed
        cfg = null_scenario(n=60, r=1, reps=1, seed=7)
        ds, _, _ = generate_dataset(cfg, 0)
        z = np.full((60, 1), 1.0)
        bad = Dataset(y=ds.y, X=ds.X, Z=z)
        with pytest.raises(SingularCovarianceError):
            statistic_Tn(bad, cfg.model, cfg.score, cfg.solver, grid_m=21)

    def test_asymmetric_score_rejected(self):
        cfg = null_scenario(n=60, r=1, reps=1, seed=8)
        ds, _, _ = generate_dataset(cfg, 0)
        skew = custom_score(lambda u: np.asarray(u) ** 2, 0.05)
        with pytest.raises(DomainError):
            statistic_Tn(ds, cfg.model, skew, cfg.solver, grid_m=21)

    def test_intercept_shift_leaves_statistic(self):
        cfg = null_scenario(n=60, r=1, reps=1, seed=9)
        ds, _, _ = generate_dataset(cfg, 0)
        base = statistic_Tn(ds, cfg.model, cfg.score, cfg.solver, grid_m=21)
        shifted = Dataset(y=ds.y + 2.5, X=ds.X, Z=ds.Z)
        moved = statistic_Tn(shifted, cfg.model, cfg.score, cfg.solver, grid_m=21)
        assert abs(base.statistic - moved.statistic) <= 1e-6


class TestAsymptoticPower:
    def test_null_direction_gives_nominal_level(self):
        D = np.array([[0.25]])
        law = ErrorLaw("logistic", 1.0)
        for tau in (0.01, 0.05, 0.2):
            assert_allclose(
                asymptotic_power([0.0], D, wilcoxon_score(0.05), law, tau), tau,
                atol=1e-10,
            )

    def test_quadrature_refinement(self):
        law = ErrorLaw("logistic", 1.0)
        sf = wilcoxon_score(0.05)
        coarse = score_density_integral(sf, law, grid_points=20_001)
        fine = score_density_integral(sf, law, grid_points=80_001)
        assert abs(coarse - fine) <= 1e-6 * max(1.0, abs(fine))

    def test_logistic_closed_form_cross_check(self):
        # with logistic errors f(F^{-1}(u)) = u(1-u)/s, so the Stieltjes
        # integral of the untruncated Wilcoxon score is -1/(6s)
        law = ErrorLaw("logistic", 1.0)
        got = score_density_integral(wilcoxon_score(1e-7), law)
        assert_allclose(got, -1.0 / 6.0, atol=1e-5)

    def test_monotone_in_shift(self):
        D = np.array([[0.25]])
        law = ErrorLaw("normal", 1.0)
        sf = wilcoxon_score(0.05)
        powers = [
            asymptotic_power([b], D, sf, law, 0.05) for b in (0.0, 1.0, 2.0, 4.0, 8.0)
        ]
        assert all(b >= a - 1e-12 for a, b in zip(powers, powers[1:]))
        assert powers[-1] > 0.9

    def test_noncentral_sf_against_series(self):
        # Poisson mixture representation of the noncentral chi-square
        x, r, lam = 3.0, 2, 1.7
        total = 0.0
        for j in range(80):
            w = math.exp(-lam / 2) * (lam / 2) ** j / math.factorial(j)
            total += w * chi_square_sf(x, r + 2 * j)
        assert_allclose(noncentral_chi_square_sf(x, r, lam), total, atol=1e-10)

    def test_density_required(self):
        with pytest.raises(DomainError):
            noncentrality([1.0], np.eye(1), wilcoxon_score(0.05), object())
