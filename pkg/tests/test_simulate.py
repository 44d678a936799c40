import numpy as np
import pytest
from numpy.testing import assert_allclose

from nlrrs import (
    DomainError,
    ErrorLaw,
    McFailureRateError,
    generate_dataset,
    monte_carlo_power,
    monte_carlo_size,
    psi_alpha,
)
from nlrrs.simulate import build_x_design, build_z_design
from conftest import null_scenario


class TestErrorLaws:
    @pytest.mark.parametrize("kind", ["normal", "logistic", "laplace", "cauchy"])
    def test_density_quantile_composition(self, kind):
        law = ErrorLaw(kind, 1.3)
        u = np.linspace(0.01, 0.99, 197)
        assert_allclose(
            law.density_quantile(u), law.density(law.quantile(u)), atol=1e-12
        )

    @pytest.mark.parametrize("kind", ["normal", "logistic", "laplace", "cauchy"])
    def test_quantile_inverts_cdf(self, kind):
        law = ErrorLaw(kind, 0.7)
        u = np.linspace(0.02, 0.98, 49)
        assert_allclose(law.cdf(law.quantile(u)), u, atol=1e-10)

    def test_density_quantile_vanishes_at_ends(self):
        for kind in ("normal", "logistic", "laplace", "cauchy"):
            law = ErrorLaw(kind, 1.0)
            vals = law.density_quantile(np.array([0.0, 1.0]))
            assert_allclose(vals, 0.0, atol=1e-15)

    def test_normal_large_sample_variance(self):
        law = ErrorLaw("normal", 1.0)
        rng = np.random.default_rng(0)
        e = law.sample(rng, 100_000)
        assert abs(e.var() - 1.0) < 0.02

    def test_symmetry_of_quantiles(self):
        for kind in ("normal", "logistic", "laplace", "cauchy"):
            law = ErrorLaw(kind, 1.0)
            assert_allclose(law.quantile(0.3), -law.quantile(0.7), atol=1e-12)
            assert_allclose(float(law.quantile(0.5)), 0.0, atol=1e-12)

    def test_invalid_law(self):
        with pytest.raises(DomainError):
            ErrorLaw("uniform", 1.0)
        with pytest.raises(DomainError):
            ErrorLaw("normal", 0.0)


class TestPsiAlpha:
    def test_nonnegative_branch(self):
        assert psi_alpha(0.3, 0.5) == 0.5
        assert psi_alpha(0.0, 0.5) == 0.5

    def test_negative_branch(self):
        assert_allclose(psi_alpha(-1.0, 0.25), -0.75)

    def test_zero_mean_at_the_quantile(self):
        for kind in ("normal", "logistic", "laplace", "cauchy"):
            law = ErrorLaw(kind, 1.0)
            rng = np.random.default_rng(7)
            e = law.sample(rng, 100_000)
            for alpha in (0.25, 0.5, 0.8):
                vals = psi_alpha(e - float(law.quantile(alpha)), alpha)
                assert abs(vals.mean()) < 0.01

    def test_alpha_domain(self):
        with pytest.raises(DomainError):
            psi_alpha(0.0, 0.0)


class TestDesignBuilders:
    def test_two_sample_centered(self):
        z = build_z_design([{"kind": "two_sample"}], 11)
        assert abs(z.sum()) < 1e-12

    def test_alternating_orthogonal_to_two_sample(self):
        Z = build_z_design([{"kind": "two_sample"}, {"kind": "alternating"}], 40)
        assert Z.shape == (40, 2)
        assert abs(Z[:, 0] @ Z[:, 1]) < 1e-10

    def test_trend_unit_second_moment(self):
        z = build_z_design([{"kind": "trend"}], 60)[:, 0]
        assert abs(z.sum()) < 1e-9
        assert_allclose(z @ z / 60, 1.0)
        assert np.max(np.abs(z)) / np.sqrt(60) <= 0.5

    def test_explicit_column(self):
        vals = np.arange(5.0) - 2.0
        z = build_z_design([{"kind": "explicit", "values": vals}], 5)
        assert_allclose(z[:, 0], vals)

    def test_replicated_grid(self):
        X = build_x_design({"kind": "replicated_grid", "low": 0, "high": 2, "copies": 2}, 10)
        assert_allclose(X[:5, 0], X[5:, 0])

    def test_unknown_kinds(self):
        with pytest.raises(DomainError):
            build_x_design({"kind": "bogus"}, 10)
        with pytest.raises(DomainError):
            build_z_design([{"kind": "bogus"}], 10)


class TestGenerateDataset:
    def test_deterministic_bitwise(self):
        cfg = null_scenario(n=40, reps=2)
        a1, e1, r1 = generate_dataset(cfg, 1)
        a2, e2, r2 = generate_dataset(cfg, 1)
        assert np.array_equal(a1.y, a2.y)
        assert np.array_equal(e1, e2)
        assert np.array_equal(r1, r2)

    def test_replications_differ(self):
        cfg = null_scenario(n=40, reps=2)
        a1, _, _ = generate_dataset(cfg, 0)
        a2, _, _ = generate_dataset(cfg, 1)
        assert not np.array_equal(a1.y, a2.y)

    def test_null_model_has_no_z_term(self):
        cfg = null_scenario(n=40, reps=1)
        ds, e, _ = generate_dataset(cfg, 0)
        from nlrrs.models import eval_g_all

        mean = eval_g_all(cfg.model, ds.X, cfg.theta_true)
        assert_allclose(ds.y, mean + e, atol=1e-12)

    def test_beta_shifts_y(self):
        import dataclasses

        cfg = null_scenario(n=40, reps=1, r=1)
        shifted = dataclasses.replace(cfg, beta_true=np.array([2.0]))
        d0, e0, _ = generate_dataset(cfg, 0)
        d1, e1, _ = generate_dataset(shifted, 0)
        assert np.array_equal(e0, e1)
        assert_allclose(d1.y - d0.y, d0.Z[:, 0] * 2.0, atol=1e-12)

    def test_theta_outside_box_rejected(self):
        with pytest.raises(DomainError):
            null_scenario(n=40, reps=1, theta_true=[99.0, 3.0, 1.0])


class TestMonteCarlo:
    def test_tau_one_always_rejects(self):
        cfg = null_scenario(n=40, reps=6, scale=0.3, nominal_level=1.0, grid_m=11)
        rep = monte_carlo_size(cfg)
        assert rep.rejection_rate == 1.0

    def test_tau_zero_rejected(self):
        with pytest.raises(DomainError):
            monte_carlo_size(null_scenario(n=40, reps=2, scale=0.3, nominal_level=0.0))

    def test_report_fields(self):
        cfg = null_scenario(n=40, reps=6, scale=0.3, grid_m=11)
        rep = monte_carlo_size(cfg)
        assert rep.failures <= 6
        assert 0.0 <= rep.rejection_rate <= 1.0
        assert 0.0 <= rep.ks_distance <= 1.0
        assert len(rep.statistics) + rep.failures == 6

    def test_determinism_sequential(self):
        cfg = null_scenario(n=40, reps=5, scale=0.3, grid_m=11)
        r1 = monte_carlo_size(cfg)
        r2 = monte_carlo_size(cfg)
        assert np.array_equal(r1.statistics, r2.statistics)

    def test_cauchy_needs_large_n(self):
        cfg = null_scenario(n=100, reps=2, law="cauchy", scale=0.1)
        with pytest.raises(DomainError):
            monte_carlo_size(cfg)

    def test_power_zero_entry_matches_size(self):
        cfg = null_scenario(n=40, reps=6, r=1, scale=0.3, grid_m=11)
        size = monte_carlo_size(cfg)
        curve = monte_carlo_power(cfg, [np.array([0.0])])
        assert_allclose(curve.points[0].empirical_power, size.rejection_rate)
        assert_allclose(curve.points[0].predicted_power, cfg.nominal_level, atol=1e-9)


class TestBahadurInputs:
    def test_requires_null(self):
        import dataclasses

        from nlrrs import check_bahadur

        cfg = null_scenario(n=30, reps=2, r=1)
        alt = dataclasses.replace(cfg, beta_true=np.array([1.0]))
        with pytest.raises(DomainError):
            check_bahadur(alt, [0.5])

    def test_cauchy_excluded(self):
        from nlrrs import check_bahadur

        cfg = null_scenario(n=30, reps=2, law="cauchy", scale=0.2)
        with pytest.raises(DomainError):
            check_bahadur(cfg, [0.5])

    def test_small_run_produces_medians(self):
        from nlrrs import check_bahadur

        cfg = null_scenario(n=30, reps=3, grid_m=11)
        rep = check_bahadur(cfg, [0.3, 0.5])
        assert set(rep.medians[30]) == {0.3, 0.5}
        assert all(np.isfinite(v) for v in rep.medians[30].values())

    def test_hajek_equivalence_small_run(self):
        from nlrrs import check_hajek_equivalence

        cfg = null_scenario(n=30, reps=3, r=1, grid_m=11)
        rep = check_hajek_equivalence(cfg)
        assert np.isfinite(rep.medians[30])
