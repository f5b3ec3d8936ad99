import numpy as np
import pytest
from numpy.testing import assert_allclose

from geefit.correlation import (
    AdaptiveCorrelation,
    FixedCorrelation,
    IdentityCorrelation,
    PilotCorrelation,
    pilot_correlation_sequence,
    structured_correlation,
)
from geefit.diagnostics import (
    eta_slope,
    h_indep,
    hypothesis_check,
    information_matrix,
    optimality_matrices_mc,
    regularity_constants,
)
from geefit.model import LongitudinalDataset, get_link
from geefit.simulation import GeneratorConfig, covariate_design, true_correlation

from conftest import make_config, make_dataset


class TestHIndep:
    def test_linear_is_design_gram(self):
        ds, cfg = make_dataset(n=9, seed=1)
        gram = np.einsum("nmp,nmq->pq", ds.covariates, ds.covariates)
        assert_allclose(h_indep(ds, cfg.beta0, get_link("linear")), gram, atol=1e-12)

    def test_single_identity_individual(self):
        ds = LongitudinalDataset(np.eye(3)[None], np.zeros((1, 3)))
        assert_allclose(h_indep(ds, np.zeros(3), get_link("linear")), np.eye(3))

    def test_logistic_at_zero_scales_gram(self):
        ds, _ = make_dataset(n=7, seed=2)
        gram = np.einsum("nmp,nmq->pq", ds.covariates, ds.covariates)
        out = h_indep(ds, np.zeros(ds.p), get_link("logistic"))
        assert_allclose(out, 0.25 * gram, atol=1e-12)


class TestRegularityConstants:
    def test_linear_link_zero_curvature(self):
        ds, cfg = make_dataset(n=8, seed=3)
        model = IdentityCorrelation(ds.m)
        rc = regularity_constants(ds, cfg.beta0, "linear", model, r=0.5)
        assert rc.curvature_ratio_2 == 0.0
        assert rc.curvature_ratio_3 == 0.0
        assert rc.variance_ratio_span == 0.0

    def test_beta_free_models_zero_drift(self):
        ds, cfg = make_dataset(n=8, m=3, link="logistic", seed=4)
        link = get_link("logistic")
        seq = pilot_correlation_sequence(ds, cfg.beta0, link)
        for model in (
            IdentityCorrelation(ds.m),
            FixedCorrelation(structured_correlation("ar1", 0.3, ds.m)),
            PilotCorrelation(seq),
        ):
            rc = regularity_constants(ds, cfg.beta0, link, model, r=0.3, ball_samples=4)
            assert rc.inverse_drift_excess == pytest.approx(0.0, abs=1e-10)
            assert rc.correlation_derivative_max == 0.0

    def test_leverage_scale_identity(self):
        ds, cfg = make_dataset(n=8, link="log", seed=5)
        model = IdentityCorrelation(ds.m)
        rc = regularity_constants(ds, cfg.beta0, "log", model, r=0.2, ball_samples=2)
        assert rc.leverage_scale == pytest.approx(rc.lam_max_indep * rc.max_leverage)

    def test_drift_max_at_least_one(self):
        ds, cfg = make_dataset(n=8, m=3, link="logistic", seed=6)
        model = AdaptiveCorrelation(ds, get_link("logistic"))
        rc = regularity_constants(ds, cfg.beta0, "logistic", model, r=0.2, ball_samples=4)
        assert rc.inverse_drift_max >= 1.0 - 1e-12
        assert rc.correlation_derivative_max > 0.0

    def test_invalid_arguments(self):
        ds, cfg = make_dataset()
        model = IdentityCorrelation(ds.m)
        with pytest.raises(ValueError):
            regularity_constants(ds, cfg.beta0, "linear", model, r=0.0)
        with pytest.raises(ValueError):
            regularity_constants(ds, cfg.beta0, "linear", model, r=0.1, ball_samples=0)


class TestEtaSlope:
    def test_logistic_slope_finite(self):
        ds, cfg = make_dataset(n=10, link="logistic", seed=7)
        slope, table = eta_slope(ds, cfg.beta0, "logistic", r_grid=[0.05, 0.1, 0.2])
        assert np.isfinite(slope) and slope > 0
        assert len(table) == 3
        # Spans grow with the radius.
        spans = [row[1] for row in table]
        assert spans[0] <= spans[-1]

    def test_linear_slope_zero(self):
        ds, cfg = make_dataset(n=10, seed=8)
        slope, _ = eta_slope(ds, cfg.beta0, "linear", r_grid=[0.1, 0.2])
        assert slope == pytest.approx(0.0)


class TestHypothesisCheck:
    def test_linear_growth(self):
        cfg = make_config(n=400, seed=9)
        from geefit.simulation import generate_dataset

        ds = generate_dataset(cfg, 0)
        report = hypothesis_check(ds, [50, 100, 200, 400], cfg.beta0, "linear")
        lam_mins = [row.lam_min for row in report.rows]
        assert all(b > a for a, b in zip(lam_mins, lam_mins[1:]))
        ratios = [row.growth_ratio for row in report.rows]
        assert ratios[-1] > ratios[0]
        assert report.lam_min_monotone

    def test_duplicate_column_flagged(self):
        ds, cfg = make_dataset(n=30, p=2, seed=10)
        x = ds.covariates.copy()
        x[:, :, 1] = x[:, :, 0]
        bad = LongitudinalDataset(x, ds.responses)
        report = hypothesis_check(bad, [10, 20, 30], cfg.beta0, "linear")
        assert all(row.rank_deficient for row in report.rows)
        assert all(row.lam_min < 1e-10 for row in report.rows)

    def test_logistic_weighted_sums_grow(self):
        # One-dimensional bounded design: the sufficient lower sum uses the
        # worst-case variance weight and must be positive and growing.
        cfg = make_config(n=300, p=1, beta0=[0.8], seed=11)
        from geefit.simulation import generate_dataset

        ds = generate_dataset(cfg, 0)
        report = hypothesis_check(
            ds, [100, 200, 300], cfg.beta0, "logistic", domain_bound=1.0
        )
        sums = [row.weighted_lower_sum for row in report.rows]
        assert all(v > 0 for v in sums)
        assert sums[0] < sums[1] < sums[2]

    def test_grid_bound_validation(self):
        ds, cfg = make_dataset(n=5)
        with pytest.raises(ValueError):
            hypothesis_check(ds, [10], cfg.beta0, "linear")


class TestOptimalityMatrices:
    def test_oracle_ratios_exactly_one(self):
        cfg = make_config(n=60, correlation="exchangeable", corr_param=0.5, seed=12)
        om = optimality_matrices_mc(cfg, model="oracle")
        assert om.det_ratio_h == pytest.approx(1.0, abs=1e-12)
        assert om.det_ratio_m == pytest.approx(1.0, abs=1e-12)

    def test_identity_model_loses_efficiency(self):
        # Efficiency loss of working independence under real correlation:
        # its information determinant falls strictly below the optimal one.
        cfg = make_config(n=60, correlation="exchangeable", corr_param=0.5, seed=13)
        om = optimality_matrices_mc(cfg, model="identity")
        eff_indep, _ = information_matrix(om.h_star, om.m_star)
        assert np.linalg.det(eff_indep) < np.linalg.det(om.m_bar)
        # And its covariance differs from the optimal covariance.
        assert abs(om.det_ratio_m - 1.0) > 0.05

    def test_low_reps_flagged(self):
        cfg = make_config(n=25, m=3, correlation="exchangeable", corr_param=0.4, seed=14)
        om = optimality_matrices_mc(cfg, model="aqs", reps=20)
        assert om.low_reps_warning

    def test_unknown_model(self):
        cfg = make_config()
        with pytest.raises(ValueError):
            optimality_matrices_mc(cfg, model="bogus")


class TestInformationMatrix:
    def test_equal_arguments_return_m(self):
        m = structured_correlation("exchangeable", 0.4, 3)
        eff, inv = information_matrix(m, m)
        assert_allclose(eff, m, atol=1e-12)
        assert_allclose(inv @ eff, np.eye(3), atol=1e-10)

    def test_scalar_example(self):
        eff, inv = information_matrix(np.array([[2.0]]), np.array([[4.0]]))
        assert eff[0, 0] == pytest.approx(1.0)
        assert inv[0, 0] == pytest.approx(1.0)

    def test_random_spd_pair(self, rng):
        a = rng.standard_normal((3, 3))
        h = a @ a.T + 3 * np.eye(3)
        b = rng.standard_normal((3, 3))
        m = b @ b.T + 3 * np.eye(3)
        eff, inv = information_matrix(h, m)
        assert np.all(np.linalg.eigvalsh(eff) > 0)
        assert_allclose(inv @ eff, np.eye(3), atol=1e-10)

    def test_singular_covariance_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            information_matrix(np.eye(2), np.zeros((2, 2)))


class TestOrderBounds:
    def test_inverse_correlation_eigenvalue_floor(self, rng):
        # A unit-diagonal correlation matrix has largest eigenvalue at most
        # its dimension, so its inverse is bounded below by 1/m.
        for m in (2, 3, 5):
            for _ in range(20):
                a = rng.standard_normal((m, 2 * m))
                cov = a @ a.T
                d = np.sqrt(np.diag(cov))
                corr = cov / np.outer(d, d)
                lam = np.linalg.eigvalsh(np.linalg.inv(corr))
                assert lam[0] >= 1.0 / m - 1e-10

    def test_determinant_monotone_in_loewner_order(self, rng):
        for _ in range(50):
            a = rng.standard_normal((4, 4))
            lower = a @ a.T + 0.5 * np.eye(4)
            bump = rng.standard_normal((4, 4))
            upper = lower + bump @ bump.T
            assert np.linalg.det(lower) <= np.linalg.det(upper) + 1e-12

    def test_quasi_score_dominance_exact(self):
        # The optimal equation's information dominates the independence
        # equation's, computed exactly from the generator's ground truth.
        cfg = make_config(n=80, m=3, correlation="exchangeable", corr_param=0.5, seed=15)
        om = optimality_matrices_mc(cfg, model="identity")
        eff_indep, _ = information_matrix(om.h_star, om.m_star)
        gap = np.linalg.eigvalsh(om.m_bar - eff_indep)[0]
        assert gap >= -1e-10
