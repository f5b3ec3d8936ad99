import numpy as np
import pytest
from numpy.testing import assert_allclose

from geefit.correlation import (
    AdaptiveCorrelation,
    FixedCorrelation,
    IdentityCorrelation,
    PilotCorrelation,
    inverse_stack,
    pilot_correlation_sequence,
    structured_correlation,
)
from geefit.estimator import (
    EstimatingFunctionContext,
    NonConvergedPilotError,
    RankDeficiencyError,
    closed_form_linear,
    covariance_estimates,
    estimating_function,
    estimating_jacobian,
    fit,
    independence_fit,
    newton_solve,
)
from geefit.model import LINK_NAMES, LongitudinalDataset, get_link

from conftest import fd_jacobian, make_dataset


def _ctx(ds, link_name, model, **kw):
    return EstimatingFunctionContext(
        dataset=ds, link=get_link(link_name), model=model, **kw
    )


def _all_models(ds, link_name, pilot_beta):
    link = get_link(link_name)
    seq = pilot_correlation_sequence(ds, pilot_beta, link)
    return {
        "indep": IdentityCorrelation(ds.m),
        "gee": FixedCorrelation(structured_correlation("ar1", 0.4, ds.m)),
        "ple": PilotCorrelation(seq),
        "aqs": AdaptiveCorrelation(ds, link),
    }


class TestEstimatingFunction:
    def test_zero_at_ols_solution(self):
        ds, _ = make_dataset(n=20, seed=1)
        ols = np.linalg.lstsq(
            ds.covariates.reshape(-1, ds.p), ds.responses.ravel(), rcond=None
        )[0]
        g = estimating_function(_ctx(ds, "linear", IdentityCorrelation(ds.m)), ols)
        assert np.max(np.abs(g)) < 1e-9

    def test_zero_at_exact_mean_for_every_model(self):
        ds, cfg = make_dataset(n=8, m=3, link="logistic", seed=2)
        link = get_link("logistic")
        exact = ds.with_responses(link.mu(ds.covariates @ cfg.beta0))
        for model in _all_models(exact, "logistic", cfg.beta0).values():
            g = estimating_function(_ctx(exact, "logistic", model), cfg.beta0)
            assert np.max(np.abs(g)) < 1e-12

    @pytest.mark.parametrize("link_name", LINK_NAMES)
    def test_identity_model_equals_direct_formula(self, link_name):
        ds, cfg = make_dataset(n=9, link=link_name, seed=3)
        link = get_link(link_name)
        beta = 0.9 * cfg.beta0
        g = estimating_function(_ctx(ds, link_name, IdentityCorrelation(ds.m)), beta)
        direct = np.einsum(
            "nmp,nm->p", ds.covariates, ds.responses - link.mu(ds.covariates @ beta)
        )
        assert_allclose(g, direct, atol=1e-14 * (1 + np.max(np.abs(direct))))


class TestEstimatingJacobian:
    def test_linear_identity_is_design_gram(self):
        ds, cfg = make_dataset(n=10, seed=4)
        jac = estimating_jacobian(_ctx(ds, "linear", IdentityCorrelation(ds.m)), cfg.beta0)
        gram = np.einsum("nmp,nmq->pq", ds.covariates, ds.covariates)
        assert_allclose(jac.total, gram, atol=1e-12)
        assert_allclose(jac.b, 0.0, atol=1e-12)

    def test_zero_residuals_reduce_to_curvature(self):
        ds, cfg = make_dataset(n=7, m=3, link="log", seed=5)
        link = get_link("log")
        exact = ds.with_responses(link.mu(ds.covariates @ cfg.beta0))
        model = FixedCorrelation(structured_correlation("exchangeable", 0.3, ds.m))
        jac = estimating_jacobian(_ctx(exact, "log", model), cfg.beta0)
        assert_allclose(jac.b, 0.0, atol=1e-12)
        assert_allclose(jac.e, 0.0, atol=1e-12)
        assert_allclose(jac.total, jac.h, atol=1e-12)

    @pytest.mark.parametrize("link_name", LINK_NAMES)
    def test_matches_finite_differences(self, link_name):
        ds, cfg = make_dataset(n=7, m=3, p=2, link=link_name, seed=6)
        beta = 0.8 * cfg.beta0
        for name, model in _all_models(ds, link_name, cfg.beta0).items():
            ctx = _ctx(ds, link_name, model)
            fd = -fd_jacobian(lambda b: estimating_function(ctx, b), beta)
            total = estimating_jacobian(ctx, beta).total
            err = np.max(np.abs(total - fd)) / (1.0 + np.max(np.abs(total)))
            assert err < 1e-6, f"{link_name}/{name}: {err:.2e}"

    def test_split_mode_recombines_to_total(self):
        ds, cfg = make_dataset(n=8, m=3, link="logistic", seed=7)
        ctx = _ctx(ds, "logistic", AdaptiveCorrelation(ds, get_link("logistic")))
        beta = 0.7 * cfg.beta0
        plain = estimating_jacobian(ctx, beta)
        split = estimating_jacobian(ctx, beta, reference_beta=cfg.beta0)
        assert not plain.split and split.split
        assert_allclose(split.b + split.e, plain.b, atol=1e-10)
        assert_allclose(split.total, plain.total, atol=1e-10)


class TestNewtonSolve:
    def test_matches_ols_closed_form(self):
        ds, _ = make_dataset(n=15, seed=8)
        ctx = _ctx(ds, "linear", IdentityCorrelation(ds.m))
        newton = newton_solve(ctx, beta_init=np.zeros(ds.p))
        closed = closed_form_linear(ctx)
        assert newton.converged
        assert np.max(np.abs(newton.beta - closed.beta)) < 1e-10

    def test_matches_gls_closed_forms(self):
        ds, cfg = make_dataset(n=12, m=3, seed=9)
        seq = pilot_correlation_sequence(ds, independence_fit(ds, "linear").beta, get_link("linear"))
        for model in (
            FixedCorrelation(structured_correlation("exchangeable", 0.4, ds.m)),
            PilotCorrelation(seq),
        ):
            ctx = _ctx(ds, "linear", model)
            newton = newton_solve(ctx)
            closed = closed_form_linear(ctx)
            assert newton.converged
            assert np.max(np.abs(newton.beta - closed.beta)) < 1e-10

    def test_logistic_adaptive_consistency_rate(self):
        # On surrogate logistic data the adaptive solve should converge and
        # land near the truth in nearly every replication.
        from geefit.simulation import GeneratorConfig, generate_dataset

        cfg = GeneratorConfig(
            n=500, m=3, p=2, beta0=np.array([0.6, -0.4]), link="logistic",
            correlation="exchangeable", corr_param=0.4, seed=21,
        )
        ok = 0
        reps = 100
        for rep in range(reps):
            ds = generate_dataset(cfg, replication=rep)
            res = fit(ds, "logistic", "aqs")
            if res.converged and np.linalg.norm(res.beta - cfg.beta0) < 0.5:
                ok += 1
        assert ok >= 95

    def test_root_property(self):
        ds, cfg = make_dataset(n=10, m=3, link="log", seed=10)
        ctx = _ctx(ds, "log", AdaptiveCorrelation(ds, get_link("log")))
        init = independence_fit(ds, "log").beta
        res = newton_solve(ctx, beta_init=init)
        assert res.converged
        g0 = np.max(np.abs(estimating_function(ctx, init)))
        assert res.final_gnorm <= 1e-8 * (1.0 + g0)

    def test_non_convergence_is_reported_not_raised(self):
        ds, cfg = make_dataset(n=10, m=3, link="logistic", seed=11)
        ctx = _ctx(
            ds, "logistic", AdaptiveCorrelation(ds, get_link("logistic")),
            tol_g=1e-15, max_iter=1,
        )
        res = newton_solve(ctx, beta_init=np.zeros(ds.p))
        assert not res.converged
        assert res.message
        assert res.trace

    def test_rank_deficient_design_raises(self):
        ds, cfg = make_dataset(n=8, p=2, seed=12)
        x = ds.covariates.copy()
        x[:, :, 1] = x[:, :, 0]  # duplicate column
        bad = LongitudinalDataset(x, ds.responses)
        ctx = _ctx(bad, "linear", IdentityCorrelation(bad.m))
        with pytest.raises(RankDeficiencyError):
            newton_solve(ctx, beta_init=np.zeros(2))

    def test_multistart_returns_root_closest_to_pilot(self):
        ds, cfg = make_dataset(n=30, m=3, seed=13)
        ctx = _ctx(ds, "linear", AdaptiveCorrelation(ds, get_link("linear")), multistart=4)
        res = newton_solve(ctx)
        assert res.converged

    def test_scoring_mode_reaches_same_root(self):
        ds, cfg = make_dataset(n=25, m=3, seed=14)
        link = get_link("linear")
        full = newton_solve(_ctx(ds, "linear", AdaptiveCorrelation(ds, link)))
        scored = newton_solve(_ctx(ds, "linear", AdaptiveCorrelation(ds, link), scoring=True))
        assert full.converged and scored.converged
        assert np.max(np.abs(full.beta - scored.beta)) < 1e-7


class TestClosedForm:
    def test_identity_is_ols(self):
        ds, _ = make_dataset(n=18, seed=15)
        res = closed_form_linear(_ctx(ds, "linear", IdentityCorrelation(ds.m)))
        ols = np.linalg.lstsq(
            ds.covariates.reshape(-1, ds.p), ds.responses.ravel(), rcond=None
        )[0]
        assert_allclose(res.beta, ols, atol=1e-11)
        assert res.method == "indep"

    def test_fixed_identity_matrix_equals_ols(self):
        ds, _ = make_dataset(n=18, seed=15)
        res_i = closed_form_linear(_ctx(ds, "linear", IdentityCorrelation(ds.m)))
        res_f = closed_form_linear(_ctx(ds, "linear", FixedCorrelation(np.eye(ds.m))))
        assert_allclose(res_i.beta, res_f.beta, atol=1e-13)

    def test_adaptive_has_no_closed_form(self):
        ds, _ = make_dataset()
        with pytest.raises(ValueError, match="closed form|adaptive"):
            closed_form_linear(_ctx(ds, "linear", AdaptiveCorrelation(ds, get_link("linear"))))

    def test_requires_linear_link(self):
        ds, _ = make_dataset(link="log")
        with pytest.raises(ValueError, match="linear"):
            closed_form_linear(_ctx(ds, "log", IdentityCorrelation(ds.m)))


class TestCovariance:
    def test_single_individual_information(self):
        ds, _ = make_dataset(n=1, m=4, p=2, seed=16)
        ctx = _ctx(ds, "linear", IdentityCorrelation(ds.m))
        cov = covariance_estimates(ctx, np.zeros(ds.p))
        assert_allclose(cov.h_hat, ds.covariates[0].T @ ds.covariates[0], atol=1e-12)

    def test_sandwich_close_to_model_when_correlation_true(self):
        from geefit.simulation import GeneratorConfig, generate_dataset

        cfg = GeneratorConfig(
            n=500, m=3, p=2, beta0=np.array([1.0, -0.5]), link="linear",
            correlation="identity", seed=30,
        )
        ds = generate_dataset(cfg, 0)
        res = fit(ds, "linear", "indep")
        ratio = res.se_sandwich / res.se_model
        assert np.all(ratio > 0.8) and np.all(ratio < 1.25)

    def test_intervals_bracket_estimate(self):
        ds, _ = make_dataset(n=30, seed=17)
        res = fit(ds, "linear", "aqs")
        assert np.all(res.ci_model[:, 0] < res.beta) and np.all(res.beta < res.ci_model[:, 1])
        assert np.all(res.ci_sandwich[:, 0] < res.beta)

    def test_coverage_near_nominal(self):
        # 95% intervals for the adaptive fit should cover the truth at close
        # to the nominal rate.
        from geefit.simulation import GeneratorConfig, efficiency_comparison

        cfg = GeneratorConfig(
            n=400, m=3, p=2, beta0=np.array([1.0, -0.5]), link="linear",
            correlation="exchangeable", corr_param=0.5, seed=31,
        )
        summary = efficiency_comparison(cfg, methods=("aqs",), reps=1000, workers=2)
        coverage = summary.methods["aqs"].coverage
        assert np.all(coverage >= 0.92) and np.all(coverage <= 0.975)


class TestStructuralInvariants:
    def test_curvature_psd_lower_bound(self):
        # The curvature matrix dominates the independence information scaled
        # by the worst inverse-correlation eigenvalue floor.
        ds, cfg = make_dataset(n=10, m=3, link="logistic", seed=18)
        link = get_link("logistic")
        model = AdaptiveCorrelation(ds, link)
        beta = cfg.beta0
        jac = estimating_jacobian(_ctx(ds, "logistic", model), beta)
        q, _ = inverse_stack(model, ds.n, beta, want_info=False)
        c = float(np.linalg.eigvalsh(q)[:, 0].min())
        mu1 = link.dmu(ds.covariates @ beta)
        h_indep = np.einsum("nmp,nm,nmq->pq", ds.covariates, mu1, ds.covariates)
        lam_h = np.linalg.eigvalsh(jac.h)[0]
        lam_bound = c * np.linalg.eigvalsh(h_indep)[0]
        assert lam_h >= lam_bound - 1e-10

    def test_rescaling_covariates_rescales_solution(self):
        ds, _ = make_dataset(n=14, m=3, p=2, seed=19)
        s = np.array([2.0, 0.25])
        scaled = LongitudinalDataset(ds.covariates * s, ds.responses)
        for model_fn in (
            lambda d: IdentityCorrelation(d.m),
            lambda d: FixedCorrelation(structured_correlation("ar1", 0.3, d.m)),
        ):
            base = closed_form_linear(_ctx(ds, "linear", model_fn(ds)))
            res = closed_form_linear(_ctx(scaled, "linear", model_fn(scaled)))
            assert_allclose(res.beta, base.beta / s, atol=1e-10)


class TestFitApi:
    def test_method_tags(self):
        ds, cfg = make_dataset(n=14, seed=20)
        corr = structured_correlation("exchangeable", 0.3, ds.m)
        assert fit(ds, "linear", "indep").method == "indep"
        assert fit(ds, "linear", "gee", gee_correlation=corr).method == "gee"
        assert fit(ds, "linear", "ple").method == "ple"
        assert fit(ds, "linear", "aqs").method == "aqs"

    def test_gee_requires_matrix(self):
        ds, _ = make_dataset()
        with pytest.raises(ValueError, match="gee_correlation"):
            fit(ds, "linear", "gee")

    def test_unknown_method(self):
        ds, _ = make_dataset()
        with pytest.raises(ValueError, match="method"):
            fit(ds, "linear", "mystery")

    def test_solver_paths_agree(self):
        ds, _ = make_dataset(n=16, seed=22)
        closed = fit(ds, "linear", "ple", solver="closed_form")
        newton = fit(ds, "linear", "ple", solver="newton")
        assert np.max(np.abs(closed.beta - newton.beta)) < 1e-10

    def test_dataset_mismatch_rejected(self):
        ds1, cfg = make_dataset(seed=23)
        ds2, _ = make_dataset(seed=24)
        with pytest.raises(ValueError, match="different dataset"):
            EstimatingFunctionContext(
                dataset=ds1,
                link=get_link("linear"),
                model=AdaptiveCorrelation(ds2, get_link("linear")),
            )

    def test_ci_level_override(self):
        ds, _ = make_dataset(n=20, seed=25)
        wide = fit(ds, "linear", "indep", ci_level=0.99)
        narrow = fit(ds, "linear", "indep", ci_level=0.8)
        assert wide.ci_level == 0.99
        assert np.all(
            (wide.ci_model[:, 1] - wide.ci_model[:, 0])
            > (narrow.ci_model[:, 1] - narrow.ci_model[:, 0])
        )
