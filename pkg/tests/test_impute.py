"""Tests for the COM-Poisson count model and the multiple-imputation draw.

The regression log-likelihood is cross-checked against a brute-force
mpmath evaluation in ``oracles``; the sampler side is checked by Monte
Carlo self-consistency.
"""

import math

import numpy as np
import pytest

from oracles import com_poisson_glm_loglik
from recurmi.distributions import (
    ComPoissonParams,
    com_poisson_moments,
    com_poisson_sample,
)
from recurmi.errors import (
    ConvergenceError,
    DataError,
    DegenerateFitError,
    DomainError,
    NumericError,
    SingularError,
)
from recurmi.impute import (
    MAX_IMPUTED_COUNT,
    ComPoissonFit,
    ImputedCohort,
    draw_params,
    fit_com_poisson_glm,
    fit_imputation_model,
    multiple_impute,
    predict_scores,
)
from recurmi.simulate import Cohort, ScenarioConfig, Subject, generate_cohort


def make_subject(sid, x=(0.0, 0.0, 0.0), events=(), censor=1826.0, prior=0.0):
    return Subject(
        id=sid,
        x=tuple(float(v) for v in x),
        entry_time_days=0.0,
        prior_risk_days=float(prior),
        true_prior_count=0,
        observed_events=tuple(events),
        censor_time_days=float(censor),
        frailty=1.0,
    )


def make_cohort(subjects):
    cfg = ScenarioConfig(
        population=1, n=len(subjects), follow_up_days=1826,
        max_prior_days=3652, prop_prior=0.5, seed=0,
    )
    return Cohort(subjects=tuple(subjects), config=cfg, replicate_index=0)


def sim_cohort(n=400, prop_prior=0.5, seed=3, population=1):
    cfg = ScenarioConfig(
        population=population, n=n, follow_up_days=1826,
        max_prior_days=3652, prop_prior=prop_prior, seed=seed,
    )
    return generate_cohort(cfg, 0)


class TestComPoissonFitType:
    def test_rejects_asymmetric_covariance(self):
        cov = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(ValueError):
            ComPoissonFit(np.zeros(1), 0.0, cov, 0.0, True, 1)

    def test_rejects_wrong_shape(self):
        with pytest.raises(ValueError):
            ComPoissonFit(np.zeros(2), 0.0, np.eye(2), 0.0, True, 1)

    def test_params_stacks_gamma_and_log_nu(self):
        fit = ComPoissonFit(np.array([0.3, -0.1]), 0.25, np.eye(3), 0.0, True, 1)
        np.testing.assert_array_equal(fit.params, [0.3, -0.1, 0.25])


class TestFitComPoissonGlm:
    def test_poisson_reduction_intercept_only(self):
        # with nu fixed at 1 the MLE is the sample mean
        y = [0, 1, 2, 3]
        fit = fit_com_poisson_glm(y, np.ones((4, 1)), fix_nu=1.0)
        assert math.exp(fit.gamma[0]) == pytest.approx(1.5, abs=1e-8)
        mu = 1.5
        poisson_ll = sum(v * math.log(mu) - mu - math.lgamma(v + 1) for v in y)
        assert fit.loglik == pytest.approx(poisson_ll, abs=1e-10)

    def test_poisson_reduction_with_covariates(self):
        rng = np.random.default_rng(7)
        z = np.column_stack([np.ones(60), rng.integers(0, 2, 60)])
        y = rng.poisson(np.exp(0.2 + 0.5 * z[:, 1]))
        fit = fit_com_poisson_glm(y, z, fix_nu=1.0)
        mu = np.exp(z @ fit.gamma)
        poisson_ll = float(y @ np.log(mu) - mu.sum() - sum(math.lgamma(v + 1) for v in y))
        assert fit.loglik == pytest.approx(poisson_ll, abs=1e-10)
        # score equations of the Poisson GLM hold at the optimum
        np.testing.assert_allclose(z.T @ (y - mu), 0.0, atol=1e-6)

    def test_constant_counts_with_unit_dispersion(self):
        fit = fit_com_poisson_glm([3, 3, 3, 3, 3], np.ones((5, 1)), fix_nu=1.0)
        assert math.exp(fit.gamma[0]) == pytest.approx(3.0, abs=1e-8)

    def test_loglik_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        z = np.column_stack([np.ones(30), rng.integers(0, 2, 30)])
        y = rng.poisson(1.8, 30)
        fit = fit_com_poisson_glm(y, z)
        oracle = com_poisson_glm_loglik(y, z, fit.gamma, math.exp(fit.log_nu))
        assert fit.loglik == pytest.approx(oracle, abs=1e-8)

    def test_optimum_beats_nearby_points(self):
        rng = np.random.default_rng(11)
        z = np.column_stack([np.ones(40), rng.integers(0, 2, 40)])
        y = rng.poisson(1.5, 40)
        fit = fit_com_poisson_glm(y, z)
        nu_hat = math.exp(fit.log_nu)
        best = com_poisson_glm_loglik(y, z, fit.gamma, nu_hat)
        for j in range(2):
            for sign in (-1.0, 1.0):
                g = fit.gamma.copy()
                g[j] += sign * 1e-3
                assert com_poisson_glm_loglik(y, z, g, nu_hat) < best
        for sign in (-1.0, 1.0):
            nu = math.exp(fit.log_nu + sign * 1e-3)
            assert com_poisson_glm_loglik(y, z, fit.gamma, nu) < best

    def test_monte_carlo_self_consistency(self):
        # lam = 2, nu = 1.5: estimates land within 3 standard errors
        rng = np.random.default_rng(0)
        p = ComPoissonParams(2.0, 1.5)
        y = [com_poisson_sample(p, rng) for _ in range(5000)]
        fit = fit_com_poisson_glm(y, np.ones((5000, 1)))
        se = np.sqrt(np.diag(fit.covariance))
        assert abs(fit.gamma[0] - math.log(2.0)) < 3 * se[0]
        assert abs(fit.log_nu - math.log(1.5)) < 3 * se[1]

    def test_offset_shifts_intercept(self):
        y = [0, 1, 2, 3]
        plain = fit_com_poisson_glm(y, np.ones((4, 1)), fix_nu=1.0)
        shifted = fit_com_poisson_glm(
            y, np.ones((4, 1)), offset=np.full(4, 0.7), fix_nu=1.0
        )
        assert shifted.gamma[0] == pytest.approx(plain.gamma[0] - 0.7, abs=1e-8)

    def test_all_zero_counts(self):
        with pytest.raises(DegenerateFitError):
            fit_com_poisson_glm([0, 0, 0], np.ones((3, 1)))

    def test_rank_deficient_design(self):
        z = np.column_stack([np.ones(4), np.ones(4)])
        with pytest.raises(SingularError):
            fit_com_poisson_glm([0, 1, 2, 3], z)

    def test_invalid_counts(self):
        with pytest.raises(DataError):
            fit_com_poisson_glm([0, -1, 2], np.ones((3, 1)))
        with pytest.raises(DataError):
            fit_com_poisson_glm([0.5, 1.0, 2.0], np.ones((3, 1)))
        with pytest.raises(DataError):
            fit_com_poisson_glm([0, 1], np.ones((3, 1)))

    def test_iteration_budget_carries_last_iterate(self):
        with pytest.raises(ConvergenceError) as exc:
            fit_com_poisson_glm(
                [0, 1, 2, 3], np.ones((4, 1)), start=(5.0, 2.0), max_iter=1
            )
        assert exc.value.last_params is not None
        assert exc.value.grad_norm > 0


class TestDrawParams:
    def fit_with_cov(self, cov, gamma=(0.0,), log_nu=0.0):
        cov = np.asarray(cov, dtype=float)
        return ComPoissonFit(np.asarray(gamma, float), log_nu, cov, 0.0, True, 1)

    def test_zero_covariance_returns_estimate(self):
        fit = self.fit_with_cov(np.zeros((2, 2)), gamma=(0.37,), log_nu=-0.2)
        draw = draw_params(fit, np.random.default_rng(0))
        np.testing.assert_array_equal(draw, fit.params)

    def test_marginal_sd_and_mean(self):
        fit = self.fit_with_cov(np.diag([0.04, 0.0]))
        rng = np.random.default_rng(1)
        draws = np.array([draw_params(fit, rng)[0] for _ in range(30_000)])
        assert draws.std() == pytest.approx(0.2, rel=0.01)
        assert abs(draws.mean()) < 3 * 0.2 / math.sqrt(30_000)

    def test_correlation_matches_covariance(self):
        cov = np.array([[1.0, 0.6, 0.0], [0.6, 1.0, 0.0], [0.0, 0.0, 0.0]])
        fit = self.fit_with_cov(cov, gamma=(0.0, 0.0))
        rng = np.random.default_rng(2)
        draws = np.array([draw_params(fit, rng)[:2] for _ in range(20_000)])
        corr = np.corrcoef(draws.T)[0, 1]
        assert corr == pytest.approx(0.6, abs=0.02)

    def test_rejects_indefinite_covariance(self):
        fit = self.fit_with_cov([[-1e-3, 0.0], [0.0, 0.0]])
        with pytest.raises(NumericError):
            draw_params(fit, np.random.default_rng(0))

    def test_rejects_unconverged_fit(self):
        fit = ComPoissonFit(np.zeros(1), 0.0, np.zeros((2, 2)), 0.0, False, 1)
        with pytest.raises(DomainError):
            draw_params(fit, np.random.default_rng(0))


class TestPredictScores:
    def test_intercept_only(self):
        s = make_subject(1, prior=250.0)
        p = predict_scores([math.log(2.0), 0, 0, 0, 0, 0, 0.0], s)
        assert p.lam == pytest.approx(2.0, abs=1e-12)
        assert p.nu == pytest.approx(1.0, abs=1e-12)

    def test_unit_window_coefficient(self):
        s = make_subject(1, prior=math.e)
        p = predict_scores([0, 0, 0, 0, 0, 1.0, 0.0], s)
        assert p.lam == pytest.approx(math.e, rel=1e-12)

    def test_doubling_prior_time_doubles_lam(self):
        params = [-6.0, 0.1, 0.2, 0.3, 0.4, 1.0, 0.0]
        s1 = make_subject(1, x=(1, 0, 1), prior=500.0)
        s2 = make_subject(2, x=(1, 0, 1), prior=1000.0)
        r = predict_scores(params, s2).lam / predict_scores(params, s1).lam
        assert r == pytest.approx(2.0, rel=1e-12)

    def test_early_events_raise_lam(self):
        # unit adjacent-count coefficient: lam scales with 1 + early count
        params = [0.0, 0, 0, 0, 1.0, 0.0, 0.0]
        quiet = make_subject(1, prior=100.0)
        busy = make_subject(2, events=(10.0, 20.0, 30.0), prior=100.0)
        assert predict_scores(params, quiet).lam == pytest.approx(1.0, rel=1e-12)
        assert predict_scores(params, busy).lam == pytest.approx(4.0, rel=1e-12)

    def test_only_first_half_events_count(self):
        params = [0.0, 0, 0, 0, 1.0, 0.0, 0.0]
        # one event either side of the half-way point of follow-up
        s = make_subject(1, events=(900.0, 1000.0), censor=1826.0, prior=100.0)
        assert predict_scores(params, s).lam == pytest.approx(2.0, rel=1e-12)

    def test_no_prior_time_is_out_of_domain(self):
        with pytest.raises(DomainError):
            predict_scores([0, 0, 0, 0, 0, 1.0, 0.0], make_subject(1, prior=0.0))

    def test_wrong_length(self):
        with pytest.raises(DataError):
            predict_scores([0.0, 0.0], make_subject(1, prior=10.0))


class TestFitImputationModel:
    def test_constant_window_pins_coefficient(self):
        fit = fit_imputation_model(sim_cohort())
        assert fit.gamma.shape == (6,)
        assert fit.gamma[5] > 0
        assert fit.covariance.shape == (7, 7)
        # pinned slot carries no uncertainty; the adjacent-count slope and
        # the dispersion stay estimated
        np.testing.assert_array_equal(fit.covariance[5], 0.0)
        np.testing.assert_array_equal(fit.covariance[:, 5], 0.0)
        assert fit.covariance[4, 4] > 0
        assert fit.covariance[6, 6] > 0

    def test_prediction_grows_with_window_and_history(self):
        cohort = sim_cohort(n=600, population=3)
        fit = fit_imputation_model(cohort)
        short = make_subject(1, prior=365.0)
        long = make_subject(2, prior=3650.0)
        busy = make_subject(3, events=(100.0, 200.0, 300.0, 400.0), prior=365.0)
        lam = {s.id: predict_scores(fit.params, s).lam for s in (short, long, busy)}
        assert 0 < lam[1] < lam[2]
        assert lam[1] < lam[3]

    def test_adjacent_count_slope_is_positive(self):
        # episode dependence makes the two half-window counts co-vary
        fit = fit_imputation_model(sim_cohort(n=800, population=3))
        assert fit.gamma[4] > 0

    def test_varying_window_estimates_coefficient(self):
        rng = np.random.default_rng(9)
        subs = []
        for i in range(300):
            exposure = float(rng.uniform(400.0, 2000.0))
            half = 0.5 * exposure
            x = tuple(float(v) for v in rng.integers(0, 2, 3))
            # first-half count scales with the window; second-half count is
            # independent of it, so the window coefficient is identified
            early = rng.uniform(0.0, half, int(rng.poisson(half / 300.0)))
            late = rng.uniform(half, exposure, int(rng.poisson(2.0)))
            events = tuple(sorted(np.concatenate([early, late])))
            subs.append(make_subject(i, x=x, events=events, censor=exposure))
        fit = fit_imputation_model(make_cohort(subs))
        assert fit.covariance[5, 5] > 0
        assert fit.gamma[5] == pytest.approx(1.0, abs=0.35)

    def test_all_zero_counts_degenerate(self):
        subs = [make_subject(i, prior=100.0) for i in range(20)]
        with pytest.raises(DegenerateFitError):
            fit_imputation_model(make_cohort(subs))


class TestMultipleImpute:
    def test_no_prior_subjects_all_zero(self):
        cohort = sim_cohort(n=50, prop_prior=0.0)
        imps = multiple_impute(cohort, 4, 123)
        assert [im.imputation_index for im in imps] == [1, 2, 3, 4]
        for im in imps:
            assert all(v == 0 for v in im.imputed_prior.values())

    def test_returns_m_indexed_cohorts(self):
        imps = multiple_impute(sim_cohort(n=200), 5, 11)
        assert [im.imputation_index for im in imps] == [1, 2, 3, 4, 5]
        for im in imps:
            assert set(im.imputed_prior) == {s.id for s in im.base.subjects}

    def test_deterministic_in_seed_and_index(self):
        cohort = sim_cohort(n=200)
        a = multiple_impute(cohort, 3, 42)
        b = multiple_impute(cohort, 3, 42)
        c = multiple_impute(cohort, 3, 43)
        assert all(x.imputed_prior == y.imputed_prior for x, y in zip(a, b))
        assert any(x.imputed_prior != y.imputed_prior for x, y in zip(a, c))

    def test_counts_are_bounded_integers_respecting_subpopulation(self):
        cohort = sim_cohort(n=300)
        for im in multiple_impute(cohort, 3, 5):
            for s in cohort.subjects:
                v = im.imputed_prior[s.id]
                assert isinstance(v, int) and 0 <= v <= MAX_IMPUTED_COUNT
                if s.prior_risk_days == 0:
                    assert v == 0

    def test_between_imputation_variability(self):
        cohort = sim_cohort(n=300)
        imps = multiple_impute(cohort, 50, 7)
        prior_ids = [s.id for s in cohort.subjects if s.prior_risk_days > 0]
        draws = np.array([[im.imputed_prior[i] for i in prior_ids] for im in imps])
        assert draws.std(axis=0).max() > 0
        assert len({tuple(row) for row in draws}) > 1

    def test_imputations_track_hidden_truth(self):
        # the adjacent-count predictor must carry subject-level signal:
        # capped imputations correlate with the hidden counts and match
        # their capped mean, not just the marginal count distribution
        cohort = sim_cohort(n=800, population=3, seed=7)
        pri = [s for s in cohort.subjects if s.prior_risk_days > 0]
        truth = np.minimum([s.true_prior_count for s in pri], 5)
        for im in multiple_impute(cohort, 3, 7):
            drawn = np.minimum([im.imputed_prior[s.id] for s in pri], 5)
            assert np.corrcoef(drawn, truth)[0, 1] > 0.4
            assert abs(drawn.mean() - truth.mean()) < 0.25 * truth.mean()

    def test_longer_prior_time_gives_larger_counts(self):
        cohort = sim_cohort(n=10_000, seed=42)
        im = multiple_impute(cohort, 1, 42)[0]
        pri = [s for s in cohort.subjects if s.prior_risk_days > 0]
        hi = [im.imputed_prior[s.id] for s in pri if s.prior_risk_days > 3000]
        lo = [im.imputed_prior[s.id] for s in pri if s.prior_risk_days < 600]
        assert len(hi) > 100 and len(lo) > 100
        assert np.mean(hi) > np.mean(lo)

    def test_extreme_draws_hit_the_cap(self, monkeypatch):
        cohort = sim_cohort(n=100)
        huge = np.array([5.0, 0, 0, 0, 0, 1.0, 0.0])  # rate far beyond the cap
        monkeypatch.setattr("recurmi.impute.draw_params", lambda fit, rng: huge)
        im = multiple_impute(cohort, 1, 9)[0]
        n_prior = sum(1 for s in cohort.subjects if s.prior_risk_days > 0)
        assert im.cap_hits == n_prior
        assert all(
            im.imputed_prior[s.id] == MAX_IMPUTED_COUNT
            for s in cohort.subjects if s.prior_risk_days > 0
        )

    def test_invalid_m(self):
        with pytest.raises(DomainError):
            multiple_impute(sim_cohort(n=50), 0, 1)

    def test_imputed_cohort_invariant_enforced(self):
        cohort = sim_cohort(n=20, prop_prior=0.0)
        bad = {s.id: 0 for s in cohort.subjects}
        bad[cohort.subjects[0].id] = 2  # not previously at risk
        with pytest.raises(ValueError):
            ImputedCohort(cohort, bad, 1)
