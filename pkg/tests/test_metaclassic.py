"""Tests for classical pooling and the odds-ratio / rate-ratio algebra.

The pooling values marked "frozen" were computed by an independent
inverse-variance implementation (moment and restricted-likelihood tau^2)
from the bundled dataset's four SE-reporting studies.
"""

import math

import numpy as np
import pytest

from countsynth.evidence import (
    ArmRecord,
    SubsetLabel,
    TreatmentClass,
    classify_subset,
    load_reference_dataset,
)
from countsynth.metaclassic import (
    EffectEstimate,
    dl_pool,
    nb_odds_ratio,
    poisson_odds_ratio,
    rate_ratio_estimate,
    reml_pool,
)


def subset_a_estimates():
    estimates = []
    for study in load_reference_dataset():
        if SubsetLabel.A not in classify_subset(study):
            continue
        placebo = study.placebo_arm
        for active in study.active_arms:
            estimates.append(
                rate_ratio_estimate(placebo, active, study_id=study.study_id)
            )
    return estimates


class TestRateRatioEstimate:
    def test_identical_arms(self):
        arm = ArmRecord(TreatmentClass.PLACEBO, 100, rate_est=1.2, std_err=0.1)
        active = ArmRecord(TreatmentClass.ACTIVE, 100, rate_est=1.2, std_err=0.1)
        est = rate_ratio_estimate(arm, active)
        assert est.log_effect == 0.0

    def test_reference_row(self):
        # Tashkin (2008): rates 0.73 vs 0.85, both SEs 0.02.  The exact
        # delta-method evaluation is frozen; the rounded textbook value
        # is ~0.036.
        studies = load_reference_dataset()
        tashkin = next(s for s in studies if s.study_id == "Tashkin (2008)")
        est = rate_ratio_estimate(tashkin.placebo_arm, tashkin.active_arms[0])
        assert est.log_effect == pytest.approx(-0.15219181534192538, abs=1e-12)
        assert est.log_effect == pytest.approx(math.log(0.73 / 0.85), abs=1e-12)
        assert est.std_err == pytest.approx(0.0361143058705671, abs=1e-12)
        assert est.std_err == pytest.approx(0.036, abs=5e-4)

    def test_scale_invariance(self):
        placebo = ArmRecord(TreatmentClass.PLACEBO, 50, rate_est=0.8, std_err=0.05)
        active = ArmRecord(TreatmentClass.ACTIVE, 50, rate_est=0.6, std_err=0.04)
        doubled_p = ArmRecord(TreatmentClass.PLACEBO, 50, rate_est=1.6, std_err=0.10)
        doubled_a = ArmRecord(TreatmentClass.ACTIVE, 50, rate_est=1.2, std_err=0.08)
        one = rate_ratio_estimate(placebo, active)
        two = rate_ratio_estimate(doubled_p, doubled_a)
        assert one.log_effect == pytest.approx(two.log_effect, abs=1e-12)
        assert one.std_err == pytest.approx(two.std_err, abs=1e-12)

    def test_missing_se_rejected(self):
        placebo = ArmRecord(TreatmentClass.PLACEBO, 50, rate_est=0.8, std_err=0.05)
        bare = ArmRecord(TreatmentClass.ACTIVE, 50, rate_est=0.6)
        with pytest.raises(ValueError):
            rate_ratio_estimate(placebo, bare)


class TestPooling:
    def test_subset_a_inputs_frozen(self):
        estimates = sorted(subset_a_estimates(), key=lambda e: e.study_id)
        y = [e.log_effect for e in estimates]
        se = [e.std_err for e in estimates]
        np.testing.assert_allclose(
            y,
            [-0.23180161405732444, -0.7702585383007045,
             -0.7431576011346067, -0.15219181534192538],
            atol=1e-12,
        )
        np.testing.assert_allclose(
            se,
            [0.10023363822127465, 0.27630128868260206,
             0.29435078198399706, 0.0361143058705671],
            atol=1e-12,
        )

    def test_single_study(self):
        est = EffectEstimate(log_effect=-0.3, std_err=0.1)
        pooled = dl_pool([est])
        assert pooled.pooled_log_effect == pytest.approx(-0.3, abs=1e-12)
        assert pooled.std_err == pytest.approx(0.1, abs=1e-12)
        assert pooled.tau_sq == 0.0

    def test_identical_estimates(self):
        est = EffectEstimate(log_effect=-0.3, std_err=0.1)
        pooled = dl_pool([est] * 4)
        assert pooled.pooled_log_effect == pytest.approx(-0.3, abs=1e-12)
        assert pooled.std_err == pytest.approx(0.05, abs=1e-12)
        assert pooled.tau_sq == 0.0

    def test_dl_reference_frozen(self):
        pooled = dl_pool(subset_a_estimates())
        assert pooled.tau_sq == pytest.approx(0.02768890870862039, rel=1e-9)
        assert pooled.effect == pytest.approx(0.7270268388499317, rel=1e-9)
        assert pooled.ci95[0] == pytest.approx(0.5834373651438179, rel=1e-9)
        assert pooled.ci95[1] == pytest.approx(0.9059550450249821, rel=1e-9)

    def test_reml_reference_frozen(self):
        pooled = reml_pool(subset_a_estimates())
        assert pooled.tau_sq == pytest.approx(0.058197343918734754, rel=1e-6)
        assert pooled.effect == pytest.approx(0.6927619110826644, rel=1e-8)
        assert pooled.ci95[0] == pytest.approx(0.5185643106006558, rel=1e-8)
        assert pooled.ci95[1] == pytest.approx(0.9254764657656689, rel=1e-8)

    def test_reml_matches_published_comparator(self):
        pooled = reml_pool(subset_a_estimates())
        assert pooled.effect == pytest.approx(0.69, abs=0.02)
        assert pooled.ci95[0] == pytest.approx(0.52, abs=0.02)
        assert pooled.ci95[1] == pytest.approx(0.93, abs=0.02)

    def test_pooled_within_input_range(self):
        estimates = subset_a_estimates()
        values = [e.log_effect for e in estimates]
        for pool in (dl_pool, reml_pool):
            result = pool(estimates)
            assert min(values) <= result.pooled_log_effect <= max(values)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dl_pool([])


class TestPoissonOddsRatio:
    def test_neutral_effect(self):
        assert poisson_odds_ratio(1.0, 0.9, 1.0) == 1.0

    def test_small_exposure_limit(self):
        value = poisson_odds_ratio(0.7, 1e-8, 1.0)
        assert value == pytest.approx(0.7, rel=1e-6)

    def test_direct_evaluation(self):
        value = poisson_odds_ratio(0.5, 1.0, 1.0)
        assert value == pytest.approx(0.3775406687981455, rel=1e-12)

    def test_monte_carlo_oracle(self):
        theta, lam, duration = 0.5, 1.0, 1.0
        rng = np.random.default_rng(314159)
        n = 10**6
        p0_placebo = float(np.mean(rng.poisson(lam * duration, n) == 0))
        p0_active = float(np.mean(rng.poisson(theta * lam * duration, n) == 0))
        odds = lambda p: (1.0 - p) / p
        mc = odds(p0_active) / odds(p0_placebo)
        # Delta-method SE of the log odds ratio from two binomial proportions.
        se_log = math.sqrt(
            1.0 / (n * p0_placebo * (1 - p0_placebo))
            + 1.0 / (n * p0_active * (1 - p0_active))
        )
        expected = poisson_odds_ratio(theta, lam, duration)
        assert abs(math.log(mc) - math.log(expected)) < 3 * se_log


class TestNbOddsRatio:
    def test_phi_one_identity(self):
        for theta in (0.5, 0.73, 1.0, 1.4):
            for m in (0.1, 0.9, 2.0, 7.0):
                assert nb_odds_ratio(theta, m, 1.0, 1.0) == theta
                # The exact branch agrees with the general formula nearby.
                for phi in (1.0 - 1e-9, 1.0 + 1e-9):
                    assert nb_odds_ratio(theta, m, 1.0, phi) == pytest.approx(
                        theta, rel=1e-8
                    )

    def test_small_exposure_limit(self):
        assert nb_odds_ratio(0.73, 1e-8, 1.0, 0.5) == pytest.approx(0.73, rel=1e-6)

    def test_phi_zero_delegates(self):
        assert nb_odds_ratio(0.6, 0.8, 1.0, 0.0) == poisson_odds_ratio(0.6, 0.8, 1.0)

    @pytest.mark.parametrize("theta", [0.5, 0.8])
    @pytest.mark.parametrize("m", [0.5, 1.0, 2.0])
    def test_ordering(self, theta, m):
        below = nb_odds_ratio(theta, m, 1.0, 0.25)
        at = nb_odds_ratio(theta, m, 1.0, 1.0)
        above = nb_odds_ratio(theta, m, 1.0, 2.0)
        assert below < theta
        assert at == pytest.approx(theta, rel=1e-14)
        assert above > theta

    @pytest.mark.parametrize("theta", [0.5, 0.8, 1.3])
    @pytest.mark.parametrize("m", [0.5, 1.0, 2.0])
    def test_continuity_at_phi_zero(self, theta, m):
        near = nb_odds_ratio(theta, m, 1.0, 1e-10)
        exact = poisson_odds_ratio(theta, m, 1.0)
        assert abs(near - exact) < 1e-6

    def test_monte_carlo_oracle(self):
        theta, lam, duration, phi = 0.73, 0.9, 1.0, 0.5
        rng = np.random.default_rng(271828)
        n = 10**6

        def sim_p0(rate):
            m = rate * duration
            shape = 1.0 / phi
            mix = rng.gamma(shape, phi, size=n)
            return float(np.mean(rng.poisson(m * mix) == 0))

        p0_placebo = sim_p0(lam)
        p0_active = sim_p0(theta * lam)
        odds = lambda p: (1.0 - p) / p
        mc = odds(p0_active) / odds(p0_placebo)
        se_log = math.sqrt(
            1.0 / (n * p0_placebo * (1 - p0_placebo))
            + 1.0 / (n * p0_active * (1 - p0_active))
        )
        expected = nb_odds_ratio(theta, lam, duration, phi)
        assert abs(math.log(mc) - math.log(expected)) < 3 * se_log
        assert expected < theta  # phi < 1 ordering

    def test_negative_phi_rejected(self):
        with pytest.raises(ValueError):
            nb_odds_ratio(0.7, 1.0, 1.0, -0.5)
