"""
Tests for heralded PNRD calibration: amplitude peaks, per-peak efficiencies
and their consistency test.
"""

import numpy as np
import pytest
from scipy import stats

from photocal.core.exceptions import (
    InvalidTallyError,
    PeakUnusableError,
    UnderdeterminedError,
)
from photocal.core.models import EfficiencyEstimate, UncertainValue
from photocal.core.pnrd_cal import (
    PeakModel,
    PeakTally,
    bin_counts,
    calibrate_from_counts,
    calibrate_pnrd,
    combine_and_test,
    estimate_eta_i,
    fit_gaussian_mixture,
    heralding_purity,
    misclassification_mass,
    place_thresholds,
)
from photocal.core.source_sim import simulate_heralded_pnrd_run, synthesize_amplitude_traces
from photocal.schemas.experiment import DetectorSpec, PnrdConfig

GAP = 0.945
SIGMA = 0.4 / 2.35482


def contribution(estimate: EfficiencyEstimate, name: str) -> float:
    return next(c.contribution for c in estimate.contributions if c.name == name)


class TestPublishedTallies:
    """Per-peak efficiencies from published peak counts."""

    def test_per_peak_values(self, reference_peak_counts):
        xi = UncertainValue(reference_peak_counts["xi"])
        expected = [0.0070767, 0.0070784, 0.006532]
        for i, value in enumerate(expected):
            estimate = estimate_eta_i(reference_peak_counts["C"], reference_peak_counts["C_bar"], xi, i)
            assert estimate.value == pytest.approx(value, rel=2e-3)
            assert estimate.label == f"eta_{i}"

    def test_zero_peak_contributions(self, reference_peak_counts):
        herald = PeakTally(np.array(reference_peak_counts["C"]), np.array([1.4e4, 200.0, 6.0]))
        background = PeakTally(np.array(reference_peak_counts["C_bar"]), np.array([1.4e4, 150.0, 1.5]))
        estimate = estimate_eta_i(herald, background, UncertainValue(reference_peak_counts["xi"], 7e-5), 0)
        assert contribution(estimate, "C(0)") == pytest.approx(-2.73e-5, rel=0.02)
        assert contribution(estimate, "C(1)") == pytest.approx(3.9e-5, rel=0.02)
        assert contribution(estimate, "C_bar(0)") == pytest.approx(7.9e-6, rel=0.03)
        assert contribution(estimate, "C_bar(1)") == pytest.approx(-2.95e-5, rel=0.02)
        assert contribution(estimate, "xi") == pytest.approx(-5.0e-7, rel=0.02)
        total = np.sqrt(sum(c.contribution ** 2 for c in estimate.contributions))
        assert estimate.std_uncertainty == pytest.approx(total)

    def test_counting_uncertainties_by_default(self, reference_peak_counts):
        estimate = estimate_eta_i(reference_peak_counts["C"], reference_peak_counts["C_bar"],
                                  UncertainValue(reference_peak_counts["xi"]), 0)
        assert estimate.std_uncertainty == pytest.approx(5.0e-5, rel=0.05)

    def test_sparse_peak_is_skipped(self, reference_peak_counts):
        C = reference_peak_counts["C"][:2] + [18.0]
        result = calibrate_pnrd(C, reference_peak_counts["C_bar"], UncertainValue(reference_peak_counts["xi"]))
        assert result.peaks == [0, 1]
        assert result.degrees_of_freedom == 1

    def test_all_peaks_used(self, reference_peak_counts):
        result = calibrate_pnrd(reference_peak_counts["C"], reference_peak_counts["C_bar"],
                                UncertainValue(reference_peak_counts["xi"], 7e-5))
        assert result.peaks == [0, 1, 2]
        assert result.combined.value == pytest.approx(0.00708, abs=5e-5)
        assert set(result.to_dict()) >= {"eta_i", "combined", "chi_square", "p_value", "xi"}


class TestCombination:
    """Inverse-variance mean and chi-square test."""

    @staticmethod
    def estimates(*pairs):
        return [EfficiencyEstimate(value=v, std_uncertainty=u) for v, u in pairs]

    def test_consistent_values(self):
        result = combine_and_test(self.estimates((0.709, 0.003), (0.709, 0.003), (0.65, 0.05)))
        assert result.combined.value == pytest.approx(0.708894, abs=1e-6)
        assert result.combined.std_uncertainty == pytest.approx(0.0021194, rel=1e-4)
        assert result.chi_square == pytest.approx(1.39, abs=0.01)
        assert result.degrees_of_freedom == 2
        assert result.consistent

    def test_biased_value_is_flagged(self, caplog):
        result = combine_and_test(self.estimates((0.709, 0.003), (0.709, 0.003), (0.90, 0.05)))
        assert result.chi_square == pytest.approx(14.57, abs=0.05)
        assert result.p_value == pytest.approx(stats.chi2.sf(result.chi_square, 2))
        assert result.p_value < 1e-3
        assert not result.consistent
        assert "inconsistent" in caplog.text

    def test_single_estimate(self):
        result = combine_and_test(self.estimates((0.5, 0.01)))
        assert result.degrees_of_freedom == 0
        assert result.p_value == 1.0

    def test_nothing_to_combine(self):
        with pytest.raises(PeakUnusableError):
            combine_and_test([])


class TestHeraldingPurity:
    """Trigger purity from PDC on/off counts."""

    def test_published_runs(self):
        xi = heralding_purity(2_420_000, 29_209)
        assert xi.value == pytest.approx(0.98793, abs=1e-5)
        assert xi.std_uncertainty == pytest.approx(7.02e-5, rel=0.01)

    @pytest.mark.parametrize("n_p, n_a", [(0, 0), (10, 11), (10, -1)])
    def test_invalid_counts(self, n_p, n_a):
        with pytest.raises(InvalidTallyError):
            heralding_purity(n_p, n_a)


class TestInvalidTallies:
    """Rejected inputs."""

    def test_empty_or_zero_tally(self):
        with pytest.raises(InvalidTallyError):
            PeakTally(np.zeros(3))
        with pytest.raises(InvalidTallyError):
            PeakTally(np.array([]))

    def test_mismatched_uncertainties(self):
        with pytest.raises(InvalidTallyError):
            PeakTally(np.array([10.0, 5.0]), np.array([1.0]))

    def test_invalid_purity(self, reference_peak_counts):
        with pytest.raises(InvalidTallyError):
            estimate_eta_i(reference_peak_counts["C"], reference_peak_counts["C_bar"], 0.0, 0)

    def test_peak_outside_tally(self, reference_peak_counts):
        with pytest.raises(PeakUnusableError):
            estimate_eta_i(reference_peak_counts["C"], reference_peak_counts["C_bar"], 0.98, 3)

    def test_non_decreasing_background(self):
        with pytest.raises(PeakUnusableError):
            estimate_eta_i([100.0, 50.0], [40.0, 60.0], 0.98, 1)


class TestAmplitudePeaks:
    """Mixture fit, thresholds and binning."""

    def test_fit_recovers_peaks(self):
        counts = [20_000, 12_000, 6_000, 2_000]
        amplitudes = synthesize_amplitude_traces(counts, GAP, 0.4, seed=4)
        model = fit_gaussian_mixture(amplitudes, 4)
        assert np.allclose(model.means, GAP * np.arange(4), atol=0.03)
        assert np.allclose(model.sigmas, SIGMA, rtol=0.1)
        assert np.allclose(model.weights, counts, rtol=0.05)

    def test_binned_counts_follow_peaks(self):
        counts = [20_000, 12_000, 6_000, 2_000]
        amplitudes = synthesize_amplitude_traces(counts, GAP, 0.4, seed=4)
        model = fit_gaussian_mixture(amplitudes, 4)
        binned = bin_counts(amplitudes, place_thresholds(model))
        assert binned.sum() == sum(counts)
        assert np.allclose(binned, counts, rtol=0.03)

    def test_symmetric_thresholds_and_misclassification(self):
        model = PeakModel(GAP * np.arange(3), np.full(3, SIGMA), np.ones(3))
        thresholds = place_thresholds(model)
        assert thresholds == pytest.approx([GAP / 2, 1.5 * GAP], abs=1e-3)
        tail = stats.norm.sf(GAP / 2 / SIGMA)
        mass = misclassification_mass(model, [GAP / 2, 1.5 * GAP])
        assert mass == pytest.approx([tail, 2 * tail, tail], rel=1e-9)
        assert tail == pytest.approx(2.7e-3, rel=0.05)

    def test_bins_are_right_closed(self):
        assert bin_counts([0.5, 1.0, 1.5], [1.0]).tolist() == [2, 1]

    def test_too_few_samples(self):
        with pytest.raises(UnderdeterminedError):
            fit_gaussian_mixture(np.zeros(100), 4)

    def test_single_peak_has_no_thresholds(self):
        with pytest.raises(ValueError):
            place_thresholds(PeakModel(np.array([0.0]), np.array([0.1]), np.array([1.0])))


class TestMonteCarlo:
    """Calibration of simulated runs."""

    def test_peaks_agree(self):
        config = PnrdConfig(
            pulses=2_000_000,
            true_herald_probability=0.05,
            trigger_dark_probability=0.001,
            tau_dut=0.5,
            background_mean_photons=0.01,
            unheralded_slots=1_000_000,
            dut=DetectorSpec(kind="linear", eta=0.8, n_outcomes=4, truncation=8),
            seed=17,
        )
        result = calibrate_from_counts(simulate_heralded_pnrd_run(config).counts)
        eta_0, eta_1 = result.eta_i[:2]
        spread = np.hypot(eta_0.std_uncertainty, eta_1.std_uncertainty)
        assert abs(eta_0.value - eta_1.value) < 3 * spread
        assert result.xi.value == pytest.approx(1 - 0.001 / 0.051, abs=2e-3)
