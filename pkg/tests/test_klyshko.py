"""
Tests for the two-photon efficiency estimators and their uncertainty budgets.
"""

import numpy as np
import pytest

from photocal.core.exceptions import DataSchemaError, DegenerateRunError, UnderdeterminedError
from photocal.core.klyshko import (
    COVERAGE_FACTOR,
    INPUT_NAMES,
    budget_table,
    efficiency_model,
    estimate_eta_dut,
    estimate_eta_measured,
    estimate_eta_plain,
    ideal_klyshko_efficiency,
    poisson_budget,
    sensitivity_coefficients,
    uncertainty_budget,
)
from photocal.core.models import KlyshkoCountRecord
from photocal.core.source_sim import simulate_klyshko_records
from photocal.schemas.experiment import KlyshkoConfig

POINT = dict(m_c=1000.0, A=20.0, m_vs_in=2000.0, m_vs_out=2000.0, m_B=0.0, tau=1.0)


def record(**overrides) -> KlyshkoCountRecord:
    fields = dict(m_c=1000, m_vs_in=2000, m_vs_out=2100, m_B=50, A=20)
    fields.update(overrides)
    return KlyshkoCountRecord(**fields)


class TestEfficiencyModel:
    """Closed-form estimator."""

    def test_known_value(self):
        assert efficiency_model(**POINT) == pytest.approx(0.49)

    def test_ideal_ratio(self):
        assert ideal_klyshko_efficiency(500, 1000) == pytest.approx(0.5)
        with pytest.raises(DegenerateRunError):
            ideal_klyshko_efficiency(10, 0)

    def test_transmittance_scales_result(self):
        assert efficiency_model(**{**POINT, "tau": 0.5}) == pytest.approx(0.98)

    @pytest.mark.parametrize("overrides", [
        {"m_vs_out": 0.0},
        {"m_B": 2000.0},
        {"m_B": 2500.0},
        {"tau": 0.0},
    ])
    def test_degenerate_inputs(self, overrides):
        with pytest.raises(DegenerateRunError):
            efficiency_model(**{**POINT, **overrides})

    def test_sensitivities_match_finite_differences(self):
        point = dict(m_c=1000.0, A=20.0, m_vs_in=2000.0, m_vs_out=2100.0, m_B=50.0, tau=0.8)
        coefficients = sensitivity_coefficients(**point)
        assert set(coefficients) == set(INPUT_NAMES)
        for name in INPUT_NAMES:
            h = 1e-6 * point[name]
            up = efficiency_model(**{**point, name: point[name] + h})
            down = efficiency_model(**{**point, name: point[name] - h})
            assert coefficients[name] == pytest.approx((up - down) / (2 * h), rel=1e-6)


class TestEstimators:
    """Estimates from count records."""

    def test_measured_uses_record_means(self):
        records = [record(), record(m_c=1100, m_vs_in=2200)]
        expected = efficiency_model(1050, 20, 2100, 2100, 50)
        assert estimate_eta_measured(records) == pytest.approx(expected)

    def test_plain_estimator_skips_mismatch_correction(self):
        r = record()
        assert estimate_eta_plain([r]) == pytest.approx((1000 - 20) / (2000 - 50))

    def test_no_records(self):
        with pytest.raises(DegenerateRunError):
            estimate_eta_measured([])

    def test_budget_needs_repeats(self):
        with pytest.raises(UnderdeterminedError):
            uncertainty_budget([record()], tau=1.0)

    def test_single_record_uses_poisson_budget(self):
        r = record()
        estimate = estimate_eta_dut([r], tau_dut=1.0)
        coefficients = sensitivity_coefficients(1000, 20, 2000, 2100, 50, 1.0)
        expected = np.sqrt(sum(coefficients[k] ** 2 * v for k, v in r.to_dict().items()))
        assert estimate.std_uncertainty == pytest.approx(expected)
        assert estimate.covariance_terms == {}
        assert poisson_budget(r, 1.0).value == pytest.approx(estimate.value)

    def test_dut_estimate_divides_by_transmittance(self):
        records = [record(), record(m_c=990, A=25), record(m_c=1012, m_vs_in=2010)]
        assert estimate_eta_dut(records, 0.5).value == \
            pytest.approx(2.0 * estimate_eta_measured(records))

    def test_transmittance_uncertainty_enters_budget(self):
        records = [record(), record(m_c=990, A=25), record(m_c=1012, m_vs_in=2010)]
        bare = estimate_eta_dut(records, 0.5)
        with_tau = estimate_eta_dut(records, 0.5, u_tau=0.01)
        assert with_tau.std_uncertainty > bare.std_uncertainty
        tau_term = next(c for c in with_tau.contributions if c.name == "tau")
        assert tau_term.contribution == pytest.approx(-with_tau.value / 0.5 * 0.01)

    @pytest.mark.parametrize("k", [2, 7, 1000])
    def test_estimates_ignore_count_scale(self, k):
        records = [record(), record(m_c=990, A=25), record(m_c=1012, m_vs_in=2010)]
        scaled = [KlyshkoCountRecord(**{name: k * v for name, v in r.to_dict().items()})
                  for r in records]
        assert estimate_eta_measured(scaled) == pytest.approx(estimate_eta_measured(records),
                                                              rel=1e-12)
        assert estimate_eta_dut(scaled, 0.8, u_tau=0.01).value == \
            pytest.approx(estimate_eta_dut(records, 0.8, u_tau=0.01).value, rel=1e-12)

    def test_interval_beyond_unit_range_warns(self, caplog):
        estimate = estimate_eta_dut([record()], tau_dut=0.4)
        lower, upper = estimate.interval(COVERAGE_FACTOR)
        assert lower > 1.0
        assert upper - lower == pytest.approx(2 * COVERAGE_FACTOR * estimate.std_uncertainty)
        assert "interval lies entirely outside [0, 1]" in caplog.text

    def test_value_beyond_unit_range_within_interval(self, caplog):
        estimate = estimate_eta_dut([record()], tau_dut=0.5)
        assert estimate.value > 1.0
        assert estimate.interval(COVERAGE_FACTOR)[0] < 1.0
        assert "Efficiency estimate outside [0, 1]" in caplog.text
        assert "entirely outside" not in caplog.text

    def test_invalid_transmittance(self):
        with pytest.raises(DegenerateRunError):
            estimate_eta_dut([record()], tau_dut=1.5)

    def test_budget_table_percentages(self):
        records = [record(), record(m_c=990, A=25, m_vs_in=1990),
                   record(m_c=1012, m_vs_in=2010, m_vs_out=2080)]
        table = budget_table(uncertainty_budget(records, tau=0.9, u_tau=0.005))
        parts = table.iloc[:-1]
        assert parts["contribution_percent"].sum() == pytest.approx(100.0)
        assert table.iloc[-1]["quantity"] == "eta_dut"
        assert list(parts["quantity"][:6]) == list(INPUT_NAMES)


class TestCountRecord:
    """Record validation."""

    def test_coincidences_exceed_starts(self):
        with pytest.raises(DataSchemaError):
            record(m_c=3000)

    def test_negative_count(self):
        with pytest.raises(DataSchemaError):
            record(A=-1)

    def test_missing_field(self):
        with pytest.raises(DataSchemaError):
            KlyshkoCountRecord.from_dict({"m_c": 1, "m_vs_in": 2})


class TestMonteCarlo:
    """Estimator against simulated experiments."""

    def test_round_trip(self):
        config = KlyshkoConfig(
            pair_rate_per_window=0.01,
            eta_trigger=0.5,
            eta_dut=0.0709,
            trigger_background_per_window=2.6e-4,
            acquisition_windows=1_000_000,
            repeats=20,
            seed=3,
        )
        estimate = estimate_eta_dut(simulate_klyshko_records(config), tau_dut=1.0)
        assert abs(estimate.value - 0.0709) < 3 * estimate.std_uncertainty + 0.01 * 0.0709

    @staticmethod
    def _spread_ratio(repeats: int) -> float:
        config = KlyshkoConfig(
            pair_rate_per_window=0.01,
            eta_trigger=0.5,
            eta_dut=0.5,
            acquisition_windows=200_000,
            batch_windows=200_000,
            repeats=repeats,
            seed=21,
        )
        records = simulate_klyshko_records(config)
        per_record = np.array([
            efficiency_model(r.m_c, r.A, r.m_vs_in, r.m_vs_out, r.m_B) for r in records
        ])
        predicted = uncertainty_budget(records, tau=1.0).std_uncertainty * np.sqrt(len(records))
        return per_record.std(ddof=1) / predicted

    def test_budget_predicts_spread(self):
        assert self._spread_ratio(100) == pytest.approx(1.0, abs=0.15)

    @pytest.mark.slow
    def test_budget_predicts_spread_many_runs(self):
        assert self._spread_ratio(500) == pytest.approx(1.0, abs=0.10)
