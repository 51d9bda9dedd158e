"""
Two-photon (Klyshko) efficiency estimators.

The DUT efficiency model is

    eta = (m_c - A * m_vs_in / m_vs_out) / ((m_vs_in - m_B) * tau)

evaluated on averages over repeated runs. Its uncertainty follows the law of
propagation with the exact partial derivatives below and the two input
correlations (m_c, m_vs_in) and (A, m_vs_out).
"""

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .exceptions import DegenerateRunError, UnderdeterminedError
from .models import EfficiencyEstimate, KlyshkoCountRecord, UncertaintyContribution

logger = logging.getLogger(__name__)

# order of the model inputs in budgets and sensitivity vectors
INPUT_NAMES = ("m_c", "A", "m_vs_in", "m_vs_out", "m_B", "tau")
CORRELATED_PAIRS = (("m_c", "m_vs_in"), ("A", "m_vs_out"))
# coverage factor of the interval checked against [0, 1]
COVERAGE_FACTOR = 2.0


def ideal_klyshko_efficiency(coincidences: float, trigger_counts: float) -> float:
    """Background-free ratio N_C / N_B: efficiency of the non-triggering arm."""
    if trigger_counts <= 0:
        raise DegenerateRunError("trigger counts must be positive")
    return coincidences / trigger_counts


def _count_matrix(records: Sequence[KlyshkoCountRecord]) -> Dict[str, np.ndarray]:
    if len(records) == 0:
        raise DegenerateRunError("no count records supplied")
    table = np.array([r.as_array() for r in records])
    return {name: table[:, i] for i, name in enumerate(KlyshkoCountRecord.FIELDS)}


def _means(records: Sequence[KlyshkoCountRecord]) -> Dict[str, float]:
    return {name: float(col.mean()) for name, col in _count_matrix(records).items()}


def efficiency_model(m_c: float, A: float, m_vs_in: float, m_vs_out: float,
                     m_B: float, tau: float = 1.0) -> float:
    """Corrected efficiency for given (mean) counts and DUT-arm transmittance."""
    if m_vs_out <= 0:
        raise DegenerateRunError("valid starts with the peak delayed out must be positive")
    denominator = m_vs_in - m_B
    if denominator <= 0:
        raise DegenerateRunError(
            f"valid starts ({m_vs_in:g}) do not exceed background starts ({m_B:g})"
        )
    if tau <= 0:
        raise DegenerateRunError("transmittance must be positive")
    return (m_c - A * m_vs_in / m_vs_out) / (denominator * tau)


def estimate_eta_measured(records: Sequence[KlyshkoCountRecord]) -> float:
    """Accidental- and valid-start-corrected efficiency of the DUT arm (tau included)."""
    means = _means(records)
    value = efficiency_model(means["m_c"], means["A"], means["m_vs_in"],
                             means["m_vs_out"], means["m_B"])
    numerator = means["m_c"] - means["A"] * means["m_vs_in"] / means["m_vs_out"]
    if numerator < 0:
        logger.warning(
            "Corrected coincidence numerator is negative",
            extra={"numerator": numerator, "estimate": value},
        )
    return value


def estimate_eta_plain(records: Sequence[KlyshkoCountRecord]) -> float:
    """(<m_c> - <A>) / (<m_vs> - <m_B>), no valid-start mismatch correction."""
    means = _means(records)
    denominator = means["m_vs_in"] - means["m_B"]
    if denominator <= 0:
        raise DegenerateRunError("valid starts do not exceed background starts")
    return (means["m_c"] - means["A"]) / denominator


def sensitivity_coefficients(m_c: float, A: float, m_vs_in: float, m_vs_out: float,
                             m_B: float, tau: float) -> Dict[str, float]:
    """Partial derivatives of the efficiency model, keyed by input name."""
    efficiency_model(m_c, A, m_vs_in, m_vs_out, m_B, tau)
    D = m_vs_in - m_B
    numerator = m_c - A * m_vs_in / m_vs_out
    return {
        "m_c": 1.0 / (tau * D),
        "A": -(m_vs_in / m_vs_out) / (tau * D),
        "m_vs_in": -(A / m_vs_out) / (tau * D) - numerator / (tau * D ** 2),
        "m_vs_out": A * m_vs_in / m_vs_out ** 2 / (tau * D),
        "m_B": numerator / (tau * D ** 2),
        "tau": -numerator / (tau ** 2 * D),
    }


def _combine(values: Dict[str, float], uncertainties: Dict[str, float],
             correlations: Dict[tuple, float], tau: float) -> EfficiencyEstimate:
    coefficients = sensitivity_coefficients(
        values["m_c"], values["A"], values["m_vs_in"], values["m_vs_out"], values["m_B"], tau
    )
    contributions = [
        UncertaintyContribution(
            name=name,
            value=values[name],
            std_uncertainty=uncertainties[name],
            sensitivity=coefficients[name],
            contribution=coefficients[name] * uncertainties[name],
        )
        for name in INPUT_NAMES
    ]
    covariance_terms = {}
    for a, b in CORRELATED_PAIRS:
        rho = correlations.get((a, b), 0.0)
        covariance_terms[f"rho({a},{b})"] = (
            2.0 * rho * coefficients[a] * coefficients[b] * uncertainties[a] * uncertainties[b]
        )
    variance = sum(c.contribution ** 2 for c in contributions) + sum(covariance_terms.values())
    value = efficiency_model(values["m_c"], values["A"], values["m_vs_in"],
                             values["m_vs_out"], values["m_B"], tau)
    estimate = EfficiencyEstimate(
        value=value,
        std_uncertainty=float(np.sqrt(max(variance, 0.0))),
        contributions=contributions,
        covariance_terms=covariance_terms,
        label="eta_dut",
    )
    lower, upper = estimate.interval(COVERAGE_FACTOR)
    if upper < 0.0 or lower > 1.0:
        logger.warning(
            "Efficiency interval lies entirely outside [0, 1]",
            extra={"estimate": value, "interval": [lower, upper], "k": COVERAGE_FACTOR},
        )
    elif not 0.0 <= value <= 1.0:
        logger.warning("Efficiency estimate outside [0, 1]", extra={"estimate": value})
    return estimate


def _correlation(x: np.ndarray, y: np.ndarray) -> float:
    if x.std() == 0 or y.std() == 0:
        return 0.0
    return float(np.corrcoef(x, y)[0, 1])


def uncertainty_budget(records: Sequence[KlyshkoCountRecord], tau: float, u_tau: float = 0.0,
                       include_correlations: bool = True) -> EfficiencyEstimate:
    """
    Budget from repeated runs: means, variances of the means and the two
    input correlations are taken from the sample of records.
    """
    if len(records) < 2:
        raise UnderdeterminedError(
            "at least two repeated records are needed to estimate variances and correlations",
            context={"records": len(records)},
        )
    columns = _count_matrix(records)
    n = len(records)
    values = {name: float(col.mean()) for name, col in columns.items()}
    uncertainties = {name: float(np.sqrt(col.var(ddof=1) / n)) for name, col in columns.items()}
    values["tau"], uncertainties["tau"] = float(tau), float(u_tau)

    correlations = {}
    if include_correlations:
        correlations = {(a, b): _correlation(columns[a], columns[b]) for a, b in CORRELATED_PAIRS}
    return _combine(values, uncertainties, correlations, tau)


def poisson_budget(record: KlyshkoCountRecord, tau: float, u_tau: float = 0.0) -> EfficiencyEstimate:
    """Budget of a single run with Poisson counting variances and no correlations."""
    values = {name: float(v) for name, v in record.to_dict().items()}
    uncertainties = {name: float(np.sqrt(v)) for name, v in values.items()}
    values["tau"], uncertainties["tau"] = float(tau), float(u_tau)
    return _combine(values, uncertainties, {}, tau)


def estimate_eta_dut(records: Sequence[KlyshkoCountRecord], tau_dut: float,
                     u_tau: float = 0.0) -> EfficiencyEstimate:
    """
    Bare DUT efficiency, the measured efficiency divided by ``tau_dut``.

    Two or more records use the repeated-run budget; a single record falls
    back to Poisson counting statistics.
    """
    if not 0.0 < tau_dut <= 1.0:
        raise DegenerateRunError(f"tau_dut must lie in (0, 1], got {tau_dut}")
    estimate_eta_measured(records)
    if len(records) == 1:
        return poisson_budget(records[0], tau_dut, u_tau)
    return uncertainty_budget(records, tau_dut, u_tau)


def budget_table(estimate: EfficiencyEstimate) -> pd.DataFrame:
    """Rows of (quantity, value, std_uncertainty, sensitivity, contribution_percent)."""
    total = estimate.std_uncertainty ** 2
    rows: List[Dict[str, Optional[float]]] = []
    for c in estimate.contributions:
        rows.append({
            "quantity": c.name,
            "value": c.value,
            "std_uncertainty": c.std_uncertainty,
            "sensitivity": c.sensitivity,
            "contribution_percent": 100.0 * c.contribution ** 2 / total if total > 0 else 0.0,
        })
    for name, term in estimate.covariance_terms.items():
        rows.append({
            "quantity": name,
            "value": None,
            "std_uncertainty": None,
            "sensitivity": None,
            "contribution_percent": 100.0 * term / total if total > 0 else 0.0,
        })
    rows.append({
        "quantity": estimate.label or "eta",
        "value": estimate.value,
        "std_uncertainty": estimate.std_uncertainty,
        "sensitivity": None,
        "contribution_percent": 100.0 if total > 0 else 0.0,
    })
    return pd.DataFrame(rows, columns=[
        "quantity", "value", "std_uncertainty", "sensitivity", "contribution_percent"
    ])
