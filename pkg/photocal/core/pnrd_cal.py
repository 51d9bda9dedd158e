"""
Heralded calibration of photon-number-resolving detectors.

Amplitude histograms are fitted with a sum of Gaussians, binned between the
mixture minima into peak counts C(i), and the per-peak efficiencies

    eta_0 = (Pb(0) - P(0)) / (xi Pb(0))
    eta_i = (P(i) - Pb(i)) / (xi (Pb(i-1) - Pb(i)))

are computed from the heralded (P) and unheralded (Pb) peak probabilities.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from scipy import optimize, stats

from .exceptions import (
    DegenerateRunError,
    FitError,
    InvalidTallyError,
    PeakUnusableError,
    UnderdeterminedError,
)
from .models import EfficiencyEstimate, HeraldedPnrdCounts, UncertainValue, UncertaintyContribution

logger = logging.getLogger(__name__)

MIN_SAMPLES_PER_PEAK = 50
MIN_PEAK_COUNTS = 25.0
DEFAULT_ALPHA = 0.01


# --------------------------------------------------------------------------
# Amplitude histograms
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PeakModel:
    """
    Gaussian mixture fitted to an amplitude histogram.

    ``weights`` are the integrals of each peak (event counts), ``residual_norm``
    is the Poisson-weighted residual norm of the histogram fit.
    """
    means: np.ndarray
    sigmas: np.ndarray
    weights: np.ndarray
    residual_norm: float = 0.0

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        sigmas = np.asarray(self.sigmas, dtype=float)
        weights = np.asarray(self.weights, dtype=float)
        if not (means.shape == sigmas.shape == weights.shape) or means.ndim != 1 or means.size == 0:
            raise ValueError("means, sigmas and weights must be equal-length 1-D arrays")
        if np.any(np.diff(means) <= 0):
            raise ValueError("peak means must be strictly increasing")
        if np.any(sigmas <= 0):
            raise ValueError("peak widths must be positive")
        if np.any(weights < 0):
            raise ValueError("peak weights must be non-negative")
        for name, array in (("means", means), ("sigmas", sigmas), ("weights", weights)):
            object.__setattr__(self, name, array)

    @property
    def n_peaks(self) -> int:
        return int(self.means.size)

    def density(self, x) -> np.ndarray:
        """Mixture density sum_i w_i N(x; mu_i, sigma_i)."""
        x = np.asarray(x, dtype=float)
        return np.sum(
            self.weights[:, None] * stats.norm.pdf(x.ravel()[None, :], self.means[:, None],
                                                   self.sigmas[:, None]),
            axis=0,
        ).reshape(x.shape)

    def to_dict(self) -> Dict[str, object]:
        return {
            "means": self.means.tolist(),
            "sigmas": self.sigmas.tolist(),
            "weights": self.weights.tolist(),
            "residual_norm": self.residual_norm,
        }


def _bin_count(n_samples: int) -> int:
    return int(np.clip(np.sqrt(n_samples), 20, 400))


def fit_gaussian_mixture(amplitudes: Sequence[float], n_peaks: int,
                         bins: Optional[int] = None, max_nfev: int = 20_000) -> PeakModel:
    """
    Least-squares fit of ``n_peaks`` Gaussians to the binned histogram.

    Bin contents are modelled as exact Gaussian integrals and weighted by
    their Poisson errors. Initial means are equally spaced between the 0.5%
    and 99.5% quantiles.

    Raises:
        UnderdeterminedError: fewer than 50 samples per peak
        FitError: the optimiser fails or peaks collapse onto each other
    """
    if n_peaks < 1:
        raise ValueError("n_peaks must be >= 1")
    data = np.asarray(amplitudes, dtype=float)
    data = data[np.isfinite(data)]
    if data.size < MIN_SAMPLES_PER_PEAK * n_peaks:
        raise UnderdeterminedError(
            f"{data.size} amplitudes are too few for {n_peaks} peaks",
            context={"samples": int(data.size), "n_peaks": n_peaks},
        )

    counts, edges = np.histogram(data, bins=bins or _bin_count(data.size))
    low, high = np.quantile(data, [0.005, 0.995])
    span = max(high - low, np.ptp(data), 1e-12)
    if n_peaks == 1:
        means0 = np.array([np.median(data)])
    else:
        means0 = np.linspace(low, high, n_peaks)
    spacing = span / max(n_peaks, 2)
    sigmas0 = np.full(n_peaks, spacing / 4.0)
    centers = 0.5 * (edges[:-1] + edges[1:])
    nearest = np.abs(centers[None, :] - means0[:, None]).argmin(axis=1)
    weights0 = np.maximum(counts[nearest] * np.sqrt(2 * np.pi) * sigmas0 / np.diff(edges)[nearest], 1.0)

    errors = np.sqrt(np.maximum(counts, 1.0))

    def residuals(params):
        w, mu, sigma = np.split(params, 3)
        cdf = stats.norm.cdf(edges[None, :], mu[:, None], sigma[:, None])
        expected = (w[:, None] * np.diff(cdf, axis=1)).sum(axis=0)
        return (counts - expected) / errors

    x0 = np.concatenate([weights0, means0, sigmas0])
    lower = np.concatenate([np.zeros(n_peaks), np.full(n_peaks, edges[0]),
                            np.full(n_peaks, 1e-6 * span)])
    upper = np.concatenate([np.full(n_peaks, 2.0 * data.size), np.full(n_peaks, edges[-1]),
                            np.full(n_peaks, span)])
    x0 = np.clip(x0, lower, upper)

    try:
        result = optimize.least_squares(residuals, x0, bounds=(lower, upper),
                                        x_scale="jac", max_nfev=max_nfev)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise FitError(f"mixture fit failed: {exc}", residual_norm=float("nan")) from exc

    residual_norm = float(np.sqrt(np.sum(result.fun ** 2)))
    if not result.success or not np.all(np.isfinite(result.x)):
        raise FitError(
            f"mixture fit did not converge: {result.message}",
            residual_norm=residual_norm,
            context={"nfev": int(result.nfev), "status": int(result.status)},
        )

    w, mu, sigma = np.split(result.x, 3)
    order = np.argsort(mu)
    if np.any(np.diff(mu[order]) <= 1e-9 * span):
        raise FitError("fitted peaks collapsed onto each other", residual_norm=residual_norm)
    logger.debug(
        "Mixture fit converged",
        extra={"n_peaks": n_peaks, "residual_norm": residual_norm, "nfev": int(result.nfev)},
    )
    return PeakModel(mu[order], sigma[order], w[order], residual_norm)


def _equal_posterior(model: PeakModel, i: int) -> float:
    lo, hi = model.means[i], model.means[i + 1]

    def gap(x):
        return (model.weights[i] * stats.norm.pdf(x, lo, model.sigmas[i])
                - model.weights[i + 1] * stats.norm.pdf(x, hi, model.sigmas[i + 1]))

    if gap(lo) * gap(hi) < 0:
        return float(optimize.brentq(gap, lo, hi, xtol=1e-12 * max(hi - lo, 1.0)))
    return 0.5 * (lo + hi)


def place_thresholds(model: PeakModel, rtol: float = 1e-4) -> List[float]:
    """
    One threshold between each pair of adjacent peaks at the mixture minimum.

    When the mixture has no interior minimum between two means, the
    equal-posterior point of the two components is used instead.
    """
    if model.n_peaks < 2:
        raise ValueError("thresholds need at least two peaks")
    thresholds = []
    for i in range(model.n_peaks - 1):
        lo, hi = float(model.means[i]), float(model.means[i + 1])
        width = hi - lo
        result = optimize.minimize_scalar(
            lambda x: float(model.density(x)), bounds=(lo, hi), method="bounded",
            options={"xatol": rtol * width},
        )
        x = float(result.x)
        margin = 10.0 * rtol * width
        interior = (
            result.success and lo + margin < x < hi - margin
            and model.density(x) < min(model.density(lo), model.density(hi))
        )
        if not interior:
            x = _equal_posterior(model, i)
            logger.info("No interior mixture minimum, using equal-posterior threshold",
                        extra={"boundary": i, "threshold": x})
        thresholds.append(x)
    return thresholds


def bin_counts(amplitudes: Sequence[float], thresholds: Sequence[float]) -> np.ndarray:
    """Counts on (-inf, t1], (t1, t2], ..., (t_last, inf)."""
    edges = np.asarray(thresholds, dtype=float)
    if np.any(np.diff(edges) < 0):
        raise ValueError("thresholds must be sorted")
    data = np.asarray(amplitudes, dtype=float)
    index = np.searchsorted(edges, data, side="left")
    return np.bincount(index, minlength=edges.size + 1)


def misclassification_mass(model: PeakModel, thresholds: Sequence[float]) -> np.ndarray:
    """Probability that an event of peak i falls outside its own interval."""
    edges = np.concatenate([[-np.inf], np.asarray(thresholds, dtype=float), [np.inf]])
    if edges.size != model.n_peaks + 1:
        raise ValueError("need exactly n_peaks - 1 thresholds")
    below = stats.norm.cdf(edges[:-1], model.means, model.sigmas)
    above = stats.norm.sf(edges[1:], model.means, model.sigmas)
    return below + above


# --------------------------------------------------------------------------
# Efficiency estimation
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PeakTally:
    """
    Peak counts with per-count standard uncertainties (sqrt(C) by default,
    which reproduces the multinomial covariance of the normalised P(i)).
    """
    counts: np.ndarray
    uncertainties: Optional[np.ndarray] = None

    def __post_init__(self):
        counts = np.asarray(self.counts, dtype=float)
        if counts.ndim != 1 or counts.size == 0:
            raise InvalidTallyError("peak counts must be a non-empty vector")
        if np.any(counts < 0) or counts.sum() <= 0:
            raise InvalidTallyError("peak counts must be non-negative with a positive total")
        if self.uncertainties is None:
            uncertainties = np.sqrt(counts)
        else:
            uncertainties = np.asarray(self.uncertainties, dtype=float)
            if uncertainties.shape != counts.shape or np.any(uncertainties < 0):
                raise InvalidTallyError("per-count uncertainties must match counts and be >= 0")
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "uncertainties", uncertainties)

    @property
    def probabilities(self) -> np.ndarray:
        return self.counts / self.counts.sum()

    def jacobian(self) -> np.ndarray:
        """dP_j / dC_k = (delta_jk S - C_j) / S^2."""
        total = self.counts.sum()
        return (np.eye(self.counts.size) * total - self.counts[:, None]) / total ** 2


TallyLike = Union[PeakTally, Sequence[float]]


def _as_tally(data: TallyLike) -> PeakTally:
    return data if isinstance(data, PeakTally) else PeakTally(np.asarray(data, dtype=float))


def heralding_purity(n_p: int, n_a: int) -> UncertainValue:
    """xi = (n_p - n_a) / n_p with binomial standard uncertainty."""
    if n_p <= 0:
        raise InvalidTallyError(f"trigger events with the source on must be positive, got {n_p}")
    if n_a < 0 or n_a > n_p:
        raise InvalidTallyError(
            f"trigger events with the source off ({n_a}) must lie in [0, n_p={n_p}]"
        )
    xi = (n_p - n_a) / n_p
    return UncertainValue(xi, float(np.sqrt(xi * (1.0 - xi) / n_p)))


def _eta_and_gradients(P: np.ndarray, Pb: np.ndarray, xi: float, i: int):
    """Efficiency of peak i and its gradients with respect to P, Pb and xi."""
    grad_P = np.zeros_like(P)
    grad_Pb = np.zeros_like(Pb)
    if i == 0:
        denominator = Pb[0]
        if denominator <= 0:
            raise PeakUnusableError("no unheralded zero-photon events")
        eta = (Pb[0] - P[0]) / (xi * denominator)
        grad_P[0] = -1.0 / (xi * Pb[0])
        grad_Pb[0] = P[0] / (xi * Pb[0] ** 2)
    else:
        denominator = Pb[i - 1] - Pb[i]
        if denominator <= 0:
            raise PeakUnusableError(
                f"Pb({i - 1}) - Pb({i}) = {denominator:.3e} is not positive",
                context={"peak": i},
            )
        eta = (P[i] - Pb[i]) / (xi * denominator)
        grad_P[i] = 1.0 / (xi * denominator)
        grad_Pb[i] = -1.0 / (xi * denominator) + eta / denominator
        grad_Pb[i - 1] = -eta / denominator
    return eta, grad_P, grad_Pb, -eta / xi


def estimate_eta_i(heralded: TallyLike, unheralded: TallyLike, xi: Union[float, UncertainValue],
                   i: int) -> EfficiencyEstimate:
    """
    Efficiency from peak ``i``, propagating count uncertainties through the
    normalisation and u(xi).

    Raises:
        PeakUnusableError: peak outside the tallies or degenerate denominator
    """
    herald, background = _as_tally(heralded), _as_tally(unheralded)
    xi = xi if isinstance(xi, UncertainValue) else UncertainValue(float(xi))
    if not 0.0 < xi.value <= 1.0:
        raise InvalidTallyError(f"heralding purity must lie in (0, 1], got {xi.value}")
    if i < 0 or i >= min(herald.counts.size, background.counts.size):
        raise PeakUnusableError(f"peak {i} is outside the recorded peaks", context={"peak": i})

    eta, grad_P, grad_Pb, grad_xi = _eta_and_gradients(
        herald.probabilities, background.probabilities, xi.value, i
    )
    sens_C = grad_P @ herald.jacobian()
    sens_Cb = grad_Pb @ background.jacobian()

    contributions = [
        UncertaintyContribution(f"C({k})", float(herald.counts[k]), float(herald.uncertainties[k]),
                                float(sens_C[k]), float(sens_C[k] * herald.uncertainties[k]))
        for k in range(herald.counts.size)
    ]
    contributions += [
        UncertaintyContribution(f"C_bar({k})", float(background.counts[k]),
                                float(background.uncertainties[k]), float(sens_Cb[k]),
                                float(sens_Cb[k] * background.uncertainties[k]))
        for k in range(background.counts.size)
    ]
    contributions.append(
        UncertaintyContribution("xi", xi.value, xi.std_uncertainty, grad_xi,
                                grad_xi * xi.std_uncertainty)
    )
    variance = sum(c.contribution ** 2 for c in contributions)
    return EfficiencyEstimate(
        value=float(eta),
        std_uncertainty=float(np.sqrt(variance)),
        contributions=contributions,
        label=f"eta_{i}",
    )


@dataclass(frozen=True)
class PnrdEfficiencySet:
    """Per-peak efficiencies, their inverse-variance mean and consistency test."""
    eta_i: List[EfficiencyEstimate]
    combined: EfficiencyEstimate
    chi_square: float
    degrees_of_freedom: int
    p_value: float
    consistent: bool
    xi: Optional[UncertainValue] = None
    peaks: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, object]:
        return {
            "eta_i": [e.to_dict() for e in self.eta_i],
            "peaks": list(self.peaks),
            "combined": self.combined.to_dict(),
            "chi_square": self.chi_square,
            "degrees_of_freedom": self.degrees_of_freedom,
            "p_value": self.p_value,
            "consistent": self.consistent,
            "xi": self.xi.to_dict() if self.xi is not None else None,
        }


def combine_and_test(etas: Sequence[EfficiencyEstimate], alpha: float = DEFAULT_ALPHA,
                     xi: Optional[UncertainValue] = None,
                     peaks: Optional[Sequence[int]] = None) -> PnrdEfficiencySet:
    """
    Inverse-variance weighted mean and chi-square test of mutual consistency
    with len(etas) - 1 degrees of freedom; flagged inconsistent when p < alpha.
    """
    if len(etas) == 0:
        raise PeakUnusableError("no usable efficiency estimates to combine")
    values = np.array([e.value for e in etas])
    sigmas = np.array([e.std_uncertainty for e in etas])
    if np.any(sigmas <= 0):
        raise DegenerateRunError("estimates without positive uncertainty cannot be weighted")

    weights = 1.0 / sigmas ** 2
    mean = float(np.sum(weights * values) / weights.sum())
    combined = EfficiencyEstimate(value=mean, std_uncertainty=float(1.0 / np.sqrt(weights.sum())),
                                  label="eta")
    dof = len(etas) - 1
    chi_square = float(np.sum(weights * (values - mean) ** 2))
    p_value = float(stats.chi2.sf(chi_square, dof)) if dof > 0 else 1.0
    consistent = p_value >= alpha
    if not consistent:
        logger.warning("Per-peak efficiencies are mutually inconsistent",
                       extra={"chi_square": chi_square, "dof": dof, "p_value": p_value})
    return PnrdEfficiencySet(
        eta_i=list(etas),
        combined=combined,
        chi_square=chi_square,
        degrees_of_freedom=dof,
        p_value=p_value,
        consistent=consistent,
        xi=xi,
        peaks=list(peaks) if peaks is not None else list(range(len(etas))),
    )


def calibrate_pnrd(heralded: TallyLike, unheralded: TallyLike, xi: UncertainValue,
                   min_counts: float = MIN_PEAK_COUNTS,
                   alpha: float = DEFAULT_ALPHA) -> PnrdEfficiencySet:
    """
    Estimate every usable peak and combine them.

    Peaks whose heralded count is below ``min_counts`` or whose denominator
    is degenerate are skipped.
    """
    herald, background = _as_tally(heralded), _as_tally(unheralded)
    estimates, peaks = [], []
    for i in range(min(herald.counts.size, background.counts.size)):
        if herald.counts[i] < min_counts:
            logger.info("Skipping sparse peak", extra={"peak": i, "counts": float(herald.counts[i])})
            continue
        try:
            estimates.append(estimate_eta_i(herald, background, xi, i))
            peaks.append(i)
        except PeakUnusableError as exc:
            logger.warning("Skipping unusable peak", extra={"peak": i, "reason": exc.message})
    if not estimates:
        raise PeakUnusableError("no peak has enough counts for efficiency estimation")
    return combine_and_test(estimates, alpha=alpha, xi=xi, peaks=peaks)


def calibrate_from_counts(counts: HeraldedPnrdCounts, xi: Optional[UncertainValue] = None,
                          min_counts: float = MIN_PEAK_COUNTS,
                          alpha: float = DEFAULT_ALPHA) -> PnrdEfficiencySet:
    """Calibration from a tally record; xi comes from n_p, n_a unless given."""
    if xi is None:
        xi = heralding_purity(counts.n_p, counts.n_a)
    return calibrate_pnrd(counts.C, counts.C_bar, xi, min_counts=min_counts, alpha=alpha)
