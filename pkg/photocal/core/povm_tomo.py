"""
Coherent-probe detector tomography.

Outcome probabilities of probe j are p[n, j] = sum_m Pi[n, m] q[m, j]. The
POVM is reconstructed by constrained regularized least squares on the
observed frequencies; the efficiency (and dark-count mean) of a linear
counter is estimated by maximum likelihood on the raw counts.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy import optimize, stats

from .constrained_ls import (
    DEFAULT_MAX_ITERATIONS,
    DEFAULT_TOLERANCE,
    SimplexLeastSquares,
    SolverResult,
)
from .detector_models import (
    Povm,
    binomial_matrix,
    dark_count_elements,
    linear_povm,
    povm_fidelity,
)
from .exceptions import DimensionError, UnderdeterminedError
from .models import CoherentProbeCounts
from .photon_stats import ProbeEnsemble, default_truncation, outcome_fidelity, poisson_pmf
from .rng import parallel_map

logger = logging.getLogger(__name__)

DEFAULT_TRUNCATION = 140
DEFAULT_OUTCOMES = 12
DEFAULT_REGULARIZATION = 1e-2
L_CURVE_WEIGHTS = tuple(np.logspace(-4, 0, 9))
_LOG_FLOOR = 1e-300


@dataclass(frozen=True, eq=False)
class TomographyProblem:
    """
    Probe matrix Q (M x S), observed frequencies P (N x S), raw counts
    (N x S) and the smoothness weight.
    """
    probe_matrix: np.ndarray
    observed_probs: np.ndarray
    counts: Optional[np.ndarray] = None
    regularization_weight: float = DEFAULT_REGULARIZATION
    mean_photons: Optional[np.ndarray] = None

    def __post_init__(self):
        Q = np.asarray(self.probe_matrix, dtype=float)
        P = np.asarray(self.observed_probs, dtype=float)
        if Q.ndim != 2 or P.ndim != 2 or Q.shape[1] != P.shape[1]:
            raise DimensionError(
                f"probe matrix {Q.shape} and observed probabilities {P.shape} disagree on probes"
            )
        if not np.all(np.isfinite(Q)) or not np.all(np.isfinite(P)):
            raise ValueError("tomography inputs must be finite")
        if np.any(Q < 0) or np.any(np.abs(Q.sum(axis=0) - 1.0) > 1e-6):
            raise ValueError("probe matrix columns must be probability distributions")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=0) - 1.0) > 1e-9):
            raise ValueError("observed probability columns must sum to one")
        if self.regularization_weight < 0:
            raise ValueError("regularization weight must be non-negative")
        object.__setattr__(self, "probe_matrix", Q)
        object.__setattr__(self, "observed_probs", P)
        if self.counts is not None:
            counts = np.asarray(self.counts, dtype=float)
            if counts.shape != P.shape:
                raise DimensionError("counts and observed probabilities differ in shape")
            object.__setattr__(self, "counts", counts)
        if self.mean_photons is not None:
            object.__setattr__(self, "mean_photons", np.asarray(self.mean_photons, dtype=float))

    @property
    def n_outcomes(self) -> int:
        return int(self.observed_probs.shape[0])

    @property
    def truncation(self) -> int:
        return int(self.probe_matrix.shape[0])

    @property
    def n_probes(self) -> int:
        return int(self.probe_matrix.shape[1])

    def with_weight(self, weight: float) -> "TomographyProblem":
        return TomographyProblem(self.probe_matrix, self.observed_probs, self.counts,
                                 weight, self.mean_photons)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "probe_matrix": self.probe_matrix.tolist(),
            "observed_probs": self.observed_probs.tolist(),
            "counts": None if self.counts is None else self.counts.tolist(),
            "regularization_weight": self.regularization_weight,
            "mean_photons": None if self.mean_photons is None else self.mean_photons.tolist(),
        }


def build_problem(counts: CoherentProbeCounts, truncation: int = DEFAULT_TRUNCATION,
                  regularization_weight: float = DEFAULT_REGULARIZATION) -> TomographyProblem:
    """
    Tomography problem from probe counts. Probes without any counts are
    dropped; probe tails beyond ``truncation`` are folded into its last level.
    """
    totals = counts.counts.sum(axis=0)
    keep = totals > 0
    if not np.all(keep):
        logger.warning("Dropping probes without counts",
                       extra={"probes": np.flatnonzero(~keep).tolist()})
    if keep.sum() == 0:
        raise UnderdeterminedError("no probe has any recorded counts")
    mus = counts.mean_photons[keep]
    ensemble = ProbeEnsemble(mus, truncation)
    observed = counts.counts[:, keep] / totals[keep]
    return TomographyProblem(
        probe_matrix=ensemble.probe_matrix(fold_tail=True),
        observed_probs=observed,
        counts=counts.counts[:, keep],
        regularization_weight=regularization_weight,
        mean_photons=mus,
    )


@dataclass(frozen=True, eq=False)
class PovmReconstruction:
    """Reconstructed POVM together with the solver diagnostics."""
    povm: Povm
    objective: float
    residual_norm: float
    converged: bool
    iterations: int
    regularization_weight: float
    history: List[Tuple[int, float, float]] = field(default_factory=list)

    def history_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.history, columns=["iteration", "objective", "constraint_residual"])


def _merge_outcomes(observed: np.ndarray, n_outcomes: int) -> np.ndarray:
    if n_outcomes > observed.shape[0]:
        raise DimensionError(
            f"cannot reconstruct {n_outcomes} outcomes from {observed.shape[0]} observed ones"
        )
    merged = observed[:n_outcomes].copy()
    merged[-1] += observed[n_outcomes:].sum(axis=0)
    return merged


def reconstruct_povm_ls(problem: TomographyProblem, n_outcomes: Optional[int] = None,
                        max_iterations: int = DEFAULT_MAX_ITERATIONS,
                        tolerance: float = DEFAULT_TOLERANCE) -> PovmReconstruction:
    """
    Least-squares POVM subject to 0 <= Pi <= 1 and unit column sums.

    Observed outcomes beyond ``n_outcomes`` are merged into the last one, which
    then plays the complement role. Non-convergence returns the best feasible
    iterate with ``converged=False``.
    """
    if problem.n_probes < 2 and problem.truncation > 1:
        logger.warning("Tomography with a single probe is underdetermined",
                       extra={"probes": problem.n_probes})
    n_outcomes = problem.n_outcomes if n_outcomes is None else int(n_outcomes)
    target = _merge_outcomes(problem.observed_probs, n_outcomes)
    solver = SimplexLeastSquares(problem.probe_matrix, target,
                                 problem.regularization_weight, simplex_axis=0)
    result: SolverResult = solver.solve(max_iterations=max_iterations, tolerance=tolerance)
    logger.info(
        "POVM reconstruction finished",
        extra={"iterations": result.iterations, "objective": result.objective,
               "converged": result.converged, "weight": problem.regularization_weight},
    )
    return PovmReconstruction(
        povm=Povm(result.solution),
        objective=result.objective,
        residual_norm=result.residual_norm,
        converged=result.converged,
        iterations=result.iterations,
        regularization_weight=problem.regularization_weight,
        history=result.history,
    )


def select_regularization_weight(problem: TomographyProblem,
                                 weights: Sequence[float] = L_CURVE_WEIGHTS,
                                 n_outcomes: Optional[int] = None,
                                 max_iterations: int = 20_000,
                                 tolerance: float = 1e-8) -> Tuple[float, pd.DataFrame]:
    """
    L-curve choice of the smoothness weight: the sweep point of maximum
    curvature of (log residual norm, log penalty).
    """
    weights = np.sort(np.asarray(weights, dtype=float))
    if weights.size < 3 or np.any(weights <= 0):
        raise ValueError("the L-curve needs at least three positive weights")
    n_outcomes = problem.n_outcomes if n_outcomes is None else int(n_outcomes)
    target = _merge_outcomes(problem.observed_probs, n_outcomes)

    rows = []
    for weight in weights:
        solver = SimplexLeastSquares(problem.probe_matrix, target, weight, simplex_axis=0)
        result = solver.solve(max_iterations=max_iterations, tolerance=tolerance)
        rows.append({"weight": weight, "residual_norm": result.residual_norm,
                     "penalty": result.penalty, "converged": result.converged})
    table = pd.DataFrame(rows)

    t = np.log10(table["weight"].to_numpy())
    x = np.log(np.maximum(table["residual_norm"].to_numpy(), _LOG_FLOOR))
    y = np.log(np.maximum(table["penalty"].to_numpy(), _LOG_FLOOR))
    dx, dy = np.gradient(x, t), np.gradient(y, t)
    ddx, ddy = np.gradient(dx, t), np.gradient(dy, t)
    curvature = np.abs(dx * ddy - dy * ddx) / np.maximum((dx ** 2 + dy ** 2) ** 1.5, _LOG_FLOOR)
    curvature[[0, -1]] = -np.inf
    table["curvature"] = curvature
    best = float(table["weight"].iloc[int(np.argmax(curvature))])
    logger.info("Regularization weight selected", extra={"weight": best})
    return best, table


# --------------------------------------------------------------------------
# Maximum likelihood
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class MlFitResult:
    """
    Efficiency (and dark-count mean) of a linear counter by maximum
    likelihood.

    For the linear model ``eta`` is the uniform mean of the per-probe
    estimates and ``u_eta`` their standard error. For the dark-count model
    both uncertainties come from the inverse Fisher information and
    ``gamma_unconstrained`` holds the profile maximum allowing gamma < 0.
    """
    eta: float
    u_eta: float
    gamma: float
    u_gamma: float
    log_likelihood: float
    model: str = "linear"
    per_probe_eta: Optional[np.ndarray] = None
    spread: float = 0.0
    covariance: Optional[np.ndarray] = None
    gamma_unconstrained: Optional[float] = None
    skipped_probes: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "eta": self.eta,
            "u_eta": self.u_eta,
            "gamma": self.gamma,
            "u_gamma": self.u_gamma,
            "log_likelihood": self.log_likelihood,
            "per_probe_eta": None if self.per_probe_eta is None else self.per_probe_eta.tolist(),
            "spread": self.spread,
            "covariance": None if self.covariance is None else self.covariance.tolist(),
            "gamma_unconstrained": self.gamma_unconstrained,
            "skipped_probes": list(self.skipped_probes),
        }


def _counts_matrix(counts) -> np.ndarray:
    array = counts.counts if isinstance(counts, CoherentProbeCounts) else counts
    array = np.asarray(array, dtype=float)
    if array.ndim != 2:
        raise DimensionError("counts must be an N x S matrix")
    return array


def _likelihood_probes(probes: ProbeEnsemble) -> np.ndarray:
    """Untruncated probe statistics for likelihood evaluation."""
    truncation = max(probes.truncation, default_truncation(float(probes.mean_photons.max())))
    return np.column_stack([poisson_pmf(mu, truncation).probs for mu in probes.mean_photons])


def _log_likelihood(counts: np.ndarray, elements: np.ndarray, q: np.ndarray) -> float:
    p = elements @ q
    return float(np.sum(counts * np.log(np.maximum(p, _LOG_FLOOR))))


def _linear_elements(eta: float, n_outcomes: int, truncation: int) -> np.ndarray:
    rows = binomial_matrix(eta, n_outcomes - 1, truncation)
    return np.vstack([rows, 1.0 - rows.sum(axis=0)])


def probe_log_likelihood(eta: float, counts_j: np.ndarray, q_j: np.ndarray) -> float:
    """L_j(eta) = sum_n N_nj log(sum_m B_nm q_mj) for one probe."""
    elements = _linear_elements(eta, counts_j.size, q_j.size)
    return _log_likelihood(counts_j, elements, q_j)


def _fit_probe(counts_j: np.ndarray, q_j: np.ndarray) -> float:
    result = optimize.minimize_scalar(
        lambda eta: -probe_log_likelihood(eta, counts_j, q_j),
        bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-12},
    )
    return float(result.x)


def ml_efficiency(counts, probes: ProbeEnsemble, threads: int = 1) -> MlFitResult:
    """
    Per-probe efficiency maximising L_j on [0, 1]; the estimate is their
    uniform mean with the standard error across probes. Probes with no counts
    are skipped.
    """
    N = _counts_matrix(counts)
    if N.shape[1] != probes.size:
        raise DimensionError(f"{N.shape[1]} count columns for {probes.size} probes")
    q = _likelihood_probes(probes)

    used = [j for j in range(probes.size) if N[:, j].sum() > 0]
    skipped = [j for j in range(probes.size) if j not in used]
    if skipped:
        logger.warning("Skipping probes without counts", extra={"probes": skipped})
    if not used:
        raise UnderdeterminedError("no probe has any recorded counts")

    etas = np.array(parallel_map(lambda j: _fit_probe(N[:, j], q[:, j]), used, threads))
    eta = float(etas.mean())
    spread = float(etas.std(ddof=1)) if etas.size > 1 else 0.0
    u_eta = spread / np.sqrt(etas.size)
    if etas.size == 1:
        u_eta = _linear_fisher_uncertainty(eta, N[:, used], q[:, used])

    log_likelihood = _log_likelihood(N[:, used], _linear_elements(eta, N.shape[0], q.shape[0]),
                                     q[:, used])
    return MlFitResult(
        eta=eta, u_eta=float(u_eta), gamma=0.0, u_gamma=0.0,
        log_likelihood=log_likelihood, model="linear", per_probe_eta=etas,
        spread=spread, skipped_probes=skipped,
    )


def _fisher_information(probabilities, theta: np.ndarray, counts: np.ndarray,
                        steps: np.ndarray) -> np.ndarray:
    """Expected Fisher information sum_j N_j sum_n dp_a dp_b / p."""
    p = probabilities(theta)
    jac = optimize.approx_fprime(theta, lambda x: probabilities(x).ravel(), steps)
    jac = jac.reshape(p.shape + (theta.size,))
    totals = counts.sum(axis=0)
    weights = totals[None, :] / np.maximum(p, _LOG_FLOOR)
    return np.einsum("nja,nj,njb->ab", jac, weights, jac)


def _linear_fisher_uncertainty(eta: float, counts: np.ndarray, q: np.ndarray) -> float:
    n_outcomes, truncation = counts.shape[0], q.shape[0]
    info = _fisher_information(
        lambda x: _linear_elements(float(np.clip(x[0], 0.0, 1.0)), n_outcomes, truncation) @ q,
        np.array([eta]), counts, np.array([1e-7]),
    )
    return float(1.0 / np.sqrt(info[0, 0])) if info[0, 0] > 0 else float("inf")


def ml_efficiency_dark(counts, probes: ProbeEnsemble, gamma_max: float = 10.0) -> MlFitResult:
    """
    Joint maximum likelihood of (eta, gamma >= 0) under the linear counter
    with Poissonian dark counts. The search starts from the linear-model
    estimate at gamma = 0, so its likelihood is never below that point.
    """
    N = _counts_matrix(counts)
    linear = ml_efficiency(N, probes)
    used = [j for j in range(probes.size) if j not in linear.skipped_probes]
    N = N[:, used]
    q = _likelihood_probes(probes)[:, used]
    n_outcomes, truncation = N.shape[0], q.shape[0]

    def elements(theta):
        return dark_count_elements(theta[0], theta[1], n_outcomes, truncation)

    def negative_ll(theta):
        return -_log_likelihood(N, elements(theta), q)

    start = np.array([linear.eta, 0.0])
    result = optimize.minimize(negative_ll, start, method="L-BFGS-B",
                               bounds=[(0.0, 1.0), (0.0, gamma_max)],
                               options={"ftol": 1e-15, "gtol": 1e-10, "maxiter": 10_000})
    theta = result.x if result.fun <= negative_ll(start) else start
    log_likelihood = -negative_ll(theta)

    info = _fisher_information(lambda x: elements(x) @ q, theta, N,
                               np.array([1e-7, 1e-7]))
    try:
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        logger.warning("Singular Fisher information, reporting unbounded uncertainties")
        covariance = np.full((2, 2), np.inf)
    u_eta, u_gamma = np.sqrt(np.abs(np.diag(covariance)))

    profile = optimize.minimize_scalar(
        lambda g: negative_ll(np.array([theta[0], g])),
        bounds=(-0.2, max(1.0, 10.0 * theta[1])), method="bounded",
        options={"xatol": 1e-10},
    )
    logger.info(
        "Dark-count fit finished",
        extra={"eta": float(theta[0]), "gamma": float(theta[1]),
               "gamma_unconstrained": float(profile.x)},
    )
    return MlFitResult(
        eta=float(theta[0]), u_eta=float(u_eta), gamma=float(theta[1]), u_gamma=float(u_gamma),
        log_likelihood=float(log_likelihood), model="dark_count",
        per_probe_eta=linear.per_probe_eta, spread=linear.spread, covariance=covariance,
        gamma_unconstrained=float(profile.x), skipped_probes=linear.skipped_probes,
    )


# --------------------------------------------------------------------------
# Model comparison
# --------------------------------------------------------------------------

def linear_model_probabilities(eta: float, mean_photons: np.ndarray, n_outcomes: int) -> np.ndarray:
    """l[n, j] = (eta mu_j)^n exp(-eta mu_j) / n! with the complement as last row."""
    n = np.arange(n_outcomes - 1)[:, None]
    rows = stats.poisson.pmf(n, eta * np.asarray(mean_photons)[None, :])
    return np.vstack([rows, 1.0 - rows.sum(axis=0)])


def model_comparison(povm: Povm, eta_hat: float, problem: TomographyProblem) -> pd.DataFrame:
    """
    Per-probe fidelities between the observed frequencies p, the linear model
    l (efficiency ``eta_hat``) and the reconstruction r = Pi q.
    """
    if problem.mean_photons is None:
        raise DimensionError("model comparison needs the probe mean photon numbers")
    if povm.truncation != problem.truncation:
        raise DimensionError(
            f"POVM truncation {povm.truncation} differs from problem truncation {problem.truncation}"
        )
    observed = _merge_outcomes(problem.observed_probs, povm.n_outcomes)
    r = povm.elements @ problem.probe_matrix
    l = linear_model_probabilities(eta_hat, problem.mean_photons, povm.n_outcomes)
    rows = []
    for j, mu in enumerate(problem.mean_photons):
        rows.append({
            "probe": j,
            "mean_photons": float(mu),
            "fidelity_p_l": outcome_fidelity(observed[:, j], l[:, j]),
            "fidelity_p_r": outcome_fidelity(observed[:, j], r[:, j]),
            "fidelity_l_r": outcome_fidelity(l[:, j], r[:, j]),
        })
    return pd.DataFrame(rows)


def povm_fidelity_report(reconstructed: Povm, eta: float) -> pd.DataFrame:
    """Per-m fidelity of a reconstruction against the linear POVM of efficiency ``eta``."""
    reference = linear_povm(eta, reconstructed.n_outcomes, reconstructed.truncation)
    fidelity = povm_fidelity(reconstructed, reference)
    return pd.DataFrame({"m": np.arange(reconstructed.truncation), "fidelity": fidelity})
