"""
Twin-beam detector tomography.

Step one recovers the pair-number distribution r_m from the tomographer's
click/no-click statistics at several efficiencies (on/off method, solved by
expectation-maximization). Step two inverts

    p(n, no-click | eta) = sum_m Pi[n, m] r_m (1 - eta)^m
    p(n, click    | eta) = sum_m Pi[n, m] r_m (1 - (1 - eta)^m)

for the DUT POVM with the shared constrained least-squares solver.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.special import xlogy

from .constrained_ls import DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE, SimplexLeastSquares
from .detector_models import Povm
from .exceptions import DataSchemaError, DimensionError, UnderdeterminedError
from .models import TwinBeamRunCounts
from .photon_stats import PhotonNumberDistribution
from .rng import parallel_map

logger = logging.getLogger(__name__)

DEFAULT_TRUNCATION = 6
EM_TOLERANCE = 1e-9
EM_MAX_ITERATIONS = 10_000
POLISH_TOLERANCE = 1e-12
POLISH_DECREMENT = 1e-24
POLISH_MAX_ITERATIONS = 200
KKT_TOLERANCE = 1e-10
LINE_SEARCH_THRESHOLD = 1e-6
RANK_RTOL = 1e-8
MIN_SETTINGS = 3


@dataclass(frozen=True, eq=False)
class OnOffDataset:
    """
    Joint frequencies ``joint[v, n, c]`` of DUT outcome n and tomographer
    click c (0 = no click, 1 = click) at setting v, normalised per setting.
    """
    etas: np.ndarray
    joint: np.ndarray
    shots: Optional[np.ndarray] = None

    def __post_init__(self):
        etas = np.asarray(self.etas, dtype=float)
        joint = np.asarray(self.joint, dtype=float)
        if etas.ndim != 1 or joint.ndim != 3 or joint.shape[0] != etas.size or joint.shape[2] != 2:
            raise DimensionError(
                f"joint frequencies of shape {joint.shape} do not match {etas.size} settings"
            )
        if np.any((etas <= 0) | (etas > 1)):
            raise DataSchemaError("tomographer efficiencies must lie in (0, 1]")
        if np.any(joint < 0) or np.any(np.abs(joint.sum(axis=(1, 2)) - 1.0) > 1e-9):
            raise DataSchemaError("joint frequencies must be non-negative and sum to one per setting")
        shots = np.ones(etas.size) if self.shots is None else np.asarray(self.shots, dtype=float)
        if shots.shape != etas.shape or np.any(shots <= 0):
            raise DataSchemaError("every setting needs a positive number of shots")
        object.__setattr__(self, "etas", etas)
        object.__setattr__(self, "joint", joint)
        object.__setattr__(self, "shots", shots)

    @classmethod
    def from_counts(cls, run: TwinBeamRunCounts) -> "OnOffDataset":
        shots = run.shots
        if np.any(shots == 0):
            raise DataSchemaError("a tomographer setting has no retained shots")
        return cls(run.etas, run.counts / shots[:, None, None], shots)

    @classmethod
    def from_model(cls, distribution: PhotonNumberDistribution, povm: Povm,
                   etas: Sequence[float], shots: Optional[Sequence[float]] = None) -> "OnOffDataset":
        """Noiseless dataset holding the forward-model probabilities."""
        no_click, click = forward_probabilities(distribution, povm, etas)
        return cls(np.asarray(etas), np.stack([no_click, click], axis=-1), shots)

    @property
    def n_settings(self) -> int:
        return int(self.etas.size)

    @property
    def n_outcomes(self) -> int:
        return int(self.joint.shape[1])

    @property
    def no_click_freq(self) -> np.ndarray:
        """f(no-click, eta_v)."""
        return self.joint[:, :, 0].sum(axis=1)

    @property
    def outcome_freqs(self) -> np.ndarray:
        """f(n) pooled over settings."""
        pooled = (self.joint.sum(axis=2) * self.shots[:, None]).sum(axis=0)
        return pooled / pooled.sum()

    @property
    def conditional_freqs(self) -> np.ndarray:
        """
        f(c | n, eta_v) of shape (V, N, 2). Outcomes never seen at a setting
        take that setting's unconditional click statistics.
        """
        marginal = self.joint.sum(axis=2, keepdims=True)
        fallback = np.stack([self.no_click_freq, 1.0 - self.no_click_freq], axis=-1)[:, None, :]
        return np.where(marginal > 0, self.joint / np.where(marginal > 0, marginal, 1.0), fallback)

    def weights(self) -> np.ndarray:
        return self.shots / self.shots.sum()

    def permuted(self, order: Sequence[int]) -> "OnOffDataset":
        order = np.asarray(order)
        return OnOffDataset(self.etas[order], self.joint[order], self.shots[order])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "etas": self.etas.tolist(),
            "shots": self.shots.tolist(),
            "freqs": {
                "no_click": self.no_click_freq.tolist(),
                "outcome": self.outcome_freqs.tolist(),
                "joint": self.joint.tolist(),
            },
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "OnOffDataset":
        try:
            shots = data.get("shots")
            if np.isscalar(shots):
                shots = np.full(len(data["etas"]), float(shots))
            return cls(np.asarray(data["etas"]), np.asarray(data["freqs"]["joint"]), shots)
        except KeyError as exc:
            raise DataSchemaError(f"on/off dataset is missing field {exc}") from exc


def no_click_matrix(etas: Sequence[float], truncation: int) -> np.ndarray:
    """A[v, m] = (1 - eta_v)^m."""
    etas = np.asarray(etas, dtype=float)
    return np.power(1.0 - etas[:, None], np.arange(truncation)[None, :])


def forward_probabilities(distribution: PhotonNumberDistribution, povm: Povm,
                          etas: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    """
    p(n, no-click | eta_v) and p(n, click | eta_v), each of shape (V, N).
    Their sum over the click channel is the DUT outcome marginal Pi r.
    """
    if povm.truncation != distribution.truncation:
        raise DimensionError(
            f"POVM truncation {povm.truncation} differs from distribution truncation "
            f"{distribution.truncation}"
        )
    A = no_click_matrix(etas, distribution.truncation)
    weighted = povm.elements * distribution.probs[None, :]
    no_click = A @ weighted.T
    click = (1.0 - A) @ weighted.T
    return no_click, click


def effective_rank(design: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Number of singular values above ``rtol`` times the largest."""
    singular = np.linalg.svd(np.asarray(design, dtype=float), compute_uv=False)
    if singular.size == 0 or singular[0] == 0:
        return 0
    return int(np.sum(singular > rtol * singular[0]))


# --------------------------------------------------------------------------
# Photon-number distribution
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DistributionReconstruction:
    distribution: PhotonNumberDistribution
    iterations: int
    converged: bool
    log_likelihood: float


def _check_settings(dataset: OnOffDataset):
    distinct = np.unique(dataset.etas).size
    if distinct < MIN_SETTINGS:
        raise UnderdeterminedError(
            f"on/off reconstruction needs at least {MIN_SETTINGS} distinct efficiencies, got {distinct}",
            context={"etas": dataset.etas.tolist()},
        )


def _safe_ratio(numerator: np.ndarray, denominator: np.ndarray) -> np.ndarray:
    return np.divide(numerator, denominator, out=np.zeros_like(numerator),
                     where=denominator > 0)


def em_step(rho: np.ndarray, A: np.ndarray, f_off: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """
    One on/off EM update over both channels. The result is non-negative and
    sums to the shot-weighted total of the observed frequencies, i.e. one.
    """
    p_off = A @ rho
    ratio_off = _safe_ratio(f_off, p_off)
    ratio_on = _safe_ratio(1.0 - f_off, 1.0 - p_off)
    factor = weights @ (A * ratio_off[:, None] + (1.0 - A) * ratio_on[:, None])
    return rho * factor


def _on_off_log_likelihood(rho: np.ndarray, A: np.ndarray, f_off: np.ndarray,
                           weights: np.ndarray) -> float:
    p_off = np.clip(A @ rho, 1e-300, 1.0)
    p_on = np.clip(1.0 - A @ rho, 1e-300, 1.0)
    return float(weights @ (f_off * np.log(p_off) + (1.0 - f_off) * np.log(p_on)))


def relative_change(updated: np.ndarray, previous: np.ndarray) -> float:
    """max |updated - previous| scaled by the largest entry of ``previous``."""
    scale = max(float(np.abs(previous).max()), np.finfo(float).tiny)
    return float(np.abs(updated - previous).max()) / scale


@dataclass(frozen=True, eq=False)
class EmRun:
    rho: np.ndarray
    iterations: int
    converged: bool
    change: float


def em_iterate(rho: np.ndarray, A: np.ndarray, f_off: np.ndarray, weights: np.ndarray,
               tolerance: float = EM_TOLERANCE,
               max_iterations: int = EM_MAX_ITERATIONS) -> EmRun:
    """Repeat ``em_step`` until the relative change drops below ``tolerance``."""
    change = float("inf")
    iteration = 0
    for iteration in range(1, max_iterations + 1):
        updated = em_step(rho, A, f_off, weights)
        updated /= updated.sum()
        change = relative_change(updated, rho)
        rho = updated
        if change < tolerance:
            return EmRun(rho, iteration, True, change)
    return EmRun(rho, iteration, False, change)


def _negative_log_likelihood(rho: np.ndarray, A: np.ndarray, f_off: np.ndarray,
                             weights: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Value, gradient and Hessian of the on/off negative log-likelihood."""
    p_off = np.clip(A @ rho, 0.0, 1.0)
    p_on = 1.0 - p_off
    f_on = 1.0 - f_off
    with np.errstate(divide="ignore"):
        value = -float(weights @ (xlogy(f_off, p_off) + xlogy(f_on, p_on)))
    score = weights * (_safe_ratio(f_off, p_off) - _safe_ratio(f_on, p_on))
    curvature = weights * (_safe_ratio(f_off, p_off ** 2) + _safe_ratio(f_on, p_on ** 2))
    return value, -A.T @ score, A.T @ (curvature[:, None] * A)


def _admit_entry(rho: np.ndarray, j: int, A: np.ndarray, f_off: np.ndarray,
                 weights: np.ndarray, value: float) -> np.ndarray:
    # Move mass toward e_j; the direction is a descent direction when j violates the KKT test.
    step = 0.5
    target = np.zeros_like(rho)
    target[j] = 1.0
    while step > 1e-12:
        trial = (1.0 - step) * rho + step * target
        if _negative_log_likelihood(trial, A, f_off, weights)[0] < value:
            return trial
        step *= 0.5
    return rho


def newton_polish(rho: np.ndarray, A: np.ndarray, f_off: np.ndarray, weights: np.ndarray,
                  tolerance: float = POLISH_TOLERANCE,
                  max_iterations: int = POLISH_MAX_ITERATIONS) -> EmRun:
    """
    Active-set Newton iteration on the probability simplex for the on/off
    likelihood, started from an EM iterate.

    Newton steps are taken on the current support under the normalisation
    constraint and truncated at the non-negativity boundary. An entry that
    reaches zero leaves the support, and a zero entry whose KKT condition is
    violated is brought back. The likelihood is convex in ``rho``, so the
    iteration stops at the maximum-likelihood point that EM converges to.
    """
    rho = np.clip(np.asarray(rho, dtype=float), 0.0, None)
    rho /= rho.sum()
    support = rho > 0
    iteration = 0
    change = float("inf")
    for iteration in range(1, max_iterations + 1):
        value, grad, hess = _negative_log_likelihood(rho, A, f_off, weights)
        S = np.flatnonzero(support)
        k = S.size
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = hess[np.ix_(S, S)]
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        solution = np.linalg.lstsq(kkt, np.append(-grad[S], 0.0), rcond=None)[0]
        direction = np.zeros_like(rho)
        direction[S] = solution[:k]
        change = relative_change(rho + direction, rho)
        decrement = float(-grad[S] @ solution[:k])

        if change < tolerance or decrement < POLISH_DECREMENT:
            multiplier = -float(grad[S].mean())
            reduced = grad + multiplier
            violating = np.flatnonzero(~support & (reduced < -KKT_TOLERANCE))
            if violating.size == 0:
                return EmRun(rho, iteration, True, change)
            j = int(violating[np.argmin(reduced[violating])])
            rho = _admit_entry(rho, j, A, f_off, weights, value)
            support = rho > 0
            continue

        shrinking = direction < 0
        limits = -rho[shrinking] / direction[shrinking]
        max_step = min(1.0, float(limits.min())) if limits.size else 1.0
        step = max_step
        if np.abs(direction).max() > LINE_SEARCH_THRESHOLD:
            slope = float(grad @ direction)
            while step > 1e-16 and _negative_log_likelihood(
                    rho + step * direction, A, f_off, weights)[0] > value + 1e-4 * step * slope:
                step *= 0.5
            if step <= 1e-16:
                break

        rho = rho + step * direction
        if step == max_step and max_step < 1.0:
            blocking = np.flatnonzero(shrinking)[np.argmin(limits)]
            rho[blocking] = 0.0
        rho = np.clip(rho, 0.0, None)
        rho /= rho.sum()
        support = rho > 0
    return EmRun(rho, iteration, False, change)


def reconstruct_photon_distribution(dataset: OnOffDataset,
                                    truncation: int = DEFAULT_TRUNCATION,
                                    tolerance: float = EM_TOLERANCE,
                                    max_iterations: int = EM_MAX_ITERATIONS) -> DistributionReconstruction:
    """
    Maximum-likelihood pair-number distribution from the unconditional
    no-click frequencies.

    EM runs from the uniform distribution until the relative change
    max|d rho| / max|rho| drops below ``tolerance``. Its iterate is then
    polished by ``newton_polish``, which reaches the same fixed point where
    EM alone slows down (entries at or near zero, poorly separated
    efficiencies). Both stages keep rho non-negative and normalised.
    """
    _check_settings(dataset)
    if truncation < 1:
        raise ValueError("truncation must be >= 1")
    A = no_click_matrix(dataset.etas, truncation)
    f_off = np.clip(dataset.no_click_freq, 0.0, 1.0)
    weights = dataset.weights()

    em = em_iterate(np.full(truncation, 1.0 / truncation), A, f_off, weights,
                    tolerance, max_iterations)
    polished = newton_polish(em.rho, A, f_off, weights, tolerance=min(tolerance, POLISH_TOLERANCE))
    rho = polished.rho
    converged = polished.converged
    if not converged:
        # keep the EM iterate when the polish could not improve on it
        if _negative_log_likelihood(rho, A, f_off, weights)[0] > \
                _negative_log_likelihood(em.rho, A, f_off, weights)[0]:
            rho = em.rho
        converged = em.converged
    iterations = em.iterations + polished.iterations

    log_likelihood = _on_off_log_likelihood(rho, A, f_off, weights)
    if converged:
        logger.info("On/off reconstruction converged",
                    extra={"em_iterations": em.iterations, "polish_iterations": polished.iterations,
                           "log_likelihood": log_likelihood})
    else:
        logger.warning("On/off reconstruction stopped before convergence",
                       extra={"iterations": iterations, "change": em.change})
    return DistributionReconstruction(PhotonNumberDistribution(rho), iterations, converged,
                                      log_likelihood)


def reconstruct_photon_distribution_ls(dataset: OnOffDataset,
                                       truncation: int = DEFAULT_TRUNCATION,
                                       regularization_weight: float = 0.0,
                                       max_iterations: int = DEFAULT_MAX_ITERATIONS,
                                       tolerance: float = DEFAULT_TOLERANCE) -> DistributionReconstruction:
    """Constrained least-squares counterpart of the EM reconstruction."""
    _check_settings(dataset)
    A = no_click_matrix(dataset.etas, truncation)
    design = np.hstack([A.T, (1.0 - A).T])
    f_off = dataset.no_click_freq
    target = np.concatenate([f_off, 1.0 - f_off])[None, :]
    solver = SimplexLeastSquares(design, target, regularization_weight, simplex_axis=1)
    result = solver.solve(max_iterations=max_iterations, tolerance=tolerance)
    rho = result.solution[0]
    return DistributionReconstruction(
        PhotonNumberDistribution(rho / rho.sum()), result.iterations, result.converged,
        _on_off_log_likelihood(rho, A, f_off, dataset.weights()),
    )


# --------------------------------------------------------------------------
# POVM
# --------------------------------------------------------------------------

def povm_design(distribution: PhotonNumberDistribution, etas: Sequence[float]) -> np.ndarray:
    """Design W (M x 2V): no-click columns followed by click columns."""
    A = no_click_matrix(etas, distribution.truncation)
    r = distribution.probs[:, None]
    return np.hstack([r * A.T, r * (1.0 - A).T])


def povm_target(dataset: OnOffDataset) -> np.ndarray:
    """p_exp(n, c | eta_v) = f(n) f(c | n, eta_v), laid out to match ``povm_design``."""
    f_n = dataset.outcome_freqs[:, None]
    conditional = dataset.conditional_freqs
    return np.hstack([f_n * conditional[:, :, 0].T, f_n * conditional[:, :, 1].T])


@dataclass(frozen=True, eq=False)
class PovmTwinBeamResult:
    povm: Povm
    objective: float
    converged: bool
    iterations: int
    effective_rank: int
    history: List[Tuple[int, float, float]] = field(default_factory=list)


def reconstruct_povm_twin_beam(dataset: OnOffDataset, distribution: PhotonNumberDistribution,
                               regularization_weight: float = 1e-4,
                               max_iterations: int = DEFAULT_MAX_ITERATIONS,
                               tolerance: float = DEFAULT_TOLERANCE) -> PovmTwinBeamResult:
    """
    Least-squares DUT POVM (N x M) under the POVM constraints with a
    second-difference smoothness penalty along m.
    """
    design = povm_design(distribution, dataset.etas)
    rank = effective_rank(design)
    if rank < distribution.truncation:
        logger.warning(
            "Twin-beam design matrix is rank deficient",
            extra={"effective_rank": rank, "truncation": distribution.truncation},
        )
    solver = SimplexLeastSquares(design, povm_target(dataset), regularization_weight,
                                 simplex_axis=0)
    result = solver.solve(max_iterations=max_iterations, tolerance=tolerance)
    return PovmTwinBeamResult(
        povm=Povm(result.solution),
        objective=result.objective,
        converged=result.converged,
        iterations=result.iterations,
        effective_rank=rank,
        history=result.history,
    )


@dataclass(frozen=True, eq=False)
class TwinBeamReconstruction:
    distribution: PhotonNumberDistribution
    povm: Povm
    distribution_converged: bool
    povm_converged: bool
    effective_rank: int

    def to_dict(self) -> Dict[str, Any]:
        return {
            "distribution": self.distribution.to_dict(),
            "povm": self.povm.to_dict(),
            "distribution_converged": self.distribution_converged,
            "povm_converged": self.povm_converged,
            "effective_rank": self.effective_rank,
        }


def reconstruct_twin_beam(dataset: OnOffDataset, truncation: int = DEFAULT_TRUNCATION,
                          regularization_weight: float = 1e-4,
                          reference: Optional[PhotonNumberDistribution] = None,
                          em_tolerance: float = EM_TOLERANCE,
                          em_max_iterations: int = EM_MAX_ITERATIONS,
                          max_iterations: int = DEFAULT_MAX_ITERATIONS,
                          tolerance: float = DEFAULT_TOLERANCE) -> TwinBeamReconstruction:
    """Both steps; a known ``reference`` distribution skips the on/off step."""
    if reference is None:
        recovered = reconstruct_photon_distribution(dataset, truncation, em_tolerance,
                                                    em_max_iterations)
        distribution, em_converged = recovered.distribution, recovered.converged
    else:
        distribution, em_converged = reference, True
    povm = reconstruct_povm_twin_beam(dataset, distribution, regularization_weight,
                                      max_iterations, tolerance)
    return TwinBeamReconstruction(distribution, povm.povm, em_converged, povm.converged,
                                  povm.effective_rank)


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ResamplingSummary:
    """Entrywise mean and standard deviation over independent reconstructions."""
    repeats: int
    distribution_mean: np.ndarray
    distribution_std: np.ndarray
    povm_mean: np.ndarray
    povm_std: np.ndarray

    def to_frame(self) -> pd.DataFrame:
        """Long table with one row per distribution entry and POVM entry."""
        rows = []
        for m, (mean, std) in enumerate(zip(self.distribution_mean, self.distribution_std)):
            rows.append({"quantity": "r", "n": None, "m": m, "mean": mean, "std": std})
        n_outcomes, truncation = self.povm_mean.shape
        for n in range(n_outcomes):
            for m in range(truncation):
                rows.append({"quantity": "povm", "n": n, "m": m,
                             "mean": self.povm_mean[n, m], "std": self.povm_std[n, m]})
        return pd.DataFrame(rows, columns=["quantity", "n", "m", "mean", "std"])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "repeats": self.repeats,
            "distribution_mean": self.distribution_mean.tolist(),
            "distribution_std": self.distribution_std.tolist(),
            "povm_mean": self.povm_mean.tolist(),
            "povm_std": self.povm_std.tolist(),
        }


def uncertainty_by_resampling(run: Callable[[int], TwinBeamReconstruction], repeats: int,
                              threads: int = 1) -> ResamplingSummary:
    """
    Repeat the full pipeline ``repeats`` times; ``run(repeat)`` must simulate
    and reconstruct an independent dataset for each repeat index.
    """
    if repeats < 2:
        raise UnderdeterminedError("resampling needs at least two repeats",
                                   context={"repeats": repeats})
    results = parallel_map(run, range(repeats), threads)
    distributions = np.stack([r.distribution.probs for r in results])
    povms = np.stack([r.povm.elements for r in results])
    not_converged = sum(not (r.distribution_converged and r.povm_converged) for r in results)
    if not_converged:
        logger.warning("Some resampled reconstructions did not converge",
                       extra={"count": not_converged, "repeats": repeats})
    return ResamplingSummary(
        repeats=repeats,
        distribution_mean=distributions.mean(axis=0),
        distribution_std=distributions.std(axis=0, ddof=1),
        povm_mean=povms.mean(axis=0),
        povm_std=povms.std(axis=0, ddof=1),
    )
