"""
Photon-number distributions.

Distributions are stored as read-only probability vectors over Fock
occupation m = 0..M-1. Poisson probabilities are computed in log space so
truncations of several hundred photons stay finite.
"""

import math
from dataclasses import dataclass
from typing import Any, Dict, Iterable, List, Sequence

import numpy as np
from scipy import stats
from scipy.special import gammaln, xlogy

from .exceptions import DimensionError, TruncationError

DEFAULT_TRUNCATION_TOLERANCE = 1e-9


def default_truncation(mu: float) -> int:
    """Truncation keeping the Poisson tail below ~1e-9 for 6.5 <= mu <= 130."""
    return int(math.ceil(mu + 10.0 * math.sqrt(mu) + 10.0))


def _readonly(values: Iterable[float]) -> np.ndarray:
    array = np.array(values, dtype=float)
    array.setflags(write=False)
    return array


@dataclass(frozen=True, eq=False)
class PhotonNumberDistribution:
    """
    Probability mass over photon number m = 0..M-1.

    Attributes:
        probs: Probabilities indexed by photon number
        tolerance: Missing mass allowed by the truncation
    """
    probs: np.ndarray
    tolerance: float = DEFAULT_TRUNCATION_TOLERANCE

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=float)
        if probs.ndim != 1 or probs.size == 0:
            raise DimensionError("distribution must be a non-empty 1-D vector")
        if np.any(~np.isfinite(probs)):
            raise ValueError("distribution contains non-finite entries")
        if np.any(probs < -1e-15):
            raise ValueError(f"negative probability {probs.min():.3e}")
        total = probs.sum()
        if total < 1.0 - self.tolerance or total > 1.0 + 1e-9:
            raise ValueError(
                f"distribution sums to {total:.12f}, outside [1 - {self.tolerance:g}, 1]"
            )
        object.__setattr__(self, "probs", _readonly(np.clip(probs, 0.0, None)))

    @property
    def truncation(self) -> int:
        return int(self.probs.size)

    def mean(self) -> float:
        return float(np.arange(self.truncation) @ self.probs)

    def to_dict(self) -> Dict[str, Any]:
        return {"truncation": self.truncation, "probs": self.probs.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any], tolerance: float = DEFAULT_TRUNCATION_TOLERANCE):
        probs = np.asarray(data["probs"], dtype=float)
        if "truncation" in data and int(data["truncation"]) != probs.size:
            raise DimensionError(
                f"declared truncation {data['truncation']} does not match {probs.size} entries"
            )
        return cls(probs, tolerance=tolerance)


@dataclass(frozen=True, eq=False)
class ProbeEnsemble:
    """
    Set of coherent probe states, one mean photon number per probe.
    """
    mean_photons: np.ndarray
    truncation: int

    def __post_init__(self):
        mus = np.asarray(self.mean_photons, dtype=float)
        if mus.ndim != 1 or mus.size == 0:
            raise ValueError("probe ensemble needs at least one mean photon number")
        if np.any(mus <= 0):
            raise ValueError("all probe mean photon numbers must be positive")
        if self.truncation < 1:
            raise ValueError("truncation must be >= 1")
        object.__setattr__(self, "mean_photons", _readonly(mus))

    @property
    def size(self) -> int:
        return int(self.mean_photons.size)

    @classmethod
    def geometric(cls, mu_max: float, mu_min: float, count: int, truncation: int) -> "ProbeEnsemble":
        """Attenuation ladder from ``mu_max`` down to ``mu_min``."""
        return cls(np.geomspace(mu_max, mu_min, count), truncation)

    def distributions(self, fold_tail: bool = False) -> List[PhotonNumberDistribution]:
        return [poisson_pmf(mu, self.truncation, fold_tail=fold_tail) for mu in self.mean_photons]

    def probe_matrix(self, fold_tail: bool = True) -> np.ndarray:
        """Matrix q_{mj} (M x S); tails beyond M-1 are folded into the last row by default."""
        return np.column_stack([d.probs for d in self.distributions(fold_tail=fold_tail)])


def point_mass(m: int, truncation: int) -> PhotonNumberDistribution:
    """Fock state |m>."""
    if not 0 <= m < truncation:
        raise DimensionError(f"photon number {m} outside truncation {truncation}")
    probs = np.zeros(truncation)
    probs[m] = 1.0
    return PhotonNumberDistribution(probs)


def poisson_pmf(
    mu: float,
    truncation: int,
    tolerance: float = DEFAULT_TRUNCATION_TOLERANCE,
    fold_tail: bool = False,
) -> PhotonNumberDistribution:
    """
    Poisson photon statistics of a coherent state with mean ``mu``.

    Args:
        mu: Mean photon number (mu = 0 gives the vacuum)
        truncation: Number of Fock levels M
        tolerance: Largest tail mass beyond M-1 that is accepted
        fold_tail: Add the tail mass to the last level instead of failing

    Raises:
        TruncationError: Tail mass exceeds ``tolerance`` and ``fold_tail`` is off
    """
    if mu < 0:
        raise ValueError(f"mean photon number must be non-negative, got {mu}")
    if truncation < 1:
        raise ValueError("truncation must be >= 1")

    m = np.arange(truncation)
    if mu == 0:
        probs = np.zeros(truncation)
        probs[0] = 1.0
        return PhotonNumberDistribution(probs, tolerance)

    probs = np.exp(-mu + xlogy(m, mu) - gammaln(m + 1))
    tail = float(stats.poisson.sf(truncation - 1, mu))
    if fold_tail:
        probs[-1] += tail
        return PhotonNumberDistribution(probs, tolerance)
    if tail > tolerance:
        required = int(stats.poisson.isf(tolerance, mu)) + 2
        raise TruncationError(
            f"Poisson tail mass {tail:.3e} at mu={mu} exceeds tolerance {tolerance:g}",
            required_truncation=required,
            suggestion=f"use truncation >= {required}",
        )
    return PhotonNumberDistribution(probs, tolerance)


def binomial_thinning(dist: PhotonNumberDistribution, tau: float) -> PhotonNumberDistribution:
    """
    Pass a photon-number distribution through a channel of transmissivity ``tau``.

    Output entry m' is sum over m >= m' of C(m, m') tau^m' (1 - tau)^(m - m') P(m).
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"transmissivity must lie in [0, 1], got {tau}")
    M = dist.truncation
    m = np.arange(M)
    kernel = stats.binom.pmf(m[:, None], m[None, :], tau)
    return PhotonNumberDistribution(kernel @ dist.probs, dist.tolerance)


def distribution_fidelity(a: PhotonNumberDistribution, b: PhotonNumberDistribution) -> float:
    """Classical fidelity sum_m sqrt(a_m b_m)."""
    if a.truncation != b.truncation:
        raise DimensionError(f"truncations differ: {a.truncation} vs {b.truncation}")
    return float(np.clip(np.sqrt(a.probs * b.probs).sum(), 0.0, 1.0))


def outcome_fidelity(a: Sequence[float], b: Sequence[float]) -> float:
    """Fidelity between two outcome probability vectors of equal length."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionError(f"outcome vectors differ in shape: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.clip(a, 0, None) * np.clip(b, 0, None)).sum())
