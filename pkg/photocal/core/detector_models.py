"""
Phase-insensitive detector POVMs.

A POVM is stored as the matrix Pi[n, m]: probability of outcome n given m
incident photons. The last outcome is always the complement of the others, so
every column sums to one.
"""

from dataclasses import dataclass
from typing import Any, Dict

import numpy as np
import pandas as pd
from scipy.linalg import toeplitz
from scipy.special import comb, gammaln, xlog1py, xlogy

from .exceptions import DimensionError
from .photon_stats import PhotonNumberDistribution

POVM_TOLERANCE = 1e-9
CLAMP_WIDTH = 1e-12


@dataclass(frozen=True, eq=False)
class Povm:
    """
    Fock-diagonal POVM, rows are outcomes n = 0..N-1 and columns photon
    numbers m = 0..M-1.
    """
    elements: np.ndarray
    tolerance: float = POVM_TOLERANCE

    def __post_init__(self):
        elements = np.array(self.elements, dtype=float)
        if elements.ndim != 2 or 0 in elements.shape:
            raise DimensionError("POVM elements must be a non-empty N x M matrix")
        if np.any(~np.isfinite(elements)):
            raise ValueError("POVM contains non-finite entries")
        if elements.min() < -CLAMP_WIDTH or elements.max() > 1.0 + CLAMP_WIDTH:
            raise ValueError(
                f"POVM entries outside [0, 1]: min={elements.min():.3e}, max={elements.max():.3e}"
            )
        residual = np.abs(elements.sum(axis=0) - 1.0).max()
        if residual > self.tolerance:
            raise ValueError(f"POVM columns do not sum to one (max residual {residual:.3e})")
        elements = np.clip(elements, 0.0, 1.0)
        elements.setflags(write=False)
        object.__setattr__(self, "elements", elements)

    @property
    def n_outcomes(self) -> int:
        return int(self.elements.shape[0])

    @property
    def truncation(self) -> int:
        return int(self.elements.shape[1])

    def column(self, m: int) -> np.ndarray:
        return self.elements[:, m]

    def column_residual(self) -> float:
        """Largest deviation of a column sum from one."""
        return float(np.abs(self.elements.sum(axis=0) - 1.0).max())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "n_outcomes": self.n_outcomes,
            "truncation": self.truncation,
            "elements": self.elements.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], tolerance: float = POVM_TOLERANCE) -> "Povm":
        elements = np.asarray(data["elements"], dtype=float)
        if elements.ndim != 2:
            raise DimensionError("POVM 'elements' must be a 2-D array")
        expected = (int(data.get("n_outcomes", elements.shape[0])),
                    int(data.get("truncation", elements.shape[1])))
        if elements.shape != expected:
            raise DimensionError(f"POVM elements have shape {elements.shape}, declared {expected}")
        return cls(elements, tolerance=tolerance)

    def to_frame(self) -> pd.DataFrame:
        """Table with one row per outcome and one column per photon number."""
        frame = pd.DataFrame(self.elements, columns=[str(m) for m in range(self.truncation)])
        frame.index.name = "n"
        return frame


def _clamped(elements: np.ndarray) -> np.ndarray:
    low, high = elements.min(), elements.max()
    assert low >= -CLAMP_WIDTH and high <= 1.0 + CLAMP_WIDTH, (
        f"clamp width exceeded: [{low:.3e}, {high:.3e}]"
    )
    return np.clip(elements, 0.0, 1.0)


def _with_overflow_row(rows: np.ndarray) -> np.ndarray:
    """Append the complement outcome so every column sums to one."""
    overflow = 1.0 - rows.sum(axis=0)
    return _clamped(np.vstack([rows, overflow[None, :]]))


def binomial_matrix(eta: float, n_rows: int, truncation: int) -> np.ndarray:
    """B[n, m] = C(m, n) eta^n (1 - eta)^(m - n) for n < n_rows, computed in log space."""
    n = np.arange(n_rows)[:, None]
    m = np.arange(truncation)[None, :]
    valid = n <= m
    k = np.where(valid, m - n, 0)
    log_comb = gammaln(m + 1) - gammaln(n + 1) - gammaln(k + 1)
    log_b = log_comb + xlogy(n, eta) + xlog1py(k, -eta)
    return np.where(valid, np.exp(log_b), 0.0)


def _check_range(eta: float, n_outcomes: int, truncation: int):
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"efficiency must lie in [0, 1], got {eta}")
    if n_outcomes < 1 or truncation < 1:
        raise ValueError("n_outcomes and truncation must be >= 1")


def linear_povm(eta: float, n_outcomes: int, truncation: int) -> Povm:
    """
    Linear (binomial) photon counter with quantum efficiency ``eta``.

    Rows 0..N-2 are the binomial probabilities; row N-1 collects everything
    else.
    """
    _check_range(eta, n_outcomes, truncation)
    rows = binomial_matrix(eta, n_outcomes - 1, truncation)
    return Povm(_with_overflow_row(rows))


def dark_count_elements(eta: float, gamma: float, n_outcomes: int, truncation: int) -> np.ndarray:
    """
    Linear counter convolved with Poissonian background of mean ``gamma``.

    No sign check on ``gamma``: likelihood profiles evaluate it slightly below
    zero.
    """
    rows = binomial_matrix(eta, n_outcomes - 1, truncation)
    j = np.arange(n_outcomes - 1)
    background = np.exp(-gamma) * np.power(gamma, j) / np.exp(gammaln(j + 1))
    mixing = np.tril(toeplitz(background))
    convolved = mixing @ rows
    overflow = 1.0 - convolved.sum(axis=0)
    return np.vstack([convolved, overflow[None, :]])


def dark_count_povm(eta: float, gamma: float, n_outcomes: int, truncation: int) -> Povm:
    """Linear counter with Poissonian dark counts, gamma per pulse."""
    _check_range(eta, n_outcomes, truncation)
    if gamma < 0:
        raise ValueError(f"dark count mean must be non-negative, got {gamma}")
    return Povm(_clamped(dark_count_elements(eta, gamma, n_outcomes, truncation)))


def tree_povm(eta: float, truncation: int, n_spads: int = 2) -> Povm:
    """
    Detector tree: a balanced splitter feeding ``n_spads`` on/off detectors of
    equal efficiency. Outcome j is the number of detectors that clicked.

    P(j | m) = C(k, j) sum_i (-1)^(j-i) C(j, i) (1 - eta + i eta / k)^m
    """
    _check_range(eta, n_spads + 1, truncation)
    k = n_spads
    m = np.arange(truncation)
    elements = np.zeros((k + 1, truncation))
    for j in range(k + 1):
        acc = np.zeros(truncation)
        for i in range(j + 1):
            base = 1.0 - eta + i * eta / k
            acc += (-1) ** (j - i) * comb(j, i, exact=True) * np.power(base, m)
        elements[j] = comb(k, j, exact=True) * acc
    # inclusion-exclusion leaves ~1e-16 cancellation noise
    return Povm(_clamped(np.where(np.abs(elements) < CLAMP_WIDTH, 0.0, elements)))


def apply_povm(povm: Povm, distribution: PhotonNumberDistribution) -> np.ndarray:
    """Outcome probabilities p_n = sum_m Pi[n, m] P(m)."""
    if povm.truncation != distribution.truncation:
        raise DimensionError(
            f"POVM truncation {povm.truncation} does not match distribution truncation "
            f"{distribution.truncation}"
        )
    return povm.elements @ distribution.probs


def sample_outcome(povm: Povm, m: int, rng: np.random.Generator) -> int:
    """Draw one outcome for ``m`` incident photons."""
    if not 0 <= m < povm.truncation:
        raise DimensionError(f"photon number {m} outside truncation {povm.truncation}")
    cdf = np.cumsum(povm.column(m))
    return int(min(np.searchsorted(cdf, rng.random(), side="right"), povm.n_outcomes - 1))


def sample_outcomes(povm: Povm, photons: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Vectorised inverse-CDF sampling, one outcome per entry of ``photons``."""
    photons = np.asarray(photons, dtype=int)
    if photons.size and (photons.min() < 0 or photons.max() >= povm.truncation):
        raise DimensionError(f"photon numbers must lie in [0, {povm.truncation})")
    cdf = np.cumsum(povm.elements, axis=0)
    u = rng.random(photons.size)
    outcomes = (u[None, :] >= cdf[:-1, photons]).sum(axis=0)
    return outcomes.astype(int)


def povm_fidelity(a: Povm, b: Povm) -> np.ndarray:
    """Per-column fidelity F_m = sum_n sqrt(a[n, m] b[n, m])."""
    if a.elements.shape != b.elements.shape:
        raise DimensionError(f"POVM shapes differ: {a.elements.shape} vs {b.elements.shape}")
    return np.sqrt(a.elements * b.elements).sum(axis=0)

