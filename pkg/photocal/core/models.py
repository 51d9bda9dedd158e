"""
Core data models: count records produced by the simulators and consumed by
the estimators, and the efficiency estimates they return.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

from .exceptions import DataSchemaError, DimensionError


@dataclass(frozen=True)
class KlyshkoCountRecord:
    """
    Tallies of one coincidence-counting run.

    m_c: coincidences inside the window; m_vs_in / m_vs_out: valid starts with
    the correlation peak inside / delayed out of the window; m_B: valid starts
    with the source blocked; A: coincidences with the peak delayed out.
    """
    m_c: int
    m_vs_in: int
    m_vs_out: int
    m_B: int
    A: int

    FIELDS = ("m_c", "m_vs_in", "m_vs_out", "m_B", "A")

    def __post_init__(self):
        for name in self.FIELDS:
            value = getattr(self, name)
            if value < 0:
                raise DataSchemaError(f"count '{name}' must be non-negative, got {value}")
        if self.m_c > self.m_vs_in:
            raise DataSchemaError(
                f"coincidences ({self.m_c}) exceed valid starts ({self.m_vs_in})"
            )

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in self.FIELDS], dtype=float)

    def to_dict(self) -> Dict[str, int]:
        return {name: int(getattr(self, name)) for name in self.FIELDS}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "KlyshkoCountRecord":
        missing = [name for name in cls.FIELDS if name not in data]
        if missing:
            raise DataSchemaError(f"count record is missing {missing}")
        return cls(**{name: int(data[name]) for name in cls.FIELDS})


@dataclass(frozen=True)
class HeraldedPnrdCounts:
    """
    Per-peak event counts of a heralded PNRD run.

    C[i] counts heralded events with i detected photons, C_bar[i] the
    unheralded ones; n_p and n_a are trigger events with the PDC on and off.
    Counts may be non-integer when taken from published, background-scaled
    tables.
    """
    C: List[float]
    C_bar: List[float]
    n_p: int = 0
    n_a: int = 0

    def __post_init__(self):
        if len(self.C) == 0 or len(self.C_bar) == 0:
            raise DataSchemaError("peak counts must not be empty")
        if min(self.C) < 0 or min(self.C_bar) < 0 or self.n_p < 0 or self.n_a < 0:
            raise DataSchemaError("counts must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "HeraldedPnrdCounts":
        try:
            return cls(
                C=[float(c) for c in data["C"]],
                C_bar=[float(c) for c in data["C_bar"]],
                n_p=int(data.get("n_p", 0)),
                n_a=int(data.get("n_a", 0)),
            )
        except KeyError as exc:
            raise DataSchemaError(f"PNRD counts are missing field {exc}") from exc


@dataclass(frozen=True, eq=False)
class CoherentProbeCounts:
    """Outcome tallies N[n, j] for probes with mean photon numbers mu_j."""
    mean_photons: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        mus = np.asarray(self.mean_photons, dtype=float)
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 2 or counts.shape[1] != mus.size:
            raise DimensionError(
                f"counts of shape {counts.shape} do not match {mus.size} probes"
            )
        if counts.min(initial=0) < 0:
            raise DataSchemaError("counts must be non-negative")
        object.__setattr__(self, "mean_photons", mus)
        object.__setattr__(self, "counts", counts)

    @property
    def n_outcomes(self) -> int:
        return int(self.counts.shape[0])

    def to_dict(self) -> Dict[str, Any]:
        return {"mean_photons": self.mean_photons.tolist(), "counts": self.counts.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "CoherentProbeCounts":
        try:
            return cls(np.asarray(data["mean_photons"]), np.asarray(data["counts"]))
        except KeyError as exc:
            raise DataSchemaError(f"probe counts are missing field {exc}") from exc


@dataclass(frozen=True, eq=False)
class TwinBeamRunCounts:
    """
    Twin-beam tallies. ``counts[v, n, c]`` counts shots at tomographer setting
    v with DUT outcome n and tomographer click c (0 = no click, 1 = click).
    ``shots[v]`` is the number of retained shots at setting v.
    """
    etas: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        etas = np.asarray(self.etas, dtype=float)
        counts = np.asarray(self.counts, dtype=np.int64)
        if counts.ndim != 3 or counts.shape[0] != etas.size or counts.shape[2] != 2:
            raise DimensionError(
                f"twin-beam counts of shape {counts.shape} do not match {etas.size} settings"
            )
        object.__setattr__(self, "etas", etas)
        object.__setattr__(self, "counts", counts)

    @property
    def shots(self) -> np.ndarray:
        return self.counts.sum(axis=(1, 2))

    @property
    def n_outcomes(self) -> int:
        return int(self.counts.shape[1])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "etas": self.etas.tolist(),
            "shots": self.shots.tolist(),
            "counts": self.counts.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TwinBeamRunCounts":
        try:
            return cls(np.asarray(data["etas"]), np.asarray(data["counts"]))
        except KeyError as exc:
            raise DataSchemaError(f"twin-beam counts are missing field {exc}") from exc


@dataclass(frozen=True)
class UncertainValue:
    """Scalar with its standard uncertainty."""
    value: float
    std_uncertainty: float = 0.0

    def to_dict(self) -> Dict[str, float]:
        return {"value": self.value, "std_uncertainty": self.std_uncertainty}


@dataclass(frozen=True)
class UncertaintyContribution:
    """One row of an uncertainty budget; ``contribution`` is c_i * u(x_i)."""
    name: str
    value: float
    std_uncertainty: float
    sensitivity: float
    contribution: float


@dataclass(frozen=True)
class EfficiencyEstimate:
    """
    Efficiency value with standard uncertainty and its budget.

    The squared uncertainty is the sum of squared contributions plus the
    correlation terms in ``covariance_terms``.
    """
    value: float
    std_uncertainty: float
    contributions: List[UncertaintyContribution] = field(default_factory=list)
    covariance_terms: Dict[str, float] = field(default_factory=dict)
    label: Optional[str] = None

    def __post_init__(self):
        if not math.isfinite(self.value):
            raise ValueError("efficiency value must be finite")
        if self.std_uncertainty < 0 or not math.isfinite(self.std_uncertainty):
            raise ValueError("standard uncertainty must be finite and non-negative")

    def interval(self, k: float = 1.0) -> tuple:
        return self.value - k * self.std_uncertainty, self.value + k * self.std_uncertainty

    def to_dict(self) -> Dict[str, Any]:
        return {
            "label": self.label,
            "value": self.value,
            "std_uncertainty": self.std_uncertainty,
            "contributions": [asdict(c) for c in self.contributions],
            "covariance_terms": dict(self.covariance_terms),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "EfficiencyEstimate":
        return cls(
            value=float(data["value"]),
            std_uncertainty=float(data["std_uncertainty"]),
            contributions=[UncertaintyContribution(**c) for c in data.get("contributions", [])],
            covariance_terms=dict(data.get("covariance_terms", {})),
            label=data.get("label"),
        )
