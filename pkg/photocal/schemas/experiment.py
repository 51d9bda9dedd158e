"""
Experiment configuration schemas.

All physical quantities carry their unit in the field name. Probabilities
and efficiencies are dimensionless; photon numbers are per pulse/window.
"""

from enum import Enum
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..core.detector_models import Povm, dark_count_povm, linear_povm, tree_povm


class DetectorKind(str, Enum):
    LINEAR = "linear"
    DARK_COUNT = "dark_count"
    TREE = "tree"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DetectorSpec(_Section):
    """Detector model used as simulation ground truth."""
    kind: DetectorKind = DetectorKind.LINEAR
    eta: float = Field(..., ge=0.0, le=1.0, description="Quantum efficiency")
    gamma: float = Field(0.0, ge=0.0, description="Mean dark counts per pulse")
    n_outcomes: int = Field(12, ge=1, description="Number of outcomes (ignored for trees)")
    truncation: int = Field(..., ge=1, description="Fock truncation M")
    n_spads: int = Field(2, ge=1, description="Detectors in a tree")

    def build(self) -> Povm:
        if self.kind == DetectorKind.LINEAR:
            return linear_povm(self.eta, self.n_outcomes, self.truncation)
        if self.kind == DetectorKind.DARK_COUNT:
            return dark_count_povm(self.eta, self.gamma, self.n_outcomes, self.truncation)
        return tree_povm(self.eta, self.truncation, self.n_spads)


class KlyshkoConfig(_Section):
    """Heralded coincidence experiment for the two-photon technique."""
    pair_rate_per_window: float = Field(..., ge=0.0, description="Mean PDC pairs per acquisition window")
    eta_trigger: float = Field(..., ge=0.0, le=1.0)
    eta_dut: float = Field(..., ge=0.0, le=1.0, description="Bare DUT efficiency (ground truth)")
    tau_dut: float = Field(1.0, gt=0.0, le=1.0, description="Transmittance of the DUT arm")
    u_tau_dut: float = Field(0.0, ge=0.0, description="Standard uncertainty of tau_dut")
    trigger_background_per_window: float = Field(0.0, ge=0.0)
    dut_dark_rate_hz: float = Field(0.0, ge=0.0)
    coincidence_window_s: float = Field(1e-8, gt=0.0)
    acquisition_windows: int = Field(..., ge=1, description="Windows per repeated run")
    repeats: int = Field(10, ge=1, description="Repeated runs (one count record each)")
    valid_start_loss_probability: float = Field(
        0.0, ge=0.0, le=1.0,
        description="Probability that the start following a conversion is rejected"
    )
    batch_windows: int = Field(250_000, ge=1)
    seed: int = Field(0, ge=0)

    @property
    def dut_dark_per_window(self) -> float:
        return self.dut_dark_rate_hz * self.coincidence_window_s


class PnrdConfig(_Section):
    """Heralded photon-number-resolving detector calibration run."""
    pulses: int = Field(..., ge=1, description="Laser pulses with PDC on (and again with PDC off)")
    true_herald_probability: float = Field(..., ge=0.0, le=1.0)
    trigger_dark_probability: float = Field(0.0, ge=0.0, le=1.0)
    tau_dut: float = Field(1.0, gt=0.0, le=1.0)
    background_mean_photons: float = Field(0.0, ge=0.0, description="Uncorrelated photons per slot at the DUT")
    unheralded_slots: int = Field(..., ge=1)
    gap_ev: float = Field(0.945, gt=0.0, description="Amplitude gap between photon peaks")
    fwhm_ev: float = Field(0.4, gt=0.0, description="Energy resolution")
    dut: DetectorSpec
    batch_pulses: int = Field(500_000, ge=1)
    seed: int = Field(0, ge=0)


class CoherentConfig(_Section):
    """Coherent-probe detector tomography run."""
    mean_photons: Optional[List[float]] = Field(None, description="Explicit probe means")
    mu_max: float = Field(130.0, gt=0.0)
    mu_min: float = Field(6.5, gt=0.0)
    n_probes: int = Field(20, ge=1)
    shots_per_probe: int = Field(100_000, ge=1)
    dut: DetectorSpec
    seed: int = Field(0, ge=0)

    @field_validator("mean_photons")
    @classmethod
    def validate_mean_photons(cls, v):
        if v is not None and (len(v) == 0 or min(v) <= 0):
            raise ValueError("probe mean photon numbers must be positive and non-empty")
        return v

    def probe_means(self) -> np.ndarray:
        if self.mean_photons is not None:
            return np.asarray(self.mean_photons, dtype=float)
        return np.geomspace(self.mu_max, self.mu_min, self.n_probes)


class TwinBeamConfig(_Section):
    """Twin-beam on/off tomography run."""
    mu: float = Field(0.5983, gt=0.0, description="Mean photon pairs per pulse")
    tomographer_etas: Optional[List[float]] = None
    shots_per_setting: int = Field(1_000_000, ge=1)
    dut: DetectorSpec
    repeats: int = Field(30, ge=1, description="Independent datasets")
    dead_time_slots: int = Field(0, ge=0)
    seed: int = Field(0, ge=0)

    @field_validator("tomographer_etas")
    @classmethod
    def validate_etas(cls, v):
        if v is not None and any(not 0.0 <= eta <= 1.0 for eta in v):
            raise ValueError("tomographer efficiencies must lie in [0, 1]")
        return v

    def etas(self) -> np.ndarray:
        if self.tomographer_etas is not None:
            return np.asarray(self.tomographer_etas, dtype=float)
        return default_tomographer_etas()


def default_tomographer_etas() -> np.ndarray:
    """Ten settings geometrically spaced in [0.05, 0.6]."""
    return np.geomspace(0.05, 0.6, 10)


class KlyshkoCalibration(_Section):
    tau_dut: float = Field(1.0, gt=0.0, le=1.0)
    u_tau_dut: float = Field(0.0, ge=0.0)


class PnrdCalibration(_Section):
    n_peaks: int = Field(4, ge=1, description="Gaussian components fitted to amplitude histograms")
    xi: Optional[float] = Field(None, gt=0.0, le=1.0, description="Heralding purity override")
    u_xi: float = Field(0.0, ge=0.0)
    min_peak_counts: float = Field(25.0, ge=0.0)
    consistency_alpha: float = Field(0.01, gt=0.0, lt=1.0)


class CoherentTomography(_Section):
    truncation: int = Field(140, ge=2)
    n_outcomes: int = Field(12, ge=2)
    regularization_weight: Optional[float] = Field(
        1e-2, ge=0.0, description="None selects the weight by an L-curve sweep"
    )
    max_iterations: int = Field(100_000, ge=1)
    tolerance: float = Field(1e-10, gt=0.0)
    fidelity_threshold: float = Field(0.99, gt=0.0, le=1.0)


class TwinBeamTomography(_Section):
    truncation: int = Field(6, ge=2)
    regularization_weight: float = Field(1e-4, ge=0.0)
    tomographer_etas: Optional[List[float]] = None
    reference_eta: Optional[float] = Field(
        None, ge=0.0, le=1.0, description="Tree efficiency for the fidelity report"
    )
    em_max_iterations: int = Field(10_000, ge=1)
    em_tolerance: float = Field(1e-9, gt=0.0)
    max_iterations: int = Field(100_000, ge=1)
    tolerance: float = Field(1e-10, gt=0.0)


class CalibrationConfig(_Section):
    klyshko: KlyshkoCalibration = Field(default_factory=KlyshkoCalibration)
    pnrd: PnrdCalibration = Field(default_factory=PnrdCalibration)


class TomographyConfig(_Section):
    coherent: CoherentTomography = Field(default_factory=CoherentTomography)
    twinbeam: TwinBeamTomography = Field(default_factory=TwinBeamTomography)


class ExperimentConfig(_Section):
    """Top-level experiment file."""
    klyshko: Optional[KlyshkoConfig] = None
    pnrd: Optional[PnrdConfig] = None
    coherent: Optional[CoherentConfig] = None
    twinbeam: Optional[TwinBeamConfig] = None
    calibration: CalibrationConfig = Field(default_factory=CalibrationConfig)
    tomography: TomographyConfig = Field(default_factory=TomographyConfig)

    @model_validator(mode="after")
    def check_twinbeam_truncation(self):
        if self.twinbeam is not None and self.twinbeam.dut.kind != DetectorKind.TREE \
                and self.twinbeam.dut.n_outcomes < 2:
            raise ValueError("twin-beam DUT needs at least two outcomes")
        return self
