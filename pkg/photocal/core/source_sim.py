"""
Monte Carlo generators for the calibration experiments.

Time is discretised into slots (one laser pulse or coincidence window each).
Every simulation splits its slots into batches; each batch draws from its own
Philox substream keyed by (repeat, pass, batch) and the batch tallies are
summed, so results depend on the seed only and never on the thread count.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import constants

from ..schemas.experiment import KlyshkoConfig, PnrdConfig
from .detector_models import Povm, sample_outcomes
from .exceptions import DataSchemaError, DimensionError
from .models import (
    CoherentProbeCounts,
    HeraldedPnrdCounts,
    KlyshkoCountRecord,
    TwinBeamRunCounts,
)
from .photon_stats import ProbeEnsemble
from .rng import batch_sizes, make_rng, parallel_map

logger = logging.getLogger(__name__)

FWHM_TO_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))

# stream keys for the independent passes of one experiment
_PEAK_PASS, _DELAYED_PASS, _BLOCKED_PASS = 0, 1, 2
_HERALDED_PASS, _PDC_OFF_PASS, _UNHERALDED_PASS, _AMPLITUDE_PASS = 0, 1, 2, 3


def photon_energy_ev(wavelength_nm: float) -> float:
    """Photon energy hc / lambda in eV."""
    if wavelength_nm <= 0:
        raise ValueError("wavelength must be positive")
    return constants.h * constants.c / (wavelength_nm * 1e-9) / constants.e


# --------------------------------------------------------------------------
# Klyshko coincidence runs
# --------------------------------------------------------------------------

def _trigger_and_dut(config: KlyshkoConfig, rng: np.random.Generator, size: int,
                     correlated: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Per-slot trigger and DUT firing flags."""
    pairs = rng.poisson(config.pair_rate_per_window, size)
    trigger_hits = rng.binomial(pairs, config.eta_trigger)
    background = rng.poisson(config.trigger_background_per_window, size)
    trigger = (trigger_hits + background) > 0

    # delayed peak: the DUT sees an uncorrelated slot
    dut_pairs = pairs if correlated else rng.poisson(config.pair_rate_per_window, size)
    dut_hits = rng.binomial(dut_pairs, config.tau_dut * config.eta_dut)
    dark = rng.poisson(config.dut_dark_per_window, size)
    dut = (dut_hits + dark) > 0
    return trigger, dut


def _reject_busy_starts(trigger: np.ndarray, dut: np.ndarray, loss: float,
                        rng: np.random.Generator) -> np.ndarray:
    """
    Drop the start following an accepted coincidence with probability ``loss``.
    Only slots preceded by a coincidence candidate are visited.
    """
    accepted = trigger.copy()
    if loss <= 0 or trigger.size < 2:
        return accepted
    draws = rng.random(trigger.size)
    candidates = np.flatnonzero(trigger[1:] & trigger[:-1] & dut[:-1]) + 1
    for t in candidates:
        if accepted[t - 1] and draws[t] < loss:
            accepted[t] = False
    return accepted


def _klyshko_batch(config: KlyshkoConfig, repeat: int, batch: int,
                   size: int) -> np.ndarray:
    """Tallies (m_c, m_vs_in, m_vs_out, m_B, A) of one batch of windows."""
    loss = config.valid_start_loss_probability

    rng = make_rng(config.seed, repeat, _PEAK_PASS, batch)
    trigger, dut = _trigger_and_dut(config, rng, size, correlated=True)
    starts = _reject_busy_starts(trigger, dut, loss, rng)
    m_vs_in = int(starts.sum())
    m_c = int((starts & dut).sum())

    rng = make_rng(config.seed, repeat, _DELAYED_PASS, batch)
    trigger, dut = _trigger_and_dut(config, rng, size, correlated=False)
    starts = _reject_busy_starts(trigger, dut, loss, rng)
    m_vs_out = int(starts.sum())
    accidentals = int((starts & dut).sum())

    rng = make_rng(config.seed, repeat, _BLOCKED_PASS, batch)
    m_B = int((rng.poisson(config.trigger_background_per_window, size) > 0).sum())

    return np.array([m_c, m_vs_in, m_vs_out, m_B, accidentals], dtype=np.int64)


def simulate_klyshko_run(config: KlyshkoConfig, repeat: int = 0,
                         threads: int = 1) -> KlyshkoCountRecord:
    """
    One coincidence-counting run of ``config.acquisition_windows`` windows.

    The peak pass keeps the trigger/DUT pair correlation, the delayed pass
    draws the DUT from an independent slot (m_vs_out, A) and the blocked pass
    counts background valid starts (m_B).
    """
    sizes = batch_sizes(config.acquisition_windows, config.batch_windows)
    tallies = parallel_map(
        lambda job: _klyshko_batch(config, repeat, job[0], job[1]),
        list(enumerate(sizes)),
        threads,
    )
    m_c, m_vs_in, m_vs_out, m_B, A = (int(v) for v in np.sum(tallies, axis=0))
    return KlyshkoCountRecord(m_c=m_c, m_vs_in=m_vs_in, m_vs_out=m_vs_out, m_B=m_B, A=A)


def simulate_klyshko_records(config: KlyshkoConfig, repeats: Optional[int] = None,
                             threads: int = 1) -> List[KlyshkoCountRecord]:
    """``repeats`` independent runs (defaults to ``config.repeats``)."""
    repeats = config.repeats if repeats is None else repeats
    logger.info(
        "Simulation started",
        extra={"experiment": "klyshko", "repeats": repeats,
               "windows": config.acquisition_windows},
    )
    if threads > 1 and repeats > 1:
        return parallel_map(lambda r: simulate_klyshko_run(config, r), range(repeats), threads)
    return [simulate_klyshko_run(config, r, threads) for r in range(repeats)]


# --------------------------------------------------------------------------
# Heralded PNRD runs
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HeraldedPnrdRun:
    """Outcome labels of every recorded event plus the peak tallies."""
    counts: HeraldedPnrdCounts
    heralded_outcomes: np.ndarray
    unheralded_outcomes: np.ndarray


def _check_povm_covers(povm: Povm, photons: np.ndarray):
    if photons.size and photons.max() >= povm.truncation:
        raise DimensionError(
            f"{int(photons.max())} photons in one slot exceed DUT truncation {povm.truncation}"
        )


def _heralded_batch(config: PnrdConfig, povm: Povm, batch: int,
                    size: int) -> Tuple[int, np.ndarray]:
    rng = make_rng(config.seed, _HERALDED_PASS, batch)
    true_herald = rng.random(size) < config.true_herald_probability
    dark_herald = rng.random(size) < config.trigger_dark_probability
    triggered = true_herald | dark_herald
    n_triggered = int(triggered.sum())

    signal = (true_herald[triggered] & (rng.random(n_triggered) < config.tau_dut)).astype(int)
    photons = signal + rng.poisson(config.background_mean_photons, n_triggered)
    _check_povm_covers(povm, photons)
    return n_triggered, sample_outcomes(povm, photons, rng)


def _unheralded_batch(config: PnrdConfig, povm: Povm, batch: int, size: int) -> np.ndarray:
    rng = make_rng(config.seed, _UNHERALDED_PASS, batch)
    photons = rng.poisson(config.background_mean_photons, size)
    _check_povm_covers(povm, photons)
    return sample_outcomes(povm, photons, rng)


def simulate_heralded_pnrd_run(config: PnrdConfig, dut_povm: Optional[Povm] = None,
                               threads: int = 1) -> HeraldedPnrdRun:
    """
    Heralded pass (PDC on), PDC-off pass for n_a, and unheralded pass.

    A true herald sends one photon towards the DUT, transmitted with
    probability ``tau_dut``; false heralds send none. Every slot seen by the
    DUT also carries Poissonian background photons.
    """
    povm = dut_povm if dut_povm is not None else config.dut.build()
    logger.info(
        "Simulation started",
        extra={"experiment": "pnrd", "pulses": config.pulses,
               "unheralded_slots": config.unheralded_slots},
    )

    heralded = parallel_map(
        lambda job: _heralded_batch(config, povm, job[0], job[1]),
        list(enumerate(batch_sizes(config.pulses, config.batch_pulses))),
        threads,
    )
    n_p = sum(n for n, _ in heralded)
    heralded_outcomes = np.concatenate([o for _, o in heralded]) if heralded else np.zeros(0, int)

    n_a = 0
    for batch, size in enumerate(batch_sizes(config.pulses, config.batch_pulses)):
        rng = make_rng(config.seed, _PDC_OFF_PASS, batch)
        n_a += int(rng.binomial(size, config.trigger_dark_probability))

    unheralded = parallel_map(
        lambda job: _unheralded_batch(config, povm, job[0], job[1]),
        list(enumerate(batch_sizes(config.unheralded_slots, config.batch_pulses))),
        threads,
    )
    if not unheralded:
        raise DataSchemaError("unheralded pass has no slots; C_bar would be empty",
                              context={"unheralded_slots": config.unheralded_slots})
    unheralded_outcomes = np.concatenate(unheralded)

    n_outcomes = povm.n_outcomes
    counts = HeraldedPnrdCounts(
        C=np.bincount(heralded_outcomes, minlength=n_outcomes).astype(float).tolist(),
        C_bar=np.bincount(unheralded_outcomes, minlength=n_outcomes).astype(float).tolist(),
        n_p=int(n_p),
        n_a=int(n_a),
    )
    return HeraldedPnrdRun(counts, heralded_outcomes, unheralded_outcomes)


# --------------------------------------------------------------------------
# Coherent-probe and twin-beam runs
# --------------------------------------------------------------------------

def _outcome_tally(povm: Povm, photons: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Outcome histogram: one multinomial draw per occupied photon number."""
    occupancy = np.bincount(photons, minlength=povm.truncation)
    tally = np.zeros(povm.n_outcomes, dtype=np.int64)
    for m in np.flatnonzero(occupancy):
        column = povm.column(m)
        tally += rng.multinomial(occupancy[m], column / column.sum())
    return tally


def simulate_coherent_probe_run(probes: ProbeEnsemble, dut_povm: Povm, shots_per_probe: int,
                                seed: int, threads: int = 1) -> CoherentProbeCounts:
    """
    Draw m ~ Poisson(mu_j) per shot and the outcome through the DUT POVM.

    Photon numbers beyond the POVM truncation are counted in its last column.
    """
    if probes.truncation != dut_povm.truncation:
        raise DimensionError(
            f"probe truncation {probes.truncation} differs from POVM truncation "
            f"{dut_povm.truncation}"
        )

    def run_probe(j: int) -> np.ndarray:
        rng = make_rng(seed, j)
        photons = np.minimum(rng.poisson(probes.mean_photons[j], shots_per_probe),
                             dut_povm.truncation - 1)
        return _outcome_tally(dut_povm, photons, rng)

    logger.info(
        "Simulation started",
        extra={"experiment": "coherent", "probes": probes.size, "shots": shots_per_probe},
    )
    columns = parallel_map(run_probe, range(probes.size), threads)
    return CoherentProbeCounts(probes.mean_photons, np.column_stack(columns))


def _dead_slots(clicks: np.ndarray, dead_time_slots: int) -> np.ndarray:
    """Slots within ``dead_time_slots`` after any click."""
    if dead_time_slots <= 0:
        return np.zeros(clicks.size, dtype=bool)
    cumulative = np.concatenate([[0], np.cumsum(clicks)])
    t = np.arange(clicks.size)
    lower = np.maximum(t - dead_time_slots, 0)
    return (cumulative[t] - cumulative[lower]) > 0


def simulate_twin_beam_run(mu: float, dut_povm: Povm, tomographer_etas: Sequence[float],
                           shots: int, seed: int, dead_time_slots: int = 0,
                           repeat: int = 0, threads: int = 1) -> TwinBeamRunCounts:
    """
    Both arms receive the same pair number m ~ Poisson(mu) per shot; the
    tomographer clicks with probability 1 - (1 - eta)^m and the DUT outcome is
    drawn from column m. With ``dead_time_slots`` > 0 every slot following a
    click on either arm is discarded.
    """
    etas = np.asarray(tomographer_etas, dtype=float)
    if etas.ndim != 1 or etas.size == 0:
        raise ValueError("at least one tomographer efficiency is required")
    if np.any((etas < 0) | (etas > 1)):
        raise ValueError("tomographer efficiencies must lie in [0, 1]")

    def run_setting(v: int) -> np.ndarray:
        rng = make_rng(seed, repeat, v)
        photons = np.minimum(rng.poisson(mu, shots), dut_povm.truncation - 1)
        clicks = rng.binomial(photons, etas[v]) > 0
        outcomes = sample_outcomes(dut_povm, photons, rng)
        keep = ~_dead_slots(clicks | (outcomes > 0), dead_time_slots)
        table = np.zeros((dut_povm.n_outcomes, 2), dtype=np.int64)
        np.add.at(table, (outcomes[keep], clicks[keep].astype(int)), 1)
        return table

    counts = np.stack(parallel_map(run_setting, range(etas.size), threads))
    return TwinBeamRunCounts(etas, counts)


# --------------------------------------------------------------------------
# Amplitude synthesis
# --------------------------------------------------------------------------

def synthesize_amplitude_traces(outcome_counts: Sequence[int], gap: float, fwhm: float,
                                seed: int, stream: int = 0) -> np.ndarray:
    """
    Pulse amplitudes for detected-photon tallies: ``outcome_counts[n]`` samples
    from Normal(n * gap, fwhm / 2.3548), returned in shuffled order.
    """
    if gap <= 0:
        raise ValueError("peak gap must be positive")
    if fwhm < 0:
        raise ValueError("fwhm must be non-negative")
    counts = np.asarray(outcome_counts, dtype=np.int64)
    if counts.min(initial=0) < 0:
        raise ValueError("outcome counts must be non-negative")
    rng = make_rng(seed, _AMPLITUDE_PASS, stream)
    centers = np.repeat(np.arange(counts.size) * gap, counts)
    amplitudes = centers + rng.normal(0.0, fwhm / FWHM_TO_SIGMA, centers.size)
    rng.shuffle(amplitudes)
    return amplitudes
