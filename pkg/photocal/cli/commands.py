"""
Command handlers. Each handler runs one pipeline, writes its outputs through
a RunFileManager and returns the RunManifest written next to them.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from ..config import PhotocalSettings
from ..core import klyshko, pnrd_cal, povm_tomo, twin_beam_tomo
from ..core.detector_models import Povm, linear_povm, povm_fidelity, tree_povm
from ..core.exceptions import ConfigError, DataSchemaError
from ..core.file_manager import (
    RunFileManager,
    config_hash,
    load_experiment_config,
    load_frame,
    load_json,
)
from ..core.models import (
    CoherentProbeCounts,
    HeraldedPnrdCounts,
    KlyshkoCountRecord,
    TwinBeamRunCounts,
    UncertainValue,
)
from ..core.photon_stats import (
    PhotonNumberDistribution,
    ProbeEnsemble,
    distribution_fidelity,
    poisson_pmf,
)
from ..core.source_sim import (
    simulate_coherent_probe_run,
    simulate_heralded_pnrd_run,
    simulate_klyshko_records,
    simulate_twin_beam_run,
    synthesize_amplitude_traces,
)
from ..logging_config import LogMessages
from ..schemas.experiment import ExperimentConfig
from ..schemas.manifest import RunManifest

logger = logging.getLogger(__name__)

SIMULATE_SUBTYPES = ("klyshko", "pnrd", "coherent", "twinbeam")
CALIBRATE_SUBTYPES = ("klyshko", "pnrd")
TOMOGRAPHY_SUBTYPES = ("coherent", "twinbeam")

KLYSHKO_RECORDS = "klyshko_records.csv"
PNRD_AMPLITUDES = "pnrd_amplitudes.csv"
PNRD_COUNTS = "pnrd_counts.json"
COHERENT_COUNTS = "coherent_counts.json"
TWINBEAM_COUNTS = "twinbeam_counts_{:03d}.json"
MANIFEST = "manifest.json"


@dataclass
class RunContext:
    """Arguments shared by every command."""
    out_dir: Path
    config_path: Optional[Path] = None
    data: Sequence[Path] = ()
    seed: Optional[int] = None
    threads: int = 1
    run_id: Optional[str] = None
    settings: Optional[PhotocalSettings] = None

    @property
    def tool_version(self) -> str:
        return (self.settings or PhotocalSettings()).tool_version


def _load_config(ctx: RunContext) -> ExperimentConfig:
    if ctx.config_path is None:
        raise ConfigError("--config is required for this command", field_paths=["--config"])
    return load_experiment_config(ctx.config_path)


def _section(config: ExperimentConfig, name: str):
    section = getattr(config, name)
    if section is None:
        raise ConfigError(f"configuration has no [{name}] section", field_paths=[name],
                          suggestion=f"add a [{name}] table to the config file")
    return section


def _apply_seed(section, seed: Optional[int]) -> int:
    if seed is not None:
        section.seed = seed
    return section.seed


def _manifest(ctx: RunContext, command: str, subtype: str,
              config: Optional[ExperimentConfig], seed: Optional[int]) -> RunManifest:
    return RunManifest(
        tool_version=ctx.tool_version,
        command=command,
        subtype=subtype,
        run_id=ctx.run_id,
        config_hash=config_hash(config) if config is not None else None,
        seed=seed,
        inputs=[str(p) for p in ([ctx.config_path] if ctx.config_path else []) + list(ctx.data)],
    )


def _finish(files: RunFileManager, manifest: RunManifest, results: Dict[str, Any]) -> RunManifest:
    manifest.results = results
    manifest.outputs = [str(p) for p in files.written] + [str(files.out_dir / MANIFEST)]
    manifest.finish()
    files.save_json(MANIFEST, manifest.model_dump(mode="json"))
    logger.info(LogMessages.OUTPUT_WRITTEN, extra={"files": manifest.outputs})
    return manifest


def _data_paths(ctx: RunContext, suffix: str) -> List[Path]:
    return [p for p in ctx.data if Path(p).suffix.lower() == suffix]


def _require_data(ctx: RunContext, suffix: str, what: str) -> List[Path]:
    paths = _data_paths(ctx, suffix)
    if not paths:
        raise DataSchemaError(f"no {what} ({suffix}) given with --data",
                              suggestion="pass the files written by 'photocal simulate'")
    return paths


# --------------------------------------------------------------------------
# simulate
# --------------------------------------------------------------------------

def cmd_simulate(subtype: str, ctx: RunContext) -> RunManifest:
    """Generate synthetic datasets for one experiment kind."""
    config = _load_config(ctx)
    section = _section(config, subtype)
    seed = _apply_seed(section, ctx.seed)
    files = RunFileManager(ctx.out_dir)
    manifest = _manifest(ctx, "simulate", subtype, config, seed)
    logger.info(LogMessages.SIMULATION_STARTED, extra={"experiment": subtype, "seed": seed})

    if subtype == "klyshko":
        records = simulate_klyshko_records(section, threads=ctx.threads)
        frame = pd.DataFrame([r.to_dict() for r in records], columns=KlyshkoCountRecord.FIELDS)
        files.save_frame(KLYSHKO_RECORDS, frame)
        results = {"records": len(records),
                   "eta_true": section.eta_dut,
                   "tau_eta_true": section.tau_dut * section.eta_dut}

    elif subtype == "pnrd":
        run = simulate_heralded_pnrd_run(section, threads=ctx.threads)
        n_outcomes = len(run.counts.C)
        heralded = synthesize_amplitude_traces(
            np.bincount(run.heralded_outcomes, minlength=n_outcomes),
            section.gap_ev, section.fwhm_ev, seed, stream=0)
        unheralded = synthesize_amplitude_traces(
            np.bincount(run.unheralded_outcomes, minlength=n_outcomes),
            section.gap_ev, section.fwhm_ev, seed, stream=1)
        frame = pd.DataFrame({
            "channel": ["heralded"] * heralded.size + ["unheralded"] * unheralded.size,
            "amplitude_ev": np.concatenate([heralded, unheralded]),
        })
        files.save_frame(PNRD_AMPLITUDES, frame)
        files.save_json(PNRD_COUNTS, run.counts.to_dict())
        results = {"n_p": run.counts.n_p, "n_a": run.counts.n_a,
                   "eta_true": section.dut.eta,
                   "tau_eta_true": section.tau_dut * section.dut.eta}

    elif subtype == "coherent":
        povm = section.dut.build()
        probes = ProbeEnsemble(section.probe_means(), povm.truncation)
        counts = simulate_coherent_probe_run(probes, povm, section.shots_per_probe, seed,
                                             threads=ctx.threads)
        files.save_json(COHERENT_COUNTS, counts.to_dict())
        results = {"probes": probes.size, "eta_true": section.dut.eta,
                   "gamma_true": section.dut.gamma}

    else:
        povm = section.dut.build()
        for repeat in range(section.repeats):
            counts = simulate_twin_beam_run(
                section.mu, povm, section.etas(), section.shots_per_setting, seed,
                dead_time_slots=section.dead_time_slots, repeat=repeat, threads=ctx.threads)
            files.save_json(TWINBEAM_COUNTS.format(repeat), counts.to_dict())
        results = {"datasets": section.repeats, "mu_true": section.mu,
                   "eta_true": section.dut.eta}

    logger.info(LogMessages.SIMULATION_COMPLETED, extra={"experiment": subtype})
    return _finish(files, manifest, results)


# --------------------------------------------------------------------------
# calibrate
# --------------------------------------------------------------------------

def _load_klyshko_records(path: Path) -> List[KlyshkoCountRecord]:
    frame = load_frame(path, required=list(KlyshkoCountRecord.FIELDS))
    if frame.empty:
        raise DataSchemaError(f"{path} holds no count records", context={"path": str(path)})
    return [KlyshkoCountRecord.from_dict(row) for row in frame.to_dict(orient="records")]


def _pnrd_tallies_from_amplitudes(path: Path, n_peaks: int):
    frame = load_frame(path, required=["channel", "amplitude_ev"])
    model = pnrd_cal.fit_gaussian_mixture(frame["amplitude_ev"].to_numpy(), n_peaks)
    thresholds = pnrd_cal.place_thresholds(model)
    heralded = pnrd_cal.bin_counts(frame.loc[frame["channel"] == "heralded", "amplitude_ev"],
                                   thresholds)
    unheralded = pnrd_cal.bin_counts(frame.loc[frame["channel"] == "unheralded", "amplitude_ev"],
                                     thresholds)
    return heralded, unheralded, model, thresholds


def cmd_calibrate(subtype: str, ctx: RunContext) -> RunManifest:
    """Efficiency estimate and uncertainty budget from recorded data."""
    config = _load_config(ctx)
    files = RunFileManager(ctx.out_dir)
    manifest = _manifest(ctx, "calibrate", subtype, config, None)

    if subtype == "klyshko":
        settings = config.calibration.klyshko
        records = _load_klyshko_records(_require_data(ctx, ".csv", "count records")[0])
        estimate = klyshko.estimate_eta_dut(records, settings.tau_dut, settings.u_tau_dut)
        files.save_json("klyshko_estimate.json", estimate.to_dict())
        files.save_frame("klyshko_budget.csv", klyshko.budget_table(estimate))
        results = {"eta": estimate.value, "u_eta": estimate.std_uncertainty,
                   "records": len(records)}
        if config.klyshko is not None:
            results["eta_true"] = config.klyshko.eta_dut

    else:
        settings = config.calibration.pnrd
        tally_path = _require_data(ctx, ".json", "PNRD tally")[0]
        data = load_json(tally_path)
        if not isinstance(data, dict):
            raise DataSchemaError(f"{tally_path} must hold a JSON object")
        counts = HeraldedPnrdCounts.from_dict(data)
        heralded, unheralded = counts.C, counts.C_bar

        amplitude_paths = _data_paths(ctx, ".csv")
        if amplitude_paths:
            heralded, unheralded, model, thresholds = _pnrd_tallies_from_amplitudes(
                amplitude_paths[0], settings.n_peaks)
            files.save_json("pnrd_peaks.json", {
                "model": model.to_dict(),
                "thresholds": thresholds,
                "misclassification": pnrd_cal.misclassification_mass(model, thresholds).tolist(),
                "heralded": heralded.tolist(),
                "unheralded": unheralded.tolist(),
            })

        if settings.xi is not None:
            xi = UncertainValue(settings.xi, settings.u_xi)
        else:
            xi = pnrd_cal.heralding_purity(counts.n_p, counts.n_a)
        efficiency = pnrd_cal.calibrate_pnrd(heralded, unheralded, xi,
                                             min_counts=settings.min_peak_counts,
                                             alpha=settings.consistency_alpha)
        files.save_json("pnrd_efficiencies.json", efficiency.to_dict())
        budgets = [klyshko.budget_table(e).assign(peak=i)
                   for i, e in zip(efficiency.peaks, efficiency.eta_i)]
        files.save_frame("pnrd_budget.csv", pd.concat(budgets, ignore_index=True))
        results = {"eta": efficiency.combined.value,
                   "u_eta": efficiency.combined.std_uncertainty,
                   "chi_square": efficiency.chi_square,
                   "consistent": efficiency.consistent,
                   "xi": xi.value}
        if config.pnrd is not None:
            results["tau_eta_true"] = config.pnrd.tau_dut * config.pnrd.dut.eta

    return _finish(files, manifest, results)


# --------------------------------------------------------------------------
# tomography
# --------------------------------------------------------------------------

def _coherent_tomography(config: ExperimentConfig, ctx: RunContext,
                         files: RunFileManager) -> Dict[str, Any]:
    settings = config.tomography.coherent
    counts = CoherentProbeCounts.from_dict(
        load_json(_require_data(ctx, ".json", "probe counts")[0]))

    problem = povm_tomo.build_problem(counts, settings.truncation,
                                      settings.regularization_weight or 0.0)
    weight = settings.regularization_weight
    if weight is None:
        weight, sweep = povm_tomo.select_regularization_weight(problem,
                                                                n_outcomes=settings.n_outcomes)
        files.save_frame("coherent_lcurve.csv", sweep)
        problem = problem.with_weight(weight)

    reconstruction = povm_tomo.reconstruct_povm_ls(problem, settings.n_outcomes,
                                                   settings.max_iterations, settings.tolerance)
    probes = ProbeEnsemble(problem.mean_photons, settings.truncation)
    kept = counts.counts[:, counts.counts.sum(axis=0) > 0]
    linear = povm_tomo.ml_efficiency(kept, probes, threads=ctx.threads)
    dark = povm_tomo.ml_efficiency_dark(kept, probes)

    povm = reconstruction.povm
    fidelity = povm_fidelity(povm, linear_povm(linear.eta, povm.n_outcomes, povm.truncation))
    files.save_json("coherent_povm.json", povm.to_dict())
    files.save_frame("coherent_povm.csv", povm.to_frame())
    files.save_frame("coherent_fidelity.csv",
                     pd.DataFrame({"m": np.arange(povm.truncation), "fidelity": fidelity}))
    files.save_frame("coherent_model_comparison.csv",
                     povm_tomo.model_comparison(povm, linear.eta, problem))
    files.save_frame("coherent_convergence.csv", reconstruction.history_frame())
    files.save_json("coherent_ml.json", {"linear": linear.to_dict(), "dark_count": dark.to_dict()})

    below = fidelity < settings.fidelity_threshold
    return {
        "eta_ml": linear.eta, "u_eta_ml": linear.u_eta,
        "eta_dark": dark.eta, "gamma_dark": dark.gamma, "u_gamma_dark": dark.u_gamma,
        "regularization_weight": weight,
        "converged": reconstruction.converged,
        "min_fidelity": float(fidelity.min()),
        "first_m_below_threshold": int(np.argmax(below)) if below.any() else None,
    }


def _load_twin_beam_counts(path: Path, fallback_etas: Optional[Sequence[float]]) -> TwinBeamRunCounts:
    data = load_json(path)
    if not isinstance(data, dict):
        raise DataSchemaError(f"{path} must hold a JSON object")
    if "etas" not in data:
        if fallback_etas is None:
            raise ConfigError(
                f"{path} has no tomographer efficiencies and none are configured",
                field_paths=["tomography.twinbeam.tomographer_etas"],
            )
        data = {**data, "etas": list(fallback_etas)}
    return TwinBeamRunCounts.from_dict(data)


def _twin_beam_tomography(config: ExperimentConfig, ctx: RunContext,
                          files: RunFileManager) -> Dict[str, Any]:
    settings = config.tomography.twinbeam
    fallback = settings.tomographer_etas
    if fallback is None and config.twinbeam is not None:
        fallback = config.twinbeam.tomographer_etas
    datasets = [
        twin_beam_tomo.OnOffDataset.from_counts(_load_twin_beam_counts(p, fallback))
        for p in sorted(_require_data(ctx, ".json", "twin-beam counts"))
    ]

    def run(index: int) -> twin_beam_tomo.TwinBeamReconstruction:
        return twin_beam_tomo.reconstruct_twin_beam(
            datasets[index], settings.truncation, settings.regularization_weight,
            em_tolerance=settings.em_tolerance, em_max_iterations=settings.em_max_iterations,
            max_iterations=settings.max_iterations, tolerance=settings.tolerance)

    if len(datasets) >= 2:
        summary = twin_beam_tomo.uncertainty_by_resampling(run, len(datasets), ctx.threads)
        distribution_probs, povm_elements = summary.distribution_mean, summary.povm_mean
        files.save_frame("twinbeam_resampling.csv", summary.to_frame())
    else:
        single = run(0)
        distribution_probs, povm_elements = single.distribution.probs, single.povm.elements

    distribution = PhotonNumberDistribution(distribution_probs)
    povm = Povm(povm_elements)
    files.save_json("twinbeam_distribution.json", distribution.to_dict())
    files.save_json("twinbeam_povm.json", povm.to_dict())
    files.save_frame("twinbeam_povm.csv", povm.to_frame())

    results: Dict[str, Any] = {"datasets": len(datasets)}
    if config.twinbeam is not None:
        reference = poisson_pmf(config.twinbeam.mu, settings.truncation, fold_tail=True)
        results["distribution_fidelity"] = distribution_fidelity(distribution, reference)
    reference_eta = settings.reference_eta
    if reference_eta is None and config.twinbeam is not None:
        reference_eta = config.twinbeam.dut.eta
    if reference_eta is not None:
        theory = tree_povm(reference_eta, settings.truncation, povm.n_outcomes - 1)
        fidelity = povm_fidelity(povm, theory)
        files.save_frame("twinbeam_fidelity.csv",
                         pd.DataFrame({"m": np.arange(povm.truncation), "fidelity": fidelity}))
        results["povm_fidelity"] = fidelity.tolist()
    return results


def cmd_tomography(subtype: str, ctx: RunContext) -> RunManifest:
    """POVM reconstruction and fidelity report."""
    config = _load_config(ctx)
    files = RunFileManager(ctx.out_dir)
    manifest = _manifest(ctx, "tomography", subtype, config, None)
    if subtype == "coherent":
        results = _coherent_tomography(config, ctx, files)
    else:
        results = _twin_beam_tomography(config, ctx, files)
    return _finish(files, manifest, results)


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------

def _summary_rows(manifest: RunManifest) -> List[Dict[str, Any]]:
    rows = []
    for key in sorted(manifest.results):
        value = manifest.results[key]
        if isinstance(value, (list, dict)):
            continue
        rows.append({
            "config_hash": manifest.config_hash or "",
            "command": manifest.command,
            "subtype": manifest.subtype,
            "seed": manifest.seed,
            "tool_version": manifest.tool_version,
            "quantity": key,
            "value": value,
        })
    return rows


def cmd_report(manifest_paths: Sequence[Path], ctx: RunContext) -> RunManifest:
    """
    Aggregate run manifests into summary.txt and summary.csv, sorted by config
    hash. Timestamps and run ids are left out so the summary only depends on
    the results.
    """
    if not manifest_paths:
        raise DataSchemaError("report needs at least one manifest")
    manifests = []
    for path in manifest_paths:
        try:
            manifests.append(RunManifest.model_validate(load_json(path)))
        except ValueError as e:
            raise DataSchemaError(f"{path} is not a valid run manifest: {e}",
                                  context={"path": str(path)}) from e

    versions = sorted({m.tool_version for m in manifests})
    if len(versions) > 1 or versions[0] != ctx.tool_version:
        logger.warning("Manifests come from different tool versions",
                       extra={"versions": versions, "current": ctx.tool_version})

    manifests.sort(key=lambda m: (m.config_hash or "", m.command, m.subtype, m.seed or 0))
    rows = [row for m in manifests for row in _summary_rows(m)]
    columns = ["config_hash", "command", "subtype", "seed", "tool_version", "quantity", "value"]
    table = pd.DataFrame(rows, columns=columns)

    files = RunFileManager(ctx.out_dir)
    files.save_frame("summary.csv", table)
    shown = table.assign(config_hash=table["config_hash"].str.slice(0, 12))
    files.save_text("summary.txt", shown.to_string(index=False) + "\n")

    manifest = RunManifest(tool_version=ctx.tool_version, command="report", subtype="summary",
                           run_id=ctx.run_id, inputs=[str(p) for p in manifest_paths])
    return _finish(files, manifest, {"manifests": len(manifests), "rows": len(rows)})
