"""
Tests for twin-beam detector tomography: on/off recovery of the pair-number
distribution and the POVM inversion.
"""

import numpy as np
import pytest

from photocal.core.detector_models import Povm, apply_povm, linear_povm, povm_fidelity, tree_povm
from photocal.core.exceptions import DataSchemaError, UnderdeterminedError
from photocal.core.models import TwinBeamRunCounts
from photocal.core.photon_stats import (
    PhotonNumberDistribution,
    distribution_fidelity,
    point_mass,
    poisson_pmf,
)
from photocal.core.source_sim import simulate_twin_beam_run
from photocal.core.twin_beam_tomo import (
    OnOffDataset,
    em_iterate,
    em_step,
    forward_probabilities,
    newton_polish,
    no_click_matrix,
    relative_change,
    reconstruct_photon_distribution,
    reconstruct_photon_distribution_ls,
    reconstruct_povm_twin_beam,
    reconstruct_twin_beam,
    uncertainty_by_resampling,
)
from photocal.schemas.experiment import default_tomographer_etas

MU = 0.5983
ETAS = default_tomographer_etas()


def poisson_input(truncation: int = 6) -> PhotonNumberDistribution:
    return poisson_pmf(MU, truncation, fold_tail=True)


def simulated_dataset(povm: Povm, shots: int, seed: int, repeat: int = 0) -> OnOffDataset:
    run = simulate_twin_beam_run(MU, povm, ETAS, shots, seed=seed, repeat=repeat)
    return OnOffDataset.from_counts(run)


class TestOnOffDataset:
    """Frequency containers."""

    def test_from_counts_normalises_per_setting(self):
        counts = np.array([[[6, 2], [1, 1]], [[3, 3], [2, 2]], [[5, 0], [0, 5]]])
        dataset = OnOffDataset.from_counts(TwinBeamRunCounts([0.1, 0.3, 0.6], counts))
        assert np.allclose(dataset.joint.sum(axis=(1, 2)), 1.0)
        assert dataset.shots.tolist() == [10, 10, 10]
        assert dataset.no_click_freq.tolist() == pytest.approx([0.7, 0.5, 0.5])

    def test_empty_setting(self):
        counts = np.zeros((3, 2, 2), dtype=int)
        counts[:2, 0, 0] = 5
        with pytest.raises(DataSchemaError):
            OnOffDataset.from_counts(TwinBeamRunCounts([0.1, 0.3, 0.6], counts))

    def test_unseen_outcome_falls_back_to_setting_statistics(self):
        joint = np.array([[[0.6, 0.4], [0.0, 0.0]]] * 3)
        dataset = OnOffDataset(np.array([0.1, 0.3, 0.6]), joint)
        assert dataset.conditional_freqs[:, 1, :] == pytest.approx(np.array([[0.6, 0.4]] * 3))

    def test_dict_layout(self):
        dataset = OnOffDataset.from_model(poisson_input(), tree_povm(0.6, 6), ETAS)
        data = dataset.to_dict()
        assert set(data["freqs"]) == {"no_click", "outcome", "joint"}
        restored = OnOffDataset.from_dict(data)
        assert np.allclose(restored.joint, dataset.joint)


class TestForwardModel:
    """Joint click / outcome probabilities."""

    def test_marginal_is_independent_of_tomographer(self):
        povm = tree_povm(0.6, 6)
        distribution = poisson_input()
        no_click, click = forward_probabilities(distribution, povm, ETAS)
        marginal = apply_povm(povm, distribution)
        assert np.allclose(no_click + click, marginal[None, :], atol=1e-14)

    def test_no_click_probability(self):
        no_click, _ = forward_probabilities(poisson_input(40), linear_povm(0.5, 3, 40), [0.25])
        assert no_click.sum() == pytest.approx(np.exp(-0.25 * MU), rel=1e-9)

    def test_no_click_matrix(self):
        A = no_click_matrix([0.0, 0.5, 1.0], 3)
        assert A.tolist() == [[1.0, 1.0, 1.0], [1.0, 0.5, 0.25], [1.0, 0.0, 0.0]]


class TestPhotonDistribution:
    """On/off reconstruction."""

    def test_vacuum(self):
        dataset = OnOffDataset.from_model(point_mass(0, 6), tree_povm(0.6, 6), ETAS)
        result = reconstruct_photon_distribution(dataset, 6)
        assert result.distribution.probs[0] > 1 - 1e-6

    def test_poisson_input(self):
        dataset = OnOffDataset.from_model(poisson_input(), tree_povm(0.6, 6), ETAS)
        result = reconstruct_photon_distribution(dataset, 6)
        assert distribution_fidelity(result.distribution, poisson_input()) >= 0.994

    @pytest.mark.parametrize("etas", [ETAS[:5], [0.1, 0.3, 0.5, 0.7, 0.9], ETAS])
    def test_boundary_truth(self, etas):
        truth = PhotonNumberDistribution(np.array([0.7, 0.0, 0.3]))
        dataset = OnOffDataset.from_model(truth, tree_povm(0.6, 3), etas)
        em = reconstruct_photon_distribution(dataset, 3)
        assert em.converged
        assert np.abs(em.distribution.probs - truth.probs).max() < 1e-6
        assert em.distribution.probs.min() >= 0
        assert em.distribution.probs.sum() == pytest.approx(1.0, abs=1e-12)

    def test_least_squares_boundary_truth(self):
        truth = PhotonNumberDistribution(np.array([0.7, 0.0, 0.3]))
        dataset = OnOffDataset.from_model(truth, tree_povm(0.6, 3), ETAS)
        ls = reconstruct_photon_distribution_ls(dataset, 3, max_iterations=200_000,
                                                tolerance=1e-15)
        assert np.allclose(ls.distribution.probs, truth.probs, atol=1e-6)

    def test_em_stops_on_relative_change(self):
        etas = [0.1, 0.3, 0.5, 0.7, 0.9]
        truth = PhotonNumberDistribution(np.array([0.5, 0.3, 0.2]))
        dataset = OnOffDataset.from_model(truth, tree_povm(0.6, 3), etas)
        A = no_click_matrix(etas, 3)
        run = em_iterate(np.full(3, 1 / 3), A, dataset.no_click_freq, dataset.weights(),
                         tolerance=1e-9, max_iterations=500_000)
        assert run.converged
        assert run.change < 1e-9
        previous = em_step(run.rho, A, dataset.no_click_freq, dataset.weights())
        assert relative_change(previous / previous.sum(), run.rho) < 1e-8

    def test_em_reports_unfinished_run(self):
        truth = PhotonNumberDistribution(np.array([0.7, 0.0, 0.3]))
        dataset = OnOffDataset.from_model(truth, tree_povm(0.6, 3), ETAS[:5])
        A = no_click_matrix(ETAS[:5], 3)
        run = em_iterate(np.full(3, 1 / 3), A, dataset.no_click_freq, dataset.weights(),
                         max_iterations=10)
        assert not run.converged
        assert run.iterations == 10
        assert run.change >= 1e-9

    def test_relative_change_scales_with_magnitude(self):
        a = np.array([1e-6, 2e-6])
        assert relative_change(a * 1.001, a) == pytest.approx(1e-3)
        assert relative_change(a + 1e-9, a) == pytest.approx(1e-9 / 2e-6)

    def test_polish_keeps_the_simplex(self):
        truth = PhotonNumberDistribution(np.array([0.7, 0.0, 0.3]))
        dataset = OnOffDataset.from_model(truth, tree_povm(0.6, 3), ETAS)
        A = no_click_matrix(ETAS, 3)
        run = newton_polish(np.array([0.2, 0.5, 0.3]), A, dataset.no_click_freq, dataset.weights())
        assert run.converged
        assert run.rho.min() >= 0
        assert run.rho.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.abs(run.rho - truth.probs).max() < 1e-6

    def test_em_step_preserves_normalisation(self, rng):
        rho = rng.random(6)
        rho /= rho.sum()
        A = no_click_matrix(ETAS, 6)
        f_off = rng.uniform(0.2, 0.9, ETAS.size)
        weights = rng.random(ETAS.size)
        weights /= weights.sum()
        updated = em_step(rho, A, f_off, weights)
        assert updated.sum() == pytest.approx(1.0, abs=1e-12)
        assert updated.min() >= 0

    @pytest.mark.parametrize("etas", [[0.1, 0.5], [0.1, 0.1, 0.5]])
    def test_too_few_settings(self, etas):
        dataset = OnOffDataset.from_model(poisson_input(), tree_povm(0.6, 6), etas)
        with pytest.raises(UnderdeterminedError):
            reconstruct_photon_distribution(dataset)

    def test_setting_order_does_not_matter(self):
        dataset = OnOffDataset.from_model(poisson_input(), tree_povm(0.6, 6), ETAS,
                                          shots=np.arange(1, 11) * 1000)
        order = np.random.default_rng(0).permutation(ETAS.size)
        a = reconstruct_photon_distribution(dataset, 6, max_iterations=2_000)
        b = reconstruct_photon_distribution(dataset.permuted(order), 6, max_iterations=2_000)
        assert np.allclose(a.distribution.probs, b.distribution.probs, atol=1e-9)


class TestPovmReconstruction:
    """POVM inversion."""

    @staticmethod
    def toy_distribution() -> PhotonNumberDistribution:
        return PhotonNumberDistribution(np.array([0.5, 0.3, 0.2]))

    def test_toy_recovery(self):
        truth = tree_povm(0.6, 3)
        dataset = OnOffDataset.from_model(self.toy_distribution(), truth, ETAS)
        result = reconstruct_povm_twin_beam(dataset, self.toy_distribution(),
                                            regularization_weight=0.0,
                                            max_iterations=200_000, tolerance=1e-15)
        assert result.effective_rank == 3
        assert np.allclose(result.povm.elements, truth.elements, atol=1e-5)

    def test_blind_detector(self):
        truth = linear_povm(0.0, 2, 3)
        dataset = OnOffDataset.from_model(self.toy_distribution(), truth, ETAS)
        result = reconstruct_povm_twin_beam(dataset, self.toy_distribution(),
                                            max_iterations=200_000, tolerance=1e-15)
        assert np.allclose(result.povm.elements[0], 1.0, atol=1e-4)

    def test_rank_deficiency_is_reported(self, caplog):
        truth = tree_povm(0.6, 6)
        etas = [0.1, 0.3, 0.6]
        dataset = OnOffDataset.from_model(poisson_input(), truth, etas)
        result = reconstruct_povm_twin_beam(dataset, poisson_input(), max_iterations=1_000)
        assert result.effective_rank < 6
        assert "rank deficient" in caplog.text


class TestSimulatedPipeline:
    """Reconstruction of simulated twin-beam data."""

    def test_forward_reproduction(self):
        truth = tree_povm(0.6, 6)
        dataset = simulated_dataset(truth, 200_000, seed=8)
        result = reconstruct_twin_beam(dataset)
        no_click, click = forward_probabilities(result.distribution, result.povm, ETAS)
        predicted = np.stack([no_click, click], axis=-1)
        sigma = np.sqrt(dataset.joint * (1 - dataset.joint) / 200_000)
        assert np.all(np.abs(predicted - dataset.joint) < 5 * sigma + 1e-3)
        assert distribution_fidelity(result.distribution, poisson_input()) > 0.99
        assert povm_fidelity(result.povm, truth)[:3].min() > 0.99

    def test_known_reference_skips_on_off_step(self):
        truth = tree_povm(0.6, 6)
        dataset = simulated_dataset(truth, 50_000, seed=8)
        result = reconstruct_twin_beam(dataset, reference=poisson_input(), max_iterations=5_000)
        assert result.distribution is not None
        assert np.array_equal(result.distribution.probs, poisson_input().probs)
        assert result.to_dict()["distribution_converged"] is True

    def test_resampling(self):
        truth = tree_povm(0.6, 6)

        def run(repeat):
            dataset = simulated_dataset(truth, 20_000, seed=12, repeat=repeat)
            return reconstruct_twin_beam(dataset, max_iterations=5_000)

        summary = uncertainty_by_resampling(run, 3, threads=3)
        assert summary.distribution_mean.shape == (6,)
        assert summary.povm_std.shape == (3, 6)
        assert np.all(summary.distribution_std > 0)
        frame = summary.to_frame()
        assert len(frame) == 6 + 3 * 6
        assert frame.columns.tolist() == ["quantity", "n", "m", "mean", "std"]

    def test_resampling_needs_repeats(self):
        with pytest.raises(UnderdeterminedError):
            uncertainty_by_resampling(lambda r: None, 1)


@pytest.mark.slow
class TestFullScale:
    """Thirty datasets of ten settings against a two-detector tree."""

    def test_acceptance(self):
        truth = tree_povm(0.6, 6)

        def run(repeat):
            dataset = simulated_dataset(truth, 1_000_000, seed=30, repeat=repeat)
            return reconstruct_twin_beam(dataset)

        summary = uncertainty_by_resampling(run, 30, threads=4)
        distribution = PhotonNumberDistribution(summary.distribution_mean)
        assert distribution_fidelity(distribution, poisson_input()) >= 0.994
        fidelity = povm_fidelity(Povm(summary.povm_mean), truth)
        assert fidelity[:5].min() > 0.999
        assert fidelity[5] < fidelity[:5].min()

    def test_doubling_shots_scales_spread(self):
        truth = tree_povm(0.6, 6)

        def spread(shots):
            summary = uncertainty_by_resampling(
                lambda r: reconstruct_twin_beam(simulated_dataset(truth, shots, 40, r),
                                                max_iterations=20_000),
                30, threads=4,
            )
            return summary.distribution_std[:3]

        ratio = spread(200_000) / spread(400_000)
        assert 1.1 < ratio.mean() < 1.8
