"""
Tests for the simplex-constrained least-squares solver.
"""

import numpy as np
import pytest

from photocal.core.constrained_ls import (
    SimplexLeastSquares,
    project_simplex,
    second_difference_matrix,
)
from photocal.core.exceptions import DimensionError


def random_columns(rng, shape):
    X = rng.random(shape)
    return X / X.sum(axis=0)


class TestProjectSimplex:
    """Euclidean projection."""

    def test_point_on_simplex_is_fixed(self):
        v = np.array([0.2, 0.3, 0.5])
        assert np.allclose(project_simplex(v), v)

    def test_known_projections(self):
        assert np.allclose(project_simplex(np.array([1.0, 1.0])), [0.5, 0.5])
        assert np.allclose(project_simplex(np.array([2.0, 0.0])), [1.0, 0.0])
        assert np.allclose(project_simplex(np.array([0.0, 0.0, 0.0, 0.0])), 0.25)

    def test_scaled_simplex(self):
        assert np.allclose(project_simplex(np.array([3.0, 1.0]), z=2.0), [2.0, 0.0])

    def test_columns_and_rows(self, rng):
        V = rng.normal(size=(5, 7))
        cols = project_simplex(V, axis=0)
        rows = project_simplex(V, axis=1)
        assert np.allclose(cols.sum(axis=0), 1.0)
        assert np.allclose(rows.sum(axis=1), 1.0)
        assert cols.min() >= 0 and rows.min() >= 0

    def test_projection_is_closest_point(self, rng):
        v = rng.normal(size=6)
        p = project_simplex(v)
        for _ in range(200):
            q = project_simplex(rng.normal(size=6))
            assert np.sum((v - p) ** 2) <= np.sum((v - q) ** 2) + 1e-12


class TestSecondDifference:
    """Smoothness operator."""

    def test_small_sizes_have_no_rows(self):
        assert second_difference_matrix(2).shape == (0, 2)

    def test_annihilates_affine_vectors(self):
        D = second_difference_matrix(6)
        assert np.allclose(D @ (3.0 * np.arange(6) + 1.0), 0.0)
        assert np.allclose(D @ (np.arange(6) ** 2), 2.0)


class TestSimplexLeastSquares:
    """Projected accelerated gradient."""

    def test_exact_recovery(self, rng):
        W = rng.random((4, 8))
        X_true = random_columns(rng, (3, 4))
        solver = SimplexLeastSquares(W, X_true @ W)
        result = solver.solve(tolerance=1e-14, max_iterations=200_000)
        assert np.allclose(result.solution, X_true, atol=1e-6)

    def test_iterates_stay_feasible(self, rng):
        W = rng.random((6, 10))
        T = rng.random((4, 10))
        solver = SimplexLeastSquares(W, T, regularization_weight=0.1)
        result = solver.solve(max_iterations=2_000)
        assert solver.constraint_residual(result.solution) < 1e-12
        assert all(entry[2] < 1e-12 for entry in result.history)

    def test_objective_never_increases(self, rng):
        W = rng.random((8, 12))
        T = rng.random((5, 12))
        solver = SimplexLeastSquares(W, T, regularization_weight=0.01)
        result = solver.solve(max_iterations=3_000, history_stride=1)
        objectives = np.array([entry[1] for entry in result.history])
        assert np.all(np.diff(objectives) <= 1e-12 * objectives[0])

    def test_row_simplex(self, rng):
        W = rng.random((5, 9))
        x_true = random_columns(rng, (5, 1)).T
        solver = SimplexLeastSquares(W, x_true @ W, simplex_axis=1)
        result = solver.solve(tolerance=1e-14, max_iterations=200_000)
        assert result.solution.shape == (1, 5)
        assert np.allclose(result.solution, x_true, atol=1e-6)

    def test_smoothness_penalty_decreases_with_weight(self, rng):
        W = rng.random((10, 6))
        T = rng.random((3, 6))
        penalties = []
        for weight in (0.0, 1.0, 100.0):
            result = SimplexLeastSquares(W, T, weight).solve(max_iterations=20_000)
            penalties.append(result.penalty)
        assert penalties[0] >= penalties[1] - 1e-9
        assert penalties[1] >= penalties[2] - 1e-9

    def test_non_convergence_is_flagged(self, rng, caplog):
        W = rng.random((20, 25))
        T = rng.random((6, 25))
        result = SimplexLeastSquares(W, T, 1e-3).solve(max_iterations=5, tolerance=1e-15)
        assert not result.converged
        assert result.iterations == 5
        assert "before convergence" in caplog.text

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            SimplexLeastSquares(np.ones((3, 4)), np.ones((2, 5)))

    def test_negative_weight(self):
        with pytest.raises(ValueError):
            SimplexLeastSquares(np.ones((3, 4)), np.ones((2, 4)), -1.0)

    def test_bad_initial_point(self):
        solver = SimplexLeastSquares(np.ones((3, 4)), np.ones((2, 4)))
        with pytest.raises(DimensionError):
            solver.solve(x0=np.ones((3, 3)))
