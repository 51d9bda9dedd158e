"""
Regularized least squares over products of probability simplices.

Solves

    min_X  ||X W - T||_F^2 + lam * ||X D^T||_F^2

where every column (or every row) of X lies on the probability simplex and D
takes second differences along the photon-number axis. Both tomographies go
through this solver: the POVM problems project columns, the photon-number
distribution cross-check projects the single row.
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .exceptions import DimensionError

logger = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 100_000
DEFAULT_TOLERANCE = 1e-10
STOP_WINDOW = 50


def project_simplex(V: np.ndarray, z: float = 1.0, axis: Optional[int] = None) -> np.ndarray:
    """
    Euclidean projection onto the simplex scaled by ``z``.

        P(x; z) = argmin_{y >= 0, sum(y) = z} ||y - x||^2

    Args:
        V: Array to project
        z: Simplex scale
        axis: None projects ``V.ravel()``; 1 projects each row; 0 each column
    """
    V = np.asarray(V, dtype=float)
    if axis == 1:
        n_features = V.shape[1]
        U = np.sort(V, axis=1)[:, ::-1]
        z = np.ones(len(V)) * z
        cssv = np.cumsum(U, axis=1) - z[:, np.newaxis]
        ind = np.arange(n_features) + 1
        cond = U - cssv / ind > 0
        rho = np.count_nonzero(cond, axis=1)
        theta = cssv[np.arange(len(V)), rho - 1] / rho
        return np.maximum(V - theta[:, np.newaxis], 0)
    if axis == 0:
        return project_simplex(V.T, z, axis=1).T
    flat = V.ravel().reshape(1, -1)
    return project_simplex(flat, z, axis=1).ravel()


def second_difference_matrix(size: int) -> np.ndarray:
    """(size-2) x size operator with rows (1, -2, 1); empty when size < 3."""
    if size < 3:
        return np.zeros((0, size))
    D = np.zeros((size - 2, size))
    idx = np.arange(size - 2)
    D[idx, idx] = 1.0
    D[idx, idx + 1] = -2.0
    D[idx, idx + 2] = 1.0
    return D


@dataclass
class SolverResult:
    """
    Outcome of a constrained least-squares solve.

    ``history`` holds (iteration, objective, constraint residual) triples,
    logged every ``history_stride`` iterations plus the final one.
    """
    solution: np.ndarray
    objective: float
    residual_norm: float
    penalty: float
    iterations: int
    converged: bool
    history: List[Tuple[int, float, float]] = field(default_factory=list)


class SimplexLeastSquares:
    """
    Monotone accelerated projected gradient for the problem in the module
    docstring. Iterates never leave the feasible set and the accepted
    objective never increases.
    """

    def __init__(
        self,
        design: np.ndarray,
        target: np.ndarray,
        regularization_weight: float = 0.0,
        simplex_axis: int = 0,
    ):
        design = np.asarray(design, dtype=float)
        target = np.asarray(target, dtype=float)
        if design.ndim != 2 or target.ndim != 2:
            raise DimensionError("design and target must be 2-D")
        if design.shape[1] != target.shape[1]:
            raise DimensionError(
                f"design has {design.shape[1]} columns, target has {target.shape[1]}"
            )
        if not np.all(np.isfinite(design)) or not np.all(np.isfinite(target)):
            raise ValueError("design and target must be finite")
        if regularization_weight < 0:
            raise ValueError("regularization weight must be non-negative")
        if simplex_axis not in (0, 1):
            raise ValueError("simplex_axis must be 0 (columns) or 1 (rows)")

        self.design = design
        self.target = target
        self.regularization_weight = float(regularization_weight)
        self.simplex_axis = simplex_axis
        self.shape = (target.shape[0], design.shape[0])

        self._D = second_difference_matrix(design.shape[0])
        gram = design @ design.T + self.regularization_weight * (self._D.T @ self._D)
        self._gram = gram
        self._cross = target @ design.T
        # Lipschitz constant of the gradient
        self.lipschitz = max(2.0 * float(np.linalg.eigvalsh(gram).max()), 1e-300)

    def project(self, X: np.ndarray) -> np.ndarray:
        return project_simplex(X, 1.0, axis=self.simplex_axis)

    def terms(self, X: np.ndarray) -> Tuple[float, float]:
        """Data term ||XW - T||^2 and unweighted smoothness penalty."""
        residual = X @ self.design - self.target
        smooth = X @ self._D.T
        return float(np.sum(residual ** 2)), float(np.sum(smooth ** 2))

    def objective(self, X: np.ndarray) -> float:
        data, penalty = self.terms(X)
        return data + self.regularization_weight * penalty

    def gradient(self, X: np.ndarray) -> np.ndarray:
        return 2.0 * (X @ self._gram - self._cross)

    def constraint_residual(self, X: np.ndarray) -> float:
        sums = X.sum(axis=self.simplex_axis)
        return float(max(np.abs(sums - 1.0).max(), max(-X.min(), 0.0)))

    def initial_point(self) -> np.ndarray:
        n_rows, n_cols = self.shape
        if self.simplex_axis == 0:
            return np.full(self.shape, 1.0 / n_rows)
        return np.full(self.shape, 1.0 / n_cols)

    def solve(
        self,
        x0: Optional[np.ndarray] = None,
        max_iterations: int = DEFAULT_MAX_ITERATIONS,
        tolerance: float = DEFAULT_TOLERANCE,
        history_stride: int = 100,
    ) -> SolverResult:
        """
        Run until the objective decreases by less than ``tolerance`` (relative)
        over a window of iterations, or ``max_iterations`` is reached.
        """
        x = self.project(self.initial_point() if x0 is None else np.asarray(x0, dtype=float))
        if x.shape != self.shape:
            raise DimensionError(f"initial point has shape {x.shape}, expected {self.shape}")

        step = 1.0 / self.lipschitz
        f_x = self.objective(x)
        scale = max(float(np.sum(self.target ** 2)), 1e-300)
        y = x.copy()
        t = 1.0
        recent = deque([f_x], maxlen=STOP_WINDOW + 1)
        history = [(0, f_x, self.constraint_residual(x))]
        converged = False
        iteration = 0

        for iteration in range(1, max_iterations + 1):
            z = self.project(y - step * self.gradient(y))
            f_z = self.objective(z)
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            if f_z <= f_x:
                x_prev, x, f_x = x, z, f_z
                y = x + (t - 1.0) / t_next * (x - x_prev)
                t = t_next
            else:
                # momentum overshoot: restart from the accepted iterate
                y = x.copy()
                t = 1.0

            recent.append(f_x)
            if iteration % history_stride == 0:
                history.append((iteration, f_x, self.constraint_residual(x)))

            if len(recent) == recent.maxlen:
                if recent[0] - f_x <= tolerance * max(f_x, 1e-16 * scale):
                    converged = True
                    break

        if history[-1][0] != iteration:
            history.append((iteration, f_x, self.constraint_residual(x)))

        data, penalty = self.terms(x)
        if converged:
            logger.debug(
                "Solver converged",
                extra={"iterations": iteration, "objective": f_x},
            )
        else:
            logger.warning(
                "Solver stopped before convergence",
                extra={"iterations": iteration, "objective": f_x},
            )
        return SolverResult(
            solution=x,
            objective=f_x,
            residual_norm=float(np.sqrt(data)),
            penalty=penalty,
            iterations=iteration,
            converged=converged,
            history=history,
        )
