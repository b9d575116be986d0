"""Result-matrix bookkeeping and the two sequence-level scores.

R[i][j] is test accuracy on task i measured after finishing training task
j; entries with j < i never exist. ACC averages the final column; BWT
averages the final-column-minus-diagonal differences (negative values
mean earlier tasks got worse).
"""

from __future__ import annotations

import numpy as np

from .tensor import TensorError


class ResultMatrix:
    def __init__(self, n_tasks: int):
        if n_tasks < 1:
            raise TensorError("need at least one task")
        self.n_tasks = n_tasks
        self.r = np.full((n_tasks, n_tasks), np.nan)

    def fill(self, task_i: int, after_j: int, accuracy: float):
        if after_j < task_i:
            raise TensorError("R[i][j] is undefined for j < i")
        if not 0.0 <= accuracy <= 1.0:
            raise TensorError("accuracy must lie in [0, 1]")
        self.r[task_i, after_j] = accuracy

    def get(self, task_i: int, after_j: int) -> float:
        v = self.r[task_i, after_j]
        if np.isnan(v):
            raise TensorError(f"R[{task_i}][{after_j}] unfilled")
        return float(v)

    def filled_through(self) -> int:
        """Number of leading completed columns (column j filled for i <= j)."""
        done = 0
        for j in range(self.n_tasks):
            if np.isnan(self.r[:j + 1, j]).any():
                break
            done = j + 1
        return done


def acc(matrix: ResultMatrix) -> float:
    """Mean of the final column: average test accuracy after the last task."""
    final = matrix.r[:, -1]
    if np.isnan(final).any():
        raise TensorError("final column unfilled")
    return float(final.mean())


def bwt(matrix: ResultMatrix) -> float:
    """Mean of (final column - diagonal); the last task contributes zero."""
    final = matrix.r[:, -1]
    diag = np.diag(matrix.r)
    if np.isnan(final).any() or np.isnan(diag).any():
        raise TensorError("final column or diagonal unfilled")
    return float((final - diag).mean())
