"""Per-task accuracy and the PM / FM continual-learning metrics."""
from __future__ import annotations

import math

import numpy as np

from .errors import EmptyEvalSet
from .nn import ExpandableGNN, forward


class AccuracyMatrix:
    """Lower-triangular table: ``m[i, j]`` is accuracy on task j after training on task i (1-based)."""

    def __init__(self, T: int):
        if T < 1:
            raise ValueError("T must be >= 1")
        self.T = T
        self._a = np.full((T, T), np.nan)

    def __getitem__(self, ij) -> float:
        i, j = ij
        self._check(i, j)
        return float(self._a[i - 1, j - 1])

    def __setitem__(self, ij, value: float) -> None:
        i, j = ij
        self._check(i, j)
        if not (math.isnan(value) or 0.0 <= value <= 1.0):
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self._a[i - 1, j - 1] = value

    def _check(self, i: int, j: int) -> None:
        if not (1 <= j <= i <= self.T):
            raise IndexError(f"({i}, {j}) is outside the lower triangle of a {self.T}-task matrix")

    def diagonal(self) -> np.ndarray:
        return np.diag(self._a).copy()

    def last_row(self) -> np.ndarray:
        return self._a[-1].copy()

    def to_list(self) -> list[list[float]]:
        return [[float(self._a[i, j]) for j in range(i + 1)] for i in range(self.T)]

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        m = cls(len(rows))
        for i, row in enumerate(rows, start=1):
            for j, v in enumerate(row[:i], start=1):
                m[i, j] = float(v)
        return m

    def copy(self) -> "AccuracyMatrix":
        out = AccuracyMatrix(self.T)
        out._a = self._a.copy()
        return out

    def __repr__(self) -> str:
        return f"AccuracyMatrix({self.to_list()})"


def pm(m: AccuracyMatrix) -> float:
    return float(np.nanmean(m.diagonal()))


def fm(m: AccuracyMatrix) -> float | None:
    if m.T == 1:
        return None
    diffs = m.last_row()[:-1] - m.diagonal()[:-1]
    return float(np.nanmean(diffs))


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum: ties go to the lowest class index
    return np.argmax(logits, axis=1)


def accuracy(model: ExpandableGNN, s, nodes, fanout="all", seed: int = 0) -> float:
    nodes = np.asarray(sorted(int(v) for v in nodes), dtype=np.int64)
    if len(nodes) == 0:
        raise EmptyEvalSet("no nodes to evaluate")
    lp = forward(model, s, nodes, fanout, seed)
    labels = s.labels[s.rows(nodes)]
    return float(np.mean(predict(lp.total) == labels))
