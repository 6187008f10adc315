"""Skeleton graph and its symmetric normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError

# Default 12-joint body: head, torso, two arms (shoulder/elbow/wrist), two legs (knee/ankle).
DEFAULT_EDGES = (
    (0, 1),
    (1, 2), (2, 3), (3, 4),
    (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9),
    (1, 10), (10, 11),
)


@dataclass(frozen=True)
class SkeletonGraph:
    """Joint connectivity. ``adjacency`` is symmetric and nonnegative with
    strictly positive degrees."""

    adjacency: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise GraphError(f"adjacency must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise GraphError("adjacency entries must be finite and nonnegative")
        if not np.array_equal(a, a.T):
            raise GraphError("adjacency must be symmetric")
        deg = a.sum(axis=1)
        zero = np.flatnonzero(deg <= 0)
        if zero.size:
            raise GraphError(f"zero-degree joints {zero.tolist()}; add self-loops")
        a.setflags(write=False)
        object.__setattr__(self, "adjacency", a)

    @classmethod
    def from_edges(cls, num_joints: int, edges=DEFAULT_EDGES, self_loops: bool = True):
        a = np.zeros((num_joints, num_joints))
        for i, j in edges:
            if not (0 <= i < num_joints and 0 <= j < num_joints):
                raise GraphError(f"edge ({i}, {j}) outside [0, {num_joints})")
            a[i, j] = a[j, i] = 1.0
        if self_loops:
            a[np.diag_indices(num_joints)] = 1.0
        return cls(a)

    @property
    def num_joints(self) -> int:
        return self.adjacency.shape[0]

    @property
    def degree(self) -> np.ndarray:
        return np.diag(self.adjacency.sum(axis=1))

    def normalized(self) -> np.ndarray:
        """D^{-1/2} A D^{-1/2}."""
        inv_sqrt = 1.0 / np.sqrt(self.adjacency.sum(axis=1))
        return inv_sqrt[:, None] * self.adjacency * inv_sqrt[None, :]
