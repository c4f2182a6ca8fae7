"""Grids and the semi-discrete system wrapper shared by the three labs."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .lti_core import LtiSystem


@dataclass(frozen=True)
class Grid1D:
    """Uniform grid on (0, L) with N cells of width h = L / N."""

    L: float
    N: int

    def __post_init__(self):
        if self.N < 2:
            raise ValueError(f"N must be at least 2, got {self.N}")
        if not self.L > 0:
            raise ValueError(f"L must be positive, got {self.L}")

    @property
    def h(self) -> float:
        return self.L / self.N

    @property
    def centers(self) -> np.ndarray:
        """Cell centers (i - 1/2) h, i = 1..N."""
        return (np.arange(self.N) + 0.5) * self.h

    @property
    def interior_nodes(self) -> np.ndarray:
        """Nodes i h, i = 1..N-1 (Dirichlet ends removed)."""
        return np.arange(1, self.N) * self.h


@dataclass(frozen=True)
class SemiDiscreteSystem:
    """An LtiSystem together with the mesh and physics it came from.

    ``family`` is "transport", "wave" or "heat"; ``control_mask`` is either the
    string "boundary" or a boolean array over grid points; ``physics`` holds
    the kernel or coupling payload and any operator splits.
    """

    lti: LtiSystem
    grid: Grid1D
    family: str
    control_mask: Any
    physics: dict = field(default_factory=dict)


def dirichlet_laplacian(grid: Grid1D) -> np.ndarray:
    """Centered second difference on the interior nodes, Dirichlet ends."""
    m = grid.N - 1
    lap = -2.0 * np.eye(m) + np.eye(m, k=1) + np.eye(m, k=-1)
    return lap / grid.h**2


def interval_mask(points: np.ndarray, omega: tuple[float, float]) -> np.ndarray:
    """Boolean indicator of the open interval omega on the given points."""
    a, b = omega
    return (points > a) & (points < b)


def sine_modes(grid: Grid1D, count: int) -> np.ndarray:
    """Dirichlet eigenvectors sin(k pi x / L), k = 1..count, on interior nodes."""
    x = grid.interior_nodes
    k = np.arange(1, count + 1)
    return np.sin(np.outer(x, k) * np.pi / grid.L)
