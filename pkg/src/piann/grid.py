"""Discretized space-time domain shared by the solvers, the loss, and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _axis(start: float, stop: float, step: float, name: str) -> np.ndarray:
    if step <= 0.0:
        raise ValueError(f"{name}: step must be positive, got {step}")
    if stop <= start:
        raise ValueError(f"{name}: empty range [{start}, {stop}]")
    span = stop - start
    n = int(round(span / step))
    if n < 1 or abs(n * step - span) > 1e-9 * max(1.0, abs(span)):
        raise ValueError(f"{name}: step {step} does not divide the range [{start}, {stop}]")
    return np.linspace(start, stop, n + 1)


@dataclass(frozen=True)
class GridSpec:
    """Uniform node lattice: x_0..x_N in space, t_0..t_T in time."""

    x: np.ndarray
    t: np.ndarray

    @staticmethod
    def from_steps(
        x_max: float,
        dx: float,
        t_max: float,
        dt: float,
        x_min: float = 0.0,
        t_min: float = 0.0,
    ) -> "GridSpec":
        return GridSpec(_axis(x_min, x_max, dx, "x"), _axis(t_min, t_max, dt, "t"))

    @property
    def n_x(self) -> int:
        """Node count along x (N + 1)."""
        return self.x.size

    @property
    def n_t(self) -> int:
        """Node count along t (T + 1)."""
        return self.t.size

    @property
    def dx(self) -> float:
        return float(self.x[1] - self.x[0])

    @property
    def dt(self) -> float:
        return float(self.t[1] - self.t[0])

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=np.float64))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64))
        for name, axis in (("x", self.x), ("t", self.t)):
            if axis.ndim != 1 or axis.size < 2:
                raise ValueError(f"{name}: need at least two nodes")
            steps = np.diff(axis)
            if np.any(steps <= 0) or np.ptp(steps) > 1e-9 * max(1.0, steps[0]):
                raise ValueError(f"{name}: nodes must be uniformly increasing")


@dataclass
class SolutionField:
    """Saturation samples on a grid for one mobility ratio; rows follow time."""

    m_value: float
    grid: GridSpec
    u: np.ndarray  # shape (n_t, n_x)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        expected = (self.grid.n_t, self.grid.n_x)
        if self.u.shape != expected:
            raise ValueError(f"field shape {self.u.shape} does not match grid {expected}")

    def at_time(self, j: int) -> np.ndarray:
        return self.u[j]
