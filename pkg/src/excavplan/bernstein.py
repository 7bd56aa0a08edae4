"""Bernstein-polynomial curves over a fixed duration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import comb


def bernstein_basis(n: int, s):
    """Basis values b_{k,n}(s), shape (..., n+1)."""
    s = np.asarray(s, dtype=float)[..., None]
    k = np.arange(n + 1)
    return comb(n, k) * s ** k * (1.0 - s) ** (n - k)


def derivative_points(points, duration: float):
    """Control points of the time derivative: n (beta_{k+1} - beta_k) / T."""
    points = np.asarray(points, dtype=float)
    n = points.shape[-2] - 1
    return n * np.diff(points, axis=-2) / duration


@dataclass(frozen=True)
class BernsteinCurve:
    points: np.ndarray   # (n+1, dim)
    duration: float

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        if not self.duration > 0.0:
            raise ValueError("duration must be positive")
        if self.points.ndim != 2 or self.points.shape[0] < 2:
            raise ValueError("need at least two control points")

    @property
    def degree(self) -> int:
        return self.points.shape[0] - 1

    def __call__(self, s):
        return bernstein_basis(self.degree, s) @ self.points

    def velocity_points(self):
        return derivative_points(self.points, self.duration)

    def acceleration_points(self):
        return derivative_points(self.velocity_points(), self.duration)

    def at_time(self, t):
        """Position, velocity and acceleration at times ``t`` in [0, T]."""
        s = np.clip(np.asarray(t, dtype=float) / self.duration, 0.0, 1.0)
        q = self(s)
        vp = self.velocity_points()
        qd = bernstein_basis(self.degree - 1, s) @ vp
        if self.degree >= 2:
            qdd = bernstein_basis(self.degree - 2, s) @ self.acceleration_points()
        else:
            qdd = np.zeros_like(qd)
        return q, qd, qdd
