"""Polynomial ground model, swept volume, bucket capacity and the geometric
feasibility checks for a digging (soil-cutting) tip path.

Volumes are per unit bucket width (m^2); multiply by the bucket width for m^3.
Paths dig toward the cabin, so ``x`` decreases from the first waypoint to the last.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from numpy.polynomial import polynomial as npoly


class TerrainError(ValueError):
    pass


def horner(coeffs, x):
    """Evaluate sum_k c_k x^k (ascending coefficients)."""
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    for c in reversed(coeffs):
        out = out * x + c
    return out


@dataclass(frozen=True)
class GroundModel:
    surface: tuple
    target: tuple
    x_min: float
    x_max: float

    def __post_init__(self):
        object.__setattr__(self, "surface", tuple(float(c) for c in self.surface))
        object.__setattr__(self, "target", tuple(float(c) for c in self.target))
        if not self.x_min < self.x_max:
            raise TerrainError("x_min must be below x_max")
        if len(self.surface) == 0 or len(self.target) == 0:
            raise TerrainError("empty polynomial")

    def surf(self, x):
        return horner(self.surface, x)

    def targ(self, x):
        return horner(self.target, x)

    def surf_slope(self, x):
        return horner(npoly.polyder(self.surface), x) if len(self.surface) > 1 else np.zeros_like(np.asarray(x, dtype=float))

    def targ_slope(self, x):
        return horner(npoly.polyder(self.target), x) if len(self.target) > 1 else np.zeros_like(np.asarray(x, dtype=float))

    def surface_integral(self, x_lo, x_hi):
        """Exact integral of the surface polynomial from x_lo to x_hi."""
        anti = npoly.polyint(self.surface)
        return horner(anti, x_hi) - horner(anti, x_lo)

    def min_gap(self, samples: int = 2001) -> float:
        xs = np.linspace(self.x_min, self.x_max, samples)
        return float(np.min(self.surf(xs) - self.targ(xs)))

    def check(self, samples: int = 2001):
        gap = self.min_gap(samples)
        if gap < -1e-12:
            raise TerrainError(f"target above surface by {-gap:.3g} m inside the region")


def eval_ground(g: GroundModel, which: str, x):
    x = np.asarray(x, dtype=float)
    if np.any(x < g.x_min) or np.any(x > g.x_max):
        raise TerrainError("x outside the region of interest")
    if which == "surface":
        return g.surf(x)
    if which == "target":
        return g.targ(x)
    raise ValueError(f"unknown ground polynomial {which!r}")


class TipPath(NamedTuple):
    x: np.ndarray
    z: np.ndarray
    theta: np.ndarray

    @property
    def n_segments(self) -> int:
        return len(self.x) - 1


@dataclass(frozen=True)
class BucketCapacityCurve:
    empty_angle: float
    full_angle: float
    v_max: float  # per unit width

    def __post_init__(self):
        if not 0.0 < self.empty_angle < self.full_angle < np.pi:
            raise TerrainError("need 0 < empty_angle < full_angle < pi")
        if self.v_max <= 0.0:
            raise TerrainError("v_max must be positive")

    @classmethod
    def from_params(cls, params) -> "BucketCapacityCurve":
        return cls(params.empty_angle, params.full_angle, params.max_volume / params.bucket_width)


@dataclass(frozen=True)
class BucketGeometry:
    pin_length: float      # tip to bucket pin
    heel_length: float     # tip to heel along the bottom plate
    plate_offset: float    # bucket angle minus heel->tip plate angle

    @classmethod
    def from_params(cls, params) -> "BucketGeometry":
        return cls(float(params.lengths[2]), params.tip_to_heel, params.plate_offset)


# ------------------------------------------------------------------- volume

def swept_volume(path, g: GroundModel, check=True):
    """Area between the surface and the trapezoid-integrated tip path.

    Accepts batched paths (``x``, ``z`` of shape (..., n+1)).
    """
    x = np.asarray(path.x if hasattr(path, "x") else path[0], dtype=float)
    z = np.asarray(path.z if hasattr(path, "z") else path[1], dtype=float)
    n = x.shape[-1] - 1
    if n < 1:
        raise TerrainError("need at least two waypoints")
    x0, xn = x[..., 0], x[..., -1]
    if check and np.any(xn >= x0):
        raise TerrainError("path must dig toward the cabin (x_n < x_0)")
    weights = np.full(n + 1, 2.0)
    weights[[0, -1]] = 1.0
    mean_z = np.sum(weights * z, axis=-1) / (2.0 * n)
    return g.surface_integral(xn, x0) - mean_z * (x0 - xn)


def bucket_capacity(theta, curve: BucketCapacityCurve):
    """Smoothstep capacity ramp between the emptying and full angles."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta >= np.pi):
        raise TerrainError("bucket angle >= pi spills over the wrist")
    return _capacity(theta, curve)


def _capacity(theta, curve):
    s = np.clip((theta - curve.empty_angle) / (curve.full_angle - curve.empty_angle), 0.0, 1.0)
    return curve.v_max * s * s * (3.0 - 2.0 * s)


class Excavated(NamedTuple):
    volume: float
    swept: float
    capacity: float
    branch: str  # "swept" or "capacity"


def excavated_volume(path: TipPath, g: GroundModel, curve: BucketCapacityCurve) -> Excavated:
    vs = float(swept_volume(path, g))
    vc = float(bucket_capacity(path.theta[-1], curve))
    if vs <= vc:
        return Excavated(vs, vs, vc, "swept")
    return Excavated(vc, vs, vc, "capacity")


# --------------------------------------------------------------- geometry

def wrap_angle(a):
    """Wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=float)
    return np.pi - np.mod(np.pi - a, 2.0 * np.pi)


def velocity_angles(x, z):
    """Direction of travel at every waypoint, (..., n+1).

    Same clockwise convention as the bucket angle: ``atan2(-dz, dx)``.
    Backward differences; waypoint 0 takes the direction of segment 1.
    """
    dx = np.diff(x, axis=-1)
    dz = np.diff(z, axis=-1)
    nu = np.arctan2(0.0 - dz, dx)   # no -0.0: level travel toward -x is pi
    return np.concatenate([nu[..., :1], nu], axis=-1)


def clearance_angles(x, z, theta, plate_offset):
    """Clearance angle at every waypoint; positive when the bottom plate trails
    above the cut.  Waypoint 0 uses the direction of segment 1."""
    nu = velocity_angles(x, z)
    return wrap_angle(nu - (np.asarray(theta) - plate_offset))


def clearance_angle(path: TipPath, i: int, plate_offset: float) -> float:
    if i < 1 or i > path.n_segments:
        raise IndexError("clearance angle is defined for waypoints 1..n")
    dx = path.x[i] - path.x[i - 1]
    dz = path.z[i] - path.z[i - 1]
    if dx == 0.0 and dz == 0.0:
        raise TerrainError(f"degenerate segment ending at waypoint {i}")
    return float(wrap_angle(np.arctan2(0.0 - dz, dx) - (path.theta[i] - plate_offset)))


def bucket_triangle(x, z, theta, geom: BucketGeometry):
    """Collision-triangle vertices (tip, heel, pin), shape (..., 3, 2)."""
    x, z, theta = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, z, theta)))
    plate = theta - geom.plate_offset
    tip = np.stack([x, z], axis=-1)
    heel = tip - geom.heel_length * np.stack([np.cos(plate), -np.sin(plate)], axis=-1)
    pin = tip - geom.pin_length * np.stack([np.cos(theta), -np.sin(theta)], axis=-1)
    return np.stack([tip, heel, pin], axis=-2)


def _path_height(px, pz, xq, g: GroundModel):
    """Height, spanning segment index (-1 outside) and segment parameter."""
    px = np.asarray(px, dtype=float)
    pz = np.asarray(pz, dtype=float)
    xq = np.asarray(xq, dtype=float)
    xa, xb = px[..., :-1], px[..., 1:]
    za, zb = pz[..., :-1], pz[..., 1:]
    lo, hi = np.minimum(xa, xb), np.maximum(xa, xb)
    # broadcast segments against query points: (..., Q, S)
    xq_ = xq[..., :, None]
    span = (xq_ >= lo[..., None, :]) & (xq_ <= hi[..., None, :])
    dx = (xb - xa)[..., None, :]
    flat = np.abs(dx) <= 0.0
    t = np.clip((xq_ - xa[..., None, :]) / np.where(flat, 1.0, dx), 0.0, 1.0)
    zseg = np.where(flat, np.maximum(za, zb)[..., None, :], za[..., None, :] + t * (zb - za)[..., None, :])
    zseg = np.where(span, zseg, -np.inf)
    seg = np.argmax(zseg, axis=-1)
    best = np.take_along_axis(zseg, seg[..., None], axis=-1)[..., 0]
    tsel = np.take_along_axis(t, seg[..., None], axis=-1)[..., 0]
    inside = np.any(span, axis=-1)
    return np.where(inside, best, g.surf(xq)), np.where(inside, seg, -1), tsel


def path_height(px, pz, xq, g: GroundModel):
    """Height of the tip-path polyline at ``xq``; the surface outside the path's
    x-range.  Where several segments span ``xq`` the highest is used."""
    return _path_height(px, pz, xq, g)[0]


def body_clearances(x, z, theta, geom: BucketGeometry, g: GroundModel, skip_tip=False):
    """Signed height of each triangle vertex above the path, (..., n+1, 3).

    With ``skip_tip`` only the heel and pin are evaluated, (..., n+1, 2).
    """
    tri = bucket_triangle(x, z, theta, geom)            # (..., n+1, 3, 2)
    if skip_tip:
        tri = tri[..., 1:, :]
    vx = tri[..., 0]
    vz = tri[..., 1]
    shape = vx.shape
    flat_x = vx.reshape(shape[:-2] + (-1,))
    ref = path_height(x, z, flat_x, g).reshape(shape)
    return vz - ref


def body_above_path(path: TipPath, i: int, geom: BucketGeometry, g: GroundModel) -> float:
    tri = bucket_triangle(path.x[i], path.z[i], path.theta[i], geom)
    ref = path_height(path.x, path.z, tri[:, 0], g)
    # the tip vertex sits on its own path by construction; heel and pin decide
    return float(np.min(tri[1:, 1] - ref[1:]))


# ------------------------------------------------------------- validation

@dataclass
class Phase2Report:
    violations: dict = field(default_factory=dict)   # constraint -> worst violation (>= 0)
    where: dict = field(default_factory=dict)        # constraint -> waypoint index
    tol: float = 1e-6

    @property
    def feasible(self) -> bool:
        return all(v <= self.tol for v in self.violations.values())

    def __str__(self):
        rows = [f"{k:<22s} {v:10.3e} @ {self.where.get(k)}" for k, v in self.violations.items()]
        return "\n".join(rows)


def _worst(report, name, viol):
    viol = np.asarray(viol, dtype=float)
    if viol.size == 0:
        report.violations[name] = 0.0
        report.where[name] = None
        return
    i = int(np.argmax(viol))
    report.violations[name] = max(0.0, float(viol[i]))
    report.where[name] = i


def _shifted(report, name, viol):
    """Like _worst for quantities defined on waypoints 1..n."""
    _worst(report, name, viol)
    if report.where[name] is not None:
        report.where[name] += 1


def validate_phase2(path: TipPath, g: GroundModel, geom: BucketGeometry,
                    tol: float = 1e-6) -> Phase2Report:
    """Evaluate the five digging constraints; ``report.feasible`` when every
    worst-case violation is within ``tol``."""
    x = np.asarray(path.x, dtype=float)
    z = np.asarray(path.z, dtype=float)
    th = np.asarray(path.theta, dtype=float)
    rep = Phase2Report(tol=tol)
    _worst(rep, "region", np.maximum(g.x_min - x, x - g.x_max))
    _worst(rep, "below_surface", z - g.surf(x))
    _worst(rep, "above_target", g.targ(x) - z)
    ends = np.abs(z[[0, -1]] - g.surf(x[[0, -1]]))
    _worst(rep, "endpoints_on_surface", ends)
    rep.where["endpoints_on_surface"] = 0 if ends[0] >= ends[1] else len(x) - 1
    _worst(rep, "distinct_waypoints", 1e-12 - np.hypot(np.diff(x), np.diff(z)))
    _shifted(rep, "theta_monotone", th[:-1] - th[1:])
    _shifted(rep, "clearance_angle", -clearance_angles(x, z, th, geom.plate_offset)[1:])
    body = body_clearances(x, z, th, geom, g)[..., 1:]
    _worst(rep, "body_above_path", np.max(-body, axis=-1))
    _worst(rep, "theta_below_pi", th - np.pi)
    return rep
