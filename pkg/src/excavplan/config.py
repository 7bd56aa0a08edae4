"""YAML configuration loading with invariant checks.

Every failure raises :class:`ConfigError` carrying the dotted key path of the
offending entry, e.g. ``cylinders.boom.a_m``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Any

import numpy as np
import yaml

from .model import LINKS, ModelParams, PhysicalLimits

DATA_DIR = Path(__file__).parent / "data"


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def load_yaml(path) -> dict:
    path = Path(path)
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(str(path), f"cannot read ({exc.strerror})") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(str(path), f"invalid YAML: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(str(path), "top level must be a mapping")
    return doc


def get(doc: dict, path: str, default: Any = ..., *, positive=False, nonneg=False):
    """Fetch a scalar by dotted path, checking it is a finite number."""
    node: Any = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if default is ...:
                raise ConfigError(path, "missing")
            return default
        node = node[part]
    try:
        value = float(node)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected a number, got {node!r}") from None
    if not np.isfinite(value):
        raise ConfigError(path, "must be finite")
    if positive and value <= 0.0:
        raise ConfigError(path, "must be > 0")
    if nonneg and value < 0.0:
        raise ConfigError(path, "must be >= 0")
    return value


def get_vector(doc: dict, path: str, size: int | None = None, default: Any = ..., **kw):
    node: Any = doc
    for part in path.split("."):
        if not isinstance(node, dict) or part not in node:
            if default is ...:
                raise ConfigError(path, "missing")
            return None if default is None else np.asarray(default, dtype=float)
        node = node[part]
    if not isinstance(node, (list, tuple)):
        raise ConfigError(path, "expected a list of numbers")
    try:
        arr = np.asarray(node, dtype=float)
    except (TypeError, ValueError):
        raise ConfigError(path, "expected a list of numbers") from None
    if arr.ndim != 1 or (size is not None and arr.size != size):
        raise ConfigError(path, f"expected {size} numbers")
    if not np.all(np.isfinite(arr)):
        raise ConfigError(path, "entries must be finite")
    if kw.get("positive") and np.any(arr <= 0.0):
        raise ConfigError(path, "entries must be > 0")
    return arr


def parse_model(doc: dict) -> tuple[ModelParams, PhysicalLimits]:
    lengths, masses, com, inertias = [], [], [], []
    for name in LINKS:
        base = f"links.{name}"
        lengths.append(get(doc, f"{base}.length_m", positive=True))
        masses.append(get(doc, f"{base}.mass_kg", positive=True))
        com.append([get(doc, f"{base}.com_along_m"), get(doc, f"{base}.com_normal_m", 0.0)])
        inertias.append(get(doc, f"{base}.inertia_kgm2", positive=True))
    cyl_a, cyl_b, phi0, L_lo, L_hi = [], [], [], [], []
    for name in LINKS:
        base = f"cylinders.{name}"
        a = get(doc, f"{base}.a_m", positive=True)
        b = get(doc, f"{base}.b_m", positive=True)
        lo = get(doc, f"{base}.length_min_m", positive=True)
        hi = get(doc, f"{base}.length_max_m", positive=True)
        if not lo < hi:
            raise ConfigError(f"{base}.length_max_m", "must exceed length_min_m")
        # keeps phi0 + theta inside (0, pi) over the whole stroke
        if lo <= abs(a - b):
            raise ConfigError(f"{base}.length_min_m", "must exceed |a_m - b_m|")
        if hi >= a + b:
            raise ConfigError(f"{base}.length_max_m", "must be below a_m + b_m")
        cyl_a.append(a)
        cyl_b.append(b)
        phi0.append(get(doc, f"{base}.phi0_rad"))
        L_lo.append(lo)
        L_hi.append(hi)

    empty = get(doc, "bucket.empty_angle_rad")
    full = get(doc, "bucket.full_angle_rad")
    if not 0.0 < empty < full < np.pi:
        raise ConfigError("bucket.full_angle_rad", "need 0 < empty_angle_rad < full_angle_rad < pi")

    params = ModelParams(
        lengths=np.array(lengths),
        masses=np.array(masses),
        com=np.array(com),
        inertias=np.array(inertias),
        cabin_inertia=get(doc, "cabin.yaw_inertia_kgm2", positive=True),
        pivot=np.array([get(doc, "cabin.boom_pivot_x_m"), get(doc, "cabin.boom_pivot_z_m")]),
        cyl_a=np.array(cyl_a),
        cyl_b=np.array(cyl_b),
        cyl_phi0=np.array(phi0),
        gravity=get(doc, "gravity_mps2", 9.81, nonneg=True),
        tip_to_heel=get(doc, "bucket.tip_to_heel_m", nonneg=True),
        plate_offset=get(doc, "bucket.plate_offset_rad"),
        bucket_width=get(doc, "bucket.width_m", positive=True),
        empty_angle=empty,
        full_angle=full,
        max_volume=get(doc, "bucket.max_volume_m3", positive=True),
    )
    return params, parse_limits(doc, np.array(L_lo), np.array(L_hi))


_ACTUATORS = ("swing_torque_nm", "boom_force_n", "arm_force_n", "bucket_force_n")
_RATES = ("swing_rate_radps", "boom_rate_mps", "arm_rate_mps", "bucket_rate_mps")


def parse_limits(doc: dict, L_lo, L_hi) -> PhysicalLimits:
    u_lo = np.array([get(doc, f"limits.{k}_min") for k in _ACTUATORS])
    u_hi = np.array([get(doc, f"limits.{k}_max") for k in _ACTUATORS])
    for k, lo, hi in zip(_ACTUATORS, u_lo, u_hi):
        if not lo < hi:
            raise ConfigError(f"limits.{k}_max", "must exceed the matching _min")
    qd_hi = np.array([get(doc, f"limits.{k}_max", positive=True) for k in _RATES])
    qd_lo = np.array([-get(doc, f"limits.{k}_max", positive=True) for k in _RATES])
    pumps = doc.get("limits", {}).get("pumps")
    if not isinstance(pumps, list) or len(pumps) != 2:
        raise ConfigError("limits.pumps", "expected a list of exactly 2 pumps")
    flow, a_exp, a_con = [], [], []
    for i, pump in enumerate(pumps):
        base = f"limits.pumps.{i}"
        wrapped = {"p": pump}
        flow.append(_sub(get, wrapped, "p.flow_max_m3ps", base, positive=True))
        a_exp.append(_sub(get_vector, wrapped, "p.area_expand_m2", base, 4, positive=True))
        a_con.append(_sub(get_vector, wrapped, "p.area_contract_m2", base, 4, positive=True))
    swing_lo = get(doc, "limits.swing_angle_min_rad", -np.pi)
    swing_hi = get(doc, "limits.swing_angle_max_rad", np.pi)
    if not swing_lo < swing_hi:
        raise ConfigError("limits.swing_angle_max_rad", "must exceed swing_angle_min_rad")
    return PhysicalLimits(
        u_lower=u_lo, u_upper=u_hi,
        power_max=get(doc, "limits.power_max_w", positive=True),
        L_lower=L_lo, L_upper=L_hi,
        flow_max=np.array(flow),
        area_expand=np.array(a_exp), area_contract=np.array(a_con),
        swing_lower=swing_lo, swing_upper=swing_hi,
        qd_lower=qd_lo, qd_upper=qd_hi,
    )


def _sub(fn, doc, path, base, *args, **kw):
    try:
        return fn(doc, path, *args, **kw)
    except ConfigError as exc:
        raise ConfigError(base + exc.path[1:], str(exc).split(": ", 1)[1]) from None


def load_model(path=None) -> tuple[ModelParams, PhysicalLimits]:
    """Load model parameters and physical limits; defaults to the bundled 30 t machine."""
    path = DATA_DIR / "excavator_30t.yaml" if path is None else Path(path)
    return parse_model(load_yaml(path))
