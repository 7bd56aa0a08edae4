import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from excavplan.oracles import swept_volume_affine, swept_volume_vs_grid
from excavplan.terrain import (BucketCapacityCurve, BucketGeometry, GroundModel, TerrainError, TipPath,
                               body_above_path, bucket_capacity, bucket_triangle, clearance_angle,
                               eval_ground, excavated_volume, path_height, swept_volume,
                               validate_phase2, velocity_angles)

FLAT = GroundModel((0.0,), (-0.5,), 3.0, 9.0)


def test_constant_and_linear_ground():
    g = GroundModel((1.7,), (0.0,), 0.0, 10.0)
    np.testing.assert_array_equal(eval_ground(g, "surface", np.linspace(0, 10, 7)), 1.7)
    g = GroundModel((1.0, -0.1), (0.0,), 0.0, 10.0)
    assert eval_ground(g, "surface", 5.0) == pytest.approx(0.5, abs=1e-15)
    with pytest.raises(TerrainError):
        eval_ground(g, "target", 10.5)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=7), st.floats(-3, 3))
def test_horner_vs_power_sum(coeffs, x):
    g = GroundModel(tuple(coeffs), (0.0,), -3.0, 3.0)
    naive = sum(c * x ** k for k, c in enumerate(coeffs))
    assert abs(float(g.surf(x)) - naive) <= 1e-12 * max(1.0, sum(abs(c) * 3.0 ** k for k, c in enumerate(coeffs)))


def test_target_above_surface_rejected():
    with pytest.raises(TerrainError):
        GroundModel((0.0,), (0.1,), 0.0, 1.0).check()


def test_swept_volume_cases(rng):
    assert swept_volume_affine().passed
    path = TipPath(np.linspace(2.0, 1.0, 5), np.full(5, -0.5), np.zeros(5))
    g = GroundModel((0.0,), (-1.0,), 0.0, 3.0)
    assert float(swept_volume(path, g)) == pytest.approx(0.5, abs=1e-15)
    assert swept_volume_vs_grid(rng).passed
    with pytest.raises(TerrainError):
        swept_volume(TipPath(np.array([1.0, 2.0]), np.zeros(2), np.zeros(2)), g)


def test_capacity_curve():
    c = BucketCapacityCurve(1.4, 2.6, 1.0)
    assert bucket_capacity(1.4, c) == 0.0
    assert bucket_capacity(0.5, c) == 0.0
    assert bucket_capacity(2.6, c) == 1.0
    assert bucket_capacity(3.0, c) == 1.0
    assert bucket_capacity(2.0, c) == pytest.approx(0.5, abs=1e-15)
    th = np.linspace(1.3, 2.7, 500)
    assert np.all(np.diff(bucket_capacity(th, c)) >= 0.0)
    with pytest.raises(TerrainError):
        bucket_capacity(np.pi, c)
    with pytest.raises(TerrainError):
        BucketCapacityCurve(2.0, 1.0, 1.0)


def _rect_path(depth, theta_end):
    # flat surface, rectangle of the given depth between x = 2 and x = 1
    x = np.array([2.0, 2.0 - 1e-9, 1.0 + 1e-9, 1.0])
    z = np.array([0.0, -depth, -depth, 0.0])
    return TipPath(x, z, np.array([1.0, 1.5, 2.0, theta_end]))


def test_excavated_volume_branches():
    g = GroundModel((0.0,), (-5.0,), 0.0, 3.0)
    c = BucketCapacityCurve(1.4, 2.6, 1.0)
    # trapezoid weights: mean z = -depth * 4 / 6 over unit width
    small = excavated_volume(_rect_path(0.75, 2.6), g, c)
    assert small.branch == "swept" and small.volume == pytest.approx(0.5)
    big = excavated_volume(_rect_path(3.0, 2.6), g, c)
    assert big.branch == "capacity" and big.volume == 1.0 and big.swept == pytest.approx(2.0)
    eq = excavated_volume(_rect_path(1.5, 2.6), g, c)
    assert eq.volume == pytest.approx(1.0, abs=1e-9)


def test_clearance_angle_examples():
    # clockwise angles: travel toward -x has velocity angle pi, and a plate at
    # pi - 0.1 leaves the heel above the cut
    path = TipPath(np.array([2.0, 1.0]), np.zeros(2), np.array([0.0, np.pi - 0.1 + (-0.6)]))
    assert clearance_angle(path, 1, -0.6) == pytest.approx(0.1, abs=1e-14)
    aligned = TipPath(np.array([2.0, 1.0]), np.zeros(2), np.array([0.0, np.pi - 0.6]))
    assert clearance_angle(aligned, 1, -0.6) == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(TerrainError):
        clearance_angle(TipPath(np.ones(2), np.ones(2), np.zeros(2)), 1, 0.0)


def test_velocity_direction_vs_dense_resampling():
    for a in (0.2, 0.4, 0.6):
        s = np.linspace(0.0, 1.0, 21)
        x, z = 8.0 - 4.0 * s, -a * np.sin(np.pi * s)
        nu = velocity_angles(x, z)
        sd = np.linspace(0.0, 1.0, 200001)
        xd, zd = 8.0 - 4.0 * sd, -a * np.sin(np.pi * sd)
        nud = np.arctan2(-np.gradient(zd), np.gradient(xd))
        ref = nud[np.searchsorted(sd, s[1:] - 1e-12)]
        diff = np.abs(np.angle(np.exp(1j * (nu[1:] - ref))))
        assert np.max(diff) < 0.05


def test_body_clearance_examples():
    path = TipPath(np.linspace(8.0, 4.0, 9), np.full(9, -0.3), np.full(9, 1.8))
    tiny = BucketGeometry(0.0, 0.0, -0.6)
    for i in range(9):
        assert body_above_path(path, i, tiny, FLAT) == 0.0
    # plate pointing straight down from the heel: heel sits 0.2 m above the tip
    geom = BucketGeometry(pin_length=0.2, heel_length=0.2, plate_offset=0.0)
    up = TipPath(path.x, path.z, np.full(9, np.pi / 2))
    for i in range(9):
        assert body_above_path(up, i, geom, FLAT) == pytest.approx(0.2, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_body_clearance_sign_vs_sampling(seed):
    r = np.random.default_rng(seed)
    g = GroundModel((-1.0, 0.1), (-3.0,), 0.0, 12.0)
    x = np.linspace(8.0, 4.0, 11)
    path = TipPath(x, g.surf(x), np.zeros(11))
    geom = BucketGeometry(r.uniform(0.5, 2.0), r.uniform(0.3, 1.5), r.uniform(-1.0, 0.0))
    i = int(r.integers(0, 11))
    th = r.uniform(0.0, 2 * np.pi)
    pose = TipPath(x, path.z, np.where(np.arange(11) == i, th, 0.0))
    got = body_above_path(pose, i, geom, g)
    tri = bucket_triangle(x[i], path.z[i], th, geom)
    w = r.dirichlet(np.ones(3), size=1000)
    pts = w @ tri
    below = np.min(pts[:, 1] - path_height(x, path.z, pts[:, 0], g))
    # tip vertex lies on the path; interior points are never lower than the worst vertex
    assert (got < -1e-9) == (below < -1e-9)


def _scoop():
    s = np.linspace(0.0, 1.0, 21)
    x = 8.0 - 4.0 * s
    z = -0.4 * np.sin(np.pi * s)
    z[[0, -1]] = 0.0
    return TipPath(x, z, 1.0 + s)


def _independent_checks(path, g, geom, tol=1e-6):
    """Per-constraint re-evaluation with plain loops and dense polyline sampling."""
    x, z, th = path
    n = len(x) - 1
    ok = all(g.x_min <= xi <= g.x_max for xi in x)
    ok &= all(g.targ(xi) - tol <= zi <= g.surf(xi) + tol for xi, zi in zip(x, z))
    ok &= abs(z[0] - g.surf(x[0])) <= tol and abs(z[n] - g.surf(x[n])) <= tol
    ok &= all(th[i + 1] >= th[i] for i in range(n))
    for i in range(1, n + 1):
        nu = np.arctan2(-(z[i] - z[i - 1]), x[i] - x[i - 1])
        alpha = np.angle(np.exp(1j * (nu - (th[i] - geom.plate_offset))))
        ok &= alpha > 0
    xs = np.linspace(x[-1], x[0], 20001)
    zs = np.interp(xs, x[::-1], z[::-1])
    for i in range(n + 1):
        plate, phi = th[i] - geom.plate_offset, th[i]
        for vx, vz in ((x[i] - geom.heel_length * np.cos(plate), z[i] + geom.heel_length * np.sin(plate)),
                       (x[i] - geom.pin_length * np.cos(phi), z[i] + geom.pin_length * np.sin(phi))):
            ref = np.interp(vx, xs, zs) if xs[0] <= vx <= xs[-1] else g.surf(vx)
            ok &= vz >= ref - tol
    ok &= all(t < np.pi for t in th)
    return bool(ok)


def test_hand_built_scoop_feasible(params):
    geom = BucketGeometry.from_params(params)
    path = _scoop()
    assert _independent_checks(path, FLAT, geom)
    rep = validate_phase2(path, FLAT, geom)
    assert rep.feasible, str(rep)


def test_theta_decrease_flagged(params):
    geom = BucketGeometry.from_params(params)
    p = _scoop()
    th = p.theta.copy()
    th[7] = th[6] - 0.02
    rep = validate_phase2(TipPath(p.x, p.z, th), FLAT, geom)
    assert not rep.feasible
    assert rep.where["theta_monotone"] == 7
    assert rep.violations["theta_monotone"] == pytest.approx(0.02)


def test_lifted_endpoint_flagged(params):
    geom = BucketGeometry.from_params(params)
    p = _scoop()
    z = p.z.copy()
    z[-1] += 0.1
    rep = validate_phase2(TipPath(p.x, z, p.theta), FLAT, geom)
    assert rep.violations["endpoints_on_surface"] == pytest.approx(0.1)
    assert not rep.feasible
