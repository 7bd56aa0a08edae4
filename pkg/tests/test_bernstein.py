import numpy as np
import pytest

from excavplan.bernstein import BernsteinCurve, bernstein_basis, derivative_points
from excavplan.oracles import bernstein_constant, bernstein_hull


def test_partition_of_unity():
    s = np.linspace(0, 1, 101)
    for n in (1, 4, 8, 12):
        np.testing.assert_allclose(bernstein_basis(n, s).sum(axis=-1), 1.0, atol=1e-14)


def test_hull_and_constant_oracles(rng):
    assert bernstein_hull(rng).passed
    assert bernstein_constant().passed


def test_endpoints_interpolate():
    pts = np.arange(20.0).reshape(5, 4)
    c = BernsteinCurve(pts, 2.0)
    np.testing.assert_array_equal(c(0.0), pts[0])
    np.testing.assert_array_equal(c(1.0), pts[-1])
    _, qd, _ = c.at_time(0.0)
    np.testing.assert_allclose(qd, 4 * (pts[1] - pts[0]) / 2.0)


def test_derivative_points_vs_fd(rng):
    c = BernsteinCurve(rng.normal(size=(9, 4)), 3.0)
    t = np.linspace(0.1, 2.9, 30)
    h = 1e-6
    q_hi, _, _ = c.at_time(t + h)
    q_lo, _, _ = c.at_time(t - h)
    _, qd, qdd = c.at_time(t)
    np.testing.assert_allclose(qd, (q_hi - q_lo) / (2 * h), rtol=1e-6, atol=1e-7)
    _, v_hi, _ = c.at_time(t + h)
    _, v_lo, _ = c.at_time(t - h)
    np.testing.assert_allclose(qdd, (v_hi - v_lo) / (2 * h), rtol=1e-6, atol=1e-6)


def test_linear_ramp_points():
    pts = np.linspace(0.0, 1.0, 6)[:, None]
    d = derivative_points(pts, 2.0)
    np.testing.assert_allclose(d, 0.5, atol=1e-15)


def test_invalid_curves():
    with pytest.raises(ValueError):
        BernsteinCurve(np.zeros((3, 2)), 0.0)
    with pytest.raises(ValueError):
        BernsteinCurve(np.zeros((1, 2)), 1.0)
