import numpy as np
import pytest
from scipy.integrate import solve_ivp

from excavplan import model as mdl
from excavplan.controller import PidController, PidGains, desired_joint_state
from excavplan.plant import Plant, PlantState

Q_L = np.array([0.1, 2.45, 2.6, 1.9])
X_D = np.concatenate([Q_L, np.zeros(4)])


def test_gravity_compensation_at_rest(params):
    ctl = PidController(params)
    q, qd = desired_joint_state(params, X_D)
    u = ctl.control(X_D, X_D, (q, qd), np.zeros(4), 1e-3)
    G = mdl.gravity_vector(params, q)
    np.testing.assert_allclose(u, G / mdl.joint_jacobian_theta(params, q), rtol=1e-12, atol=1e-9)


def test_gain_validation():
    with pytest.raises(ValueError):
        PidGains(kp=-1.0)
    with pytest.raises(ValueError):
        PidGains(clamp=0.0)
    with pytest.raises(ValueError):
        PidGains(kd=np.ones((4, 4)))
    g = PidGains(kp=np.diag([1.0, 2.0, 3.0, 4.0]))
    np.testing.assert_array_equal(g.kp, [1.0, 2.0, 3.0, 4.0])


def _closed_loop(params, gains, e0, duration, delta, delta_hat, dt=1e-3):
    plant = Plant(params, friction=None, soil=None, injected=lambda t: delta)
    ctl = PidController(params, gains)
    qr, _ = desired_joint_state(params, X_D)
    state = PlantState(qr - e0, np.zeros(4))
    errs = [e0.copy()]
    for _ in range(int(round(duration / dt))):
        u = ctl.control(X_D, X_D, (state.q, state.qd), delta_hat, dt)
        state = plant.step(state, u, dt)
        errs.append(qr - state.q)
    return np.array(errs)


def test_error_dynamics_match_linear_ode(params):
    gains = PidGains()
    e0 = np.array([0.01, -0.008, 0.006, 0.01])
    delta = np.array([200.0, 3000.0, -2000.0, 500.0])
    errs = _closed_loop(params, gains, e0, 2.0, delta, delta)
    t = np.arange(len(errs)) * 1e-3
    for j in range(4):
        kp, kd, ki = gains.kp[j], gains.kd[j], gains.ki[j]

        def rhs(_, y):
            # y = (int e, e, e_dot)
            return [y[1], y[2], -kd * y[2] - kp * y[1] - ki * y[0]]

        sol = solve_ivp(rhs, (0.0, t[-1]), [0.0, e0[j], 0.0], t_eval=t, rtol=1e-10, atol=1e-13)
        assert np.max(np.abs(errs[:, j] - sol.y[1])) < 0.02 * abs(e0[j])


def test_doubling_kp_halves_steady_error(params):
    delta = np.array([50.0, 800.0, -600.0, 300.0])
    ss = []
    for kp in (100.0, 200.0):
        gains = PidGains(kp=np.full(4, kp), kd=np.full(4, 30.0), ki=np.zeros(4))
        errs = _closed_loop(params, gains, np.zeros(4), 3.0, delta, np.zeros(4))
        ss.append(errs[-1])
    ratio = ss[1] / ss[0]
    np.testing.assert_allclose(ratio, 0.5, rtol=0.02)


def test_integral_clamp(params):
    gains = PidGains(clamp=np.full(4, 1e-3))
    ctl = PidController(params, gains)
    q, qd = desired_joint_state(params, X_D)
    for _ in range(100):
        ctl.control(X_D, X_D, (q - 0.1, qd), np.zeros(4), 1e-3)
    np.testing.assert_allclose(np.abs(ctl.integral), 1e-3)
    ctl.reset()
    np.testing.assert_array_equal(ctl.integral, 0.0)


def test_feedforward_from_reference_difference(params):
    ctl = PidController(params)
    x_next = X_D.copy()
    x_next[5] = 0.01
    q, qd = desired_joint_state(params, X_D)
    u_fd = ctl.control(X_D, x_next, (q, qd), np.zeros(4), 0.02)
    _, qd_next = desired_joint_state(params, x_next)
    ctl.reset()
    u_ex = ctl.control(X_D, X_D, (q, qd), np.zeros(4), 0.02, qdd_d=qd_next / 0.02)
    np.testing.assert_allclose(u_fd, u_ex, rtol=1e-12)
