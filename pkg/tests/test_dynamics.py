import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from decbf import dynamics as dyn
from decbf.dynamics import ANGLE_LIMIT, DynamicsKind
from decbf.errors import ModelError, NumericError, SingularityError


def test_2d_derivative_drifts_by_velocity(kind2d):
    np.testing.assert_array_equal(dyn.deriv(kind2d, [0, 0, 1, 2], [0, 0]), [1, 2, 0, 0])


def test_3d_equilibrium(kind3d):
    np.testing.assert_array_equal(dyn.deriv(kind3d, np.zeros(8), np.zeros(3)), np.zeros(8))


def test_3d_tilt_accelerates(kind3d):
    s = np.zeros(8)
    s[6] = np.pi / 4
    d = dyn.deriv(kind3d, s, np.zeros(3))
    assert d[3] == pytest.approx(9.8)
    assert d[4] == 0.0


def test_3d_derivative_layout(kind3d):
    s = np.array([0, 0, 0, 1.0, 2.0, 3.0, 0.1, -0.2])
    u = np.array([0.5, -0.5, 1.5])
    d = dyn.deriv(kind3d, s, u)
    np.testing.assert_allclose(d, [1, 2, 3, 9.8 * np.tan(0.1), 9.8 * np.tan(-0.2), 1.5, 0.5, -0.5])


def test_dimension_mismatch_raises(kind2d, kind3d):
    with pytest.raises(ModelError):
        dyn.deriv(kind2d, np.zeros(8), np.zeros(2))
    with pytest.raises(ModelError):
        dyn.deriv(kind3d, np.zeros(8), np.zeros(2))


def test_singular_tilt_raises(kind3d):
    s = np.zeros(8)
    s[7] = np.pi / 2
    with pytest.raises(SingularityError):
        dyn.deriv(kind3d, s, np.zeros(3))


@pytest.mark.parametrize("state,control,dt,expected", [
    ([0, 0, 0, 0], [1, 0], 0.1, [0, 0, 0.1, 0]),
    ([0, 0, 1, 0], [0, 0], 0.5, [0.5, 0, 1, 0]),
])
def test_euler_examples(kind2d, state, control, dt, expected):
    np.testing.assert_allclose(dyn.step(kind2d, state, control, dt), expected)


def test_step_rejects_nonpositive_dt(kind2d):
    with pytest.raises(ModelError):
        dyn.step(kind2d, np.zeros(4), np.zeros(2), 0.0)


def test_step_non_finite_raises(kind2d):
    with pytest.raises(NumericError):
        dyn.step(kind2d, [np.inf, 0, 0, 0], [0, 0])


def test_vertical_channel_matches_closed_form(kind3d):
    """1000 Euler steps of the (z, vz, az) chain against z0 + vz0 t + az t^2 / 2."""
    dt, steps, az = 1e-3, 1000, 1.7
    s = np.zeros(8)
    s[2], s[5] = 0.3, -0.4
    for _ in range(steps):
        s = dyn.step(kind3d, s, [0.0, 0.0, az], dt)
    t = dt * steps
    z_exact = 0.3 - 0.4 * t + 0.5 * az * t * t
    # Euler misses az*t*dt/2 on z; velocity is exact for constant control
    assert abs(s[2] - z_exact) <= az * t * dt
    assert s[5] == pytest.approx(-0.4 + az * t, abs=1e-12)


def test_angles_clamped_after_step(kind3d):
    s = np.zeros(8)
    s[6] = ANGLE_LIMIT - 1e-3
    nxt = dyn.step(kind3d, s, [1.0, -1.0, 0.0], dt=0.5)
    assert nxt[6] == ANGLE_LIMIT
    assert abs(nxt[7]) < np.pi / 2


def test_control_clamp_examples(kind2d, kind3d):
    for kind in (kind2d, kind3d):
        inside = (kind.low + kind.high) / 2
        np.testing.assert_array_equal(dyn.clamp_control(kind, inside), inside)
        np.testing.assert_array_equal(dyn.clamp_control(kind, kind.high + 1), kind.high)


@settings(max_examples=1000, deadline=None)
@given(arrays(np.float64, 3, elements=st.floats(-50, 50)))
def test_clamp_idempotent(u):
    kind = DynamicsKind.drone_3d()
    once = dyn.clamp_control(kind, u)
    np.testing.assert_array_equal(dyn.clamp_control(kind, once), once)
    assert np.all(once >= kind.low) and np.all(once <= kind.high)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 8, elements=st.floats(-1.4, 1.4)), arrays(np.float64, 3, elements=st.floats(-1, 1)))
def test_deriv_is_pure(s, u):
    kind = DynamicsKind.drone_3d()
    a = dyn.deriv(kind, s, u)
    b = dyn.deriv(kind, s.copy(), u.copy())
    assert a.tobytes() == b.tobytes()


@settings(max_examples=200, deadline=None)
@given(st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_tilt_response_strictly_increasing(a, b):
    kind = DynamicsKind.drone_3d()
    if a == b:
        return
    lo, hi = sorted((a, b))
    s_lo, s_hi = np.zeros(8), np.zeros(8)
    s_lo[6], s_hi[6] = lo, hi
    assert dyn.deriv(kind, s_lo, np.zeros(3))[3] < dyn.deriv(kind, s_hi, np.zeros(3))[3]


def test_2d_velocity_update_exact_under_constant_control(kind2d):
    s = np.array([0.0, 0.0, 0.5, -0.5])
    u = np.array([1.0, 2.0])
    nxt = dyn.step(kind2d, s, u, 0.25)
    np.testing.assert_array_equal(nxt[2:], s[2:] + 0.25 * u)
    np.testing.assert_array_equal(nxt[:2], s[:2] + 0.25 * s[2:])


def test_kind_validation():
    with pytest.raises(ValueError):
        DynamicsKind.drone_3d(gravity=0.0)
    with pytest.raises(ValueError):
        DynamicsKind.double_integrator_2d(accel_limit=-1.0)


def test_kind_round_trip(kind2d, kind3d):
    for k in (kind2d, kind3d):
        assert DynamicsKind.from_dict(k.to_dict()) == k


def test_step_graph_matches_step(kind2d, kind3d):
    from decbf import micrograd as mg

    rng = np.random.default_rng(0)
    for kind in (kind2d, kind3d):
        s = rng.normal(0, 0.3, size=(5, kind.state_dim))
        u = rng.uniform(kind.low, kind.high, size=(5, kind.control_dim))
        np.testing.assert_allclose(dyn.step_graph(kind, s, mg.Tensor(u)).data, dyn.step(kind, s, u), atol=1e-14)
