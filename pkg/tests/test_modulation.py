import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cgl_rescaling.errors import DegenerateHessian, LostPositivity, NoInteriorMax, NonFiniteInput, SingularM
from cgl_rescaling.grid import Field, Grid, derivatives_at_origin
from cgl_rescaling.modulation import (
    InitialData,
    ModulationRates,
    ModulationState,
    advance_modulation,
    closure_rates,
    initial_rescaling,
    normalization_residual,
    predictors,
    prescale_for_H,
    profile_initial_data,
    q_of,
    reduced_ode,
    reduced_q_step,
)
from cgl_rescaling.profiles import derive_constants, eval_profile, eval_profile_phase, profile_jet, validate_params


@pytest.fixture(scope="module")
def nlh():
    prm = validate_params(2, 0, 0, 0, 1)
    return prm, derive_constants(prm)


@pytest.fixture(scope="module")
def cgl():
    prm = validate_params(2, 0.5, 0.2, 0, 1)
    return prm, derive_constants(prm)


def _state(d=1, tau=0.0, H=1.0, M=None):
    return ModulationState(tau, 0.0, H, np.zeros(d), np.eye(d) if M is None else np.asarray(M, float))


def test_state_keeps_upper_triangle():
    s = _state(2, M=[[1.0, 0.5], [0.7, 2.0]])
    assert s.M[1, 0] == 0.0
    np.testing.assert_allclose(s.R, np.linalg.inv(s.M))
    s2 = ModulationState.from_dict(s.as_dict())
    assert s2.H == s.H and np.array_equal(s2.M, s.M)


def test_q_of_examples():
    prm = validate_params(2, 0, 0, 0, 2)
    np.testing.assert_allclose(q_of(_state(2), prm), np.eye(2))
    tau, c = 3.0, 0.7
    np.testing.assert_allclose(q_of(_state(2, tau, c * math.exp(-tau)), prm), c * np.eye(2), rtol=1e-14)
    M = np.array([[1.0, 0.3], [0.0, 2.0]])
    Q = q_of(_state(2, 0.5, 0.8, M), prm)
    assert np.array_equal(Q, Q.T)
    assert Q[0, 1] == pytest.approx(0.8 * math.exp(0.5) * (M @ M.T)[0, 1], rel=1e-14)


def test_advance_zero_rates(nlh):
    prm, _ = nlh
    s = _state(H=0.5)
    r = ModulationRates(0.0, 0.0, np.zeros(1), np.zeros((1, 1)))
    out = advance_modulation(s, r, 0.1, prm)
    assert out.H == 0.5 and out.tau == pytest.approx(0.1)
    assert out.t == pytest.approx(0.05, rel=1e-14)
    assert np.array_equal(out.M, s.M) and np.array_equal(out.V, s.V)


def test_advance_exponential_decay(nlh):
    prm, _ = nlh
    s = _state(H=1.0)
    r = ModulationRates.zero(prm)
    for _ in range(100):
        s = advance_modulation(s, r, 0.05, prm)
    assert s.H == pytest.approx(math.exp(-5.0), rel=1e-10)
    # t = int_0^5 e^{-tau} dtau
    assert s.t == pytest.approx(1 - math.exp(-5.0), rel=1e-8)


def test_advance_nilpotent_exact():
    prm = validate_params(2, 0, 0, 0, 2)
    P = np.array([[0.0, 0.4], [0.0, 0.0]])
    r = ModulationRates(0.0, -1.0, np.zeros(2), P)
    s = _state(2)
    for _ in range(10):
        s = advance_modulation(s, r, 0.1, prm)
    np.testing.assert_allclose(s.M, np.eye(2) + s.tau * P, atol=1e-14)


def test_singular_m():
    prm = validate_params(2, 0, 0, 0, 1)
    r = ModulationRates(0.0, -1.0, np.zeros(1), np.array([[-20.0]]))
    with pytest.raises(SingularM):
        advance_modulation(_state(), r, 0.1, prm)


def _profile_origin(prm, c):
    jet = profile_jet(prm, np.zeros((1, prm.d)), 4, c)
    U = [np.asarray(t[0]) for t in jet]
    g = Grid(prm.d, 10.0, 401)
    Th = derivatives_at_origin(Field(g, eval_profile_phase(prm, g.axis(), 0.0, 0, c)), 4)
    Th = [np.zeros_like(np.asarray(t, dtype=float)) if prm.delta == 0 else np.asarray(t, dtype=float) for t in Th]
    return U, Th


def test_closure_zero_for_profile(cgl):
    prm, c = cgl
    U, Th = _profile_origin(prm, c)
    r = closure_rates({"U": U, "Theta": Th, "W3": np.zeros((1, 1, 1))}, np.zeros((1, 1)), 0.1, prm, c)
    assert r.c_W == 0 and np.all(r.Vcal == 0) and np.all(r.Pcal == 0)
    assert r.c_U == -1.0


@pytest.mark.parametrize("q", [1e-3, 1e-2, 0.1])
def test_closure_nlh_cw(nlh, q):
    prm, c = nlh
    U, Th = _profile_origin(prm, c)
    r = closure_rates({"U": U, "Theta": Th}, q * np.eye(1), 0.1, prm, c)
    assert r.c_W == pytest.approx(q / 4, rel=1e-12)
    # the leading-order prediction 2(1-beta delta) c_p trQ/(p-1)^2 coincides here
    assert r.c_W == pytest.approx(2 * c.c_p * q, rel=1e-12)


def test_closure_cgl_leading_order(cgl):
    prm, c = cgl
    U, Th = _profile_origin(prm, c)
    q = 1e-4
    r = closure_rates({"U": U, "Theta": Th}, q * np.eye(1), 0.0, prm, c)
    pred = 2 * (1 - prm.beta * prm.delta) * c.c_p * q / (prm.p - 1) ** 2
    assert r.c_W == pytest.approx(pred, rel=1e-6)
    assert r.c_W == pytest.approx(c.mu5 * q, rel=1e-6)


def test_closure_rejects_nonfinite(nlh):
    prm, c = nlh
    U, Th = _profile_origin(prm, c)
    U[2] = np.array([[np.nan]])
    with pytest.raises(NonFiniteInput):
        closure_rates({"U": U, "Theta": Th}, np.eye(1), 1.0, prm, c)


def test_riccati_isotropic():
    for q0 in (0.5, 1.0, 3.0):
        Q = np.array([[q0]])
        tau = 0.0
        for _ in range(200):
            Q = reduced_q_step(Q, 0.01)
            tau += 0.01
        assert Q[0, 0] == pytest.approx(q0 / (1 + q0 * tau), rel=1e-8)
    assert np.array_equal(reduced_q_step(np.zeros((2, 2)), 0.1), np.zeros((2, 2)))


def test_riccati_fourth_order():
    def err(n):
        Q = np.eye(2) * 2.0
        for _ in range(n):
            Q = reduced_q_step(Q, 1.0 / n)
        return abs(Q[0, 0] - 2.0 / 3.0)

    rate = math.log2(err(10) / err(20))
    assert rate > 3.8


def test_lost_positivity():
    with pytest.raises(LostPositivity):
        reduced_q_step(np.array([[1.0, 0.0], [0.0, -0.5]]), 0.01)


@pytest.mark.parametrize("d", [1, 2, 3])
def test_reduced_ode_isotropic(d):
    rows = reduced_ode(np.eye(d), 1e4, record=[10.0, 100.0, 1000.0])
    for tau, Q in rows[1:]:
        assert abs(tau * np.trace(Q) / d - 1 + 1 / (1 + tau)) < 1e-8


def test_reduced_ode_anisotropic():
    tau, Q = reduced_ode(np.diag([1.0, 2.0]), 1e4)[-1]
    lam = np.linalg.eigvalsh(Q)
    assert tau == 1e4
    assert lam[-1] / lam[0] - 1 <= 0.1
    assert abs(tau * np.trace(Q) / 2 - 1) <= 0.01


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 3.0), st.floats(0.05, 3.0), st.floats(-0.9, 0.9))
def test_reduced_trace_nonincreasing(a, b, corr):
    off = corr * math.sqrt(a * b)
    rows = reduced_ode(np.array([[a, off], [off, b]]), 5.0, record=[1.0, 2.0, 3.0, 4.0])
    traces = [np.trace(Q) for _, Q in rows]
    assert all(t2 <= t1 + 1e-14 for t1, t2 in zip(traces, traces[1:]))


def test_predictors(nlh):
    prm, c = nlh
    pr = predictors(100.0, prm, c)
    assert pr["trQ_pred"] == pytest.approx(0.01, rel=1e-14)
    assert pr["cW_pred"] == pytest.approx(0.0025, rel=1e-14)
    assert pr["rate_pred"] == pytest.approx(1.0025, rel=1e-14)
    far = predictors(1e12, prm, c)
    assert far["trQ_pred"] < 1e-11 and abs(far["rate_pred"] - 1) < 1e-11


# ---------------------------------------------------------------- initial rescaling


def test_rescaling_of_profile_is_identity(cgl):
    prm, c = cgl
    g = Grid(1, 20.0, 321)
    mod, U0, T0 = initial_rescaling(profile_initial_data(prm, c), None, prm, g, c)
    assert mod.H == pytest.approx(1.0, abs=1e-14)
    assert abs(mod.V[0]) < 1e-14 and mod.M[0, 0] == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(U0.values, eval_profile(prm, g.axis(), 0, c), atol=1e-14)
    np.testing.assert_allclose(T0.values, eval_profile_phase(prm, g.axis(), 0.0, 0, c), atol=1e-13)


def test_rescaling_of_double_profile(cgl):
    prm, c = cgl
    g = Grid(1, 20.0, 321)
    mod, U0, _ = initial_rescaling(profile_initial_data(prm, c, amplitude=2.0), None, prm, g, c)
    assert mod.H == 0.5
    assert mod.M[0, 0] == pytest.approx(1.0, abs=1e-14) and mod.V[0] == 0.0
    assert normalization_residual(U0, prm, c) < 1e-10


def _stretched_profile(prm, c, A):
    """u0(x) = Ubar(A x) with exact derivatives."""

    def value(x):
        return eval_profile(prm, np.atleast_2d(x) @ A.T, 0, c)

    def jet(x, order):
        base = profile_jet(prm, (A @ np.asarray(x, float))[None, :], order, c)
        out = []
        for k, t in enumerate(base):
            t = np.asarray(t[0], dtype=float)
            for axis in range(k):
                t = np.moveaxis(np.tensordot(t, A, axes=([axis], [0])), -1, axis)
            out.append(t)
        return out

    return InitialData(value, lambda x: np.zeros(len(np.atleast_2d(x))), prm.d, jet=jet, argmax_hint=np.zeros(prm.d))


def test_rescaling_anisotropic_2d():
    prm = validate_params(2, 0.5, 0.2, 0, 2)
    c = derive_constants(prm)
    A = np.diag([1.0, 2.0])
    data = _stretched_profile(prm, c, A)
    hess = data.derivatives(np.zeros(2), 2)[2]
    np.testing.assert_allclose(hess, np.diag([c.kappa2, 4 * c.kappa2]), rtol=1e-14)
    g = Grid(2, 10.0, 81)
    mod, U0, _ = initial_rescaling(data, None, prm, g, c)
    np.testing.assert_allclose(mod.M, np.diag([1.0, 2.0]), atol=1e-14)
    assert mod.H == pytest.approx(1.0, abs=1e-14)
    np.testing.assert_allclose(U0.values, eval_profile(prm, g.points, 0, c), atol=1e-14)


def test_rescaling_shifted_2d():
    prm = validate_params(2, 0.5, 0.2, 0, 2)
    c = derive_constants(prm)
    g = Grid(2, 10.0, 81)
    b = np.array([0.3, -0.45])
    mod, U0, _ = initial_rescaling(profile_initial_data(prm, c, shift=b), None, prm, g, c)
    np.testing.assert_allclose(mod.V, b, atol=1e-12)
    np.testing.assert_allclose(mod.M, np.eye(2), atol=1e-12)


def test_prescale_sets_h(cgl):
    prm, c = cgl
    data, l = prescale_for_H(profile_initial_data(prm, c, amplitude=1.5), 1e-2, prm, c)
    assert l == pytest.approx(200 / 3, rel=1e-14)
    g = Grid(1, 30.0, 961)
    mod, U0, _ = initial_rescaling(data, None, prm, g, c)
    assert mod.H ** (prm.p - 1) == pytest.approx(1e-2, rel=1e-12)
    assert q_of(mod, prm)[0, 0] == pytest.approx(2 / 3, rel=1e-12)
    np.testing.assert_allclose(U0.values, eval_profile(prm, g.axis(), 0, c), atol=1e-13)


def test_errors_for_bad_maximum():
    prm = validate_params(2, 0, 0, 0, 1)
    c = derive_constants(prm)
    g = Grid(1, 10.0, 161)
    z = g.axis()
    flat = Field(g, np.exp(-(z**4)))
    with pytest.raises(DegenerateHessian):
        initial_rescaling(flat, Field(g, 0 * z), prm, g, c)
    ramp = Field(g, 2 + np.tanh(z))
    with pytest.raises(NoInteriorMax):
        initial_rescaling(ramp, Field(g, 0 * z), prm, g, c)


def test_fd_jet_path_matches_analytic(cgl):
    prm, c = cgl
    exact = profile_initial_data(prm, c, amplitude=1.5)
    fd = InitialData(exact.value, exact.phase, 1, argmax_hint=np.zeros(1), fd_step=0.05)
    g = Grid(1, 20.0, 321)
    m1, _, _ = initial_rescaling(exact, None, prm, g, c)
    m2, _, _ = initial_rescaling(fd, None, prm, g, c)
    assert m2.H == pytest.approx(m1.H, rel=1e-12)
    assert m2.M[0, 0] == pytest.approx(m1.M[0, 0], rel=1e-6)
