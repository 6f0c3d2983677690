import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cgl_rescaling.errors import BadExponent, OriginSingularity, SupercriticalOrCritical
from cgl_rescaling.profiles import (
    c0_condition_margin,
    derive_constants,
    eval_profile,
    eval_profile_phase,
    eval_weight,
    profile_jet,
    top_damping,
    validate_params,
    weight_from_radius,
    weight_spec,
)

SETS = [(2, 0, 0), (2, 0.5, 0.2), (3, 0, 0.5), (1.5, 0.1, 0.1), (2.5, -0.2, 0.3)]


def random_params(rng, d=1):
    while True:
        p = rng.uniform(1.2, 4.0)
        beta, delta = rng.uniform(-1, 1, size=2)
        if p - delta**2 - beta * delta * (p + 1) > 0.05:
            return validate_params(p, beta, delta, 0.0, d)


def test_validate_examples():
    assert validate_params(2, 0, 0, 0, 1).flat_star == 2
    with pytest.raises(SupercriticalOrCritical) as err:
        validate_params(2, 0, 2, 0, 1)
    assert err.value.flat_star == -2
    assert validate_params(2, 0.5, 0.2, 0, 1).flat_star == pytest.approx(1.66, abs=1e-15)
    with pytest.raises(BadExponent):
        validate_params(1.0, 0, 0, 0, 1)
    with pytest.raises(BadExponent):
        validate_params(2, float("nan"), 0, 0, 1)


def test_constants_reference_values():
    c = derive_constants(validate_params(2, 0, 0, 0, 1))
    assert (c.kappa0, c.kappa2, c.kappa4, c.c_p, c.sigma, c.mu5, c.K) == (1, -0.25, 0.375, 0.125, -2, 0.25, 54)
    assert c.eps == pytest.approx(1 / 1400, rel=1e-14)
    assert c.eps2 == pytest.approx(c.eps / 4, rel=1e-14)
    assert c.C_b == 0.25
    assert c.mu_phase == 0


def test_kappa_identities_random():
    rng = np.random.default_rng(7)
    for _ in range(100):
        prm = random_params(rng)
        c = derive_constants(prm)
        b, dl, p = prm.beta, prm.delta, prm.p
        assert c.kappa4 / (6 * c.kappa2) == pytest.approx(p * c.kappa2 / (2 * c.kappa0), rel=1e-13)
        lhs = (1 - b * dl) * c.kappa4 / (3 * c.kappa2) - (b + dl) * dl * c.kappa2 / c.kappa0
        assert abs(lhs + 0.5) <= 1e-13
        assert c.c_p > 0 and c.kappa0 > 0 and c.kappa2 < 0 and c.kappa4 > 0


def test_c0_c1_choices_respect_conditions():
    for s in SETS:
        prm = validate_params(*s, 0.0, 1)
        c = derive_constants(prm)
        # c0 is half of the equality value: strictly inside the admissible set
        assert c0_condition_margin(c.log_c0, prm.p, c.c_p, c.eps) > 0
        assert abs(c0_condition_margin(c.log_c0 + math.log(2), prm.p, c.c_p, c.eps)) < 1e-9
        r = np.logspace(-3, 8, 4000)
        assert np.all(top_damping(r, c.log_c1, prm.p, c.c_p, c.eps, c.K, 1) <= -c.eps / 8)


def test_profile_values():
    prm = validate_params(2, 0, 0, 0, 1)
    assert eval_profile(prm, 0.0) == 1.0
    assert eval_profile(prm, math.sqrt(8.0)) == pytest.approx(0.5, rel=1e-15)


@pytest.mark.parametrize("d", [1, 2])
def test_profile_origin_jet(d):
    prm = validate_params(2.5, -0.2, 0.3, 0, d)
    c = derive_constants(prm)
    jet = [t[0] for t in profile_jet(prm, np.zeros((1, d)), 4, c)]
    assert jet[0] == pytest.approx(c.kappa0)
    assert np.all(jet[1] == 0)
    np.testing.assert_allclose(jet[2], c.kappa2 * np.eye(d), rtol=1e-14)
    assert np.all(jet[3] == 0)
    assert jet[4][(0,) * 4] == pytest.approx(c.kappa4, rel=1e-14)


@pytest.mark.parametrize("s", SETS)
def test_profile_identity(s):
    prm = validate_params(*s, 0.0, 1)
    c = derive_constants(prm)
    z = np.linspace(-20, 20, 1001)
    U = eval_profile(prm, z, 0, c)
    dU = eval_profile(prm, z, 1, c)[..., 0]
    res = -U / (prm.p - 1) - 0.5 * z * dU + U**prm.p
    assert np.max(np.abs(res) / U) <= 1e-12


def test_profile_identity_2d():
    prm = validate_params(3, 0, 0.5, 0, 2)
    rng = np.random.default_rng(1)
    z = rng.uniform(-14, 14, size=(1000, 2))
    jet = profile_jet(prm, z, 1)
    res = -jet[0] / 2 - 0.5 * np.sum(z * jet[1], axis=-1) + jet[0] ** 3
    assert np.max(np.abs(res) / jet[0]) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(
    p=st.floats(1.1, 5.0),
    beta=st.floats(-1, 1),
    delta=st.floats(-1, 1),
    r=st.floats(0, 50),
)
def test_profile_identity_property(p, beta, delta, r):
    if p - delta**2 - beta * delta * (p + 1) <= 1e-3:
        return
    prm = validate_params(p, beta, delta, 0, 1)
    jet = profile_jet(prm, np.array([r]), 1)
    U, dU = jet[0][0], jet[1][0, 0]
    assert abs(-U / (p - 1) - 0.5 * r * dU + U**p) <= 1e-12 * U


def test_finite_difference_cross_check():
    prm = validate_params(2, 0.5, 0.2, 0, 1)
    c = derive_constants(prm)
    z = np.linspace(-5, 5, 41)
    h = 1e-3
    f = lambda x: eval_profile(prm, x, 0, c)
    d1 = (f(z - 2 * h) - 8 * f(z - h) + 8 * f(z + h) - f(z + 2 * h)) / (12 * h)
    d2 = (-f(z - 2 * h) + 16 * f(z - h) - 30 * f(z) + 16 * f(z + h) - f(z + 2 * h)) / (12 * h**2)
    np.testing.assert_allclose(d1, eval_profile(prm, z, 1, c)[:, 0], atol=1e-10)
    np.testing.assert_allclose(d2, eval_profile(prm, z, 2, c)[:, 0, 0], atol=1e-7)
    # second and fourth derivative at 0 against the constants
    h = 1e-2
    x = h * np.arange(-3, 4)
    w2 = np.array([1 / 90, -3 / 20, 3 / 2, -49 / 18, 3 / 2, -3 / 20, 1 / 90])
    assert w2 @ f(x) / h**2 == pytest.approx(c.kappa2, rel=1e-10)
    x = h * np.arange(-4, 5)
    w4 = np.array([7 / 240, -2 / 5, 169 / 60, -122 / 15, 91 / 8, -122 / 15, 169 / 60, -2 / 5, 7 / 240])
    assert w4 @ f(x) / h**4 == pytest.approx(c.kappa4, rel=1e-6)


def test_phase_profile():
    prm = validate_params(2, 0, 1, 0, 1)
    c = derive_constants(prm)
    assert eval_profile_phase(prm, 0.0, tau=3.0) == pytest.approx(3.0)
    assert eval_profile_phase(prm, 0.0, order=1)[0] == 0
    assert eval_profile_phase(prm, 0.0, order=2)[0, 0] == pytest.approx(c.kappa2 / c.kappa0)
    z = np.linspace(-6, 6, 25)
    np.testing.assert_allclose(
        eval_profile_phase(prm, z, order=1)[:, 0],
        eval_profile(prm, z, 1)[:, 0] / eval_profile(prm, z, 0),
        rtol=1e-14,
    )
    flat = validate_params(2, 0.3, 0.0, 0, 1)
    assert np.all(eval_profile_phase(flat, z, tau=2.0) == 0)
    assert np.all(eval_profile_phase(flat, z, order=1) == 0)


@pytest.mark.parametrize("d", [1, 2])
def test_weights(d):
    prm = validate_params(2, 0.5, 0.2, 0, d)
    c = derive_constants(prm)
    r = np.logspace(-4, 4, 200)
    rho0 = weight_from_radius(weight_spec("rho", 0, prm, c), r)
    for k in range(0, 8):
        w = weight_from_radius(weight_spec("rho", k, prm, c), r)
        assert np.all(w > 0)
        if k <= (d + 5) / 2:
            np.testing.assert_allclose(w, r ** (2 * k) * rho0, rtol=1e-12)
    for k in range(1, 5):
        assert np.all(weight_from_radius(weight_spec("ring_rho", k, prm, c), r) > 0)
    with pytest.raises(OriginSingularity):
        eval_weight(weight_spec("rho", 0, prm, c), prm, np.zeros((1, d)))


def test_weight_examples():
    prm = validate_params(2, 0, 0, 0, 1)
    c = derive_constants(prm)
    assert eval_weight(weight_spec("ring_rho", 1, prm, c), prm, 2.0) == 2.0  # 1 + |2|^0
    prm2 = validate_params(2, 0, 0, 0, 2)
    c2 = derive_constants(prm2)
    assert eval_weight(weight_spec("ring_rho", 1, prm2, c2), prm2, [2.0, 0.0]) == pytest.approx(0.5)
    top = weight_spec("ring_rho", 4, prm, c, top=4)
    z = 1.7
    assert eval_weight(top, prm, z, U_value=0.3) == pytest.approx(
        0.09 * eval_weight(weight_spec("rho", 4, prm, c), prm, z), rel=1e-15
    )
    r1 = eval_weight(weight_spec("rho", 1, prm, c), prm, 0.7)
    r0 = eval_weight(weight_spec("rho", 0, prm, c), prm, 0.7)
    assert r1 == pytest.approx(0.49 * r0, rel=1e-14)
