import math

import numpy as np
import pytest

from cgl_rescaling.errors import MaxDrifted, NonPositiveU, ValidationError
from cgl_rescaling.grid import Field, Grid, derivatives_at_origin, read_snapshot
from cgl_rescaling.modulation import (
    ModulationRates,
    ModulationState,
    normalization_residual,
    normalization_targets,
    prescale_for_H,
    profile_initial_data,
)
from cgl_rescaling.profiles import derive_constants, eval_profile, eval_profile_phase, validate_params
from cgl_rescaling.rescaled_solver import (
    RescaledState,
    RescaledSystem,
    Schedule,
    pin_phase,
    rhs,
    run,
    series_columns,
    viscous_terms,
)


@pytest.fixture(scope="module")
def cgl1():
    prm = validate_params(2, 0.5, 0.2, 0, 1)
    c = derive_constants(prm)
    g = Grid(1, 20.0, 321)
    return prm, c, g


def _profile_state(prm, c, g, H=1.0, tau=0.0, M=None):
    z = g.points
    U = Field(g, eval_profile(prm, z, 0, c).reshape(g.shape))
    Th = Field(g, eval_profile_phase(prm, z, tau, 0, c).reshape(g.shape))
    Tpin, phi0 = pin_phase(Th, prm, c, tau)
    mod = ModulationState(tau, 0.0, H, np.zeros(prm.d), np.eye(prm.d) if M is None else M, phi0)
    return RescaledState(U, Tpin, mod)


def test_viscous_zero_q(cgl1):
    prm, c, g = cgl1
    s = _profile_state(prm, c, g)
    DU, DT = viscous_terms(s.U, s.Theta, np.zeros((1, 1)), prm)
    assert np.all(DU.values == 0) and np.all(DT.values == 0)


def test_viscous_constant_phase():
    prm = validate_params(2, 0, 0.3, 0, 1)
    c = derive_constants(prm)
    g = Grid(1, 20.0, 321)
    U = Field(g, eval_profile(prm, g.axis(), 0, c))
    q = 0.3
    DU, DT = viscous_terms(U, Field(g, np.full(g.shape, 2.0)), q * np.eye(1), prm)
    lap = q * eval_profile(prm, g.axis(), 2, c)[:, 0, 0]
    assert np.max(np.abs(DU.values - lap)[10:-10]) < 1e-6
    assert np.max(np.abs(DT.values)) < 1e-12


@pytest.mark.parametrize("d", [1, 2])
def test_viscous_origin_value(d):
    prm = validate_params(2, 0.5, 0.2, 0, d)
    c = derive_constants(prm)
    g = Grid(d, 10.0, 161)
    s = _profile_state(prm, c, g)
    q = 0.01
    DU, _ = viscous_terms(s.U, s.Theta, q * np.eye(d), prm)
    assert DU.at_origin() == pytest.approx(q * d * c.kappa2 * (1 - prm.beta * prm.delta), rel=1e-6)


def test_viscous_needs_positive_u(cgl1):
    prm, c, g = cgl1
    U = Field(g, np.full(g.shape, -1.0))
    with pytest.raises(NonPositiveU):
        viscous_terms(U, Field(g, np.zeros(g.shape)), np.eye(1), prm)


def test_rhs_profile_is_steady():
    prm = validate_params(2, 0.5, 0.2, 0, 1)
    c = derive_constants(prm)
    rates = ModulationRates.from_cW(0.0, np.zeros(1), np.zeros((1, 1)), prm)
    errs = []
    for n in (321, 641, 1281):
        g = Grid(1, 20.0, n)
        dU, _ = rhs(_profile_state(prm, c, g), rates, np.zeros((1, 1)), prm)
        # the outermost nodes see the far-field ghost closure, not the profile
        interior = np.abs(g.axis()) <= 15.0
        errs.append(np.max(np.abs(dU.values[interior])))
    assert errs[-1] <= 1e-8 * c.kappa0
    # fifth-order upwind advection dominates the residual
    assert math.log2(errs[0] / errs[1]) > 4.5 and math.log2(errs[1] / errs[2]) > 4.5


def test_rhs_phase_frozen_without_delta():
    prm = validate_params(2, 0.7, 0.0, 0, 1)
    c = derive_constants(prm)
    g = Grid(1, 20.0, 321)
    s = _profile_state(prm, c, g)
    s = RescaledState(s.U, Field(g, np.zeros(g.shape)), s.mod)
    Q = 0.2 * np.eye(1)
    rates = ModulationRates.from_cW(0.01, np.zeros(1), np.zeros((1, 1)), prm)
    _, dT = rhs(s, rates, Q, prm)
    lap = 0.2 * eval_profile(prm, g.axis(), 2, c)[:, 0, 0]
    expect = prm.beta * lap / s.U.values
    assert np.max(np.abs(dT.values - expect)[10:-10]) < 1e-6
    prm0 = validate_params(2, 0, 0, 0, 1)
    _, dT0 = rhs(s, rates, Q, prm0)
    assert np.max(np.abs(dT0.values)) == 0.0


def test_closure_keeps_origin_fixed(cgl1):
    prm, c, g = cgl1
    s = _profile_state(prm, c, g, H=0.1, tau=0.0, M=np.array([[math.sqrt(0.5)]]))
    sys_ = RescaledSystem(g, prm, c)
    k = sys_.evaluate(s.U.values, s.Theta.values, s.mod)
    jet = derivatives_at_origin(Field(g, k.dU, check=False), 2)
    assert abs(jet[0]) < 1e-12 and np.max(np.abs(jet[1])) < 1e-12 and np.max(np.abs(jet[2])) < 1e-11


def test_discrete_and_formula_closures_agree(cgl1):
    prm, c, g = cgl1
    Q = 0.05
    s = _profile_state(prm, c, g, H=0.1, M=np.array([[math.sqrt(Q / 0.1)]]))
    a = RescaledSystem(g, prm, c, "discrete").evaluate(s.U.values, s.Theta.values, s.mod).rates
    b = RescaledSystem(g, prm, c, "formula").evaluate(s.U.values, s.Theta.values, s.mod).rates
    assert a.c_W == pytest.approx(b.c_W, rel=1e-4)
    assert a.c_W == pytest.approx(c.mu5 * Q, rel=1e-4)


def test_steady_profile_stays(cgl1):
    prm, c, _ = cgl1
    g = Grid(1, 30.0, 961)
    # H^(p-1) = 1e-30 makes Q(0) = 0 to machine precision
    s = _profile_state(prm, c, g, H=1e-30)
    sys_ = RescaledSystem(g, prm, c)
    U0 = s.U.values.copy()
    for _ in range(100):
        s, _, _ = sys_.step(s)
    assert np.max(np.abs(s.U.values - U0)) <= 1e-6


def test_phase_constant_for_real_heat():
    prm = validate_params(2, 0, 0, 0, 1)
    c = derive_constants(prm)
    g = Grid(1, 20.0, 321)
    data, _ = prescale_for_H(profile_initial_data(prm, c, 1.5, phase_shift=0.4), 1e-2, prm, c)
    res = run(data, prm, Schedule(tau_end=0.5, report_every=0.5, energies=False), g, consts=c)
    assert np.max(np.abs(res.final.Theta.values)) == 0.0
    assert res.rows[-1]["phi0"] == pytest.approx(0.4, abs=1e-12)


def test_time_is_integral_of_h(cgl1):
    prm, c, g = cgl1
    s = _profile_state(prm, c, g, H=0.1, M=np.array([[2.0]]))
    sys_ = RescaledSystem(g, prm, c)
    s1, _, dtau = sys_.step(s, 0.01)
    # t_tau = H^(p-1) with log H nearly linear across one step
    h0, h1 = s.mod.H, s1.mod.H
    k = math.log(h1 / h0) / dtau
    exact = h0 * (math.exp(k * dtau) - 1) / k
    assert s1.mod.t - s.mod.t == pytest.approx(exact, rel=1e-6)
    # two half steps agree with one full step to RK4 accuracy
    half, _, _ = sys_.step(sys_.step(s, dtau / 2)[0], dtau / 2)
    assert half.mod.t == pytest.approx(s1.mod.t, rel=1e-9)


# ---------------------------------------------------------------- projection


def test_renormalize_identity(cgl1):
    prm, c, g = cgl1
    s = _profile_state(prm, c, g)
    out, size = RescaledSystem(g, prm, c).renormalize(s)
    assert size == 0.0 and out is s


def test_renormalize_translate(cgl1):
    prm, c, g = cgl1
    a = 0.3 * g.h
    s = _profile_state(prm, c, g)
    U = Field(g, eval_profile(prm, g.axis() - a, 0, c))
    s = RescaledState(U, s.Theta, s.mod)
    sys_ = RescaledSystem(g, prm, c)
    out, _ = sys_.renormalize(s)
    jet = derivatives_at_origin(out.U, 2)
    assert np.max(np.abs(jet[1])) < 1e-10
    assert out.mod.V[0] == pytest.approx(a, rel=1e-6)
    assert sys_.residual(out) < 1e-10


def test_renormalize_amplitude(cgl1):
    prm, c, g = cgl1
    s = _profile_state(prm, c, g)
    s = RescaledState(Field(g, (1 + 1e-4) * s.U.values), s.Theta, s.mod)
    sys_ = RescaledSystem(g, prm, c)
    out, _ = sys_.renormalize(s)
    assert out.mod.H == pytest.approx(1 / (1 + 1e-4), rel=1e-12)
    assert out.U.at_origin() == pytest.approx(c.kappa0, abs=1e-12)


def test_renormalize_drift_abort(cgl1):
    prm, c, g = cgl1
    s = _profile_state(prm, c, g)
    U = Field(g, eval_profile(prm, g.axis() - 3.0, 0, c))
    with pytest.raises(MaxDrifted):
        RescaledSystem(g, prm, c).renormalize(RescaledState(U, s.Theta, s.mod))


# ---------------------------------------------------------------- run loop


@pytest.fixture(scope="module")
def short_run(tmp_path_factory):
    prm = validate_params(2, 0.5, 0.2, 0, 1)
    c = derive_constants(prm)
    g = Grid(1, 20.0, 321)
    data, _ = prescale_for_H(profile_initial_data(prm, c, 1.5), 1e-2, prm, c)
    out = tmp_path_factory.mktemp("run")
    sch = Schedule(tau_end=2.0, report_every=0.5, snapshot_taus=(1.0, 2.0))
    return prm, c, g, data, run(data, prm, sch, g, out_dir=str(out), consts=c), out


def test_run_outputs(short_run):
    prm, c, g, _, res, out = short_run
    assert res.outcome == "completed"
    assert [r["tau"] for r in res.rows] == [0.0, 0.5, 1.0, 1.5, 2.0]
    header = (out / "series.csv").read_text().splitlines()[0].split(",")
    assert header == series_columns(1)
    assert header == ["tau", "t", "H", "cW", "cU", "trQ", "detQ", "lam_min", "lam_max", "V1", "E0", "Ektop", "F1", "Fktop", "Etotal", "min_U_ratio", "phi0", "That_estimate"]
    hdr, g2, fields = read_snapshot(out / "snap_tau0001.0000.bin")
    assert hdr["fields"] == ["U", "Theta"] and hdr["tau"] == 1.0
    assert np.array_equal(fields["U"], res.snapshots[1.0]["U"])
    for m in res.monitors:
        assert m["norm_residual"] <= 1e-6
        assert m["lower_bound_ok"] and m["detQ_positive"]


def test_run_h_decreases(short_run):
    *_, res, _ = short_run
    H = res.column("H")
    t = res.column("t")
    assert np.all(np.diff(H) < 0) and np.all(np.diff(t) > 0)


def test_gauge_invariance(short_run):
    prm, c, g, _, res, _ = short_run
    data, _ = prescale_for_H(profile_initial_data(prm, c, 1.5, phase_shift=1.25), 1e-2, prm, c)
    res2 = run(data, prm, Schedule(tau_end=2.0, report_every=0.5), g, consts=c)
    for a, b in zip(res.rows, res2.rows):
        for k in a:
            if k == "phi0":
                assert b[k] - a[k] == pytest.approx(1.25, abs=1e-12)
            else:
                assert a[k] == pytest.approx(b[k], rel=1e-12, abs=1e-12)


def test_translation_covariance(short_run):
    prm, c, g, _, res, _ = short_run
    b = 0.37
    base = profile_initial_data(prm, c, 1.5, shift=[b])
    data, l = prescale_for_H(base, 1e-2, prm, c)
    res2 = run(data, prm, Schedule(tau_end=2.0, report_every=0.5), g, consts=c)
    assert res2.initial.mod.V[0] == pytest.approx(b / math.sqrt(l), abs=1e-12)
    for a, r in zip(res.rows, res2.rows):
        for k in ("H", "cW", "trQ", "t", "Etotal", "phi0"):
            assert a[k] == pytest.approx(r[k], rel=1e-6, abs=1e-9)
        assert r["V1"] - a["V1"] == pytest.approx(b / math.sqrt(l), abs=1e-9)
    assert np.max(np.abs(res.final.U.values - res2.final.U.values)) < 1e-6


def test_run_rejects_lower_bound_violation(cgl1):
    prm, c, g = cgl1
    z = g.axis()
    Ub = eval_profile(prm, z, 0, c)
    U = Field(g, Ub * (1 - 0.6 * np.exp(-((np.abs(z) - 3) ** 2) * 4)))
    s = _profile_state(prm, c, g)
    with pytest.raises(ValidationError):
        run(RescaledState(U, s.Theta, s.mod), prm, Schedule(tau_end=0.1), g, consts=c)


def test_normalization_targets_match_profile(cgl1):
    prm, c, g = cgl1
    t = normalization_targets(g, prm, c)
    assert t[0] == c.kappa0
    assert t[2][0, 0] == pytest.approx(c.kappa2, rel=1e-6)
    s = _profile_state(prm, c, g)
    assert normalization_residual(s.U, prm, c, t) == 0.0


def test_energy_monitor_rule(short_run):
    res = short_run[4]
    for row, mon in zip(res.rows, res.monitors):
        assert mon["energies_bounded"] == (max(row[k] for k in ("E0", "Ektop", "F1", "Fktop")) <= 1.0)


def test_final_time_is_reported(cgl1):
    prm, c, g = cgl1
    data, _ = prescale_for_H(profile_initial_data(prm, c, 1.5), 1e-2, prm, c)
    res = run(data, prm, Schedule(tau_end=0.3, report_every=1.0, energies=False), g, consts=c)
    assert [r["tau"] for r in res.rows] == [0.0, 0.3]
