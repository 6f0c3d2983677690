"""Measurements on rescaled states and runs.

Energies: E_k^2 = int |grad^k W|^2 rho_k and F_k^2 = int |grad^k Phi|^2 ring_rho_k
with W = U - Ubar and Phi = Theta - Thetabar; the top order uses U^2 rho_top.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import product
from math import factorial

import numpy as np
from scipy.interpolate import CubicSpline

from .errors import InsufficientSeries, OutOfRange, ParameterMismatch
from .grid import Field, derivatives_at_origin, differentiate, multi_indices, weighted_integral
from .modulation import locate_maximum
from .profiles import derive_constants, profile_values, weight_spec

FIT_TOL = 1e-6


@dataclass
class EnergyReport:
    tau: float
    E: list
    F: dict
    E_total: float
    nu1: float
    nu2: float
    k_top: int
    boundary_contamination: dict = field(default_factory=dict)
    origin_flags: list = field(default_factory=list)


def _multiplicity(idx):
    counts = np.bincount(np.asarray(idx, dtype=int)) if idx else np.array([])
    out = factorial(len(idx))
    for c in counts:
        out //= factorial(int(c))
    return out


def grad_power_sq(f: Field, k):
    """|grad^k f|^2 summed over all index tuples."""
    if k == 0:
        return f.values**2
    total = 0.0
    for idx, mi in multi_indices(f.grid.d, k):
        total = total + _multiplicity(idx) * differentiate(f, mi).values ** 2
    return total


def _taylor_model(tensors, k, lowest):
    """Callable z -> |grad^k T(z)|^2 for the Taylor polynomial T with orders lowest..4."""
    d = np.atleast_1d(tensors[1]).shape[0]
    top = len(tensors) - 1

    def model(z):
        z = np.asarray(z, dtype=float).reshape(-1, d)
        total = np.zeros(z.shape[0])
        for idx in product(range(d), repeat=k):
            val = np.zeros(z.shape[0])
            for m in range(max(k, lowest), top + 1):
                t = np.asarray(tensors[m])[idx] if k else np.asarray(tensors[m])
                val = val + _contract(t, z, m - k) / factorial(m - k)
            total += val**2
        return total

    return model


def _contract(t, z, times):
    """Symmetric tensor t applied to z in ``times`` slots, row by row."""
    t = np.asarray(t, dtype=float)
    if times == 0:
        return np.full(z.shape[0], float(t))
    res = np.einsum("...i,ni->n...", t, z)
    for _ in range(times - 1):
        res = np.einsum("n...i,ni->n...", res, z)
    return res


def _integral(vals, grid, spec, order, model, contamination):
    f = Field(grid, vals, check=False)
    kwargs = {}
    if spec.singular:
        kwargs["origin_order"] = order
        if grid.d > 1:
            kwargs["origin_model"] = model
    total = weighted_integral(f, spec, **kwargs)
    outer = grid.radius >= 0.9 * grid.L
    if total > 0:
        masked = np.where(outer, vals, 0.0)
        part = weighted_integral(Field(grid, masked, check=False), spec, **kwargs) if np.any(masked) else 0.0
        contamination.append(max(part, 0.0) / total)
    else:
        contamination.append(0.0)
    return max(total, 0.0)


def energy(state=None, params=None, k_top=4, nu1=0.1, nu2=0.01, consts=None, W=None, Phi=None, U=None, tau=None):
    """EnergyReport for a RescaledState or for explicit (W, Phi, U) fields."""
    from .errors import NonFiniteField

    consts = consts or derive_constants(params)
    if state is not None:
        grid = state.grid
        Ub = profile_values(params, grid.points, consts).reshape(grid.shape)
        U = state.U
        W = Field(grid, state.U.values - Ub, check=False)
        # only derivatives of Phi enter, so the constant phi0 is left out
        # (adding it would put rounding noise into the high-order stencils)
        Phi = Field(grid, state.Theta.values - params.delta * (np.log(Ub) - math.log(consts.kappa0)), check=False)
        tau = state.mod.tau
    grid = W.grid
    for f in (W, Phi) + ((U,) if U is not None else ()):
        if not np.all(np.isfinite(f.values)):
            raise NonFiniteField("non-finite field in energy")
    W_jet = derivatives_at_origin(W, 4)
    flags = []
    for m in range(3):
        if np.max(np.abs(W_jet[m])) > FIT_TOL:
            flags.append(f"W has nonzero order-{m} origin derivative {np.max(np.abs(W_jet[m])):.2e}")
    Phi_jet = derivatives_at_origin(Phi, 4)
    E, F, contam = [], {}, {}
    for k in range(k_top + 1):
        spec = weight_spec("rho", k, params, consts, top=k_top)
        order = 2 * max(3 - k, 0)
        c = []
        val = _integral(grad_power_sq(W, k), grid, spec, order, _taylor_model(W_jet, k, 3), c)
        E.append(math.sqrt(val))
        contam[f"E{k}"] = c[0]
    for k in range(1, k_top + 1):
        vals = grad_power_sq(Phi, k)
        if k == k_top:
            spec = weight_spec("rho", k, params, consts, top=k_top)
            Uv = U.values if U is not None else profile_values(params, grid.points, consts).reshape(grid.shape)
            vals = vals * Uv**2
            # Phi is not normalized at 0, so the integrand is modelled from its own Taylor data
            u0 = U.at_origin() if U is not None else consts.kappa0
            base = _taylor_model(Phi_jet, k, 1)
            model = lambda z, base=base, u0=u0: base(z) * u0**2
            order = 0
        else:
            spec = weight_spec("ring_rho", k, params, consts, top=k_top)
            order = 0
            model = _taylor_model(Phi_jet, k, 1)
        c = []
        F[k] = math.sqrt(_integral(vals, grid, spec, order, model, c))
        contam[f"F{k}"] = c[0]
    total = E[k_top] ** 2 + F[k_top] ** 2 + F[1] ** 2 / nu1 + E[0] ** 2 / nu2
    return EnergyReport(tau, E, F, math.sqrt(total), nu1, nu2, k_top, contam, flags)


def linf_profile_error(state, params, consts=None):
    """sup |U e^{i(Theta - A)} - Ubar^{1+i delta}| and sup |U - Ubar| / Ubar^{1+eps2} on |z| <= L/2."""
    consts = consts or derive_constants(params)
    g = state.grid
    Ub = profile_values(params, g.points, consts).reshape(g.shape)
    mask = g.radius <= g.L / 2
    rel_phase = state.Theta.values + params.delta * math.log(consts.kappa0)
    ours = state.U.values * np.exp(1j * rel_phase)
    prof = Ub * np.exp(1j * params.delta * np.log(Ub))
    err_c = float(np.max(np.abs(ours - prof)[mask]))
    err_a = float(np.max((np.abs(state.U.values - Ub) / Ub ** (1 + consts.eps2))[mask]))
    return {"err_complex": err_c, "err_amp_weighted": err_a}


# ---------------------------------------------------------------- initial data checks


def check_rescaled_data(state, params, consts=None, nu=0.1, k_top=4):
    """Checks on rescaled initial data (U0, Theta0, H0)."""
    consts = consts or derive_constants(params)
    g = state.grid
    Ub = profile_values(params, g.points, consts).reshape(g.shape)
    ratio = state.U.values / Ub ** (1 + consts.eps2)
    bound = 2 * consts.C_b
    bad = ratio <= bound
    region = None
    if np.any(bad):
        r = g.radius[bad]
        region = {"r_min": float(np.min(r)), "r_max": float(np.max(r)), "nodes": int(np.sum(bad))}
    rep = energy(state, params, k_top, consts=consts)
    Hp = state.mod.H ** (params.p - 1)
    w_norm = max(rep.E)
    phi_norm = max(rep.F.values())
    return {
        "lower_bound": {"ok": not np.any(bad), "min_ratio": float(np.min(ratio)), "bound": bound, "violation": region},
        "H_small": {"ok": Hp < nu, "value": Hp},
        "W_norm": {"ok": w_norm < nu, "value": w_norm},
        "Phi_norm": {"ok": phi_norm < nu, "value": phi_norm},
        "energy": rep,
    }


def validate_initial_data(u0, theta0, params, grid, k_top=4, nu=0.1, consts=None):
    """Rescale (u0, theta0) and check the open-set conditions.

    Returns {"V0", "H0", "M0", "checks", "ok"}.  The Hessian-trace check is
    reported with its literal value and its absolute value; only the
    literal inequality enters "ok".
    """
    from .rescaled_solver import initial_state

    consts = consts or derive_constants(params)
    _, u_max, hess = locate_maximum(u0, params.d)
    trace_val = u_max ** (-params.p) * float(np.trace(np.atleast_2d(hess)))
    state = initial_state(u0 if theta0 is None else (u0, theta0), params, grid, consts)
    checks = check_rescaled_data(state, params, consts, nu, k_top)
    checks["hessian_trace"] = {"ok": trace_val < nu, "value": trace_val, "abs_value": abs(trace_val)}
    energy_rep = checks.pop("energy")
    ok = all(c["ok"] for c in checks.values())
    return {
        "V0": state.mod.V,
        "H0": state.mod.H,
        "M0": state.mod.M,
        "checks": checks,
        "energy": energy_rep,
        "ok": ok,
        "state": state,
    }


# ---------------------------------------------------------------- rates


@dataclass
class RateReport:
    tau: float
    t: float
    That: float
    remaining: float
    ratio_H: float
    ratio_pred: float
    trQ_tau_over_d: float
    R_scale_check: float
    A_phase: float
    Abar_phase: float
    linf_profile_err: float


def remaining_times(taus, H, params, consts):
    """T - t at each row, without subtracting nearly equal physical times.

    The tail beyond the last row is H^(p-1)(1 + mu5/tau); between rows
    int H^(p-1) dtau is integrated from a cubic spline of log H^(p-1).
    """
    taus = np.asarray(taus, dtype=float)
    logh = (params.p - 1) * np.log(np.asarray(H, dtype=float))
    n = len(taus)
    tail_tau = taus[-1]
    tail = math.exp(logh[-1]) * (1 + consts.mu5 / tail_tau) if tail_tau > 0 else math.exp(logh[-1])
    if n == 1:
        return np.array([tail])
    spline = CubicSpline(taus, logh)
    xg, wg = np.polynomial.legendre.leggauss(8)
    seg = np.zeros(n - 1)
    for i in range(n - 1):
        a, b = taus[i], taus[i + 1]
        s = 0.5 * (b - a) * xg + 0.5 * (a + b)
        seg[i] = 0.5 * (b - a) * float(np.sum(wg * np.exp(spline(s))))
    out = np.empty(n)
    out[-1] = tail
    for i in range(n - 2, -1, -1):
        out[i] = out[i + 1] + seg[i]
    return out


def rate_report(rows, params, consts=None, M_rows=None, linf=None):
    """Rate diagnostics for each series row.

    ``rows`` are dicts with tau, t, H, trQ, phi0; ``M_rows`` (optional)
    the matching M matrices; ``linf`` (optional) profile errors.
    """
    consts = consts or derive_constants(params)
    rows = [r for r in rows if np.isfinite(r["H"]) and r["H"] > 0]
    if len(rows) < 2:
        raise InsufficientSeries("need at least two healthy rows")
    p, d = params.p, params.d
    taus = np.array([r["tau"] for r in rows])
    H = np.array([r["H"] for r in rows])
    rem = remaining_times(taus, H, params, consts)
    last = rows[-1]
    That = last["t"] + rem[-1]
    out = []
    for i, r in enumerate(rows):
        tau = r["tau"]
        Hp = r["H"] ** (p - 1)
        Tmt = rem[i]
        ratio_pred = 1 + consts.mu5 / tau if tau > 0 else math.nan
        R_check = math.nan
        if M_rows is not None:
            M = np.atleast_2d(M_rows[i])
            R = math.exp(-tau / 2) * np.linalg.inv(M)
            scale = math.sqrt(Tmt * abs(math.log(Tmt)))
            R_check = float(np.linalg.norm(R / scale - np.eye(d), 2))
        A = params.delta * tau / (p - 1) + r["phi0"]
        L = math.log(Tmt)
        Abar = -params.delta * L / (p - 1) - d * params.beta * (1 + params.delta**2) * math.log(abs(L)) / (2 * consts.flat_star)
        out.append(
            RateReport(
                tau=tau,
                t=r["t"],
                That=That,
                remaining=Tmt,
                ratio_H=Hp / Tmt,
                ratio_pred=ratio_pred,
                trQ_tau_over_d=r["trQ"] * tau / d,
                R_scale_check=R_check,
                A_phase=A,
                Abar_phase=Abar,
                linf_profile_err=math.nan if linf is None else linf[i],
            )
        )
    return out


# ---------------------------------------------------------------- comparisons


def compare_runs(rescaled, physical, t_list, z_box=5.0):
    """Relative L-infinity error between reconstructed and physical solutions.

    For each t in ``t_list`` the physical snapshot at that time is
    compared on the points whose rescaled coordinate satisfies |z| <= z_box.
    """
    from .physical_solver import reconstruct_from_rescaled

    if rescaled.params != physical.params:
        raise ParameterMismatch(f"parameters differ: {rescaled.params} vs {physical.params}")
    errs = []
    for t in t_list:
        snap = physical.snapshot_at(t)
        if snap is None:
            raise OutOfRange(f"no physical snapshot at t = {t}")
        grid = physical.grid
        pts = grid.points.reshape(-1, grid.d)
        mod = _mod_at(rescaled, t)
        z = (pts - mod.V) @ (math.exp(mod.tau / 2) * mod.M).T
        inside = np.sqrt(np.sum(z * z, axis=-1)) <= z_box
        ref = snap.reshape(-1)[inside]
        got = reconstruct_from_rescaled(rescaled, pts[inside], t)
        errs.append(float(np.max(np.abs(got - ref)) / np.max(np.abs(ref))))
    return {"t": list(t_list), "errors": errs, "worst": max(errs)}


def _mod_at(rescaled, t):
    from .physical_solver import modulation_at

    return modulation_at(rescaled, t)[0]


@dataclass
class StabilityReport:
    base_outcome: str
    pert_outcome: str
    base_valid: bool
    pert_valid: bool
    That_base: float
    That_pert: float
    rel_dThat: float
    linf_base: float
    linf_pert: float
    base_rates: list
    pert_rates: list


def stability_experiment(base, perturbed, params, grid, schedule, consts=None):
    """Run base and perturbed data side by side and compare blowup times.

    ``base``/``perturbed`` are InitialData (or (u0, theta0) pairs).  Data
    that fail validation are reported, not run.
    """
    from .errors import ValidationError
    from .rescaled_solver import run

    consts = consts or derive_constants(params)
    out = {}
    for name, data in (("base", base), ("pert", perturbed)):
        try:
            u0, th0 = data if isinstance(data, tuple) else (data, None)
            rep = validate_initial_data(u0, th0, params, grid, schedule.k_top, consts=consts)
            valid = rep["checks"]["lower_bound"]["ok"]
        except ValidationError:
            valid = False
        if not valid:
            out[name] = (False, None)
            continue
        res = run(data, params, schedule, grid, consts=consts)
        out[name] = (True, res)

    def summary(entry):
        valid, res = entry
        if res is None:
            return valid, "not run", math.nan, math.nan, []
        rates = rate_report(res.rows, params, consts)
        linf = linf_profile_error(res.final, params, consts)["err_complex"]
        return valid, res.outcome, rates[-1].That, linf, rates

    bv, bo, bT, bl, br = summary(out["base"])
    pv, po, pT, pl, pr = summary(out["pert"])
    rel = abs(bT - pT) / bT if math.isfinite(bT) and math.isfinite(pT) else math.nan
    return StabilityReport(bo, po, bv, pv, bT, pT, rel, bl, pl, br, pr)


def cross_validate(rescaled, growth=(2.5, 5.0, 10.0), start_growth=2.0, z_box=5.0, z_extent=None, resolution=1.0, out_dir=None):
    """Physical-space check of a rescaled run that kept dense snapshots.

    Starts the reference solver from the reconstruction at the kept
    snapshot where max|psi| is closest to ``start_growth`` times its
    initial value, then compares at the kept snapshots closest to
    ``growth`` times that amplitude.  The physical box covers the whole
    rescaled domain (|z_i| <= z_extent); its spacing matches the rescaled
    spacing at the last comparison time, divided by ``resolution``.
    """
    from .grid import Grid
    from .physical_solver import physical_run, reconstruct_from_rescaled

    kept = sorted(rescaled.kept, key=lambda s: s["mod"].tau)
    if len(kept) < 4:
        raise InsufficientSeries("rescaled run kept too few snapshots")
    amps = np.array([np.max(s["U"]) / s["mod"].H for s in kept])
    i0 = int(np.argmin(np.abs(amps - start_growth * amps[0])))
    picks = [int(np.argmin(np.abs(amps - g * amps[i0]))) for g in growth]
    if any(j <= i0 for j in picks) or len(set(picks)) < len(picks):
        raise InsufficientSeries("kept snapshots do not cover the requested amplitude growth")
    g_res = rescaled.grid
    d = g_res.d
    z_extent = g_res.L if z_extent is None else z_extent
    m0, mf = kept[i0]["mod"], kept[picks[-1]]["mod"]
    A0 = math.exp(m0.tau / 2) * m0.M
    Af = math.exp(mf.tau / 2) * mf.M
    Lx = z_extent / np.linalg.norm(A0, np.inf)
    hx = g_res.h / np.linalg.norm(Af, np.inf) / resolution
    n = 2 * int(math.ceil(Lx / hx)) + 1
    grid = Grid(d, float(Lx), n, tuple(float(v) for v in m0.V), check_far_field=False)
    pts = grid.points.reshape(-1, d)
    psi0 = reconstruct_from_rescaled(rescaled, pts, m0.t).reshape(grid.shape)
    times = [kept[j]["mod"].t for j in picks]
    # algebraic tails do not decay to 1e-8 at the box edge, so the boundary check is relaxed
    phys = physical_run(psi0, rescaled.params, grid, t_end=times[-1], t0=m0.t, snapshot_times=times, boundary_tol=1.0, record_every=50, out_dir=out_dir)
    cmp = compare_runs(rescaled, phys, times, z_box)
    cmp.update(
        t_start=m0.t,
        tau_start=m0.tau,
        taus=[kept[j]["mod"].tau for j in picks],
        amp_growth=[float(amps[j] / amps[i0]) for j in picks],
        start_growth=float(amps[i0] / amps[0]),
        physical_n=n,
        physical_outcome=phys.outcome,
    )
    return cmp
