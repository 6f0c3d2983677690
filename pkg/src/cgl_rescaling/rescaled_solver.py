"""Time integration of the rescaled amplitude/phase system.

    U_tau = c_U U - v.grad U + U^p - gamma H^(p-1) U + D_U
    Theta_tau = -v.grad Theta + delta U^(p-1) + D_Theta
    v = z/2 + Pcal z + Vcal

The rates (c_W, Vcal, Pcal) are fixed at every RK stage by requiring the
discrete origin derivatives (orders 0-2) of U_tau to vanish, so the
normalization is preserved up to round-off; a periodic projection
(``renormalize``) removes what is left.

Theta is stored with its value at the origin removed; the origin value
is carried by ``phi0`` in the modulation state:
    Theta(0, tau) = delta*tau/(p-1) + delta*log(kappa0) + phi0.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import MaxDrifted, NonFiniteField, NonPositiveU, ValidationError
from .grid import (
    Field,
    Grid,
    _derivative_1d,
    apply_central,
    apply_upwind,
    derivatives_at_origin,
    lagrange_interp,
    origin_functional_matrix,
    write_snapshot,
)
from .modulation import (
    ModulationRates,
    ModulationState,
    check_M,
    closure_rates,
    normalization_residual,
    normalization_targets,
    q_of,
)
from .profiles import derive_constants, profile_values

PAD = 3
C_CFL = 0.5
C_DIFF = 0.25
DTAU_CAP = 0.01


@dataclass(frozen=True)
class RescaledState:
    U: Field
    Theta: Field  # origin-pinned: Theta(0) = 0
    mod: ModulationState

    @property
    def grid(self):
        return self.U.grid

    def theta_absolute(self, params, consts):
        """Theta including its origin value."""
        p = params.p
        base = params.delta * self.mod.tau / (p - 1) + params.delta * math.log(consts.kappa0) + self.mod.phi0
        return self.Theta.values + base


def pin_phase(Theta_abs: Field, params, consts, tau=0.0):
    """Split an absolute phase field into (pinned field, phi0)."""
    g = Theta_abs.grid
    origin = Theta_abs.values[g.origin_index]
    phi0 = origin - params.delta * tau / (params.p - 1) - params.delta * math.log(consts.kappa0)
    return Field(g, Theta_abs.values - origin), float(phi0)


@dataclass
class MonitorFlags:
    lower_bound_ok: bool
    detQ_positive: bool
    energies_bounded: bool
    cfl_dt: float


def _energies_bounded(row):
    """max(E_0, E_top, F_1, F_top) <= 1; true when energies were not computed."""
    vals = [row[k] for k in ("E0", "Ektop", "F1", "Fktop")]
    if not all(math.isfinite(v) for v in vals):
        return True
    return max(vals) <= 1.0


# ---------------------------------------------------------------- spatial operators


class Discretization:
    """Ghost padding, stencils and the origin functionals for one grid."""

    def __init__(self, grid: Grid, params, consts=None):
        self.grid = grid
        self.params = params
        self.consts = consts or derive_constants(params)
        d, n, h = grid.d, grid.n, grid.h
        self.d = d
        ax = -grid.L + h * np.arange(-PAD, n + PAD)
        clip = np.clip(np.arange(-PAD, n + PAD), 0, n - 1)
        self.clip_index = np.ix_(*([clip] * d))
        zp = np.meshgrid(*([ax] * d), indexing="ij")
        zb = np.meshgrid(*([grid.axis()[clip]] * d), indexing="ij")
        rp = np.sqrt(sum(c * c for c in zp))
        rb = np.sqrt(sum(c * c for c in zb))
        self.is_ghost = rp != rb
        self.log_ratio = np.zeros_like(rp)
        self.log_ratio[self.is_ghost] = np.log(rp[self.is_ghost] / rb[self.is_ghost])
        self.z = grid.coords if d > 1 else (grid.axis(),)
        labels, rows = origin_functional_matrix(grid, 2)
        self.func_labels = labels
        self.func_rows = rows
        self.pairs = [(i, j) for i in range(d) for j in range(i, d)]
        self.Ubar = profile_values(params, grid.points, self.consts).reshape(grid.shape)
        self.targets = normalization_targets(grid, params, self.consts)

    # ghost closure -------------------------------------------------------

    def pad_U(self, U):
        return U[self.clip_index] * np.exp(self.consts.sigma * self.log_ratio)

    def pad_Theta(self, Th):
        # Theta ~ delta log Ubar ~ const + c log|z| far out; c = z.grad Theta at the boundary node
        g = self.grid
        c = np.zeros_like(Th)
        for a in range(self.d):
            c = c + self.z[a] * _derivative_1d(Th, a, 1, g.h)
        return Th[self.clip_index] + c[self.clip_index] * self.log_ratio

    # derivatives on padded arrays -------------------------------------

    def central_first(self, Xp):
        return [self._strip(apply_central(Xp, a, 1, self.grid.h, PAD), a) for a in range(self.d)]

    def central_second(self, Xp):
        out = {}
        h = self.grid.h
        for i, j in self.pairs:
            if i == j:
                out[i, j] = self._strip(apply_central(Xp, i, 2, h, PAD), i)
            else:
                t = apply_central(Xp, i, 1, h, PAD)
                t = apply_central(t, j, 1, h, PAD)
                out[i, j] = self._strip_all(t, (i, j))
        return out

    def upwind_first(self, Xp, signs):
        """First derivatives biased by the velocity sign pattern (0 -> central)."""
        h = self.grid.h
        out = []
        for a in range(self.d):
            up = self._strip(apply_upwind(Xp, a, h, PAD, +1), a)
            dn = self._strip(apply_upwind(Xp, a, h, PAD, -1), a)
            ce = self._strip(apply_central(Xp, a, 1, h, PAD), a)
            s = signs[a]
            out.append(np.where(s > 0, up, np.where(s < 0, dn, ce)))
        return out

    def _strip(self, arr, axis):
        """Remove padding along all axes except ``axis`` (already removed)."""
        return self._strip_all(arr, (axis,))

    def _strip_all(self, arr, done):
        sl = [slice(None) if a in done else slice(PAD, PAD + self.grid.n) for a in range(self.d)]
        return arr[tuple(sl)]

    # origin functionals -----------------------------------------------

    def origin_functionals(self, X):
        flat = X.reshape(-1)
        return np.array([float(np.dot(flat[idx], w)) for idx, w in self.func_rows])

    def velocity(self, rates):
        v = []
        for a in range(self.d):
            va = 0.5 * self.z[a] + rates.Vcal[a]
            for b in range(self.d):
                if rates.Pcal[a, b] != 0.0:
                    va = va + rates.Pcal[a, b] * self.z[b]
            v.append(va)
        return v


def _quad_forms(Q, first_a, first_b, pairs_sym=True):
    """sum_ab Q_ab A_a B_b for gradient lists."""
    d = Q.shape[0]
    out = 0.0
    for a in range(d):
        for b in range(d):
            if Q[a, b] != 0.0:
                out = out + Q[a, b] * first_a[a] * first_b[b]
    return out


def _trace_q(Q, second):
    d = Q.shape[0]
    out = 0.0
    for i in range(d):
        for j in range(i, d):
            coef = Q[i, j] if i == j else Q[i, j] + Q[j, i]
            if coef != 0.0:
                out = out + coef * second[i, j]
    return out


def _viscous_arrays(U, dU, ddU, dT, ddT, Q, params):
    beta = params.beta
    lapU = _trace_q(Q, ddU)
    lapT = _trace_q(Q, ddT)
    UT = _quad_forms(Q, dU, dT)
    TT = _quad_forms(Q, dT, dT)
    DU = lapU - 2 * beta * UT - U * TT - beta * U * lapT
    DT = beta * lapU / U + 2 * UT / U - beta * TT + lapT
    zero = np.zeros_like(U)
    return zero + DU, zero + DT


def viscous_terms(U: Field, Theta: Field, Q, params, disc: Optional[Discretization] = None):
    """(D_U, D_Theta) with the solver's stencils and far-field ghost closure."""
    if np.any(U.values <= 0):
        raise NonPositiveU("U must be positive for the viscous terms")
    disc = disc or Discretization(U.grid, params)
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    Up, Tp = disc.pad_U(U.values), disc.pad_Theta(Theta.values)
    DU, DT = _viscous_arrays(
        U.values,
        disc.central_first(Up),
        disc.central_second(Up),
        disc.central_first(Tp),
        disc.central_second(Tp),
        Q,
        params,
    )
    return Field(U.grid, DU), Field(U.grid, DT)


def _power(U, e):
    return U * U if e == 2 else (U if e == 1 else np.exp(e * np.log(U)))


@dataclass
class StageResult:
    dU: np.ndarray
    dTheta: np.ndarray
    rates: ModulationRates
    dlogH: float
    dV: np.ndarray
    dM: np.ndarray
    dt: float
    dphi0: float
    vmax: float


class RescaledSystem:
    """Right-hand side of the coupled field/modulation system on a grid."""

    def __init__(self, grid: Grid, params, consts=None, closure: str = "discrete"):
        if closure not in ("discrete", "formula"):
            raise ValueError("closure must be 'discrete' or 'formula'")
        self.disc = Discretization(grid, params, consts)
        self.grid = grid
        self.params = params
        self.consts = self.disc.consts
        self.closure = closure

    # rates ------------------------------------------------------------

    def formula_rates(self, U, Th, mod: ModulationState, Q):
        Ut = derivatives_at_origin(Field(self.grid, U, check=False), 4)
        Tt = derivatives_at_origin(Field(self.grid, Th, check=False), 4)
        Ub = derivatives_at_origin(Field(self.grid, self.disc.Ubar, check=False), 3)
        data = {"U": Ut, "Theta": Tt, "W3": Ut[3] - Ub[3]}
        return closure_rates(data, Q, mod.H, self.params, self.consts)

    def _pieces(self, U, Th, mod, Q, signs):
        prm = self.params
        disc = self.disc
        p = prm.p
        Up, Tp = disc.pad_U(U), disc.pad_Theta(Th)
        dU, ddU = disc.central_first(Up), disc.central_second(Up)
        dT, ddT = disc.central_first(Tp), disc.central_second(Tp)
        GU = disc.upwind_first(Up, signs)
        GT = disc.upwind_first(Tp, signs)
        DU, DT = _viscous_arrays(U, dU, ddU, dT, ddT, Q, prm)
        Hp = math.exp((p - 1) * math.log(mod.H))
        Upm1 = _power(U, p - 1)
        base_U = -U / (p - 1) + Upm1 * U - prm.gamma * Hp * U + DU
        base_T = prm.delta * Upm1 + DT
        for a in range(self.disc.d):
            base_U = base_U - 0.5 * disc.z[a] * GU[a]
            base_T = base_T - 0.5 * disc.z[a] * GT[a]
        return base_U, base_T, GU, GT, Hp

    def discrete_rates(self, U, base_U, GU, Hp):
        """Rates for which the origin functionals of U_tau vanish exactly."""
        disc = self.disc
        cols = [U] + [-G for G in GU] + [-disc.z[j] * GU[i] for i, j in disc.pairs]
        A = np.column_stack([disc.origin_functionals(c) for c in cols])
        rhs = -disc.origin_functionals(base_U)
        x = np.linalg.solve(A, rhs)
        d = disc.d
        P = np.zeros((d, d))
        for k, (i, j) in enumerate(disc.pairs):
            P[i, j] = x[1 + d + k]
        return ModulationRates.from_cW(x[0], x[1 : 1 + d], P, self.params)

    def evaluate(self, U, Th, mod: ModulationState, rates: Optional[ModulationRates] = None) -> StageResult:
        """Stage derivative. With ``rates`` None the closure fixes them."""
        if not np.all(np.isfinite(U)) or not np.all(np.isfinite(Th)):
            raise NonFiniteField("non-finite field values")
        if np.min(U) <= 0:
            raise NonPositiveU(f"U lost positivity (min {np.min(U):.3e})")
        prm = self.params
        Q = q_of(mod, prm)
        guess = rates if rates is not None else self.formula_rates(U, Th, mod, Q)
        v = self.disc.velocity(guess)
        signs = [np.sign(va) for va in v]
        base_U, base_T, GU, GT, Hp = self._pieces(U, Th, mod, Q, signs)
        if rates is None and self.closure == "discrete":
            rates = self.discrete_rates(U, base_U, GU, Hp)
        elif rates is None:
            rates = guess
        dU = base_U + rates.c_W * U
        dT = base_T.copy()
        d = self.disc.d
        for a in range(d):
            dU = dU - rates.Vcal[a] * GU[a]
            dT = dT - rates.Vcal[a] * GT[a]
        for i, j in self.disc.pairs:
            if rates.Pcal[i, j] != 0.0:
                dU = dU - rates.Pcal[i, j] * self.disc.z[j] * GU[i]
                dT = dT - rates.Pcal[i, j] * self.disc.z[j] * GT[i]
        origin = float(dT[self.grid.origin_index])
        dT = dT - origin
        v = self.disc.velocity(rates)
        vmax = float(np.max(np.sqrt(sum(va * va for va in v))))
        return StageResult(
            dU=dU,
            dTheta=dT,
            rates=rates,
            dlogH=rates.c_U,
            dV=-mod.R @ rates.Vcal,
            dM=np.triu(rates.Pcal @ mod.M),
            dt=Hp,
            dphi0=origin - prm.delta / (prm.p - 1),
            vmax=vmax,
        )

    # time stepping ----------------------------------------------------

    def stable_dtau(self, state: RescaledState, hint=None, rates=None):
        h = self.grid.h
        if rates is None:
            rates = self.evaluate(state.U.values, state.Theta.values, state.mod).rates
        v = self.disc.velocity(rates)
        vmax = float(np.max(np.sqrt(sum(va * va for va in v))))
        qn = float(np.linalg.norm(q_of(state.mod, self.params), 2))
        cands = [DTAU_CAP, C_CFL * h / vmax]
        if qn > 0:
            cands.append(C_DIFF * h * h / qn)
        if hint is not None:
            cands.append(hint)
        return min(cands)

    def step(self, state: RescaledState, dtau_hint=None):
        """One RK4 step with the closure recomputed at every stage.

        Returns (new state, rates at the start of the step, dtau used).
        """
        U0, T0, m0 = state.U.values, state.Theta.values, state.mod
        k1 = self.evaluate(U0, T0, m0)
        dtau = self.stable_dtau(state, dtau_hint, k1.rates)
        ks = [k1]
        for c in (0.5, 0.5, 1.0):
            k = ks[-1]
            mod = _advance_mod(m0, k, c * dtau)
            ks.append(self.evaluate(U0 + c * dtau * k.dU, T0 + c * dtau * k.dTheta, mod))
        w = (1 / 6, 1 / 3, 1 / 3, 1 / 6)
        dU = sum(wi * k.dU for wi, k in zip(w, ks))
        dT = sum(wi * k.dTheta for wi, k in zip(w, ks))
        comb = StageResult(
            dU=dU,
            dTheta=dT,
            rates=k1.rates,
            dlogH=sum(wi * k.dlogH for wi, k in zip(w, ks)),
            dV=sum(wi * k.dV for wi, k in zip(w, ks)),
            dM=sum(wi * k.dM for wi, k in zip(w, ks)),
            dt=sum(wi * k.dt for wi, k in zip(w, ks)),
            dphi0=sum(wi * k.dphi0 for wi, k in zip(w, ks)),
            vmax=k1.vmax,
        )
        mod = _advance_mod(m0, comb, dtau)
        check_M(mod.M)
        U = U0 + dtau * dU
        T = T0 + dtau * dT
        T[self.grid.origin_index] = 0.0
        if not np.all(np.isfinite(U)) or not np.all(np.isfinite(T)):
            raise NonFiniteField(f"non-finite values at tau = {mod.tau:.6g}")
        if np.min(U) <= 0:
            raise NonPositiveU(f"U lost positivity at tau = {mod.tau:.6g}")
        new = RescaledState(Field(self.grid, U, check=False), Field(self.grid, T, check=False), mod)
        return new, k1.rates, dtau

    # projection -------------------------------------------------------

    def residual(self, state: RescaledState):
        return normalization_residual(state.U, self.params, self.consts, self.disc.targets)

    def resample(self, state: RescaledState, h_fac, m, v):
        """U'(z) = h U(m^-1 z + v), Theta'(z) = Theta(m^-1 z + v), phase re-pinned."""
        g = self.grid
        d = g.d
        z = g.points.reshape(-1, d)
        x = z @ np.linalg.inv(m).T + v
        lo = -g.L - PAD * g.h
        if np.any(np.abs(x) > g.L + (PAD - 1) * g.h):
            raise MaxDrifted("projection map leaves the padded grid")
        Up = self.disc.pad_U(state.U.values)
        Tp = self.disc.pad_Theta(state.Theta.values)
        Un = h_fac * lagrange_interp(Up, [lo] * d, g.h, x, 8).reshape(g.shape)
        Tn = lagrange_interp(Tp, [lo] * d, g.h, x, 8).reshape(g.shape)
        shift = float(Tn[g.origin_index])
        Tn = Tn - shift
        Tn[g.origin_index] = 0.0
        mod = state.mod
        R = mod.R
        new_mod = ModulationState(
            mod.tau,
            mod.t,
            mod.H * h_fac,
            mod.V + R @ v,
            np.triu(m @ mod.M),
            mod.phi0 + shift,
        )
        return RescaledState(Field(g, Un, check=False), Field(g, Tn, check=False), new_mod)

    def correction(self, U):
        """(h, m, v) moving the critical point near 0 to 0 and restoring the jet there."""
        from .modulation import _newton_max, _taylor_jet_from_node

        d = self.grid.d
        tensors = derivatives_at_origin(Field(self.grid, U, check=False), 4)
        tensors = [np.asarray(t, dtype=float) for t in tensors]
        tensors[1] = np.atleast_1d(tensors[1])
        s = _newton_max(lambda s: _taylor_jet_from_node(tensors, s), np.zeros(d), self.grid.h)
        if np.linalg.norm(s) > 1.0:
            raise MaxDrifted(f"maximum drifted to |z| = {np.linalg.norm(s):.3g}")
        u, _, hess = _taylor_jet_from_node(tensors, s)
        k0 = self.disc.targets[0]
        k2 = self.disc.targets[2][0, 0]
        h_fac = k0 / u
        S = h_fac * np.atleast_2d(hess) / k2
        S = 0.5 * (S + S.T)
        m = np.linalg.cholesky(S).T
        return h_fac, m, s

    def renormalize(self, state: RescaledState, tol=1e-11, max_iter=6):
        """Project onto the normalized set by a composed symmetry map.

        Each round estimates a correction from the current field, composes
        it with the previous ones and resamples the original field once,
        so interpolation error does not accumulate.
        """
        if self.residual(state) <= tol:
            return state, 0.0
        h_tot, m_tot, v_tot = 1.0, np.eye(self.grid.d), np.zeros(self.grid.d)
        cur = state
        for _ in range(max_iter):
            h_fac, m, v = self.correction(cur.U.values)
            # compose: z_old = m_tot^-1 (m^-1 z + v) + v_tot
            v_tot = v_tot + np.linalg.solve(m_tot, v)
            m_tot = m @ m_tot
            h_tot *= h_fac
            cur = self.resample(state, h_tot, m_tot, v_tot)
            if self.residual(cur) <= tol:
                break
        size = max(abs(h_tot - 1), float(np.max(np.abs(m_tot - np.eye(self.grid.d)))), float(np.max(np.abs(v_tot))))
        return cur, size


def _advance_mod(m0: ModulationState, k: StageResult, dt):
    return ModulationState(
        m0.tau + dt,
        m0.t + dt * k.dt,
        m0.H * math.exp(dt * k.dlogH),
        m0.V + dt * k.dV,
        np.triu(m0.M + dt * k.dM),
        m0.phi0 + dt * k.dphi0,
    )


def rhs(state: RescaledState, rates: ModulationRates, Q, params, system: Optional[RescaledSystem] = None):
    """(dU, dTheta) for given rates and Q; Theta's derivative is not re-pinned here."""
    system = system or RescaledSystem(state.grid, params)
    mod = state.mod
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    sign_rates = rates
    v = system.disc.velocity(sign_rates)
    signs = [np.sign(va) for va in v]
    U, Th = state.U.values, state.Theta.values
    if np.min(U) <= 0:
        raise NonPositiveU("U must be positive")
    base_U, base_T, GU, GT, _ = system._pieces(U, Th, mod, Q, signs)
    dU = base_U + rates.c_W * U
    dT = base_T
    for a in range(system.disc.d):
        dU = dU - rates.Vcal[a] * GU[a]
        dT = dT - rates.Vcal[a] * GT[a]
    for i, j in system.disc.pairs:
        dU = dU - rates.Pcal[i, j] * system.disc.z[j] * GU[i]
        dT = dT - rates.Pcal[i, j] * system.disc.z[j] * GT[i]
    return Field(state.grid, dU, check=False), Field(state.grid, dT, check=False)


def step(state: RescaledState, params, dtau_hint=None, system: Optional[RescaledSystem] = None):
    system = system or RescaledSystem(state.grid, params)
    return system.step(state, dtau_hint)


def renormalize(state: RescaledState, params, system: Optional[RescaledSystem] = None):
    system = system or RescaledSystem(state.grid, params)
    return system.renormalize(state)[0]


# ---------------------------------------------------------------- run loop


SERIES_COLUMNS_HEAD = ["tau", "t", "H", "cW", "cU", "trQ", "detQ", "lam_min", "lam_max"]
SERIES_COLUMNS_TAIL = ["E0", "Ektop", "F1", "Fktop", "Etotal", "min_U_ratio", "phi0", "That_estimate"]


def series_columns(d):
    return SERIES_COLUMNS_HEAD + [f"V{i + 1}" for i in range(d)] + SERIES_COLUMNS_TAIL


@dataclass
class Schedule:
    tau_end: float
    report_every: float = 1.0
    snapshot_taus: tuple = ()
    dtau_max: float = DTAU_CAP
    N_proj: int = 10
    drift_tol: float = 1e-8
    tol_norm: float = 1e-6
    k_top: int = 4
    nu1: float = 0.1
    nu2: float = 0.01
    keep_every: Optional[float] = None  # dense in-memory snapshots (for reconstruction)
    keep_until: float = math.inf
    energies: bool = True


@dataclass
class RunResult:
    params: object
    grid: Grid
    rows: list = field(default_factory=list)
    monitors: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    kept: list = field(default_factory=list)
    outcome: str = "completed"
    message: str = ""
    final: Optional[RescaledState] = None
    initial: Optional[RescaledState] = None
    out_dir: Optional[str] = None

    def column(self, name):
        return np.array([r[name] for r in self.rows])


def that_estimate(t, H, tau, params, consts):
    Hp = H ** (params.p - 1)
    return t + Hp * (1 + consts.mu5 / tau) if tau > 0 else t + Hp


def report_row(system: RescaledSystem, state: RescaledState, rates, schedule: Schedule, energy_cache=None):
    from .diagnostics import energy, linf_profile_error

    prm, c = system.params, system.consts
    mod = state.mod
    Q = q_of(mod, prm)
    lam = np.linalg.eigvalsh(Q)
    row = {
        "tau": mod.tau,
        "t": mod.t,
        "H": mod.H,
        "cW": rates.c_W,
        "cU": rates.c_U,
        "trQ": float(np.trace(Q)),
        "detQ": float(np.linalg.det(Q)),
        "lam_min": float(lam[0]),
        "lam_max": float(lam[-1]),
    }
    for i in range(prm.d):
        row[f"V{i + 1}"] = float(mod.V[i])
    if schedule.energies:
        rep = energy(state, prm, schedule.k_top, nu1=schedule.nu1, nu2=schedule.nu2, consts=c)
        row.update(E0=rep.E[0], Ektop=rep.E[-1], F1=rep.F[1], Fktop=rep.F[schedule.k_top], Etotal=rep.E_total)
    else:
        row.update(E0=math.nan, Ektop=math.nan, F1=math.nan, Fktop=math.nan, Etotal=math.nan)
    ratio = state.U.values / system.disc.Ubar ** (1 + c.eps2)
    row["min_U_ratio"] = float(np.min(ratio))
    row["phi0"] = mod.phi0
    row["That_estimate"] = that_estimate(mod.t, mod.H, mod.tau, prm, c)
    errs = linf_profile_error(state, prm, c)
    extra = {
        "tau": mod.tau,
        "norm_residual": system.residual(state),
        "err_complex": errs["err_complex"],
        "err_amp_weighted": errs["err_amp_weighted"],
        "V3_origin": float(np.max(np.abs(derivatives_at_origin(state.U, 3)[3]))),
    }
    return row, extra


def _state_snapshot(state: RescaledState, params, consts):
    mod = state.mod
    return {
        "U": state.U.values.copy(),
        "Theta": state.theta_absolute(params, consts),
        "mod": mod,
    }


def initial_state(initial, params, grid, consts=None):
    """Build the starting RescaledState from InitialData, (u0, theta0) Fields or a ready state."""
    from .modulation import InitialData, initial_rescaling

    consts = consts or derive_constants(params)
    if isinstance(initial, RescaledState):
        return initial
    offset = 0.0
    if isinstance(initial, InitialData):
        # the constant offset goes to phi0 untouched by the pinning arithmetic
        offset = initial.phase_offset
        mod, U0, T0 = initial_rescaling(replace(initial, phase_offset=0.0), None, params, grid, consts)
    else:
        u0, th0 = initial
        mod, U0, T0 = initial_rescaling(u0, th0, params, grid, consts)
    Tpin, phi0 = pin_phase(T0, params, consts, 0.0)
    return RescaledState(U0, Tpin, replace(mod, phi0=phi0 + offset))


def run(initial, params, schedule: Schedule, grid: Grid, out_dir=None, consts=None, closure="discrete", validate=True, nu=0.1):
    """Advance from the initial data until schedule.tau_end (or an abort).

    Writes series.csv, monitors.csv, modulation.csv and snapshots into
    ``out_dir`` when given.  Runtime aborts are caught and recorded in the
    result (outcome "aborted"); validation failures propagate.
    """
    from .errors import RuntimeAbort

    consts = consts or derive_constants(params)
    system = RescaledSystem(grid, params, consts, closure)
    state = initial_state(initial, params, grid, consts)
    if validate:
        from .diagnostics import check_rescaled_data

        checks = check_rescaled_data(state, params, consts, nu=nu, k_top=schedule.k_top)
        if not checks["lower_bound"]["ok"]:
            raise ValidationError(f"initial data violates the lower bound: {checks['lower_bound']}")
    state, _ = system.renormalize(state)
    result = RunResult(params, grid, initial=state, out_dir=out_dir)
    snaps = sorted(float(s) for s in schedule.snapshot_taus if s <= schedule.tau_end + 1e-12)
    report_every = schedule.report_every
    next_report = 0.0
    next_keep = 0.0 if schedule.keep_every else math.inf
    steps = 0
    last_dt = 0.0
    proj_size = 0.0
    writer = _RunWriter(out_dir, params, grid, consts) if out_dir else None
    try:
        rates = system.evaluate(state.U.values, state.Theta.values, state.mod).rates
        while True:
            tau = state.mod.tau
            at_end = tau >= schedule.tau_end - 1e-9
            if abs(tau - next_report) <= 1e-9 * max(1.0, tau) or tau >= next_report or at_end:
                row, extra = report_row(system, state, rates, schedule)
                flags = MonitorFlags(
                    lower_bound_ok=row["min_U_ratio"] >= consts.C_b,
                    detQ_positive=row["detQ"] > 0,
                    energies_bounded=_energies_bounded(row),
                    cfl_dt=last_dt,
                )
                extra.update(vars(flags))
                extra["projection"] = proj_size
                result.rows.append(row)
                result.monitors.append(extra)
                if writer:
                    writer.row(row, extra, state)
                next_report = round((tau + report_every) / report_every) * report_every
            if snaps and tau >= snaps[0] - 1e-9:
                snap = _state_snapshot(state, params, consts)
                result.snapshots[snaps[0]] = snap
                if writer:
                    writer.snapshot(snaps[0], state)
                snaps.pop(0)
            if tau >= next_keep - 1e-9:
                result.kept.append(_state_snapshot(state, params, consts))
                next_keep = round((tau + schedule.keep_every) / schedule.keep_every) * schedule.keep_every
                if next_keep > schedule.keep_until + 1e-9:
                    next_keep = math.inf
            if at_end:
                break
            targets = [schedule.tau_end, next_report]
            if snaps:
                targets.append(snaps[0])
            if math.isfinite(next_keep):
                targets.append(next_keep)
            hint = min(schedule.dtau_max, min(t for t in targets if t > tau + 1e-12) - tau)
            state, rates, last_dt = system.step(state, hint)
            # land exactly on scheduled times
            for tgt in targets:
                if abs(state.mod.tau - tgt) < 1e-9:
                    state = RescaledState(state.U, state.Theta, replace(state.mod, tau=tgt))
            steps += 1
            if steps % schedule.N_proj == 0 or system.residual(state) > schedule.drift_tol:
                state, proj_size = system.renormalize(state)
                rates = system.evaluate(state.U.values, state.Theta.values, state.mod).rates
    except RuntimeAbort as exc:
        result.outcome = "aborted"
        result.message = f"{type(exc).__name__}: {exc}"
    result.final = state
    if writer:
        writer.close(result, schedule)
    return result


class _RunWriter:
    def __init__(self, out_dir, params, grid, consts):
        os.makedirs(out_dir, exist_ok=True)
        self.dir = out_dir
        self.params = params
        self.grid = grid
        self.consts = consts
        d = params.d
        self.series = open(os.path.join(out_dir, "series.csv"), "w", newline="")
        self.monitors = open(os.path.join(out_dir, "monitors.csv"), "w", newline="")
        self.modulation = open(os.path.join(out_dir, "modulation.csv"), "w", newline="")
        self.sw = csv.writer(self.series)
        self.sw.writerow(series_columns(d))
        self.mw = None
        self.modw = csv.writer(self.modulation)
        mcols = ["tau", "t", "H"] + [f"V{i + 1}" for i in range(d)]
        mcols += [f"M{i + 1}{j + 1}" for i in range(d) for j in range(i, d)] + ["phi0"]
        self.modw.writerow(mcols)
        self.cols = series_columns(d)

    def row(self, row, extra, state):
        self.sw.writerow([_fmt(row[c]) for c in self.cols])
        if self.mw is None:
            self.mcols = list(extra)
            self.mw = csv.writer(self.monitors)
            self.mw.writerow(self.mcols)
        self.mw.writerow([_fmt(extra[c]) for c in self.mcols])
        mod = state.mod
        d = self.params.d
        vals = [mod.tau, mod.t, mod.H] + list(mod.V) + [mod.M[i, j] for i in range(d) for j in range(i, d)] + [mod.phi0]
        self.modw.writerow([_fmt(v) for v in vals])

    def snapshot(self, tau, state):
        path = os.path.join(self.dir, f"snap_tau{tau:09.4f}.bin")
        mod = state.mod
        write_snapshot(
            path,
            self.grid,
            {"U": state.U.values, "Theta": state.theta_absolute(self.params, self.consts)},
            tau=mod.tau,
            t=mod.t,
            extra={"H": mod.H, "V": mod.V.tolist(), "M": mod.M.tolist(), "phi0": mod.phi0},
        )

    def close(self, result, schedule):
        for fh in (self.series, self.monitors, self.modulation):
            fh.close()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(bool(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return f"{float(v):.17g}"
