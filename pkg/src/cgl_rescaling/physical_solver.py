"""Reference solver for psi_t = (1+i beta) Lap psi + (1+i delta)|psi|^(p-1) psi - gamma psi.

Works on the complex field directly (no amplitude/phase split), so it is
independent of the rescaled formulation.  Also maps rescaled runs back to
physical variables:
    psi(x, t) = U(z)/H * exp(i Theta(z)),  z = e^{tau/2} M (x - V).
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InsufficientGrowth, NonFiniteField, OutOfRange, OutsideRescaledDomain, ValidationError
from .grid import Grid, central_weights, lagrange_interp, write_snapshot
from .modulation import ModulationState

C_DIFF = 0.2
C_NL = 0.05
PAD = 3


def _pad(psi, periodic):
    if periodic:
        return np.pad(psi, PAD, mode="wrap")
    out = np.pad(psi, PAD, mode="edge")
    n = psi.shape[0]
    for axis in range(psi.ndim):
        moved = np.moveaxis(out, axis, 0)
        for k in range(1, PAD + 1):
            # quadratic through the last three physical nodes
            l0, l1, l2 = (k + 1) * (k + 2) / 2, -k * (k + 2), k * (k + 1) / 2
            hi = PAD + n - 1
            moved[hi + k] = l0 * moved[hi] + l1 * moved[hi - 1] + l2 * moved[hi - 2]
            lo = PAD
            moved[lo - k] = l0 * moved[lo] + l1 * moved[lo + 1] + l2 * moved[lo + 2]
    return out


def laplacian(psi, h, periodic=False):
    offs, w = central_weights(2)
    P = _pad(psi, periodic)
    n = psi.shape[0]
    out = np.zeros_like(psi)
    for axis in range(psi.ndim):
        acc = 0.0
        for o, c in zip(offs, w):
            if c == 0.0:
                continue
            sl = [slice(PAD, PAD + n)] * psi.ndim
            sl[axis] = slice(PAD + o, PAD + o + n)
            acc = acc + c * P[tuple(sl)]
        out = out + acc
    return out / (h * h)


def physical_rhs(psi, params, h, periodic=False):
    """(1+i beta) Lap psi + (1+i delta)|psi|^(p-1) psi - gamma psi."""
    psi = np.asarray(psi, dtype=complex)
    amp = np.abs(psi)
    nl = amp ** (params.p - 1) * psi
    return (1 + 1j * params.beta) * laplacian(psi, h, periodic) + (1 + 1j * params.delta) * nl - params.gamma * psi


@dataclass
class PhysicalRunResult:
    params: object
    grid: Grid
    rows: list = field(default_factory=list)
    snapshots: dict = field(default_factory=dict)
    outcome: str = "completed"
    message: str = ""
    final: Optional[np.ndarray] = None

    def snapshot_at(self, t, rtol=1e-12):
        for key, val in self.snapshots.items():
            if abs(key - t) <= rtol * max(1.0, abs(t)):
                return val
        return None

    def column(self, name):
        return np.array([r[name] for r in self.rows])


def physical_run(
    psi0,
    params,
    grid: Grid,
    t_end: Optional[float] = None,
    amp_stop: Optional[float] = None,
    periodic: bool = False,
    t0: float = 0.0,
    snapshot_times=(),
    boundary_tol: float = 1e-8,
    record_every: int = 1,
    out_dir: Optional[str] = None,
    dt_min: float = 1e-12,
):
    """Classical RK4 until t_end or until max|psi| >= amp_stop.

    The step is dt = min(C_DIFF h^2/(1+|beta|), C_NL/max|psi|^(p-1)),
    shortened to land exactly on snapshot times and t_end.
    """
    if t_end is None and amp_stop is None:
        raise ValueError("give t_end or amp_stop")
    psi = np.array(psi0, dtype=complex)
    if psi.shape != grid.shape:
        raise ValueError("psi0 does not match the grid")
    if not np.all(np.isfinite(psi)):
        raise NonFiniteField("non-finite initial data")
    peak = float(np.max(np.abs(psi)))
    if not periodic:
        edge = max(float(np.max(np.abs(np.moveaxis(psi, a, 0)[[0, -1]]))) for a in range(grid.d))
        if edge > boundary_tol * peak:
            raise ValidationError(f"|psi0| at the boundary is {edge / peak:.2e} of its max (limit {boundary_tol:.1e})")
    h = grid.h
    dt_lin = C_DIFF * h * h / (1 + abs(params.beta))
    res = PhysicalRunResult(params, grid)
    stops = sorted(float(s) for s in snapshot_times)
    t = float(t0)
    step = 0

    def record(dt):
        amp = np.abs(psi)
        idx = np.unravel_index(int(np.argmax(amp)), amp.shape)
        row = {"t": t, "amp_max": float(amp[idx]), "dt": dt}
        for a in range(grid.d):
            row[f"amp_argmax{a + 1}"] = float(grid.axis(a)[idx[a]])
        res.rows.append(row)

    record(0.0)
    f = lambda y: physical_rhs(y, params, h, periodic)
    try:
        while True:
            while stops and t >= stops[0] - 1e-14 * max(1.0, stops[0]):
                res.snapshots[stops.pop(0)] = psi.copy()
            amp = float(np.max(np.abs(psi)))
            if t_end is not None and t >= t_end - 1e-14 * max(1.0, t_end):
                break
            if amp_stop is not None and amp >= amp_stop:
                break
            dt = min(dt_lin, C_NL / amp ** (params.p - 1)) if amp > 0 else dt_lin
            target = min([s for s in stops] + ([t_end] if t_end is not None else []), default=math.inf)
            last = False
            if t + dt >= target - 1e-14 * max(1.0, target):
                dt = target - t
                last = True
            if dt < dt_min and not last:
                raise NonFiniteField(f"time step collapsed to {dt:.2e} at t = {t:.10g}")
            k1 = f(psi)
            k2 = f(psi + 0.5 * dt * k1)
            k3 = f(psi + 0.5 * dt * k2)
            k4 = f(psi + dt * k3)
            psi = psi + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6
            t = target if last else t + dt
            if not np.all(np.isfinite(psi)):
                raise NonFiniteField(f"non-finite values at t = {t:.10g}")
            step += 1
            if step % record_every == 0 or last:
                record(dt)
    except NonFiniteField as exc:
        res.outcome = "under-resolved"
        res.message = str(exc)
    if res.rows[-1]["t"] != t:
        record(0.0)
    res.final = psi
    if out_dir:
        _write_physical(out_dir, res)
    return res


def _write_physical(out_dir, res: PhysicalRunResult):
    os.makedirs(out_dir, exist_ok=True)
    d = res.grid.d
    cols = ["t", "amp_max"] + [f"amp_argmax{a + 1}" for a in range(d)] + ["dt"]
    with open(os.path.join(out_dir, "series.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in res.rows:
            w.writerow([f"{float(r[c]):.17g}" for c in cols])
    for i, (t, psi) in enumerate(sorted(res.snapshots.items())):
        write_snapshot(os.path.join(out_dir, f"snap_{i:04d}.bin"), res.grid, {"Re": psi.real, "Im": psi.imag}, tau=math.nan, t=t)


def fit_blowup_rate(t, amp, params, min_samples=20):
    """Fit amp^{-(p-1)}/(p-1) = T - t over the last decade of growth.

    Returns {"T_fit", "rate_check", "samples"}; rate_check is the RMS
    relative residual of the model.
    """
    t = np.asarray(t, dtype=float)
    amp = np.asarray(amp, dtype=float)
    if len(t) < min_samples or amp.max() < 10 * amp.min():
        raise InsufficientGrowth(f"need >= {min_samples} samples spanning a factor 10 in amplitude")
    sel = amp >= amp.max() / 10
    if np.sum(sel) < 3:
        raise InsufficientGrowth("too few samples in the last decade of growth")
    p = params.p
    y = amp[sel] ** (-(p - 1)) / (p - 1)
    T = float(np.mean(y + t[sel]))
    resid = (y - (T - t[sel])) / y
    return {"T_fit": T, "rate_check": float(np.sqrt(np.mean(resid**2))), "samples": int(np.sum(sel))}


# ---------------------------------------------------------------- rescaled -> physical


def _snapshot_list(rescaled):
    snaps = list(getattr(rescaled, "kept", [])) + list(getattr(rescaled, "snapshots", {}).values())
    snaps.sort(key=lambda s: s["mod"].tau)
    out = []
    for s in snaps:
        if not out or s["mod"].tau > out[-1]["mod"].tau:
            out.append(s)
    return out


def modulation_at(rescaled, t):
    """(ModulationState, fraction s, snapshot a, snapshot b) at physical time t.

    log H, V, M and phi0 are linear in tau between bracketing snapshots,
    and tau(t) follows from integrating t_tau = H^(p-1) exactly.
    """
    snaps = _snapshot_list(rescaled)
    if not snaps:
        raise OutOfRange("rescaled run kept no snapshots")
    p = rescaled.params.p
    ts = [s["mod"].t for s in snaps]
    tol = 1e-13 * max(1.0, abs(t))
    for s in snaps:
        if abs(s["mod"].t - t) <= tol:
            return s["mod"], 0.0, s, s
    if t < ts[0] or t > ts[-1]:
        raise OutOfRange(f"t = {t} outside [{ts[0]}, {ts[-1]}]")
    i = int(np.searchsorted(ts, t)) - 1
    a, b = snaps[i], snaps[i + 1]
    ma, mb = a["mod"], b["mod"]
    dtau = mb.tau - ma.tau
    k = (p - 1) * (math.log(mb.H) - math.log(ma.H)) / dtau
    Hp = ma.H ** (p - 1)
    if abs(k) < 1e-14:
        delta = (t - ma.t) / Hp
    else:
        delta = math.log1p(k * (t - ma.t) / Hp) / k
    s = min(max(delta / dtau, 0.0), 1.0)
    mod = ModulationState(
        ma.tau + s * dtau,
        t,
        math.exp((1 - s) * math.log(ma.H) + s * math.log(mb.H)),
        (1 - s) * ma.V + s * mb.V,
        (1 - s) * ma.M + s * mb.M,
        (1 - s) * ma.phi0 + s * mb.phi0,
    )
    return mod, s, a, b


def reconstruct_from_rescaled(rescaled, x_points, t_query, strict=True, order=6):
    """psi at physical points x (shape (m, d)) and time t_query from a rescaled run."""
    grid = rescaled.grid
    d = grid.d
    x = np.asarray(x_points, dtype=float).reshape(-1, d)
    mod, s, a, b = modulation_at(rescaled, t_query)
    z = (x - mod.V) @ (math.exp(mod.tau / 2) * mod.M).T
    inside = np.all(np.abs(z) <= grid.L * (1 + 1e-12), axis=1)
    if strict and not np.all(inside):
        raise OutsideRescaledDomain(f"{int(np.sum(~inside))} of {len(z)} points map outside |z_i| <= {grid.L}")
    lo = [-grid.L] * d
    zi = np.clip(z[inside], -grid.L, grid.L)
    U = (1 - s) * a["U"] + s * b["U"]
    Th = (1 - s) * a["Theta"] + s * b["Theta"]
    Uv = lagrange_interp(U, lo, grid.h, zi, order)
    Tv = lagrange_interp(Th, lo, grid.h, zi, order)
    out = np.full(len(z), np.nan + 0j)
    out[inside] = Uv / mod.H * np.exp(1j * Tv)
    return out
