"""Configuration files, run directories and the ``cgl-rescaling`` command line.

Config files are INI style::

    [model]
    p = 2
    beta = 0.5
    delta = 0.2

Every other section is optional; missing keys take the defaults listed in
``SCHEMA``.  The resolved configuration is stored in each run's meta.json.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import glob
import json
import math
import os
import shutil
import subprocess
import sys
from dataclasses import asdict, dataclass, is_dataclass

import numpy as np

from . import __version__
from .errors import (
    ConfigTypeError,
    MissingRequired,
    ParameterMismatch,
    RescalingError,
    UnknownKey,
    ValidationError,
)
from .grid import Field, Grid, read_snapshot
from .modulation import (
    ModulationState,
    gaussian_initial_data,
    prescale_for_H,
    profile_initial_data,
    reduced_ode,
)
from .profiles import derive_constants, eval_profile_phase, eval_weight, profile_values, validate_params, weight_spec

REQUIRED = object()

# section -> key -> (type, default); order here is the canonical order
SCHEMA = {
    "model": {
        "p": ("float", REQUIRED),
        "beta": ("float", 0.0),
        "delta": ("float", 0.0),
        "gamma": ("float", 0.0),
        "d": ("int", 1),
    },
    "domain": {
        "L": ("float", 30.0),
        "n": ("int", 961),
    },
    "time": {
        "dtau_max": ("float", 0.01),
        "tau_end": ("float", 50.0),
        "report_every": ("float", 1.0),
        "snapshot_taus": ("floats", ()),
    },
    "initial": {
        "kind": ("choice:profile_scaled,gaussian,file", "profile_scaled"),
        "amplitude": ("float", 1.5),
        "H_scale": ("float", 0.01),  # 0 disables the parabolic pre-scaling
        "shift": ("floats", ()),
        "phase_shift": ("float", 0.0),
        "bump": ("float", 0.0),
        "u0_file": ("str", ""),
        "theta0_file": ("str", ""),
    },
    "diagnostics": {
        "k_top": ("int", 4),
        "nu": ("float", 0.1),
        "nu1": ("float", 0.1),
        "nu2": ("float", 0.01),
        "tol_norm": ("float", 1e-6),
        "N_proj": ("int", 10),
    },
    "output": {
        "dir": ("str", "run"),
        "overwrite": ("bool", False),
    },
}


def _convert(key, kind, raw):
    raw = raw.strip()
    try:
        if kind == "float":
            val = float(raw)
            if not math.isfinite(val):
                raise ValueError("not finite")
            return val
        if kind == "int":
            return int(raw)
        if kind == "floats":
            return tuple(float(x) for x in raw.replace(",", " ").split())
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError("expected true/false")
        if kind.startswith("choice:"):
            options = kind.split(":", 1)[1].split(",")
            if raw not in options:
                raise ValueError(f"expected one of {options}")
            return raw
        return raw
    except ValueError as exc:
        raise ConfigTypeError(key, f"{raw!r} ({exc})") from None


@dataclass(frozen=True)
class RunConfig:
    model: dict
    domain: dict
    time: dict
    initial: dict
    diagnostics: dict
    output: dict

    def to_dict(self):
        return {name: dict(getattr(self, name)) for name in SCHEMA}

    @property
    def params(self):
        m = self.model
        return validate_params(m["p"], m["beta"], m["delta"], m["gamma"], m["d"])

    def grid(self, check_far_field=True):
        return Grid(self.model["d"], self.domain["L"], self.domain["n"], check_far_field=check_far_field)

    def schedule(self, **overrides):
        from .rescaled_solver import Schedule

        t, dg = self.time, self.diagnostics
        kw = dict(
            tau_end=t["tau_end"],
            report_every=t["report_every"],
            snapshot_taus=tuple(t["snapshot_taus"]),
            dtau_max=t["dtau_max"],
            N_proj=dg["N_proj"],
            tol_norm=dg["tol_norm"],
            k_top=dg["k_top"],
            nu1=dg["nu1"],
            nu2=dg["nu2"],
        )
        kw.update(overrides)
        return Schedule(**kw)


def parse_config(text: str) -> RunConfig:
    """Parse INI text into a fully resolved RunConfig.

    Unknown sections or keys raise UnknownKey, malformed values
    ConfigTypeError, absent required keys MissingRequired.  Model
    parameters are checked with validate_params.
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",), comment_prefixes=("#",))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from None
    for section in cp.sections():
        if section not in SCHEMA:
            raise UnknownKey(section, "*")
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise UnknownKey(section, key)
    resolved = {}
    for section, keys in SCHEMA.items():
        out = {}
        for key, (kind, default) in keys.items():
            if cp.has_option(section, key):
                out[key] = _convert(f"{section}.{key}", kind, cp[section][key])
            elif default is REQUIRED:
                raise MissingRequired(f"{section}.{key}")
            else:
                out[key] = default
        resolved[section] = out
    cfg = RunConfig(**resolved)
    cfg.params  # surfaces BadExponent / SupercriticalOrCritical
    if cfg.initial["kind"] == "file" and not cfg.initial["u0_file"]:
        raise MissingRequired("initial.u0_file")
    return cfg


def _format_value(kind, val):
    if kind == "floats":
        return ", ".join(repr(float(v)) for v in val)
    if kind == "bool":
        return "true" if val else "false"
    if kind == "float":
        return repr(float(val))
    return str(val)


def serialize_config(cfg: RunConfig) -> str:
    """Canonical INI text: every section and key, in schema order."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        values = getattr(cfg, section)
        for key, (kind, _) in keys.items():
            lines.append(f"{key} = {_format_value(kind, values[key])}")
        lines.append("")
    return "\n".join(lines)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# ---------------------------------------------------------------- initial data


def _field_from_file(path, key):
    _, grid, fields = read_snapshot(path)
    if not fields:
        raise ValidationError(f"{key}: snapshot {path} has no fields")
    return Field(grid, next(iter(fields.values())))


def initial_data(cfg: RunConfig, consts=None, bump=None):
    """The configured initial data: an InitialData object or a (u0, theta0) pair of Fields."""
    params = cfg.params
    consts = consts or derive_constants(params)
    ini = cfg.initial
    shift = ini["shift"] or None
    if shift is not None and len(shift) != params.d:
        raise ConfigTypeError("initial.shift", f"needs {params.d} entries")
    if ini["kind"] == "file":
        u0 = _field_from_file(ini["u0_file"], "initial.u0_file")
        th0 = _field_from_file(ini["theta0_file"], "initial.theta0_file") if ini["theta0_file"] else Field(u0.grid, np.zeros(u0.grid.shape))
        return u0, th0
    if ini["kind"] == "gaussian":
        data = gaussian_initial_data(params, ini["amplitude"], shift, ini["phase_shift"])
    else:
        b = ini["bump"] if bump is None else bump
        data = profile_initial_data(params, consts, ini["amplitude"], shift, ini["phase_shift"], bump=b)
    if ini["H_scale"] > 0:
        data, _ = prescale_for_H(data, ini["H_scale"], params, consts)
    return data


# ---------------------------------------------------------------- run directories


def version_string():
    """git-describe style version; falls back to the package version."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
            check=True,
        ).stdout.strip()
        if out:
            return f"v{__version__}-g{out}" if not out.startswith("v") else out
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _jsonable(obj):
    if is_dataclass(obj) and not isinstance(obj, type):
        return _jsonable(asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_jsonable(obj), fh, indent=2)
        fh.write("\n")


def write_meta(out_dir, cfg: RunConfig, params, monitors, outcome, extra=None):
    meta = {
        "config": cfg.to_dict() if cfg is not None else None,
        "constants": derive_constants(params).as_dict(),
        "version": version_string(),
        "monitors": monitors,
        "outcome": outcome,
    }
    if extra:
        meta.update(extra)
    write_json(os.path.join(out_dir, "meta.json"), meta)
    return meta


def _prepare_dir(path, overwrite):
    if os.path.exists(path) and os.listdir(path):
        if not overwrite:
            raise ValidationError(f"output directory {path} is not empty (set output.overwrite = true)")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)


def _read_meta(run_dir):
    path = os.path.join(run_dir, "meta.json")
    if not os.path.exists(path):
        raise ValidationError(f"{run_dir} has no meta.json")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _params_from_meta(meta):
    m = meta["config"]["model"]
    return validate_params(m["p"], m["beta"], m["delta"], m["gamma"], m["d"])


def read_csv_rows(path):
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def load_rescaled_run(run_dir):
    """RunResult rebuilt from a rescaled run directory (rows and snapshots)."""
    from .rescaled_solver import RunResult

    meta = _read_meta(run_dir)
    params = _params_from_meta(meta)
    dom = meta["config"]["domain"]
    grid = Grid(params.d, dom["L"], dom["n"], check_far_field=False)
    res = RunResult(params, grid, outcome=meta.get("outcome", "completed"), out_dir=run_dir)
    res.rows = read_csv_rows(os.path.join(run_dir, "series.csv"))
    mon = os.path.join(run_dir, "monitors.csv")
    res.monitors = read_csv_rows(mon) if os.path.exists(mon) else []
    for path in sorted(glob.glob(os.path.join(run_dir, "snap_tau*.bin"))):
        header, _, fields = read_snapshot(path)
        mod = ModulationState(header["tau"], header["t"], header["H"], np.array(header["V"]), np.array(header["M"]), header["phi0"])
        res.snapshots[header["tau"]] = {"U": fields["U"], "Theta": fields["Theta"], "mod": mod}
    return res


def load_physical_run(run_dir):
    """PhysicalRunResult rebuilt from a physical run directory."""
    from .physical_solver import PhysicalRunResult

    meta = _read_meta(run_dir)
    params = _params_from_meta(meta)
    grid = None
    snaps = {}
    for path in sorted(glob.glob(os.path.join(run_dir, "snap_*.bin"))):
        header, grid, fields = read_snapshot(path)
        snaps[header["t"]] = fields["Re"] + 1j * fields["Im"]
    if grid is None:
        raise ValidationError(f"{run_dir} has no snapshots")
    res = PhysicalRunResult(params, grid, snapshots=snaps, outcome=meta.get("outcome", "completed"))
    res.rows = read_csv_rows(os.path.join(run_dir, "series.csv"))
    return res


# ---------------------------------------------------------------- subcommands


def _floats(text):
    return [float(x) for x in text.replace(",", " ").split()]


def cmd_validate(args):
    from .diagnostics import validate_initial_data

    cfg = load_config(args.config)
    params = cfg.params
    consts = derive_constants(params)
    data = initial_data(cfg, consts)
    grid = cfg.grid()
    rep = validate_initial_data(data, None, params, grid, cfg.diagnostics["k_top"], cfg.diagnostics["nu"], consts) if not isinstance(data, tuple) else validate_initial_data(data[0], data[1], params, grid, cfg.diagnostics["k_top"], cfg.diagnostics["nu"], consts)
    out = sys.stdout
    out.write(f"V0 = {np.array2string(np.asarray(rep['V0']), precision=6)}  H0 = {rep['H0']:.6g}\n")
    out.write(f"M0 = {np.array2string(np.asarray(rep['M0']), precision=6)}\n")
    out.write(f"{'check':<14}{'ok':<6}{'value':>14}\n")
    for name, chk in rep["checks"].items():
        value = chk.get("value", chk.get("min_ratio"))
        out.write(f"{name:<14}{'yes' if chk['ok'] else 'NO':<6}{value:>14.6g}\n")
        if name == "lower_bound" and chk["violation"]:
            v = chk["violation"]
            out.write(f"  violated on {v['nodes']} nodes, {v['r_min']:.4g} <= |z| <= {v['r_max']:.4g}\n")
    return 0 if rep["ok"] else 2


def cmd_profile(args):
    if args.config:
        params = load_config(args.config).params
    else:
        params = validate_params(args.p, args.beta, args.delta, args.gamma, 1)
    consts = derive_constants(params)
    z = np.linspace(-args.z_max, args.z_max, args.points)
    pts = np.zeros((len(z), params.d))
    pts[:, 0] = z
    U = profile_values(params, pts, consts)
    Th = eval_profile_phase(params, pts, 0.0, 0, consts)
    cols = {"z": z, "Ubar": U, "Thetabar": Th}
    r = np.abs(z)
    for fam, ks in (("rho", range(args.k_top + 1)), ("ring_rho", range(1, args.k_top + 1))):
        for k in ks:
            spec = weight_spec(fam, k, params, consts, top=args.k_top)
            w = np.full(len(z), np.inf if spec.singular else 0.0)
            pos = r > 0
            w[pos] = eval_weight(spec, params, pts[pos], U_value=U[pos])
            if not spec.singular:
                w[~pos] = eval_weight(spec, params, pts[~pos], U_value=U[~pos])
            cols[f"{fam}_{k}"] = w
    _write_columns(args.out, cols)
    return 0


def _write_columns(path, cols):
    names = list(cols)
    fh = open(path, "w", newline="") if path and path != "-" else sys.stdout
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for i in range(len(cols[names[0]])):
            w.writerow([f"{float(cols[c][i]):.17g}" for c in names])
    finally:
        if fh is not sys.stdout:
            fh.close()


def cmd_reduced_ode(args):
    q0 = _floats(args.q0)
    d = args.d
    if len(q0) == 1:
        Q0 = q0[0] * np.eye(d)
    elif len(q0) == d * d:
        Q0 = np.array(q0).reshape(d, d)
    else:
        raise ValidationError(f"--q0 needs 1 or {d * d} entries, got {len(q0)}")
    if not np.allclose(Q0, Q0.T):
        raise ValidationError("--q0 must be symmetric")
    tau_end = args.tau_end
    marks = [float(x) for x in np.unique(np.concatenate([np.arange(1, min(tau_end, 10) + 1e-9, 1.0), np.geomspace(10, tau_end, 41) if tau_end > 10 else []]))]
    marks = [m for m in marks if 0 < m <= tau_end]
    rows = reduced_ode(Q0, tau_end, record=marks, geometric=not args.literal_step)
    cols = {k: [] for k in ("tau", "trQ", "detQ", "lambda_min", "lambda_max", "trQ_times_tau_over_d")}
    for tau, Q in rows:
        lam = np.linalg.eigvalsh(Q)
        cols["tau"].append(tau)
        cols["trQ"].append(np.trace(Q))
        cols["detQ"].append(np.linalg.det(Q))
        cols["lambda_min"].append(lam[0])
        cols["lambda_max"].append(lam[-1])
        cols["trQ_times_tau_over_d"].append(np.trace(Q) * tau / d)
    _write_columns(args.out, cols)
    return 0


def _monitor_summary(res):
    mons = res.monitors
    if not mons:
        return {}
    keys = ["norm_residual", "err_complex"]
    out = {f"max_{k}": max(m[k] for m in mons) for k in keys}
    out["min_U_ratio"] = min(r["min_U_ratio"] for r in res.rows)
    for flag in ("lower_bound_ok", "detQ_positive", "energies_bounded"):
        out[f"all_{flag}"] = all(bool(m[flag]) for m in mons)
    out["rows"] = len(res.rows)
    out["message"] = res.message
    return out


def _run_dir(cfg, override):
    return override or cfg.output["dir"]


def cmd_rescaled(args):
    from .rescaled_solver import run

    cfg = load_config(args.config)
    params = cfg.params
    consts = derive_constants(params)
    out_dir = _run_dir(cfg, args.out)
    _prepare_dir(out_dir, cfg.output["overwrite"])
    data = initial_data(cfg, consts)
    res = run(data, params, cfg.schedule(), cfg.grid(), out_dir=out_dir, consts=consts, nu=cfg.diagnostics["nu"])
    write_meta(out_dir, cfg, params, _monitor_summary(res), res.outcome)
    print(f"{res.outcome}: tau = {res.rows[-1]['tau']:.6g}, That = {res.rows[-1]['That_estimate']:.15g}")
    return 0 if res.outcome == "completed" else 1


def cmd_physical(args):
    from .physical_solver import fit_blowup_rate, physical_run

    cfg = load_config(args.config)
    params = cfg.params
    consts = derive_constants(params)
    out_dir = _run_dir(cfg, args.out)
    _prepare_dir(out_dir, cfg.output["overwrite"])
    grid = cfg.grid(check_far_field=False)
    data = initial_data(cfg, consts)
    pts = grid.points.reshape(-1, params.d)
    if isinstance(data, tuple):
        u0, th0 = data
        if u0.grid.shape != grid.shape:
            raise ValidationError("file initial data must live on the [domain] grid")
        psi0 = u0.values * np.exp(1j * th0.values)
    else:
        psi0 = (np.asarray(data.value(pts)) * np.exp(1j * data.theta(pts))).reshape(grid.shape)
    if args.t_end is None and args.amp_stop is None:
        raise ValidationError("physical needs --t-end or --amp-stop")
    res = physical_run(
        psi0,
        params,
        grid,
        t_end=args.t_end,
        amp_stop=args.amp_stop,
        periodic=args.periodic,
        snapshot_times=_floats(args.snapshot_times) if args.snapshot_times else (),
        boundary_tol=args.boundary_tol,
        record_every=args.record_every,
        out_dir=out_dir,
    )
    monitors = {"rows": len(res.rows), "amp_final": res.rows[-1]["amp_max"], "t_final": res.rows[-1]["t"], "message": res.message}
    try:
        monitors["fit"] = fit_blowup_rate(res.column("t"), res.column("amp_max"), params)
    except ValidationError as exc:
        monitors["fit"] = {"skipped": str(exc)}
    write_meta(out_dir, cfg, params, monitors, res.outcome)
    print(f"{res.outcome}: t = {monitors['t_final']:.10g}, max|psi| = {monitors['amp_final']:.6g}")
    return 0 if res.outcome == "completed" else 1


def cmd_compare(args):
    from .diagnostics import compare_runs

    resc = load_rescaled_run(args.rescaled)
    phys = load_physical_run(args.physical)
    if resc.params != phys.params:
        raise ParameterMismatch(f"parameters differ: {resc.params} vs {phys.params}")
    out = compare_runs(resc, phys, _floats(args.times), args.z_box)
    print(json.dumps(_jsonable(out), indent=2))
    return 0


def build_report(run_dir):
    """Per-report-time records combining rate and energy diagnostics."""
    from .diagnostics import rate_report

    meta = _read_meta(run_dir)
    params = _params_from_meta(meta)
    consts = derive_constants(params)
    rows = read_csv_rows(os.path.join(run_dir, "series.csv"))
    mods = read_csv_rows(os.path.join(run_dir, "modulation.csv"))
    mons = read_csv_rows(os.path.join(run_dir, "monitors.csv"))
    d = params.d
    M_rows = []
    for m in mods:
        M = np.zeros((d, d))
        for i in range(d):
            for j in range(i, d):
                M[i, j] = m[f"M{i + 1}{j + 1}"]
        M_rows.append(M)
    linf = [m["err_complex"] for m in mons]
    rates = rate_report(rows, params, consts, M_rows=M_rows, linf=linf)
    records = []
    for rate, row in zip(rates, rows):
        rec = asdict(rate)
        rec.update({k: row[k] for k in ("E0", "Ektop", "F1", "Fktop", "Etotal", "cW", "trQ", "min_U_ratio")})
        rec["A_minus_Abar"] = rate.A_phase - rate.Abar_phase
        records.append(rec)
    return records


def cmd_report(args):
    records = build_report(args.run)
    out_dir = args.out or args.run
    os.makedirs(out_dir, exist_ok=True)
    write_json(os.path.join(out_dir, "report.json"), records)
    cols = {k: [r[k] for r in records] for k in records[0]}
    _write_columns(os.path.join(out_dir, "report.csv"), cols)
    print(f"That = {records[-1]['That']:.15g}  ({len(records)} report rows)")
    return 0


def cmd_stability(args):
    from .diagnostics import stability_experiment

    cfg = load_config(args.config)
    params = cfg.params
    consts = derive_constants(params)
    out_dir = _run_dir(cfg, args.out)
    _prepare_dir(out_dir, cfg.output["overwrite"])
    base = initial_data(cfg, consts)
    pert = initial_data(cfg, consts, bump=cfg.initial["bump"] + args.bump)
    rep = stability_experiment(base, pert, params, cfg.grid(), cfg.schedule(), consts)
    summary = {k: v for k, v in asdict(rep).items() if k not in ("base_rates", "pert_rates")}
    write_json(os.path.join(out_dir, "stability.json"), asdict(rep))
    outcome = "completed" if rep.base_outcome == rep.pert_outcome == "completed" else "asymmetric"
    write_meta(out_dir, cfg, params, summary, outcome)
    print(f"That base = {rep.That_base:.15g}, perturbed = {rep.That_pert:.15g}, relative change = {rep.rel_dThat:.3e}")
    return 0 if outcome == "completed" else 1


def build_parser():
    ap = argparse.ArgumentParser(prog="cgl-rescaling", description="Dynamic rescaling runs for CGL blowup.")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("validate", help="check initial data against the open-set conditions")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("profile", help="dump the profile, its phase and the weights as CSV")
    s.add_argument("--config")
    s.add_argument("--p", type=float, default=2.0)
    s.add_argument("--beta", type=float, default=0.0)
    s.add_argument("--delta", type=float, default=0.0)
    s.add_argument("--gamma", type=float, default=0.0)
    s.add_argument("--z-max", type=float, default=10.0)
    s.add_argument("--points", type=int, default=1001)
    s.add_argument("--k-top", type=int, default=4)
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_profile)

    s = sub.add_parser("reduced-ode", help="integrate the reduced Q dynamics")
    s.add_argument("--q0", required=True, help="row-major entries, or one number for a multiple of I")
    s.add_argument("--d", type=int, default=1)
    s.add_argument("--tau-end", type=float, required=True)
    s.add_argument("--literal-step", action="store_true", help="fixed step cap 0.01 instead of the growing cap")
    s.add_argument("--out", default="-")
    s.set_defaults(func=cmd_reduced_ode)

    s = sub.add_parser("rescaled", help="run the dynamic rescaling solver")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_rescaled)

    s = sub.add_parser("physical", help="run the reference solver in physical variables")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--t-end", type=float)
    s.add_argument("--amp-stop", type=float)
    s.add_argument("--periodic", action="store_true")
    s.add_argument("--snapshot-times")
    s.add_argument("--boundary-tol", type=float, default=1e-8)
    s.add_argument("--record-every", type=int, default=1)
    s.set_defaults(func=cmd_physical)

    s = sub.add_parser("compare", help="compare a rescaled and a physical run")
    s.add_argument("--rescaled", required=True)
    s.add_argument("--physical", required=True)
    s.add_argument("--times", required=True)
    s.add_argument("--z-box", type=float, default=5.0)
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("report", help="rate, phase and energy report of a rescaled run")
    s.add_argument("--run", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("stability", help="paired run with a Gaussian-damped profile perturbation")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--bump", type=float, default=1e-3)
    s.set_defaults(func=cmd_stability)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except RescalingError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


cli = main
