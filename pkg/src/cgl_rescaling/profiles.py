"""Model parameters, the self-similar profile and the weight families.

Everything here is closed form.  The amplitude profile is

    Ubar(z) = (p - 1 + c_p |z|^2)^(-1/(p-1))

and the phase profile is Thetabar = delta*tau/(p-1) + delta*log(Ubar).
Both are radial, so their derivative tensors follow from derivatives of
a scalar function of s = |z|^2 (see ``_radial_jet``).
"""

from __future__ import annotations

import math
from functools import lru_cache
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import BadExponent, OriginSingularity, SupercriticalOrCritical


@dataclass(frozen=True)
class Parameters:
    p: float
    beta: float
    delta: float
    gamma: float
    d: int

    @property
    def flat_star(self) -> float:
        return flat_star(self.p, self.beta, self.delta)


def flat_star(p, beta, delta):
    return p - delta**2 - beta * delta * (p + 1)


def validate_params(p, beta, delta, gamma=0.0, d=1) -> Parameters:
    vals = [p, beta, delta, gamma]
    if not all(isinstance(v, (int, float, np.floating, np.integer)) and math.isfinite(v) for v in vals):
        raise BadExponent(f"parameters must be finite reals, got {vals}")
    if isinstance(d, bool) or int(d) != d or d < 1:
        raise BadExponent(f"dimension must be a positive integer, got {d!r}")
    if p <= 1:
        raise BadExponent(f"p = {p} must exceed 1")
    fs = flat_star(p, beta, delta)
    if fs <= 0:
        raise SupercriticalOrCritical(fs)
    return Parameters(float(p), float(beta), float(delta), float(gamma), int(d))


@dataclass(frozen=True)
class DerivedConstants:
    flat_star: float
    c_p: float
    sigma: float
    kappa0: float
    kappa2: float
    kappa4: float
    mu_phase: float
    mu5: float
    sigma_prime: float
    K: int
    eps: float
    eps2: float
    C_b: float
    log_c0: float
    log_c1: float

    @property
    def c0(self) -> float:
        return math.exp(self.log_c0)

    @property
    def c1(self) -> float:
        # may underflow to 0.0 for large K; weights use log_c1 directly
        return math.exp(self.log_c1)

    def as_dict(self):
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["c0"] = self.c0
        out["c1"] = self.c1
        return out


def regularity_order(p, c_p, d):
    ratio = (p + 1) / min(p - 1, c_p)
    # guard against ceil(24.000000000000004) = 25
    return 2 * d + 4 + 2 * math.ceil(ratio * (1 - 1e-13))


def regularity_eps(p, K):
    denom = 5 * (p + 3) * (K + p)
    return min((p - 1) / denom, 4 / denom)


def log_c0_max(p, c_p, eps):
    """Largest log(c0) for which the weighted AM-GM condition holds.

    The condition (eps*c0*c_p/(2a))^a ((p-1)/2)^2 >= (4 p c0/b)^b with
    a = 6 + 4/(p-1) - 2 eps and b = a + 2 is linear in log(c0), so the
    equality case is solved directly.
    """
    a = 6 + 4 / (p - 1) - 2 * eps
    b = a + 2
    rhs = b * math.log(4 * p / b) - a * math.log(eps * c_p / (2 * a)) - 2 * math.log((p - 1) / 2)
    return -rhs / 2


def c0_condition_margin(log_c0, p, c_p, eps):
    # log(lhs) - log(rhs); >= 0 means the condition holds
    a = 6 + 4 / (p - 1) - 2 * eps
    b = a + 2
    lhs = a * (math.log(eps * c_p / (2 * a)) + log_c0) + 2 * math.log((p - 1) / 2)
    return lhs - b * (math.log(4 * p / b) + log_c0)


def top_damping(r, log_c1, p, c_p, eps, K, d):
    """Damping rate of the top-order weighted estimate at radius r."""
    r = np.asarray(r, dtype=float)
    expo = 4 / (p - 1) - eps - d + 2 * K
    x = np.exp(np.minimum(log_c1 + expo * np.log(r), 700.0))
    frac = (d + (2 * K + 4 / (p - 1) - eps) * x) / (4 * (1 + x))
    return p / (p - 1 + c_p * r**2) - 1 / (p - 1) - K / 2 + frac


def log_c1_choice(p, c_p, eps, K, d, n_radii=10_000):
    """Bisect log(c1) so the damping stays below -eps/8 on a radius grid, then halve."""
    r_star = math.sqrt(8 * p / (c_p * eps))
    radii = np.logspace(-3, math.log10(100 * r_star), n_radii)

    def ok(lc):
        return bool(np.all(top_damping(radii, lc, p, c_p, eps, K, d) <= -eps / 8))

    lo, hi = -1e5, 50.0
    if not ok(lo):
        raise ValueError("damping condition fails even for vanishing c1")
    while ok(hi):
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-12 * max(1.0, abs(lo)):
            break
    return lo - math.log(2)


@lru_cache(maxsize=256)
def derive_constants(params: Parameters) -> DerivedConstants:
    p, beta, delta, d = params.p, params.beta, params.delta, params.d
    fs = flat_star(p, beta, delta)
    c_p = (p - 1) ** 2 / (4 * fs)
    kappa0 = (p - 1) ** (-1 / (p - 1))
    kappa2 = -2 * c_p * kappa0 / (p - 1) ** 2
    kappa4 = 12 * p * c_p**2 * kappa0 / (p - 1) ** 4
    K = regularity_order(p, c_p, d)
    eps = regularity_eps(p, K)
    eps2 = (p - 1) * eps / 4
    lc0 = log_c0_max(p, c_p, eps) - math.log(2)
    lc1 = log_c1_choice(p, c_p, eps, K, d)
    return DerivedConstants(
        flat_star=fs,
        c_p=c_p,
        sigma=-2 / (p - 1),
        kappa0=kappa0,
        kappa2=kappa2,
        kappa4=kappa4,
        mu_phase=-beta * (1 + delta**2) / (2 * fs),
        mu5=2 * (1 - beta * delta) * d * c_p / (p - 1),
        sigma_prime=min(1.0, 4 / (p - 1)),
        K=K,
        eps=eps,
        eps2=eps2,
        C_b=kappa0 ** (-eps2) / 4,
        log_c0=lc0,
        log_c1=lc1,
    )


# ---------------------------------------------------------------- radial jets


def _as_points(z, d):
    z = np.asarray(z, dtype=float)
    if d == 1 and (z.ndim <= 1 or z.shape[-1] != 1):
        z = z[..., None]
    if z.shape[-1] != d:
        raise ValueError(f"points must have trailing dimension {d}")
    return z


def _radial_jet(z, fs, order):
    """Derivative tensors of g(z) = f(|z|^2) given f, f', ..., f'''' at |z|^2.

    ``fs[m]`` holds f^(m)(s) with shape z.shape[:-1].
    """
    d = z.shape[-1]
    eye = np.eye(d)
    out = [fs[0]]
    if order >= 1:
        out.append(2 * z * fs[1][..., None])
    if order >= 2:
        zz = z[..., :, None] * z[..., None, :]
        out.append(4 * zz * fs[2][..., None, None] + 2 * eye * fs[1][..., None, None])
    if order >= 3:
        zzz = z[..., :, None, None] * z[..., None, :, None] * z[..., None, None, :]
        dz = (
            eye[:, :, None] * z[..., None, None, :]
            + eye[:, None, :] * z[..., None, :, None]
            + eye[None, :, :] * z[..., :, None, None]
        )
        out.append(8 * zzz * fs[3][..., None, None, None] + 4 * dz * fs[2][..., None, None, None])
    if order >= 4:
        zi = z[..., :, None, None, None]
        zj = z[..., None, :, None, None]
        zk = z[..., None, None, :, None]
        zl = z[..., None, None, None, :]
        e = eye
        zzzz = zi * zj * zk * zl
        dzz = (
            e[:, :, None, None] * zk * zl
            + e[:, None, :, None] * zj * zl
            + e[:, None, None, :] * zj * zk
            + e[None, :, :, None] * zi * zl
            + e[None, :, None, :] * zi * zk
            + e[None, None, :, :] * zi * zj
        )
        dd = (
            e[:, :, None, None] * e[None, None, :, :]
            + e[:, None, :, None] * e[None, :, None, :]
            + e[:, None, None, :] * e[None, :, :, None]
        )
        f4 = fs[4][..., None, None, None, None]
        f3 = fs[3][..., None, None, None, None]
        f2 = fs[2][..., None, None, None, None]
        out.append(16 * zzzz * f4 + 8 * dzz * f3 + 4 * dd * f2)
    return out


def _profile_scalar_derivs(params, s, consts):
    p = params.p
    a = 1 / (p - 1)
    base = p - 1 + consts.c_p * s
    fs = [base ** (-a)]
    coef = 1.0
    for m in range(1, 5):
        coef *= -(a + m - 1) * consts.c_p
        fs.append(coef * base ** (-a - m))
    return fs


def profile_jet(params, z, max_order=4, consts: Optional[DerivedConstants] = None):
    """List [Ubar, grad Ubar, ..., grad^max_order Ubar] at the points z."""
    if not 0 <= max_order <= 4:
        raise ValueError("max_order must be in 0..4")
    consts = consts or derive_constants(params)
    z = _as_points(z, params.d)
    s = np.sum(z * z, axis=-1)
    return _radial_jet(z, _profile_scalar_derivs(params, s, consts), max_order)


def eval_profile(params, z, order=0, consts: Optional[DerivedConstants] = None):
    """Derivative tensor of order ``order`` of Ubar at z (analytic)."""
    return profile_jet(params, z, order, consts)[order]


def profile_values(params, coords, consts: Optional[DerivedConstants] = None):
    """Ubar on an array of points, cheap path for large grids."""
    consts = consts or derive_constants(params)
    s = np.sum(_as_points(coords, params.d) ** 2, axis=-1)
    return (params.p - 1 + consts.c_p * s) ** (-1 / (params.p - 1))


def eval_profile_phase(params, z, tau=0.0, order=0, consts: Optional[DerivedConstants] = None):
    """Derivatives of Thetabar = delta*tau/(p-1) + delta*log(Ubar) at z."""
    if not 0 <= order <= 2:
        raise ValueError("order must be in 0..2")
    consts = consts or derive_constants(params)
    p, delta = params.p, params.delta
    z = _as_points(z, params.d)
    s = np.sum(z * z, axis=-1)
    a = 1 / (p - 1)
    base = p - 1 + consts.c_p * s
    fs = [
        -a * np.log(base),
        -a * consts.c_p / base,
        a * consts.c_p**2 / base**2,
    ]
    jet = _radial_jet(z, fs, order)
    val = delta * jet[order]
    if order == 0:
        val = val + delta * tau / (p - 1)
    return val


# ---------------------------------------------------------------- weights


@dataclass(frozen=True)
class WeightSpec:
    family: str  # "rho" or "ring_rho"
    k: int
    top: int = 4
    log_c0: float = 0.0
    log_c1: float = 0.0
    terms: tuple = field(default=(), compare=False)

    @property
    def c0(self):
        return math.exp(self.log_c0)

    @property
    def c1(self):
        return math.exp(self.log_c1)

    @property
    def needs_U(self):
        return self.family == "ring_rho" and self.k == self.top

    @property
    def singular(self):
        return any(e < 0 for _, e in self.terms)


def weight_spec(family, k, params, consts: DerivedConstants, top=4) -> WeightSpec:
    """Build the weight of the given family and order as a sum of powers.

    ``terms`` lists (log coefficient, exponent) pairs so that the weight is
    sum(exp(lc) * |z|**e).  For the ring family at the top order the
    weight is additionally multiplied by U^2, which the caller supplies.
    """
    if family not in ("rho", "ring_rho"):
        raise ValueError(f"unknown weight family {family!r}")
    d, p, eps = params.d, params.p, consts.eps
    two_s = 4 / (p - 1)  # this is -2*sigma
    if family == "rho":
        if k < 0:
            raise ValueError("order must be nonnegative")
        if k <= (d + 5) / 2:
            terms = ((0.0, -6 + eps - d + 2 * k), (consts.log_c0, two_s - eps - d + 2 * k))
        else:
            terms = ((0.0, 0.0), (consts.log_c1, two_s - eps - d + 2 * k))
    else:
        if not 0 < k <= top:
            raise ValueError("ring weights are defined for 0 < k <= top")
        if k == top:
            terms = weight_spec("rho", k, params, consts, top).terms
        elif k <= d / 2:
            terms = ((0.0, 2 * k - 1 - d),)
        else:
            terms = ((0.0, 0.0), (0.0, 2 * k - 1 - d))
    return WeightSpec(family, k, top, consts.log_c0, consts.log_c1, terms)


def weight_from_radius(spec: WeightSpec, r):
    """Evaluate the power-sum part of a weight at radii r (no U^2 factor)."""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    pos = r > 0
    lr = np.log(np.where(pos, r, 1.0))
    for lc, e in spec.terms:
        if e < 0 and np.any(~pos):
            raise OriginSingularity(f"weight {spec.family}_{spec.k} is singular at z = 0")
        term = np.exp(np.minimum(lc + e * lr, 700.0))
        if e > 0:
            term = np.where(pos, term, 0.0)
        elif e == 0:
            term = np.full_like(r, math.exp(lc))
        out = out + term
    return out


def eval_weight(spec: WeightSpec, params, z, U_value=None):
    z = _as_points(z, params.d)
    r = np.sqrt(np.sum(z * z, axis=-1))
    val = weight_from_radius(spec, r)
    if spec.needs_U:
        if U_value is None:
            raise ValueError("the top ring weight needs the value of U")
        val = np.asarray(U_value, dtype=float) ** 2 * val
    return val if val.ndim else float(val)
