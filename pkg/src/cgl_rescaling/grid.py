"""Uniform tensor grids on [-L, L]^d with the origin at a node.

Derivatives use 6th-order central stencils, shifted to stay inside the
domain near the boundary (still >= 4th order there).  Quadrature is the
composite trapezoid rule, except in the origin cell where weights may be
singular; see ``weighted_integral``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .errors import GridTooSmall, NonFiniteIntegrand, OrderTooHigh, OutOfDomain
from .profiles import WeightSpec, weight_from_radius

MAX_ORDER = 4
ACCURACY = 6


# ---------------------------------------------------------------- stencils


def fd_weights(x0, xs, m):
    """Fornberg's recursion: weights for derivatives 0..m at x0 from nodes xs.

    Returns an array c with c[k, j] the weight of node j for the k-th derivative.
    """
    xs = np.asarray(xs, dtype=float)
    n = len(xs)
    c = np.zeros((m + 1, n))
    c[0, 0] = 1.0
    c1 = 1.0
    c4 = xs[0] - x0
    for i in range(1, n):
        mn = min(i, m)
        c2 = 1.0
        c5 = c4
        c4 = xs[i] - x0
        for j in range(i):
            c3 = xs[i] - xs[j]
            c2 *= c3
            if j == i - 1:
                for k in range(mn, 0, -1):
                    c[k, i] = c1 * (k * c[k - 1, i - 1] - c5 * c[k, i - 1]) / c2
                c[0, i] = -c1 * c5 * c[0, i - 1] / c2
            for k in range(mn, 0, -1):
                c[k, j] = (c4 * c[k, j] - k * c[k - 1, j]) / c3
            c[0, j] = c4 * c[0, j] / c3
        c1 = c2
    return c


def stencil_width(m, accuracy=ACCURACY):
    # central stencils: 2*floor((m+1)/2) - 1 + accuracy points
    return 2 * ((m + 1) // 2) - 1 + accuracy


@lru_cache(maxsize=None)
def central_weights(m, accuracy=ACCURACY):
    q = stencil_width(m, accuracy) // 2
    offs = np.arange(-q, q + 1)
    w = fd_weights(0.0, offs, m)[m]
    w[np.abs(w) < 1e-14 * np.max(np.abs(w))] = 0.0
    return offs, w


@lru_cache(maxsize=None)
def upwind_weights(sign):
    """5th-order upwind-biased first derivative on 6 nodes.

    sign > 0 (flow towards +z) takes nodes i-3..i+2, sign < 0 the mirror image.
    """
    offs = np.arange(-3, 3) if sign > 0 else np.arange(-2, 4)
    return offs, fd_weights(0.0, offs, 1)[1]


@lru_cache(maxsize=None)
def _boundary_matrix(n, m, accuracy=ACCURACY):
    """Dense rows for nodes where the central stencil would leave the domain."""
    width = stencil_width(m, accuracy)
    q = width // 2
    rows = {}
    for i in list(range(q)) + list(range(n - q, n)):
        start = min(max(i - q, 0), n - width)
        nodes = np.arange(start, start + width)
        rows[i] = (nodes, fd_weights(float(i), nodes.astype(float), m)[m])
    return q, rows


def apply_central(values, axis, m, h, pad):
    """Central m-th derivative on an array padded by ``pad`` ghost layers along ``axis``.

    Returns an array with the padding removed along ``axis``.
    """
    offs, w = central_weights(m)
    n = values.shape[axis] - 2 * pad
    out = None
    for o, c in zip(offs, w):
        if c == 0.0:
            continue
        sl = [slice(None)] * values.ndim
        sl[axis] = slice(pad + o, pad + o + n)
        term = c * values[tuple(sl)]
        out = term if out is None else out + term
    return out / h**m


def apply_upwind(values, axis, h, pad, sign):
    offs, w = upwind_weights(1 if sign > 0 else -1)
    n = values.shape[axis] - 2 * pad
    out = 0.0
    for o, c in zip(offs, w):
        sl = [slice(None)] * values.ndim
        sl[axis] = slice(pad + o, pad + o + n)
        out = out + c * values[tuple(sl)]
    return out / h


def _derivative_1d(values, axis, m, h):
    """Derivative along one axis with one-sided closure inside the domain."""
    if m == 0:
        return values.copy()
    n = values.shape[axis]
    q, rows = _boundary_matrix(n, m)
    offs, w = central_weights(m)
    out = np.zeros_like(values)
    inner = [slice(None)] * values.ndim
    inner[axis] = slice(q, n - q)
    acc = 0.0
    for o, c in zip(offs, w):
        if c == 0.0:
            continue
        sl = [slice(None)] * values.ndim
        sl[axis] = slice(q + o, n - q + o)
        acc = acc + c * values[tuple(sl)]
    out[tuple(inner)] = acc
    moved = np.moveaxis(values, axis, 0)
    res = np.moveaxis(out, axis, 0)
    for i, (nodes, wts) in rows.items():
        res[i] = np.tensordot(wts, moved[nodes], axes=(0, 0))
    return out / h**m


# ---------------------------------------------------------------- grid and fields


@dataclass(frozen=True)
class Grid:
    d: int
    L: float
    n: int
    center: tuple = ()
    check_far_field: bool = True

    def __post_init__(self):
        if self.d not in (1, 2):
            raise ValueError(f"grids support d in (1, 2), got {self.d}")
        if self.n % 2 != 1:
            raise ValueError(f"n = {self.n} must be odd so that the center is a node")
        if self.n < 9:
            raise GridTooSmall(f"n = {self.n} < 9")
        if self.check_far_field and self.L < 10:
            raise ValueError(f"L = {self.L} < 10 does not reach the far field")
        if not self.center:
            object.__setattr__(self, "center", (0.0,) * self.d)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))

    @property
    def h(self) -> float:
        return 2 * self.L / (self.n - 1)

    @property
    def mid(self) -> int:
        return (self.n - 1) // 2

    @property
    def shape(self):
        return (self.n,) * self.d

    def axis(self, a=0):
        return self.center[a] + self.h * (np.arange(self.n) - self.mid)

    @property
    def coords(self):
        """List of coordinate arrays (ij indexing), each of shape ``self.shape``."""
        return np.meshgrid(*[self.axis(a) for a in range(self.d)], indexing="ij")

    @property
    def points(self):
        return np.stack(self.coords, axis=-1)

    @property
    def radius(self):
        c = self.coords
        return np.sqrt(sum((x - x0) ** 2 for x, x0 in zip(c, self.center)))

    @property
    def origin_index(self):
        return (self.mid,) * self.d

    def field(self, values) -> "Field":
        return Field(self, np.asarray(values, dtype=float))

    def sample(self, func) -> "Field":
        """Field from a callable taking points of shape (..., d)."""
        pts = self.points
        return Field(self, np.asarray(func(pts[..., 0] if self.d == 1 else pts), dtype=float))


@dataclass
class Field:
    grid: Grid
    values: np.ndarray
    check: bool = field(default=True, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != self.grid.shape:
            raise ValueError(f"field shape {self.values.shape} does not match grid {self.grid.shape}")
        if self.check and not np.all(np.isfinite(self.values)):
            raise ValueError("field has non-finite values")

    def __sub__(self, other):
        return Field(self.grid, self.values - (other.values if isinstance(other, Field) else other))

    def __add__(self, other):
        return Field(self.grid, self.values + (other.values if isinstance(other, Field) else other))

    def __mul__(self, other):
        return Field(self.grid, self.values * (other.values if isinstance(other, Field) else other))

    __rmul__ = __mul__

    def at_origin(self):
        return float(self.values[self.grid.origin_index])


def _check_grid_size(grid, total_order):
    if total_order > MAX_ORDER:
        raise OrderTooHigh(f"derivative order {total_order} > {MAX_ORDER}")
    if grid.n < stencil_width(MAX_ORDER):
        raise GridTooSmall(f"need at least {stencil_width(MAX_ORDER)} points per axis")


def differentiate(f: Field, multi_index: Sequence[int], one_sided_at_boundary: bool = True) -> Field:
    """Partial derivative with the given multi-index (orders per axis).

    Interior nodes use 6th-order central stencils.  Near the boundary the
    stencil is shifted inwards (``one_sided_at_boundary``); with the flag
    off the boundary nodes are set to NaN instead.
    """
    mi = tuple(int(k) for k in multi_index)
    if len(mi) != f.grid.d or min(mi) < 0:
        raise ValueError(f"multi-index {mi} does not match dimension {f.grid.d}")
    _check_grid_size(f.grid, sum(mi))
    out = f.values
    for axis, m in enumerate(mi):
        if m:
            out = _derivative_1d(out, axis, m, f.grid.h)
    if not one_sided_at_boundary:
        out = out.copy()
        for axis, m in enumerate(mi):
            if m:
                q = stencil_width(m) // 2
                sl = [slice(None)] * f.grid.d
                sl[axis] = np.r_[0:q, f.grid.n - q : f.grid.n]
                out[tuple(sl)] = np.nan
    return Field(f.grid, out, check=one_sided_at_boundary)


def multi_indices(d, k):
    """Sorted index tuples (i1 <= ... <= ik) and their multi-index exponents."""
    out = []
    for idx in product(range(d), repeat=k):
        if list(idx) == sorted(idx):
            mi = [0] * d
            for i in idx:
                mi[i] += 1
            out.append((idx, tuple(mi)))
    return out


def _tensor_from_sorted(d, k, values):
    t = np.zeros((d,) * k)
    for idx in product(range(d), repeat=k):
        t[idx] = values[tuple(sorted(idx))]
    return t


def origin_derivative(values, grid, mi):
    """Central-stencil derivative with multi-index mi at the center node."""
    w_axes = []
    for m in mi:
        if m == 0:
            w_axes.append((np.array([0]), np.array([1.0])))
        else:
            w_axes.append(central_weights(m))
    c = grid.mid
    total = 0.0
    for combo in product(*[range(len(o)) for o, _ in w_axes]):
        coef = 1.0
        idx = []
        for a, j in enumerate(combo):
            offs, w = w_axes[a]
            coef *= w[j]
            idx.append(c + offs[j])
        if coef != 0.0:
            total += coef * values[tuple(idx)]
    return total / grid.h ** sum(mi)


def derivatives_at_origin(f: Field, max_order: int = 4):
    """[f(0), grad f(0), ..., grad^max_order f(0)] as symmetric tensors."""
    if max_order > MAX_ORDER:
        raise OrderTooHigh(f"order {max_order} > {MAX_ORDER}")
    g = f.grid
    out = []
    for k in range(max_order + 1):
        vals = {idx: origin_derivative(f.values, g, mi) for idx, mi in multi_indices(g.d, k)}
        out.append(_tensor_from_sorted(g.d, k, vals) if k else vals[()])
    return out


def origin_functional_matrix(grid, max_order=2):
    """Rows of the linear maps field -> sorted origin derivatives up to max_order.

    Used to impose the normalization on a combination of fields exactly.
    Returns (labels, list of (flat node indices, weights)).
    """
    rows = []
    labels = []
    for k in range(max_order + 1):
        for idx, mi in multi_indices(grid.d, k):
            probe = {}
            w_axes = [central_weights(m) if m else (np.array([0]), np.array([1.0])) for m in mi]
            for combo in product(*[range(len(o)) for o, _ in w_axes]):
                coef = 1.0
                node = []
                for a, j in enumerate(combo):
                    offs, w = w_axes[a]
                    coef *= w[j]
                    node.append(grid.mid + offs[j])
                if coef != 0.0:
                    flat = int(np.ravel_multi_index(node, grid.shape))
                    probe[flat] = probe.get(flat, 0.0) + coef / grid.h**k
            labels.append(idx)
            rows.append((np.array(list(probe.keys())), np.array(list(probe.values()))))
    return labels, rows


# ---------------------------------------------------------------- quadrature


def trapezoid_weights(grid: Grid):
    w1 = np.full(grid.n, grid.h)
    w1[0] = w1[-1] = grid.h / 2
    w = w1
    for _ in range(grid.d - 1):
        w = np.multiply.outer(w, w1)
    return w


@lru_cache(maxsize=None)
def _jacobi(n, a):
    x, w = roots_jacobi(n, 0.0, a)
    return x, w


def _radial_integral(func_of_r, R, a, n=16):
    """int_0^R r^a phi(r) dr by Gauss-Jacobi; func_of_r maps radii array -> values."""
    if a <= -1:
        return math.inf
    x, w = _jacobi(n, float(a))
    r = R * (1 + x) / 2
    return R ** (a + 1) * 2.0 ** (-a - 1) * float(np.sum(w * func_of_r(r)))


def _origin_cell_jacobi(grid, terms, smooth_part, s0, n_r=16, n_phi=24):
    """Integral over the origin cell of smooth_part(z) |z|^s0 * sum_k c_k |z|^e_k."""
    half = grid.h / 2
    total = 0.0
    if grid.d == 1:
        for lc, e in terms:
            a = e + s0
            for sgn in (1.0, -1.0):
                total += math.exp(lc) * _radial_integral(lambda r: smooth_part(sgn * r[:, None]), half, a, n_r)
        return total
    xg, wg = roots_legendre(n_phi)
    for lc, e in terms:
        a = e + s0 + 1  # polar Jacobian
        for octant in range(8):
            lo = octant * math.pi / 4
            phis = lo + (xg + 1) * math.pi / 8
            for phi, wp in zip(phis, wg * math.pi / 8):
                c, s = math.cos(phi), math.sin(phi)
                rmax = half / max(abs(c), abs(s))
                direction = np.array([c, s])
                total += wp * math.exp(lc) * _radial_integral(
                    lambda r: smooth_part(r[:, None] * direction), rmax, a, n_r
                )
    return total


def _fit_origin_model_1d(values, grid, s0):
    """One-sided fits f(z) ~ |z|^s0 (a0 + a1|z| + a2|z|^2) through the three nearest nodes."""
    c, h = grid.mid, grid.h
    r = h * np.arange(1, 4)
    V = np.vander(r, 3, increasing=True)
    coefs = {}
    for sgn in (1, -1):
        f = values[c + sgn * np.arange(1, 4)] / r**s0
        coefs[sgn] = np.linalg.solve(V, f)

    def smooth(z):
        z = z[..., 0]
        a_pos, a_neg = coefs[1], coefs[-1]
        rr = np.abs(z)
        pos = a_pos[0] + a_pos[1] * rr + a_pos[2] * rr**2
        neg = a_neg[0] + a_neg[1] * rr + a_neg[2] * rr**2
        return np.where(z >= 0, pos, neg)

    return smooth


def weighted_integral(
    f: Field,
    weight=None,
    origin_order: Optional[float] = None,
    origin_model: Optional[Callable] = None,
) -> float:
    """Integral of f times a weight over the grid domain.

    ``weight`` is a WeightSpec (power-sum weights, possibly singular at 0),
    a callable of the points, or None for weight 1.  Away from the origin
    cell the composite trapezoid rule is used.  When the weight is
    singular, the origin cell [-h/2, h/2]^d is handled as follows:

    * ``origin_model`` given: the callable is a model of f near 0 with
      f ~ |z|^origin_order * smooth; the cell is integrated with a
      Gauss-Jacobi rule in r (exact for the model).
    * d = 1 and ``origin_order`` given: the model is a one-sided power fit
      of f through the three nodes on each side of the origin.
    * otherwise: midpoint sampling of the 2^d adjacent half-cells.
    """
    g = f.grid
    vals = f.values
    if not np.all(np.isfinite(vals)):
        raise NonFiniteIntegrand("integrand has non-finite values")
    r = g.radius
    if weight is None:
        wv = np.ones_like(vals)
        singular = False
    elif isinstance(weight, WeightSpec):
        singular = weight.singular
        rr = np.where(r > 0, r, 1.0)
        wv = weight_from_radius(weight, rr)
    else:
        wv = np.asarray(weight(g.points), dtype=float)
        singular = not np.isfinite(wv[g.origin_index])
    tw = trapezoid_weights(g)
    integrand = vals * wv
    if not singular:
        total = float(np.sum(tw * integrand))
        if not math.isfinite(total):
            raise NonFiniteIntegrand("quadrature overflowed")
        return total
    integrand[g.origin_index] = 0.0
    total = float(np.sum(tw * integrand))
    s0 = 0.0 if origin_order is None else float(origin_order)
    if isinstance(weight, WeightSpec) and (origin_model is not None or (g.d == 1 and origin_order is not None)):
        if origin_model is None:
            smooth = _fit_origin_model_1d(vals, g, s0)
        else:
            def smooth(z):
                rz = np.sqrt(np.sum(z * z, axis=-1))
                return origin_model(z) / np.where(rz > 0, rz, 1.0) ** s0
        cell = _origin_cell_jacobi(g, weight.terms, smooth, s0)
    else:
        offs = np.array(list(product((-0.25, 0.25), repeat=g.d))) * g.h
        fz = np.array([interpolate(f, o + np.array(g.center)) for o in offs])
        if isinstance(weight, WeightSpec):
            wz = weight_from_radius(weight, np.sqrt(np.sum(offs**2, axis=-1)))
        else:
            wz = np.asarray(weight(offs + np.array(g.center)), dtype=float)
        cell = float(np.mean(fz * wz)) * g.h**g.d
    total += cell
    if not math.isfinite(total):
        raise NonFiniteIntegrand("integral diverges in the origin cell")
    return total


# ---------------------------------------------------------------- interpolation


def lagrange_interp(values, start, h, x, order=4):
    """Tensor-product Lagrange interpolation on a uniform array.

    ``values`` has shape (n_1, ..., n_d), node j along axis a sits at
    start[a] + j*h.  ``x`` has shape (m, d).  Stencils of ``order`` nodes
    are centred on the cell containing x and shifted to stay in range.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = values.ndim
    m = x.shape[0]
    idx_axes = []
    w_axes = []
    for a in range(d):
        n = values.shape[a]
        s = (x[:, a] - start[a]) / h
        j0 = np.floor(s).astype(int) - (order // 2 - 1)
        j0 = np.clip(j0, 0, n - order)
        nodes = j0[:, None] + np.arange(order)[None, :]
        w = np.ones((m, order))
        for k in range(order):
            for l in range(order):
                if l != k:
                    w[:, k] *= (s - nodes[:, l]) / (nodes[:, k] - nodes[:, l])
        idx_axes.append(nodes)
        w_axes.append(w)
    out = np.zeros(m)
    for combo in product(range(order), repeat=d):
        coef = np.ones(m)
        idx = []
        for a, k in enumerate(combo):
            coef = coef * w_axes[a][:, k]
            idx.append(idx_axes[a][:, k])
        out += coef * values[tuple(idx)]
    return out


def interpolate(f: Field, x, order: int = 4):
    """Value of f at the point x (or at each row of an (m, d) array)."""
    g = f.grid
    arr = np.asarray(x, dtype=float)
    single = arr.ndim <= 1 and (g.d > 1 or arr.ndim == 0)
    pts = arr.reshape(-1, g.d)
    lo = np.array(g.center) - g.L
    tol = 1e-12 * g.L
    if np.any(pts < lo - tol) or np.any(pts > lo + 2 * g.L + tol):
        raise OutOfDomain("interpolation point outside the grid domain")
    vals = lagrange_interp(f.values, lo, g.h, pts, order)
    return float(vals[0]) if single else vals


# ---------------------------------------------------------------- snapshots


def write_snapshot(path, grid: Grid, fields: dict, tau: float, t: float, extra: Optional[dict] = None):
    header = {
        "d": grid.d,
        "n": [grid.n] * grid.d,
        "L": grid.L,
        "tau": float(tau),
        "t": float(t),
        "fields": list(fields),
    }
    if any(c != 0.0 for c in grid.center):
        header["center"] = list(grid.center)
    if extra:
        header.update(extra)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        for name in fields:
            arr = np.ascontiguousarray(np.asarray(fields[name], dtype="<f8"))
            if arr.shape != grid.shape:
                raise ValueError(f"field {name} has shape {arr.shape}, grid is {grid.shape}")
            fh.write(arr.tobytes(order="C"))


def read_snapshot(path):
    """Return (header dict, Grid, {name: array})."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        body = fh.read()
    d = header["d"]
    n = header["n"][0]
    grid = Grid(d, header["L"], n, tuple(header.get("center", ())), check_far_field=False)
    size = n**d
    data = np.frombuffer(body, dtype="<f8")
    if data.size != size * len(header["fields"]):
        raise ValueError("snapshot body size does not match header")
    fields = {
        name: data[i * size : (i + 1) * size].reshape(grid.shape).copy()
        for i, name in enumerate(header["fields"])
    }
    return header, grid, fields
