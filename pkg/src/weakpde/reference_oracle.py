"""Reference solutions: a closed-form series and finite-difference solvers.

Everything here is independent of the variational machinery so that model
errors are measured against a second, dissimilar path: the series solution is
analytic, and the finite-difference solvers use textbook discretizations
(Crank-Nicolson in time, flux-form diffusion with harmonic face values,
upwinded advection where cell Peclet demands it).

The series for the 1-D transient benchmark has coefficients that grow like
exp(u/kappa) and cancel almost completely, so sums are accumulated in
extended precision (np.longdouble) and the oscillatory factors are evaluated
with a sin(pi*m) argument reduction that is exact at the domain endpoints.
Results are returned as float64.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.linalg import solve_banded
from scipy.sparse import csr_matrix, identity
from scipy.sparse.linalg import splu, spsolve

from . import autodiff as ad
from ._errors import (ConfigError, ContractError, DataFormatError,
                      NumericsError)
from .pde_problem import KAPPA_HIGH, _as_components, problem_hash

_LD = np.longdouble
_PI_LD = _LD(4) * np.arctan(_LD(1))


def _sinpi(m):
    """sin(pi*m) with exact zeros at integer m (longdouble)."""
    k = np.rint(m)
    s = np.sin(_PI_LD * (m - k))
    return np.where(np.mod(k, 2) == 0, s, -s)


def _cospi(m):
    return _sinpi(m + _LD(0.5))


# ---------------------------------------------------------------------------
# closed-form series for the 1-D transient benchmark


class Adv1dtSeries:
    """Eigenfunction-series solution of c_t + u c_x = kappa c_xx on [-1, 1].

    Initial condition -sin(pi x), zero Dirichlet boundaries.  Substituting
    c = exp(lam x - lam^2 kappa t) w with lam = u/(2 kappa) reduces the
    problem to the heat equation for w, whose sine-series coefficients have
    the closed form computed in :meth:`_coefficients`.

    The transform introduces a factor e^{2 lam} between coefficient size and
    solution size; the digits lost to cancellation make the series unusable
    below kappa = 0.1/pi * |u|, where callers must fall back to
    :func:`solve_1dt_fd`.
    """

    def __init__(self, kappa, velocity=1.0, tol=1e-9, max_terms=30000):
        kappa = float(kappa)
        velocity = float(velocity)
        if kappa <= 0.0:
            raise ConfigError("series solution needs kappa > 0")
        if kappa < abs(velocity) * KAPPA_HIGH * (1.0 - 1e-12):
            raise NumericsError(
                f"series solution is numerically unstable for kappa = {kappa:g} "
                f"< 0.1/pi * |u|; use the finite-difference path (solve_1dt_fd)")
        self.kappa = kappa
        self.velocity = velocity
        self.tol = float(tol)
        self.max_terms = int(max_terms)
        self._lam = _LD(velocity) / (2 * _LD(kappa))
        self._b = np.zeros(0, dtype=_LD)
        # tail bound: |b_n| <= B/n^2 and the decay factor kills the rest;
        # ln_arg collects ln(B * e^lam * zeta(2) / tol) with slack
        lam = abs(float(self._lam))
        self._ln_arg = 2.0 * lam + np.log(max(lam, 1.0)) + np.log(1.0 / self.tol) + 5.0

    def n_terms(self, t):
        """Terms needed for a tail bound < tol at time t > 0."""
        n = int(np.ceil(2.0 / np.pi * np.sqrt(self._ln_arg / (self.kappa * t)))) + 16
        return min(n, self.max_terms)

    @property
    def t_min(self):
        """Smallest positive time the truncated series can resolve."""
        n_eff = self.max_terms - 16
        return (2.0 / (np.pi * n_eff)) ** 2 * self._ln_arg / self.kappa

    def _coefficients(self, n_terms):
        """First n_terms sine-series coefficients of e^{-lam x} c(0, x)."""
        if self._b.size < n_terms:
            lam = self._lam
            n = np.arange(1, n_terms + 1, dtype=_LD)
            mu = n * _PI_LD / 2

            def integral(a, b):
                # int_{-1}^{1} e^{-lam x} cos(a x + b) dx
                def antideriv(x):
                    return np.exp(-lam * x) * (-lam * np.cos(a * x + b)
                                               + a * np.sin(a * x + b)) / (lam * lam + a * a)
                return antideriv(_LD(1.0)) - antideriv(_LD(-1.0))

            # -sin(pi x) sin(mu (x+1)) = -1/2 [cos((pi-mu)x - mu) - cos((pi+mu)x + mu)]
            self._b = -_LD(0.5) * (integral(_PI_LD - mu, -mu)
                                   - integral(_PI_LD + mu, mu))
        return self._b[:n_terms]

    def _evaluate(self, t, x, want_derivs):
        t_arr = np.asarray(t, dtype=np.float64)
        x_arr = np.asarray(x, dtype=np.float64)
        scalar = t_arr.ndim == 0 and x_arr.ndim == 0
        t_arr, x_arr = np.broadcast_arrays(t_arr, x_arr)
        t_flat = t_arr.reshape(-1)
        x_flat = x_arr.reshape(-1)
        if t_flat.size and float(t_flat.min()) < 0.0:
            raise ContractError("series solution is defined for t >= 0")
        n_out = 4 if want_derivs else 1
        out = [np.empty(t_flat.size, dtype=np.float64) for _ in range(n_out)]

        zero = t_flat == 0.0
        if zero.any():
            xs = x_flat[zero]
            c = -np.sin(np.pi * xs)
            group = (c,)
            if want_derivs:
                c_x = -np.pi * np.cos(np.pi * xs)
                c_xx = np.pi * np.pi * np.sin(np.pi * xs)
                c_t = self.kappa * c_xx - self.velocity * c_x
                group = (c, c_t, c_x, c_xx)
            for dst, src in zip(out, group):
                dst[zero] = src

        pos = np.nonzero(~zero)[0]
        if pos.size:
            self._series_eval(t_flat, x_flat, pos, out, want_derivs)

        shaped = [a.reshape(t_arr.shape) for a in out]
        if scalar:
            shaped = [float(a) for a in shaped]
        return shaped[0] if not want_derivs else tuple(shaped)

    def _series_eval(self, t_flat, x_flat, pos, out, want_derivs):
        """Fill out[...] at the strictly positive times indexed by pos.

        The sin/cos matrices depend only on x, so they are built once per
        chunk of unique positions and shared by every time group; per group
        only the (cheap) weighted contraction differs.
        """
        lam, kap = self._lam, _LD(self.kappa)
        t_vals = np.unique(t_flat[pos])
        if float(t_vals[0]) < self.t_min:
            raise NumericsError(
                f"series truncation cap reached for t = {float(t_vals[0]):g}; "
                f"smallest resolvable time is {self.t_min:.3e}")
        groups = []
        n_max = 0
        for tv in t_vals:
            idx = pos[t_flat[pos] == tv]
            n_terms = self.n_terms(float(tv))
            n_max = max(n_max, n_terms)
            groups.append((float(tv), idx, n_terms))
        b = self._coefficients(n_max)
        n = np.arange(1, n_max + 1, dtype=_LD)
        mu = n * _PI_LD / 2
        weights = []
        for tv, idx, n_terms in groups:
            decay = np.exp(-kap * mu[:n_terms] ** 2 * _LD(tv))
            w_val = b[:n_terms] * decay
            weights.append((w_val, w_val * mu[:n_terms], w_val * mu[:n_terms] ** 2))

        ux, x_inv = np.unique(x_flat[pos], return_inverse=True)
        x_inv = x_inv.reshape(-1)
        pos_row = np.empty(t_flat.size, dtype=np.intp)
        pos_row[pos] = x_inv

        s = np.empty(t_flat.size, dtype=_LD)
        sx = np.empty(t_flat.size, dtype=_LD) if want_derivs else None
        sxx = np.empty(t_flat.size, dtype=_LD) if want_derivs else None
        half = n / 2  # sin(mu (x+1)) = sin(pi * n (x+1)/2)
        chunk = max(1, (1 << 21) // max(n_max, 1))
        for lo in range(0, ux.size, chunk):
            hi = min(lo + chunk, ux.size)
            m = (ux[lo:hi].astype(_LD)[:, None] + 1) * half[None, :]
            sin_m = _sinpi(m)
            cos_m = _cospi(m) if want_derivs else None
            for (tv, idx, n_terms), (w_val, w_dx, w_dxx) in zip(groups, weights):
                rows = pos_row[idx]
                take = (rows >= lo) & (rows < hi)
                if not take.any():
                    continue
                isel = idx[take]
                rsel = rows[take] - lo
                sin_g = sin_m[rsel, :n_terms]
                s[isel] = sin_g @ w_val
                if want_derivs:
                    sx[isel] = cos_m[rsel, :n_terms] @ w_dx
                    sxx[isel] = -(sin_g @ w_dxx)

        xl = x_flat[pos].astype(_LD)
        tl = t_flat[pos].astype(_LD)
        envelope = np.exp(lam * xl - lam * lam * kap * tl)
        c = envelope * s[pos]
        out[0][pos] = c.astype(np.float64)
        if want_derivs:
            c_x = lam * c + envelope * sx[pos]
            c_xx = lam * lam * c + 2 * lam * envelope * sx[pos] + envelope * sxx[pos]
            c_t = -lam * lam * kap * c + kap * envelope * sxx[pos]
            out[1][pos] = c_t.astype(np.float64)
            out[2][pos] = c_x.astype(np.float64)
            out[3][pos] = c_xx.astype(np.float64)

    def values(self, t, x):
        """Solution values; t and x broadcast together."""
        return self._evaluate(t, x, want_derivs=False)

    def values_and_derivs(self, t, x):
        """(c, c_t, c_x, c_xx), all evaluated analytically."""
        return self._evaluate(t, x, want_derivs=True)

    def as_field(self):
        """Dual-aware field(t, x, p) suitable for residual and loss probes.

        Derivatives are injected from the analytic series, matching the
        one-seeded-input-at-a-time convention of the autodiff helpers.
        """

        def evaluator(t, x, p):
            x0 = x[0]
            t_dual = isinstance(t, ad.Dual)
            x_dual = isinstance(x0, ad.Dual)
            if t_dual and x_dual:
                raise ContractError("series field supports one seeded input at a time")
            if not t_dual and not x_dual:
                return self.values(ad.detach(t), ad.detach(x0))
            if t_dual:
                c, c_t, _, _ = self.values_and_derivs(ad.detach(t), ad.detach(x0))
                return ad.Dual(c, None if t.tangent is None else t.tangent * c_t)
            inner = x0.value
            if isinstance(inner, ad.Dual):
                # second-order jet in x
                a, da = inner.value, inner.tangent
                outer = x0.tangent
                db = outer.value if isinstance(outer, ad.Dual) else outer
                dc = outer.tangent if isinstance(outer, ad.Dual) else None
                c, _, c_x, c_xx = self.values_and_derivs(ad.detach(t), ad.detach(a))
                first = ad.Dual(c, None if da is None else da * c_x)
                terms = []
                if dc is not None:
                    terms.append(dc * c_x)
                if da is not None and db is not None:
                    terms.append(da * db * c_xx)
                second_tan = sum(terms) if terms else None
                second_val = None if db is None else db * c_x
                return ad.Dual(first, ad.Dual(second_val, second_tan))
            c, _, c_x, _ = self.values_and_derivs(ad.detach(t), ad.detach(inner))
            return ad.Dual(c, None if x0.tangent is None else x0.tangent * c_x)

        return evaluator


# ---------------------------------------------------------------------------
# regular evaluation grids with CSV persistence


@dataclass
class SolutionGrid:
    """Values of a scalar field on a tensor grid, with provenance."""

    axis_names: tuple
    axes: tuple
    values: np.ndarray
    provenance: dict = dataclass_field(default_factory=dict)

    def __post_init__(self):
        self.axis_names = tuple(str(n) for n in self.axis_names)
        self.axes = tuple(np.asarray(a, dtype=np.float64).reshape(-1) for a in self.axes)
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.axis_names) != len(self.axes):
            raise ContractError("one name per axis required")
        expected = tuple(a.size for a in self.axes)
        if self.values.shape != expected:
            raise ContractError(
                f"values shape {self.values.shape} does not match axes {expected}")

    @property
    def shape(self):
        return self.values.shape

    def points(self):
        """(N, ndim) coordinates in C order, matching values.ravel()."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)

    def meta_path(self, path):
        return os.path.splitext(str(path))[0] + ".meta.json"

    def save(self, path):
        """One coordinate tuple + value per row, plus a JSON metadata sidecar."""
        pts = self.points()
        vals = self.values.ravel()
        lines = [",".join(self.axis_names) + ",value"]
        for row, v in zip(pts, vals):
            lines.append(",".join(repr(float(c)) for c in row) + "," + repr(float(v)))
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        meta = {
            "format": "weakpde-solution",
            "schema_version": 1,
            "axis_names": list(self.axis_names),
            "axis_sizes": [int(a.size) for a in self.axes],
            "axes": [[float(v) for v in a] for a in self.axes],
            "provenance": self.provenance,
        }
        with open(self.meta_path(path), "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        meta_path = os.path.splitext(str(path))[0] + ".meta.json"
        try:
            with open(meta_path, "r", encoding="utf-8") as f:
                meta = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataFormatError(f"cannot read solution metadata {meta_path}: {e}") \
                from None
        if meta.get("format") != "weakpde-solution":
            raise DataFormatError(f"{meta_path}: not a solution metadata document")
        axes = tuple(np.asarray(a, dtype=np.float64) for a in meta["axes"])
        names = tuple(meta["axis_names"])
        sizes = tuple(meta["axis_sizes"])
        if tuple(a.size for a in axes) != sizes:
            raise DataFormatError(f"{meta_path}: axis sizes disagree with axis data")
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
        n_expected = int(np.prod(sizes))
        if data.shape != (n_expected, len(axes) + 1):
            raise DataFormatError(
                f"{path}: expected {n_expected} rows of {len(axes) + 1} columns, "
                f"got shape {data.shape}")
        grid = cls(names, axes, data[:, -1].reshape(sizes),
                   provenance=meta.get("provenance", {}))
        if not np.array_equal(grid.points(), data[:, :-1]):
            raise DataFormatError(f"{path}: coordinate columns do not match the axes")
        return grid


def error_metric(predicted, reference):
    """Relative L2 mismatch ||f - c||_2 / ||c||_2 over flattened samples."""
    f = np.asarray(predicted, dtype=np.float64).ravel()
    c = np.asarray(reference, dtype=np.float64).ravel()
    if f.shape != c.shape:
        raise ContractError(
            f"prediction has {f.size} samples but reference has {c.size}")
    denom = float(np.linalg.norm(c))
    if denom == 0.0:
        raise NumericsError("error metric undefined for an identically zero reference")
    return float(np.linalg.norm(f - c) / denom)


# ---------------------------------------------------------------------------
# shared field-evaluation helpers


def _field_on(field, t, coords, p, size):
    """Evaluate a scalar field on coordinate lanes, broadcasting constants."""
    out = ad.detach(field(t, coords, p))
    return np.broadcast_to(np.asarray(out, dtype=np.float64), (size,)).copy()


def _velocity_on(problem, t, coords, p, size):
    comps = _as_components(problem.velocity(t, coords, p))
    return [np.broadcast_to(np.asarray(ad.detach(c), dtype=np.float64), (size,)).copy()
            for c in comps]


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


# ---------------------------------------------------------------------------
# 1-D transient finite differences


def _bands_1dt(problem, nodes, t, p):
    """Tridiagonal operator A with A c ~ u c_x - (kappa c_x)_x on interior rows."""
    n = nodes.size
    dx = nodes[1] - nodes[0]
    kap = _field_on(problem.kappa, t, [nodes], p, n)
    u = _velocity_on(problem, t, [nodes], p, n)[0]
    low = np.zeros(n)
    diag = np.zeros(n)
    up = np.zeros(n)
    i = slice(1, n - 1)
    k_e = _harmonic(kap[1:-1], kap[2:])
    k_w = _harmonic(kap[1:-1], kap[:-2])
    diag[i] += (k_e + k_w) / dx**2
    up[i] += -k_e / dx**2
    low[i] += -k_w / dx**2
    ui = u[1:-1]
    upwind = np.abs(ui) * dx / kap[1:-1] > 2.0
    u_pos = np.maximum(ui, 0.0)
    u_neg = np.minimum(ui, 0.0)
    diag[i] += np.where(upwind, (u_pos - u_neg) / dx, 0.0)
    up[i] += np.where(upwind, u_neg / dx, ui / (2.0 * dx))
    low[i] += np.where(upwind, -u_pos / dx, -ui / (2.0 * dx))
    return low, diag, up


def _apply_tridiag(low, diag, up, c):
    out = diag * c
    out[:-1] += up[:-1] * c[1:]
    out[1:] += low[1:] * c[:-1]
    return out


def solve_1dt_fd(problem, n_x, n_t, p=None):
    """Crank-Nicolson finite differences for a 1-D transient problem.

    Second-order central differencing throughout, switching the advection
    term to first-order upwind wherever the cell Peclet number exceeds 2.
    Dirichlet rows reproduce the boundary data exactly.
    """
    if not problem.is_time_dependent or problem.spatial_dim != 1:
        raise ConfigError("solve_1dt_fd needs a 1-D time-dependent problem")
    n_x, n_t = int(n_x), int(n_t)
    if n_x < 3 or n_t < 2:
        raise ConfigError("solve_1dt_fd needs n_x >= 3 and n_t >= 2")
    for seg in (1, 2):
        if seg not in problem.boundary:
            raise ConfigError(f"boundary segment {seg} has no Dirichlet data")
    lo, hi = problem.domain.bbox()[0]
    nodes = np.linspace(lo, hi, n_x)
    times = np.linspace(0.0, problem.time_horizon, n_t)
    dt = times[1] - times[0]

    values = np.empty((n_t, n_x))
    c = _field_on(problem.initial, 0.0, [nodes], p, n_x)
    c[0] = float(ad.detach(problem.boundary[1](0.0, [nodes[0]], p)))
    c[-1] = float(ad.detach(problem.boundary[2](0.0, [nodes[-1]], p)))
    values[0] = c

    coeffs_static = problem.kappa.is_constant and problem.velocity.is_constant
    source_static = problem.source.is_constant
    bands = _bands_1dt(problem, nodes, 0.0, p)
    if source_static:
        s_mid = _field_on(problem.source, 0.0, [nodes], p, n_x)
    ab = np.zeros((3, n_x))
    for k in range(n_t - 1):
        t_mid = 0.5 * (times[k] + times[k + 1])
        if not coeffs_static:
            bands = _bands_1dt(problem, nodes, t_mid, p)
        if not source_static:
            s_mid = _field_on(problem.source, t_mid, [nodes], p, n_x)
        low, diag, up = bands
        g_lo = float(ad.detach(problem.boundary[1](times[k + 1], [nodes[0]], p)))
        g_hi = float(ad.detach(problem.boundary[2](times[k + 1], [nodes[-1]], p)))
        rhs = c - 0.5 * dt * _apply_tridiag(low, diag, up, c) + dt * s_mid
        rhs[0], rhs[-1] = g_lo, g_hi
        ab[0, 1:] = 0.5 * dt * up[:-1]
        ab[1] = 1.0 + 0.5 * dt * diag
        ab[2, :-1] = 0.5 * dt * low[1:]
        ab[1, 0] = ab[1, -1] = 1.0
        ab[0, 1] = ab[2, -2] = 0.0
        c = solve_banded((1, 1), ab, rhs)
        if not np.all(np.isfinite(c)):
            raise NumericsError(f"1-D solve produced non-finite values at step {k + 1}")
        c[0], c[-1] = g_lo, g_hi  # Dirichlet rows reproduce their data exactly
        values[k + 1] = c
    return SolutionGrid(("t", "x1"), (times, nodes), values,
                        provenance={"method": "fd-crank-nicolson",
                                    "resolution": [n_t, n_x],
                                    "problem_hash": problem_hash(problem),
                                    "p": None if p is None else [float(v) for v in p]})


def solve_1dt_series(kappa, n_x, n_t, velocity=1.0, time_horizon=2.0,
                     domain=(-1.0, 1.0), tol=1e-9):
    """Series solution of the 1-D transient benchmark on a regular grid."""
    series = Adv1dtSeries(kappa, velocity=velocity, tol=tol)
    lo, hi = domain
    nodes = np.linspace(float(lo), float(hi), int(n_x))
    times = np.linspace(0.0, float(time_horizon), int(n_t))
    values = series.values(times[:, None], nodes[None, :])
    return SolutionGrid(("t", "x1"), (times, nodes), values,
                        provenance={"method": "series",
                                    "resolution": [int(n_t), int(n_x)],
                                    "kappa": float(kappa),
                                    "velocity": float(velocity)})


# ---------------------------------------------------------------------------
# 2-D finite differences (steady and transient)


def _grid_2d(problem, n1, n2):
    (l1, h1), (l2, h2) = problem.domain.bbox()
    xs = np.linspace(l1, h1, int(n1))
    ys = np.linspace(l2, h2, int(n2))
    return xs, ys


def _assemble_2d(problem, xs, ys, t, p):
    """Five-point operator on the grid; boundary rows are left empty.

    Returns (A, source, boundary_flat_indices, boundary_points).  Advection
    is written in advective (non-conservative) form with node velocities,
    matching the strong residual; diffusion is in flux form with
    harmonic-mean face diffusivities.  Advection upwinds per direction
    wherever the cell Peclet number exceeds 2.
    """
    n1, n2 = xs.size, ys.size
    dx = xs[1] - xs[0]
    dy = ys[1] - ys[0]
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    flat = [X.ravel(), Y.ravel()]
    n_total = n1 * n2
    if not np.all(problem.domain.contains(np.stack(flat, axis=1))):
        raise ConfigError("grid bounding box is not covered by the domain")
    kap = _field_on(problem.kappa, t, flat, p, n_total).reshape(n1, n2)
    u1, u2 = (a.reshape(n1, n2) for a in _velocity_on(problem, t, flat, p, n_total))
    source = _field_on(problem.source, t, flat, p, n_total).reshape(n1, n2)

    interior = np.zeros((n1, n2), dtype=bool)
    interior[1:-1, 1:-1] = True
    bnd = ~interior
    idx = np.arange(n_total).reshape(n1, n2)

    ii, jj = np.nonzero(interior)
    centre = idx[ii, jj]
    east, west = idx[ii + 1, jj], idx[ii - 1, jj]
    north, south = idx[ii, jj + 1], idx[ii, jj - 1]

    k_p = kap[ii, jj]
    k_e = _harmonic(k_p, kap[ii + 1, jj])
    k_w = _harmonic(k_p, kap[ii - 1, jj])
    k_n = _harmonic(k_p, kap[ii, jj + 1])
    k_s = _harmonic(k_p, kap[ii, jj - 1])

    c_p = (k_e + k_w) / dx**2 + (k_n + k_s) / dy**2
    c_e = -k_e / dx**2
    c_w = -k_w / dx**2
    c_n = -k_n / dy**2
    c_s = -k_s / dy**2

    for u_node, h, plus, minus in ((u1[ii, jj], dx, "e", "w"),
                                   (u2[ii, jj], dy, "n", "s")):
        upwind = np.abs(u_node) * h / k_p > 2.0
        u_pos = np.maximum(u_node, 0.0)
        u_neg = np.minimum(u_node, 0.0)
        c_p = c_p + np.where(upwind, (u_pos - u_neg) / h, 0.0)
        d_plus = np.where(upwind, u_neg / h, u_node / (2.0 * h))
        d_minus = np.where(upwind, -u_pos / h, -u_node / (2.0 * h))
        if plus == "e":
            c_e, c_w = c_e + d_plus, c_w + d_minus
        else:
            c_n, c_s = c_n + d_plus, c_s + d_minus

    rows = np.concatenate([centre] * 5)
    cols = np.concatenate([centre, east, west, north, south])
    data = np.concatenate([c_p, c_e, c_w, c_n, c_s])
    A = csr_matrix((data, (rows, cols)), shape=(n_total, n_total))
    bnd_flat = idx[bnd]
    bnd_pts = np.stack([X[bnd], Y[bnd]], axis=1)
    return A, source.ravel(), bnd_flat, bnd_pts


def _boundary_values(problem, bnd_pts, t, p):
    """Dirichlet data at boundary nodes, resolved per polygon segment."""
    segs = problem.domain.segment_of(bnd_pts)
    out = np.zeros(bnd_pts.shape[0])
    for seg in np.unique(segs):
        if seg not in problem.boundary:
            raise ConfigError(f"boundary segment {seg} has no Dirichlet data")
        sel = segs == seg
        coords = [bnd_pts[sel, 0], bnd_pts[sel, 1]]
        out[sel] = _field_on(problem.boundary[int(seg)], t, coords, p, int(sel.sum()))
    return out


def solve_2d_steady_fd(problem, n1, n2, p=None):
    """Five-point finite differences for a steady 2-D problem, direct solve."""
    if problem.is_time_dependent or problem.spatial_dim != 2:
        raise ConfigError("solve_2d_steady_fd needs a steady 2-D problem")
    if int(n1) < 3 or int(n2) < 3:
        raise ConfigError("solve_2d_steady_fd needs at least 3 nodes per axis")
    xs, ys = _grid_2d(problem, n1, n2)
    A, source, bnd_flat, bnd_pts = _assemble_2d(problem, xs, ys, None, p)
    n_total = xs.size * ys.size
    eye_bnd = csr_matrix((np.ones(bnd_flat.size), (bnd_flat, bnd_flat)),
                         shape=(n_total, n_total))
    lhs = (A + eye_bnd).tocsr()
    rhs = source.copy()
    rhs[bnd_flat] = _boundary_values(problem, bnd_pts, None, p)
    lu = splu(lhs.tocsc())
    sol = lu.solve(rhs)
    if not np.all(np.isfinite(sol)):
        raise NumericsError("steady 2-D solve produced non-finite values "
                            "(singular system?)")
    sol[bnd_flat] = rhs[bnd_flat]  # Dirichlet rows reproduce their data exactly
    scale = max(float(np.linalg.norm(rhs)), 1e-300)
    for _ in range(3):  # iterative refinement down to direct-solve accuracy
        residual = rhs - lhs @ sol
        if float(np.linalg.norm(residual)) / scale <= 1e-12:
            break
        sol = sol + lu.solve(residual)
        sol[bnd_flat] = rhs[bnd_flat]
    resid = float(np.linalg.norm(lhs @ sol - rhs))
    if resid / scale > 1e-10:
        raise NumericsError(
            f"steady 2-D solve left relative residual {resid / scale:.3e} > 1e-10 "
            f"after refinement (system likely near-singular)")
    return SolutionGrid(("x1", "x2"), (xs, ys), sol.reshape(xs.size, ys.size),
                        provenance={"method": "fd-steady",
                                    "resolution": [int(n1), int(n2)],
                                    "problem_hash": problem_hash(problem),
                                    "p": None if p is None else [float(v) for v in p]})


def solve_2dt_fd(problem, n1, n2, n_t, p=None):
    """Crank-Nicolson time stepping over the steady 2-D spatial operator."""
    if not problem.is_time_dependent or problem.spatial_dim != 2:
        raise ConfigError("solve_2dt_fd needs a 2-D time-dependent problem")
    if int(n1) < 3 or int(n2) < 3 or int(n_t) < 2:
        raise ConfigError("solve_2dt_fd needs 3 nodes per axis and n_t >= 2")
    xs, ys = _grid_2d(problem, n1, n2)
    times = np.linspace(0.0, problem.time_horizon, int(n_t))
    dt = times[1] - times[0]
    n_total = xs.size * ys.size
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    flat = [X.ravel(), Y.ravel()]

    coeffs_static = problem.kappa.is_constant and problem.velocity.is_constant
    source_static = problem.source.is_constant
    A, source, bnd_flat, bnd_pts = _assemble_2d(problem, xs, ys, 0.0, p)
    eye = identity(n_total, format="csr")

    # boundary rows of A are empty, so I + dt/2 A is already identity there
    def factor(A_now):
        return splu((eye + 0.5 * dt * A_now).tocsc())

    lu = factor(A)
    c = _field_on(problem.initial, 0.0, flat, p, n_total)
    c[bnd_flat] = _boundary_values(problem, bnd_pts, 0.0, p)
    values = np.empty((times.size, xs.size, ys.size))
    values[0] = c.reshape(xs.size, ys.size)
    for k in range(times.size - 1):
        t_mid = 0.5 * (times[k] + times[k + 1])
        if not coeffs_static:
            A, source, _, _ = _assemble_2d(problem, xs, ys, t_mid, p)
            lu = factor(A)
        if not source_static:
            source = _field_on(problem.source, t_mid, flat, p, n_total)
        rhs = c - 0.5 * dt * (A @ c) + dt * source
        g_bnd = _boundary_values(problem, bnd_pts, times[k + 1], p)
        rhs[bnd_flat] = g_bnd
        c = lu.solve(rhs)
        if not np.all(np.isfinite(c)):
            raise NumericsError(f"2-D solve produced non-finite values at step {k + 1}")
        c[bnd_flat] = g_bnd  # Dirichlet rows reproduce their data exactly
        values[k + 1] = c.reshape(xs.size, ys.size)
    return SolutionGrid(("t", "x1", "x2"), (times, xs, ys), values,
                        provenance={"method": "fd-crank-nicolson",
                                    "resolution": [int(n_t), int(n1), int(n2)],
                                    "problem_hash": problem_hash(problem),
                                    "p": None if p is None else [float(v) for v in p]})


# ---------------------------------------------------------------------------
# dispatch


_DEFAULT_RESOLUTION = {
    "series-1dt": (201, 401),       # (n_t, n_x)
    "fd-1dt": (1601, 2401),         # (n_t, n_x)
    "steady-2d": (201, 201),        # (n1, n2)
    "fd-2dt": (151, 201, 101),      # (n_t, n1, n2)
}


def _evaluate_exact(problem, resolution, p):
    field = problem.exact
    if problem.is_time_dependent:
        raise ConfigError("closed-form evaluation implemented for steady problems only")
    n1, n2 = resolution
    xs, ys = _grid_2d(problem, n1, n2)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    vals = _field_on(field, None, [X.ravel(), Y.ravel()], p, xs.size * ys.size)
    return SolutionGrid(("x1", "x2"), (xs, ys), vals.reshape(xs.size, ys.size),
                        provenance={"method": "closed-form",
                                    "resolution": [int(n1), int(n2)],
                                    "problem_hash": problem_hash(problem),
                                    "p": None if p is None else [float(v) for v in p]})


def oracle_for(problem, p=None, resolution=None):
    """Reference SolutionGrid for a problem, choosing the best available path.

    The 1-D transient benchmark uses the series solution where it is stable
    and falls back to fine finite differences below the diffusivity guard;
    problems with a closed-form solution evaluate it directly; everything
    else is solved by finite differences.
    """
    if problem.parameters is not None and p is None:
        raise ConfigError("parametric problem needs an explicit parameter point p")
    if problem.name in ("adv1dt", "adv1dt_mor"):
        kappa = problem.kappa_at_center(p)
        velocity = float(problem.options.get("velocity", 1.0))
        if kappa >= abs(velocity) * KAPPA_HIGH * (1.0 - 1e-12):
            n_t, n_x = resolution or _DEFAULT_RESOLUTION["series-1dt"]
            grid = solve_1dt_series(kappa, n_x, n_t, velocity=velocity,
                                    time_horizon=problem.time_horizon,
                                    domain=problem.domain.bbox()[0])
            grid.provenance["problem_hash"] = problem_hash(problem)
            grid.provenance["p"] = None if p is None else [float(v) for v in p]
            return grid
        n_t, n_x = resolution or _DEFAULT_RESOLUTION["fd-1dt"]
        return solve_1dt_fd(problem, n_x, n_t, p=p)
    if problem.exact is not None and not problem.is_time_dependent:
        return _evaluate_exact(problem, resolution or _DEFAULT_RESOLUTION["steady-2d"], p)
    if problem.is_time_dependent and problem.spatial_dim == 1:
        n_t, n_x = resolution or _DEFAULT_RESOLUTION["fd-1dt"]
        return solve_1dt_fd(problem, n_x, n_t, p=p)
    if problem.is_time_dependent and problem.spatial_dim == 2:
        n_t, n1, n2 = resolution or _DEFAULT_RESOLUTION["fd-2dt"]
        return solve_2dt_fd(problem, n1, n2, n_t, p=p)
    if problem.spatial_dim == 2:
        n1, n2 = resolution or _DEFAULT_RESOLUTION["steady-2d"]
        return solve_2d_steady_fd(problem, n1, n2, p=p)
    raise ConfigError(f"no reference path for problem '{problem.name}'")
