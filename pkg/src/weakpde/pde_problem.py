"""Advection-diffusion problem definitions.

A problem bundles a spatial domain (interval or polygon), an optional time
horizon, coefficient fields (diffusivity kappa, solenoidal velocity u,
source s), Dirichlet data per boundary segment, an initial condition for
transient problems, and an optional parameter space for families of
problems sharing one network.

Fields follow one calling convention: ``field(t, x, p)`` where ``x`` is a
list of coordinates and each coordinate may be a scalar, an array of
independent lanes, or a dual number.  Evaluators therefore route their math
through :mod:`weakpde.autodiff`.  Vector fields return a list of components.
"""
from __future__ import annotations

import csv
import hashlib
import json
import warnings
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from . import autodiff as ad
from ._errors import (ConfigError, ContractError, DataFormatError,
                      OutsideDomainError)

KAPPA_HIGH = 0.1 / np.pi
KAPPA_LOW = 0.01 / np.pi
MOR_KAPPA_SAMPLES = (0.003, 0.0048, 0.0078, 0.0126, 0.0204, 0.033)


# ---------------------------------------------------------------------------
# domains


class Interval1D:
    """1-D domain [lo, hi]; boundary segments: 1 = lo end, 2 = hi end."""

    __slots__ = ("lo", "hi")

    def __init__(self, lo, hi):
        if not hi > lo:
            raise ConfigError("interval needs hi > lo")
        self.lo = float(lo)
        self.hi = float(hi)

    @property
    def dim(self):
        return 1

    @property
    def n_segments(self):
        return 2

    def bbox(self):
        return [(self.lo, self.hi)]

    def contains(self, points, tol=0.0):
        x = np.asarray(points, dtype=float).reshape(-1)
        return (x >= self.lo - tol) & (x <= self.hi + tol)

    def segment_point(self, i):
        if i == 1:
            return self.lo
        if i == 2:
            return self.hi
        raise ContractError(f"interval has segments 1 and 2, got {i}")

    def segment_points(self, i, m):
        return np.full((max(int(m), 1), 1), self.segment_point(i))

    def segment_length(self, i):
        self.segment_point(i)  # validates the index
        return 0.0


class Polygon2D:
    """Simple polygon; segment i (1-based) joins vertex i-1 to vertex i mod n."""

    __slots__ = ("vertices",)

    def __init__(self, vertices):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or v.shape[0] < 3:
            raise ConfigError("polygon needs at least 3 (x1, x2) vertices")
        self.vertices = v

    @classmethod
    def rectangle(cls, x1lo, x1hi, x2lo, x2hi):
        """Axis-aligned box; segments: 1 bottom, 2 right, 3 top, 4 left."""
        return cls([(x1lo, x2lo), (x1hi, x2lo), (x1hi, x2hi), (x1lo, x2hi)])

    @property
    def dim(self):
        return 2

    @property
    def n_segments(self):
        return self.vertices.shape[0]

    def bbox(self):
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return [(lo[0], hi[0]), (lo[1], hi[1])]

    def _scale(self):
        (l1, h1), (l2, h2) = self.bbox()
        return max(h1 - l1, h2 - l2)

    def segment(self, i):
        n = self.n_segments
        if not 1 <= i <= n:
            raise ContractError(f"polygon has segments 1..{n}, got {i}")
        return self.vertices[i - 1], self.vertices[i % n]

    def segment_length(self, i):
        a, b = self.segment(i)
        return float(np.hypot(*(b - a)))

    def segment_points(self, i, m):
        a, b = self.segment(i)
        ts = np.linspace(0.0, 1.0, max(int(m), 2))
        return a + ts[:, None] * (b - a)

    def _segment_distances(self, pts):
        """(m, n_segments) distances from points to each edge."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.empty((pts.shape[0], self.n_segments))
        for i in range(1, self.n_segments + 1):
            a, b = self.segment(i)
            ab = b - a
            denom = float(ab @ ab)
            t = np.clip(((pts - a) @ ab) / denom, 0.0, 1.0)
            proj = a + t[:, None] * ab
            out[:, i - 1] = np.hypot(pts[:, 0] - proj[:, 0], pts[:, 1] - proj[:, 1])
        return out

    def on_boundary(self, pts, tol=None):
        tol = 1e-9 * self._scale() if tol is None else tol
        return self._segment_distances(pts).min(axis=1) <= tol

    def segment_of(self, pts, tol=None):
        """Lowest-index segment within tolerance of each point; error if none."""
        tol = 1e-9 * self._scale() if tol is None else tol
        d = self._segment_distances(pts)
        hit = d <= tol
        if not hit.any(axis=1).all():
            miss = int(np.argmin(hit.any(axis=1)))
            raise ContractError(f"point {miss} is not on the polygon boundary")
        return np.argmax(hit, axis=1) + 1

    def contains(self, pts, tol=None):
        """Even-odd test, boundary inclusive."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        tol = 1e-9 * self._scale() if tol is None else tol
        x, y = pts[:, 0], pts[:, 1]
        inside = np.zeros(pts.shape[0], dtype=bool)
        v = self.vertices
        n = v.shape[0]
        j = n - 1
        with np.errstate(divide="ignore", invalid="ignore"):
            for i in range(n):
                xi, yi = v[i]
                xj, yj = v[j]
                spans = (yi > y) != (yj > y)
                crossing_x = np.where(spans, (xj - xi) * (y - yi) / (yj - yi) + xi,
                                      np.inf)
                inside ^= spans & (x < crossing_x)
                j = i
        return inside | self.on_boundary(pts, tol)


# ---------------------------------------------------------------------------
# fields


class FieldFunction:
    """Callable field with a fixed component count.

    ``kind`` records provenance ("closed-form", "constant", "gridded") so
    consumers can skip derivative work for constants.
    """

    __slots__ = ("evaluator", "n_components", "kind", "constant_value")

    def __init__(self, evaluator, n_components=1, kind="closed-form",
                 constant_value=None):
        self.evaluator = evaluator
        self.n_components = int(n_components)
        self.kind = kind
        self.constant_value = constant_value

    @classmethod
    def constant(cls, value):
        if np.ndim(value) == 0:
            val = float(value)
            return cls(lambda t, x, p: val, 1, "constant", (val,))
        vals = tuple(float(v) for v in np.asarray(value).reshape(-1))
        return cls(lambda t, x, p: list(vals), len(vals), "constant", vals)

    @classmethod
    def of_space_time(cls, fn, n_components=1):
        """Wrap fn(t, x) that ignores parameters."""
        return cls(lambda t, x, p: fn(t, x), n_components)

    def __call__(self, t, x, p=None):
        return self.evaluator(t, x, p)

    @property
    def is_constant(self):
        return self.kind == "constant"


def zero_field():
    return FieldFunction.constant(0.0)


def _as_components(value):
    """Normalize a (possibly 1-D) vector-field result to a component list."""
    return list(value) if isinstance(value, (list, tuple)) else [value]


def _read_gridded_csv(path, n_components):
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError(f"{path}: empty gridded-field file") from None
        expected = ["x1", "x2"] + [f"v{k + 1}" for k in range(n_components)]
        if [h.strip() for h in header] != expected:
            raise DataFormatError(
                f"{path}: header must be {','.join(expected)}, got {','.join(header)}")
        try:
            rows = np.array([[float(c) for c in row] for row in reader if row])
        except ValueError as e:
            raise DataFormatError(f"{path}: non-numeric cell: {e}") from None
    if rows.size == 0:
        raise DataFormatError(f"{path}: no data rows")
    if rows.shape[1] != 2 + n_components:
        raise DataFormatError(f"{path}: expected {2 + n_components} columns")
    a1 = np.unique(rows[:, 0])
    a2 = np.unique(rows[:, 1])
    if a1.size < 2 or a2.size < 2:
        raise DataFormatError(f"{path}: grid needs at least 2 distinct values per axis")
    if rows.shape[0] != a1.size * a2.size:
        raise DataFormatError(
            f"{path}: rows do not form a complete {a1.size} x {a2.size} grid")
    values = np.full((a1.size, a2.size, n_components), np.nan)
    i = np.searchsorted(a1, rows[:, 0])
    j = np.searchsorted(a2, rows[:, 1])
    values[i, j] = rows[:, 2:]
    if np.isnan(values).any():
        raise DataFormatError(f"{path}: duplicate or missing grid rows")
    return a1, a2, values


def gridded_field_from_csv(path, n_components=1):
    """Bilinear interpolant of a rectilinear sample file.

    The CSV has header ``x1,x2,v1[,v2]`` and one row per grid node.
    Queries outside the sampled box raise :class:`OutsideDomainError`.
    The interpolant is time- and parameter-independent.
    """
    a1, a2, values = _read_gridded_csv(path, n_components)
    path_name = str(path)

    def interpolate(t, x, p):
        q1, q2 = x[0], x[1]
        d1 = np.asarray(ad.detach(q1), dtype=float)
        d2 = np.asarray(ad.detach(q2), dtype=float)
        pad1 = 1e-9 * (a1[-1] - a1[0])
        pad2 = 1e-9 * (a2[-1] - a2[0])
        bad = (d1 < a1[0] - pad1) | (d1 > a1[-1] + pad1) \
            | (d2 < a2[0] - pad2) | (d2 > a2[-1] + pad2)
        if np.any(bad):
            k = int(np.argmax(np.atleast_1d(bad)))
            raise OutsideDomainError(
                f"query {k} is outside the gridded-field hull of {path_name}")
        i = np.clip(np.searchsorted(a1, d1, side="right") - 1, 0, a1.size - 2)
        j = np.clip(np.searchsorted(a2, d2, side="right") - 1, 0, a2.size - 2)
        w1 = (q1 - a1[i]) / (a1[i + 1] - a1[i])
        w2 = (q2 - a2[j]) / (a2[j + 1] - a2[j])
        comps = []
        for k in range(n_components):
            v00 = values[i, j, k]
            v10 = values[i + 1, j, k]
            v01 = values[i, j + 1, k]
            v11 = values[i + 1, j + 1, k]
            lo = v00 + (v10 - v00) * w1
            hi = v01 + (v11 - v01) * w1
            comps.append(lo + (hi - lo) * w2)
        return comps if n_components > 1 else comps[0]

    return FieldFunction(interpolate, n_components, "gridded")


# ---------------------------------------------------------------------------
# problems


@dataclass(frozen=True)
class ParameterSpace:
    """Box of PDE parameters plus the training samples drawn from it."""

    bounds: tuple
    samples: tuple

    def __post_init__(self):
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        samples = tuple(tuple(float(v) for v in np.atleast_1d(s)) for s in self.samples)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "samples", samples)
        if any(hi <= lo for lo, hi in bounds):
            raise ConfigError("parameter bounds must have hi > lo")
        for s in samples:
            if len(s) != len(bounds):
                raise ConfigError("parameter sample dimension mismatch")
            if any(not lo <= v <= hi for v, (lo, hi) in zip(s, bounds)):
                raise ConfigError(f"parameter sample {s} outside bounds")

    @property
    def dim(self):
        return len(self.bounds)


@dataclass
class ADPDEProblem:
    """One advection-diffusion problem (or parametric family)."""

    name: str
    domain: object
    time_horizon: float | None
    kappa: FieldFunction
    velocity: FieldFunction
    source: FieldFunction
    boundary: dict
    initial: FieldFunction | None = None
    parameters: ParameterSpace | None = None
    char_velocity: float = 1.0
    char_length: float = 1.0
    exact: FieldFunction | None = None
    options: dict = dataclass_field(default_factory=dict)

    def __post_init__(self):
        if self.time_horizon is not None:
            if self.time_horizon <= 0.0:
                raise ConfigError("time horizon must be positive")
            if self.initial is None:
                raise ConfigError("time-dependent problem requires an initial condition")
        if self.velocity.n_components != self.domain.dim:
            raise ConfigError("velocity component count must match spatial dimension")
        for i in self.boundary:
            if not 1 <= i <= self.domain.n_segments:
                raise ConfigError(f"boundary data given for unknown segment {i}")

    @property
    def is_time_dependent(self):
        return self.time_horizon is not None

    @property
    def spatial_dim(self):
        return self.domain.dim

    @property
    def input_dim(self):
        extra = self.parameters.dim if self.parameters is not None else 0
        return (1 if self.is_time_dependent else 0) + self.spatial_dim + extra

    def param_samples(self):
        return list(self.parameters.samples) if self.parameters is not None else [None]

    def domain_center(self):
        return [0.5 * (lo + hi) for lo, hi in self.domain.bbox()]

    def kappa_at_center(self, p=None):
        t = 0.0 if self.is_time_dependent else None
        return float(ad.detach(self.kappa(t, self.domain_center(), p)))

    def peclet(self, p=None):
        """u_char * l_char / kappa evaluated at the domain center."""
        return self.char_velocity * self.char_length / self.kappa_at_center(p)

    def input_ranges(self):
        """Normalization ranges ordered (t, x..., p...)."""
        ranges = []
        if self.is_time_dependent:
            ranges.append((0.0, self.time_horizon))
        ranges.extend(self.domain.bbox())
        if self.parameters is not None:
            ranges.extend(self.parameters.bounds)
        return ranges

    def divergence_max(self, p=None, resolution=21):
        """Probe max |div u| on a bbox grid (interior points only)."""
        if self.velocity.is_constant:
            return 0.0
        axes = [np.linspace(lo, hi, resolution)[1:-1] for lo, hi in self.domain.bbox()]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.ravel() for m in mesh], axis=1)
        keep = self.domain.contains(pts)
        pts = pts[keep]
        t = 0.0 if self.is_time_dependent else None
        div = np.zeros(pts.shape[0])
        for comp in range(self.spatial_dim):
            def component(tv, xv, pv, _c=comp):
                out = self.velocity(tv, xv, pv)
                return out[_c] if self.velocity.n_components > 1 else out
            _, _, grad = ad.grad_wrt_inputs(component, t, list(pts.T), p)
            div = div + np.asarray(grad[comp])
        return float(np.max(np.abs(div))) if div.size else 0.0

    def warn_if_not_solenoidal(self, p=None, tol=1e-6):
        """The weak form assumes div u = 0; measure and warn when violated."""
        got = self.divergence_max(p)
        scale = max(self.char_velocity / self.char_length, 1e-300)
        if got > tol * scale:
            warnings.warn(
                f"velocity field of '{self.name}' has max |div u| = {got:.3e}; "
                "the weak form treats it as solenoidal", stacklevel=2)
        return got

    def descriptor(self):
        """JSON-safe (name, options) document, or None for non-catalog problems."""
        if self.name not in _BENCHMARKS:
            return None
        return {"name": self.name, "options": json.loads(json.dumps(self.options))}


def transport_residual(field_fn, t, x, problem, p=None):
    """Strong-form residual df/dt + u . grad f - grad kappa . grad f - kappa lap f - s.

    Uses the divergence-free expansion of d/dx . (-kappa grad f + u f).
    Works on scalar points or coordinate lanes.
    """
    td = problem.is_time_dependent
    value, dt, grad = ad.grad_wrt_inputs(field_fn, t if td else None, x, p)
    second = ad.second_spatial_derivatives(field_fn, t if td else None, x, p)
    u = _as_components(problem.velocity(t, x, p))
    kap = problem.kappa(t, x, p)
    r = dt if td else 0.0
    for j in range(problem.spatial_dim):
        r = r + u[j] * grad[j] - kap * second[j]
    if not problem.kappa.is_constant:
        _, _, kgrad = ad.grad_wrt_inputs(problem.kappa, t if td else None, x, p)
        for j in range(problem.spatial_dim):
            r = r - kgrad[j] * grad[j]
    s = problem.source(t, x, p)
    return r - s


def manufactured_source(c_field, kappa, velocity, spatial_dim, time_dependent=False):
    """Source that makes ``c_field`` an exact solution.

    Applies the same divergence-free expansion as :func:`transport_residual`,
    so the residual of ``c_field`` against the returned source vanishes
    identically regardless of whether the velocity is truly solenoidal.
    """

    def evaluator(t, x, p):
        value, dt, grad = ad.grad_wrt_inputs(c_field, t if time_dependent else None, x, p)
        second = ad.second_spatial_derivatives(c_field, t if time_dependent else None, x, p)
        u = _as_components(velocity(t, x, p))
        kap = kappa(t, x, p)
        s = dt if time_dependent else 0.0
        for j in range(spatial_dim):
            s = s + u[j] * grad[j] - kap * second[j]
        if not kappa.is_constant:
            _, _, kgrad = ad.grad_wrt_inputs(kappa, t if time_dependent else None, x, p)
            for j in range(spatial_dim):
                s = s - kgrad[j] * grad[j]
        return s

    return FieldFunction(evaluator, 1, "closed-form")


# ---------------------------------------------------------------------------
# benchmark catalog


def _adv1dt(kappa=KAPPA_HIGH, velocity=1.0):
    kappa = float(kappa)
    if kappa <= 0.0:
        raise ConfigError("adv1dt needs kappa > 0")
    return ADPDEProblem(
        name="adv1dt",
        domain=Interval1D(-1.0, 1.0),
        time_horizon=2.0,
        kappa=FieldFunction.constant(kappa),
        velocity=FieldFunction.constant([velocity]),
        source=zero_field(),
        initial=FieldFunction.of_space_time(lambda t, x: -ad.sin(np.pi * x[0])),
        boundary={1: zero_field(), 2: zero_field()},
        char_velocity=abs(float(velocity)),
        char_length=2.0,
        options={"kappa": kappa, "velocity": float(velocity)},
    )


def _adv1dt_mor(kappa_bounds=(0.003, 0.033), kappa_samples=MOR_KAPPA_SAMPLES,
                velocity=1.0):
    base = _adv1dt(kappa=kappa_bounds[1], velocity=velocity)
    return ADPDEProblem(
        name="adv1dt_mor",
        domain=base.domain,
        time_horizon=base.time_horizon,
        kappa=FieldFunction(lambda t, x, p: p[0], 1, "closed-form"),
        velocity=base.velocity,
        source=base.source,
        initial=base.initial,
        boundary=base.boundary,
        parameters=ParameterSpace(bounds=(tuple(kappa_bounds),),
                                  samples=tuple((k,) for k in kappa_samples)),
        char_velocity=base.char_velocity,
        char_length=base.char_length,
        options={"kappa_bounds": tuple(kappa_bounds),
                 "kappa_samples": tuple(kappa_samples),
                 "velocity": float(velocity)},
    )


def _front_domain():
    # inlet is segment 2 by construction
    return Polygon2D([(0.0, -0.5), (0.0, -0.2), (0.0, 0.2), (0.0, 0.5),
                      (2.0, 0.5), (2.0, -0.5)])


def _front2dt(kappa=1e-3):
    kappa = float(kappa)
    domain = _front_domain()
    boundary = {i: zero_field() for i in range(1, 7)}
    boundary[2] = FieldFunction.constant(1.0)
    return ADPDEProblem(
        name="front2dt",
        domain=domain,
        time_horizon=1.5,
        kappa=FieldFunction.constant(kappa),
        velocity=FieldFunction.constant([1.0, 0.0]),
        source=zero_field(),
        initial=zero_field(),
        boundary=boundary,
        char_velocity=1.0,
        char_length=2.0,
        options={"kappa": kappa},
    )


def _manufactured2d(k=1, kappa=1.0, variable_kappa=False, kappa_bar=1e-3,
                    rotating_velocity=None):
    k = int(k)
    if rotating_velocity is None:
        rotating_velocity = k > 1
    if variable_kappa:
        kb = float(kappa_bar)
        kappa_field = FieldFunction.of_space_time(
            lambda t, x: kb * (1.0 - x[0] * x[0]) * (1.0 - x[1] * x[1]))
    else:
        kappa_field = FieldFunction.constant(float(kappa))
    if rotating_velocity:
        vel = FieldFunction.of_space_time(
            lambda t, x: [ad.sin(k * np.pi * x[0]), ad.cos(k * np.pi * x[0])],
            n_components=2)
    else:
        vel = FieldFunction.constant([1.0, 0.0])
    exact = FieldFunction.of_space_time(
        lambda t, x: ad.sin(k * np.pi * x[0]) * (1.0 - x[1] * x[1]))
    source = manufactured_source(exact, kappa_field, vel, spatial_dim=2)
    return ADPDEProblem(
        name="manufactured2d",
        domain=Polygon2D.rectangle(-1.0, 1.0, -1.0, 1.0),
        time_horizon=None,
        kappa=kappa_field,
        velocity=vel,
        source=source,
        boundary={i: zero_field() for i in range(1, 5)},
        char_velocity=1.0,
        char_length=2.0,
        exact=exact,
        options={"k": k, "kappa": float(kappa), "variable_kappa": bool(variable_kappa),
                 "kappa_bar": float(kappa_bar),
                 "rotating_velocity": bool(rotating_velocity)},
    )


def _gauss2d(gamma=0.2, amplitude=1.0, center=(-0.30, 0.0)):
    g2 = 2.0 * float(gamma) ** 2
    cx, cy = (float(c) for c in center)
    amplitude = float(amplitude)
    source = FieldFunction.of_space_time(
        lambda t, x: amplitude * ad.exp(-((x[0] - cx) * (x[0] - cx)
                                          + (x[1] - cy) * (x[1] - cy)) / g2))
    return ADPDEProblem(
        name="gauss2d",
        domain=Polygon2D.rectangle(-1.0, 1.0, -1.0, 1.0),
        time_horizon=None,
        kappa=FieldFunction.constant(1.0),
        velocity=FieldFunction.constant([1.0, 0.0]),
        source=source,
        boundary={i: zero_field() for i in range(1, 5)},
        char_velocity=1.0,
        char_length=2.0,
        options={"gamma": float(gamma), "amplitude": amplitude, "center": (cx, cy)},
    )


def _tower2d(amplitude=1.0, support=(-0.4, -0.3, -0.05, 0.05)):
    x1lo, x1hi, x2lo, x2hi = (float(v) for v in support)
    amplitude = float(amplitude)

    def tower(t, x):
        inside = (ad.detach(x[0]) >= x1lo) & (ad.detach(x[0]) <= x1hi) \
            & (ad.detach(x[1]) >= x2lo) & (ad.detach(x[1]) <= x2hi)
        return np.where(inside, amplitude, 0.0) if np.ndim(inside) else \
            (amplitude if inside else 0.0)

    return ADPDEProblem(
        name="tower2d",
        domain=Polygon2D.rectangle(-1.0, 1.0, -1.0, 1.0),
        time_horizon=None,
        kappa=FieldFunction.constant(1.0),
        velocity=FieldFunction.constant([1.0, 0.0]),
        source=FieldFunction.of_space_time(tower),
        boundary={i: zero_field() for i in range(1, 5)},
        char_velocity=1.0,
        char_length=2.0,
        options={"amplitude": amplitude, "support": (x1lo, x1hi, x2lo, x2hi)},
    )


def _gridded2d(velocity_csv, kappa_csv=None, kappa=0.01, inlet_value=1.0):
    domain = _front_domain()
    vel = gridded_field_from_csv(velocity_csv, n_components=2)
    if kappa_csv is not None:
        kappa_field = gridded_field_from_csv(kappa_csv, n_components=1)
    else:
        kappa_field = FieldFunction.constant(float(kappa))
    boundary = {i: zero_field() for i in range(1, 7)}
    boundary[2] = FieldFunction.constant(float(inlet_value))
    return ADPDEProblem(
        name="gridded2d",
        domain=domain,
        time_horizon=None,
        kappa=kappa_field,
        velocity=vel,
        source=zero_field(),
        boundary=boundary,
        char_velocity=1.0,
        char_length=2.0,
        options={"velocity_csv": str(velocity_csv),
                 "kappa_csv": None if kappa_csv is None else str(kappa_csv),
                 "kappa": float(kappa), "inlet_value": float(inlet_value)},
    )


_BENCHMARKS = {
    "adv1dt": _adv1dt,
    "adv1dt_mor": _adv1dt_mor,
    "front2dt": _front2dt,
    "manufactured2d": _manufactured2d,
    "gauss2d": _gauss2d,
    "tower2d": _tower2d,
    "gridded2d": _gridded2d,
}


def benchmark(name, **options):
    """Build a catalog problem by name.  Unknown names or options are config errors."""
    if name not in _BENCHMARKS:
        raise ConfigError(
            f"unknown benchmark '{name}'; available: {', '.join(sorted(_BENCHMARKS))}")
    try:
        return _BENCHMARKS[name](**options)
    except TypeError as e:
        raise ConfigError(f"bad options for benchmark '{name}': {e}") from None


def problem_from_descriptor(doc):
    """Rebuild a catalog problem from :meth:`ADPDEProblem.descriptor` output."""
    if not isinstance(doc, dict) or "name" not in doc:
        raise DataFormatError("problem descriptor needs a 'name' entry")
    return benchmark(doc["name"], **doc.get("options", {}))


def problem_hash(problem):
    """Short stable identifier of a problem's descriptor (or just its name)."""
    doc = problem.descriptor() or {"name": problem.name}
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
