"""Weak-form training loss over compactly supported test functions.

For one parameter sample the loss combines squared variational terms over a
set of hat-function patches with mean-square initial- and boundary-condition
penalties,

    loss = w1 * sum_k l(f, v_k)^2
         + (w2 / n_ic) * sum |f(0, x) - g0(x)|^2
         + (w3 / n_bc) * sum_i sum |f(t, x) - g_i(t, x)|^2,

where l(f, v) integrates grad f . (kappa grad v + u v) - f vdot - s v over
the support of the hat v (the f vdot term drops for steady problems).  The
variational sum is deliberately left unnormalized by the number of patches;
the penalty sums are means, so the weights stay independent of point counts.
The total loss sums this expression over all parameter samples.

:class:`LossAssembly` precomputes everything that never changes during
training: quadrature points (deduplicated between patches sharing elements
on a common lattice), test-function values and gradients at those points,
and, cached per parameter sample, the PDE-data coefficient arrays.  A loss
evaluation then reduces to gathers, products and segment sums that work
identically on plain numpy lanes and on reverse-mode ``Var`` lanes.
"""

import dataclasses
import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._errors import ConfigError, ContractError
from .fe_basis import (ElementPatch, gauss_legendre, integrate_over_support,
                       patch_elements, shape_grad_physical, shape_nd)
from .pde_problem import _as_components

DEFAULT_QUADRATURE_ORDER = 2


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class LossWeights:
    """Penalty weights: w1 variational, w2 initial, w3 boundary."""

    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0

    def __post_init__(self):
        vals = (self.w1, self.w2, self.w3)
        if not all(np.isfinite(v) for v in vals):
            raise ConfigError("loss weights must be finite")
        if self.w1 <= 0.0:
            raise ConfigError("variational weight w1 must be positive")
        if self.w2 < 0.0 or self.w3 < 0.0:
            raise ConfigError("penalty weights w2 and w3 must be nonnegative")

    @classmethod
    def from_sequence(cls, seq):
        vals = [float(v) for v in seq]
        if len(vals) == 2:
            # steady shorthand: (w1, w3), no initial condition
            return cls(vals[0], 0.0, vals[1])
        if len(vals) == 3:
            return cls(*vals)
        raise ConfigError("weights need 2 (steady) or 3 entries")

    def as_tuple(self):
        return (self.w1, self.w2, self.w3)


@dataclass(frozen=True)
class LossBreakdown:
    """Weighted loss components; ``total`` is their sum.

    ``variational`` holds w1 * sum_k l_k^2 (the strong-form baseline stores
    its weighted mean squared residual in the same slot), ``ic`` holds
    (w2/n_ic) * sum |f - g0|^2 and ``bc`` holds (w3/n_bc) * sum |f - g_i|^2.
    """

    variational: float
    ic: float
    bc: float
    total: float


def _breakdown(var_term, ic_term, bc_term):
    var = float(ad.detach(var_term))
    ic = float(ad.detach(ic_term))
    bc = float(ad.detach(bc_term))
    return LossBreakdown(var, ic, bc, var + ic + bc)


def _param_key(p):
    if p is None:
        return None
    return tuple(float(c) for c in np.asarray(p, dtype=np.float64).reshape(-1))


def _point_rows(rows):
    if rows is None:
        return None
    arr = np.asarray(rows, dtype=np.float64)
    if arr.size == 0:
        return None
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ContractError("point sets must be rows of coordinates")
    ad.assert_finite("training points", arr)
    return arr


@dataclass
class TrainingSet:
    """Training data for the weak-form loss.

    ``interior`` holds the test-function patches.  ``ic_points`` are spatial
    points for the initial-condition penalty (time-dependent problems only).
    ``bc_points`` maps a boundary segment index to point rows on that
    segment: (t, x...) rows for time-dependent problems, (x...) otherwise.
    ``param_samples`` lists the parameter vectors the total loss sums over;
    non-parametric problems keep the trivial singleton ``(None,)``.
    """

    interior: tuple
    ic_points: np.ndarray | None = None
    bc_points: dict = dataclasses.field(default_factory=dict)
    param_samples: tuple = (None,)

    def __post_init__(self):
        self.interior = tuple(self.interior)
        for patch in self.interior:
            if not isinstance(patch, ElementPatch):
                raise ContractError("interior entries must be ElementPatch instances")
        self.ic_points = _point_rows(self.ic_points)
        bc = {}
        for i, rows in dict(self.bc_points).items():
            rows = _point_rows(rows)
            if rows is not None:
                bc[int(i)] = rows
        self.bc_points = bc
        self.param_samples = tuple(None if p is None else _param_key(p)
                                   for p in self.param_samples)
        if not self.param_samples:
            raise ContractError("at least one parameter sample is required")

    @property
    def n_ic(self):
        return 0 if self.ic_points is None else self.ic_points.shape[0]

    @property
    def n_bc(self):
        return sum(rows.shape[0] for rows in self.bc_points.values())


# ---------------------------------------------------------------------------
# shared evaluation helpers


def _data_lane(field, t, x, p, size):
    """Evaluate a PDE-data field on coordinate lanes, detached, shape (size,)."""
    out = ad.detach(field(t, x, p))
    return np.broadcast_to(np.asarray(out, dtype=np.float64), (size,))


def _velocity_lanes(problem, t, x, p, size):
    comps = _as_components(problem.velocity(t, x, p))
    if len(comps) != problem.spatial_dim:
        raise ContractError("velocity component count does not match the domain")
    return [np.broadcast_to(np.asarray(ad.detach(c), dtype=np.float64), (size,))
            for c in comps]


def _as_lane(x, n):
    """Broadcast a plain scalar result (constant field) to a lane."""
    if isinstance(x, (ad.Var, ad.Dual)):
        return x
    arr = np.asarray(x, dtype=np.float64)
    return np.broadcast_to(arr, (n,)) if arr.ndim == 0 else arr


def _field_lanes(field, points, time_dependent, p):
    """Value and spatial gradient lanes of a generic field at table rows."""
    cols = [points[:, j] for j in range(points.shape[1])]
    if time_dependent:
        t = cols[0]

        def frozen(tv, xv, pv):
            return field(t, xv, pv)

        value, _, grads = ad.grad_wrt_inputs(frozen, None, cols[1:], p)
    else:
        value, _, grads = ad.grad_wrt_inputs(field, None, cols, p)
    n = points.shape[0]
    return _as_lane(value, n), [_as_lane(g, n) for g in grads]


def _field_values(field, inputs, time_dependent, p):
    cols = [inputs[:, j] for j in range(inputs.shape[1])]
    if time_dependent:
        return field(cols[0], cols[1:], p)
    return field(None, cols, p)


def _check_patch(problem, patch):
    """Patch support must stay inside [0, T] x domain."""
    expected = problem.spatial_dim + (1 if problem.is_time_dependent else 0)
    if patch.dim != expected:
        raise ContractError(
            f"patch dimension {patch.dim} does not match problem dimension {expected}")
    lo, hi = patch.support()
    axis = 0
    if problem.is_time_dependent:
        tol = 1e-9 * problem.time_horizon
        if lo[0] < -tol or hi[0] > problem.time_horizon + tol:
            raise ContractError("patch support leaves the time horizon")
        axis = 1
    for j, (blo, bhi) in enumerate(problem.domain.bbox()):
        tol = 1e-9 * (bhi - blo)
        if lo[axis + j] < blo - tol or hi[axis + j] > bhi + tol:
            raise ContractError("patch support leaves the domain")
    if problem.spatial_dim == 2:
        corners = list(itertools.product((lo[axis], hi[axis]),
                                         (lo[axis + 1], hi[axis + 1])))
        if not np.all(problem.domain.contains(np.asarray(corners))):
            raise ContractError("patch support leaves the domain")


def _on_boundary(domain, x):
    if domain.dim == 1:
        span = domain.hi - domain.lo
        xf = np.asarray(x, dtype=np.float64).reshape(-1)
        return (np.abs(xf - domain.lo) <= 1e-9 * span) \
            | (np.abs(xf - domain.hi) <= 1e-9 * span)
    return domain.on_boundary(x)


# ---------------------------------------------------------------------------
# penalty terms (initial and boundary misfit)


class _PenaltySet:
    """IC/BC point tables with per-parameter-sample target caches."""

    def __init__(self, problem, training_set):
        self.problem = problem
        td = problem.is_time_dependent
        d = problem.spatial_dim
        self._cache = {}

        ic = training_set.ic_points
        self.ic_inputs = None
        if ic is not None:
            if not td:
                raise ContractError("steady problems take no initial-condition points")
            if ic.shape[1] != d:
                raise ContractError(f"initial-condition points must be (n, {d}) rows")
            tol = 1e-9 * max(bhi - blo for blo, bhi in problem.domain.bbox())
            if not np.all(problem.domain.contains(ic if d > 1 else ic[:, 0], tol)):
                raise ContractError("initial-condition points leave the domain")
            self.ic_inputs = np.hstack([np.zeros((ic.shape[0], 1)), ic])

        width = (1 if td else 0) + d
        self._slices = []
        blocks = []
        start = 0
        for i in sorted(training_set.bc_points):
            rows = training_set.bc_points[i]
            if rows.shape[1] != width:
                raise ContractError(
                    f"boundary rows for segment {i} must have {width} columns")
            if i not in problem.boundary:
                raise ContractError(
                    f"training set references segment {i} but the problem has no data for it")
            x = rows[:, 1:] if td else rows
            if not np.all(_on_boundary(problem.domain, x)):
                raise ContractError(f"segment {i} points are not on the boundary")
            if td:
                tol = 1e-9 * problem.time_horizon
                if np.any(rows[:, 0] < -tol) \
                        or np.any(rows[:, 0] > problem.time_horizon + tol):
                    raise ContractError("boundary point times leave the horizon")
            blocks.append(rows)
            self._slices.append((i, start, start + rows.shape[0]))
            start += rows.shape[0]
        self.bc_inputs = np.vstack(blocks) if blocks else None

    def _targets(self, p):
        key = _param_key(p)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._build_targets(p)
            self._cache[key] = hit
        return hit

    def _build_targets(self, p):
        problem = self.problem
        ic_target = None
        if self.ic_inputs is not None:
            x = [self.ic_inputs[:, j] for j in range(1, self.ic_inputs.shape[1])]
            ic_target = _data_lane(problem.initial, 0.0, x, p, self.ic_inputs.shape[0])
        bc_target = None
        if self.bc_inputs is not None:
            td = problem.is_time_dependent
            parts = []
            for i, lo, hi in self._slices:
                rows = self.bc_inputs[lo:hi]
                t = rows[:, 0] if td else None
                x = [rows[:, j] for j in range(1 if td else 0, rows.shape[1])]
                parts.append(_data_lane(problem.boundary[i], t, x, p, hi - lo))
            bc_target = np.concatenate(parts)
        return ic_target, bc_target

    def weighted_terms(self, weights, ic_values, bc_values, p):
        """Weighted (ic, bc) penalty terms; values may be Var lanes."""
        if not self.problem.is_time_dependent and weights.w2 != 0.0:
            raise ContractError("steady problems use w2 = 0")
        ic_term = 0.0
        bc_term = 0.0
        if weights.w2 == 0.0 and weights.w3 == 0.0:
            return ic_term, bc_term
        ic_target, bc_target = self._targets(p)
        if weights.w2 > 0.0:
            if ic_target is None:
                raise ContractError("w2 > 0 requires initial-condition points")
            if ic_values is None:
                raise ContractError("initial-condition field values are missing")
            diff = ic_values - ic_target
            ic_term = ad.mean(diff * diff) * weights.w2
        if weights.w3 > 0.0:
            if bc_target is None:
                raise ContractError("w3 > 0 requires boundary points")
            if bc_values is None:
                raise ContractError("boundary field values are missing")
            diff = bc_values - bc_target
            bc_term = ad.mean(diff * diff) * weights.w3
        return ic_term, bc_term


# ---------------------------------------------------------------------------
# interior assembly


@dataclass
class _Coefficients:
    """Per-parameter-sample data arrays contracted against field lanes."""

    A: np.ndarray            # (M, d): pairs with the spatial gradient of f
    B: np.ndarray | None     # (M,): pairs with f itself (time-dependent only)
    S: np.ndarray            # (n_v,): source integral per patch


class LossAssembly:
    """Precomputed quadrature tables for repeated loss evaluations.

    ``points`` is the table of unique quadrature points, rows (t, x...) for
    time-dependent problems and (x...) otherwise.  Callers evaluate their
    field once per table (values plus spatial gradient lanes on ``points``,
    plain values on ``ic_inputs``/``bc_inputs``) and feed the lanes to
    :meth:`loss_parts`; :meth:`loss_for_field` does this for generic fields.
    """

    def __init__(self, problem, training_set, weights,
                 order=DEFAULT_QUADRATURE_ORDER):
        if not training_set.interior:
            raise ContractError("training set has no interior patches")
        if not isinstance(weights, LossWeights):
            weights = LossWeights(*weights)
        self.problem = problem
        self.weights = weights
        self.order = int(order)
        self.n_v = len(training_set.interior)
        self._penalty = _PenaltySet(problem, training_set)
        self._cache = {}
        self._build_tables(training_set.interior)

    @property
    def ic_inputs(self):
        return self._penalty.ic_inputs

    @property
    def bc_inputs(self):
        return self._penalty.bc_inputs

    def _build_tables(self, patches):
        problem = self.problem
        td = problem.is_time_dependent
        dbar = problem.spatial_dim + (1 if td else 0)
        nodes, wts = gauss_legendre(self.order)
        mesh = np.meshgrid(*([nodes] * dbar), indexing="ij")
        xi = np.stack([m.ravel() for m in mesh], axis=1)
        wmesh = np.meshgrid(*([wts] * dbar), indexing="ij")
        w_ref = np.prod(np.stack([m.ravel() for m in wmesh], axis=1), axis=1)
        q = xi.shape[0]

        v_cache = {}      # corner -> hat values (q,)
        grad_cache = {}   # (corner, halfwidth) -> physical hat gradient (q, dbar)
        w_cache = {}      # halfwidth -> quadrature weights with Jacobian (q,)
        blocks = {}       # element key -> (block id, lo, hi)
        points = []
        entry_point, entry_patch = [], []
        entry_v, entry_grad, entry_w = [], [], []

        for k, patch in enumerate(patches):
            _check_patch(problem, patch)
            h = patch.halfwidth
            w_elem = w_cache.get(h)
            if w_elem is None:
                jac = 1.0
                for hj in h:
                    jac *= hj / 2.0
                w_elem = w_ref * jac
                w_cache[h] = w_elem
            for sigma, lo, hi, corner in patch_elements(patch):
                if patch.lattice is not None:
                    # neighbors on one lattice share the element bitwise;
                    # the first patch to claim a cell fixes its geometry
                    cell = tuple(int(patch.lattice[j]) - 1 + sigma[j]
                                 for j in range(dbar))
                    key = (cell, h)
                else:
                    key = (lo, hi)
                hit = blocks.get(key)
                if hit is None:
                    block = len(points)
                    pts = np.empty((q, dbar))
                    for j in range(dbar):
                        pts[:, j] = lo[j] + (xi[:, j] + 1.0) * 0.5 * (hi[j] - lo[j])
                    points.append(pts)
                    blocks[key] = (block, lo, hi)
                else:
                    block, olo, ohi = hit
                    drift = max(max(abs(a - b) for a, b in zip(olo, lo)),
                                max(abs(a - b) for a, b in zip(ohi, hi)))
                    if drift > 1e-9 * max(h):
                        raise ContractError(
                            "lattice indices are inconsistent with patch geometry")
                v = v_cache.get(corner)
                if v is None:
                    v = np.asarray(shape_nd(corner, xi))
                    v_cache[corner] = v
                g = grad_cache.get((corner, h))
                if g is None:
                    g = shape_grad_physical(corner, xi, list(h))
                    grad_cache[(corner, h)] = g
                entry_point.append(block * q + np.arange(q, dtype=np.intp))
                entry_patch.append(np.full(q, k, dtype=np.intp))
                entry_v.append(v)
                entry_grad.append(g)
                entry_w.append(w_elem)

        self.points = np.concatenate(points, axis=0)
        self._entry_point = np.concatenate(entry_point)
        self._entry_patch = np.concatenate(entry_patch)
        self._entry_v = np.concatenate(entry_v)
        self._entry_w = np.concatenate(entry_w)
        grad = np.concatenate(entry_grad, axis=0)
        if td:
            self._entry_vdot = grad[:, 0]
            self._entry_gradx = grad[:, 1:]
        else:
            self._entry_vdot = None
            self._entry_gradx = grad

    def _coefficients(self, p):
        key = _param_key(p)
        hit = self._cache.get(key)
        if hit is None:
            hit = self._build_coefficients(p)
            self._cache[key] = hit
        return hit

    def _build_coefficients(self, p):
        problem = self.problem
        pts = self.points
        n = pts.shape[0]
        td = problem.is_time_dependent
        t = pts[:, 0] if td else None
        x = [pts[:, j] for j in range(1 if td else 0, pts.shape[1])]
        kap = _data_lane(problem.kappa, t, x, p, n)
        vel = _velocity_lanes(problem, t, x, p, n)
        src = _data_lane(problem.source, t, x, p, n)
        ep = self._entry_point
        kap_e = kap[ep]
        v = self._entry_v
        w = self._entry_w
        A = np.empty((ep.size, problem.spatial_dim))
        for j in range(problem.spatial_dim):
            A[:, j] = w * (kap_e * self._entry_gradx[:, j] + vel[j][ep] * v)
        B = -(w * self._entry_vdot) if td else None
        S = np.bincount(self._entry_patch, weights=w * src[ep] * v,
                        minlength=self.n_v)
        return _Coefficients(A, B, S)

    def patch_terms(self, value, grads, p=None):
        """Variational terms l(f, v_k), one lane per patch.

        ``grads`` lists the spatial gradient lanes of the field on
        ``points``; ``value`` only enters for time-dependent problems.
        """
        co = self._coefficients(p)
        ep = self._entry_point
        acc = None
        for j in range(self.problem.spatial_dim):
            term = ad.gather(grads[j], ep) * co.A[:, j]
            acc = term if acc is None else acc + term
        if co.B is not None:
            acc = acc + ad.gather(value, ep) * co.B
        return ad.segment_sum(acc, self._entry_patch, self.n_v) - co.S

    def loss_parts(self, value, grads, ic_values=None, bc_values=None, p=None):
        """Weighted loss for one parameter sample.

        Returns (total, LossBreakdown); the total keeps whatever lane type
        the inputs carried (a tape Var during training, a float otherwise)
        while the breakdown is always detached floats.
        """
        lk = self.patch_terms(value, grads, p)
        var_term = ad.vsum(lk * lk) * self.weights.w1
        ic_term, bc_term = self._penalty.weighted_terms(
            self.weights, ic_values, bc_values, p)
        total = var_term + ic_term + bc_term
        return total, _breakdown(var_term, ic_term, bc_term)

    def loss_for_field(self, field, p=None):
        """Evaluate a generic ``f(t, x, p)`` field on every table."""
        td = self.problem.is_time_dependent
        value, grads = _field_lanes(field, self.points, td, p)
        ic_values = None
        if self.ic_inputs is not None and self.weights.w2 > 0.0:
            ic_values = _field_values(field, self.ic_inputs, True, p)
        bc_values = None
        if self.bc_inputs is not None and self.weights.w3 > 0.0:
            bc_values = _field_values(field, self.bc_inputs, td, p)
        return self.loss_parts(value, grads, ic_values, bc_values, p)


# ---------------------------------------------------------------------------
# public operations


def variational_term(field, patch, problem, p=None, order=DEFAULT_QUADRATURE_ORDER):
    """Weak-form pairing l(f, v) of a field with one hat test function."""
    td = problem.is_time_dependent
    _check_patch(problem, patch)

    def integrand(point, v, grad_x, v_dot):
        if td:
            t = float(point[0])
            x = [float(c) for c in point[1:]]

            def frozen(tv, xv, pv):
                return field(t, xv, pv)

            value, _, grad = ad.grad_wrt_inputs(frozen, None, x, p)
        else:
            t = None
            x = [float(c) for c in point]
            value, _, grad = ad.grad_wrt_inputs(field, None, x, p)
        kap = float(ad.detach(problem.kappa(t, x, p)))
        vel = [float(ad.detach(c))
               for c in _as_components(problem.velocity(t, x, p))]
        s = float(ad.detach(problem.source(t, x, p)))
        out = 0.0
        for j in range(problem.spatial_dim):
            out = out + float(ad.detach(grad[j])) * (kap * grad_x[j] + vel[j] * v)
        if td:
            out = out - float(ad.detach(value)) * v_dot
        return out - s * v

    return float(integrate_over_support(integrand, patch, order, time_axis=td))


def loss_single(field, training_set, problem, weights, p=None,
                order=DEFAULT_QUADRATURE_ORDER):
    """Loss breakdown for one parameter sample."""
    assembly = LossAssembly(problem, training_set, weights, order)
    _, breakdown = assembly.loss_for_field(field, p)
    return breakdown


def total_loss(field, training_set, problem, weights,
               order=DEFAULT_QUADRATURE_ORDER):
    """Sum of single-sample losses over the training set's parameter samples."""
    assembly = LossAssembly(problem, training_set, weights, order)
    total = 0.0
    for p in training_set.param_samples:
        _, breakdown = assembly.loss_for_field(field, p)
        total += breakdown.total
    return total


def residual_from_lanes(points, value, dt, grads, seconds, problem, p=None):
    """Strong-form PDE residual from precomputed derivative lanes.

    Works on plain numpy lanes and tape Vars alike; the PDE data are
    evaluated detached.  ``dt`` is ignored for steady problems.
    """
    td = problem.is_time_dependent
    n = points.shape[0]
    t = points[:, 0] if td else None
    x = [points[:, j] for j in range(1 if td else 0, points.shape[1])]
    kap = _data_lane(problem.kappa, t, x, p, n)
    vel = _velocity_lanes(problem, t, x, p, n)
    src = _data_lane(problem.source, t, x, p, n)
    r = dt if td else 0.0
    for j in range(problem.spatial_dim):
        r = r + vel[j] * grads[j] - kap * seconds[j]
    if not problem.kappa.is_constant:
        _, _, kgrad = ad.grad_wrt_inputs(problem.kappa, t, x, p)
        for j in range(problem.spatial_dim):
            kg = np.broadcast_to(np.asarray(ad.detach(kgrad[j]),
                                            dtype=np.float64), (n,))
            r = r - kg * grads[j]
    return r - src


def residual_loss_baseline(field, points, training_set, problem, weights, p=None):
    """Strong-form collocation loss, the comparison baseline.

    The breakdown's ``variational`` slot holds w1 times the mean squared
    residual over the collocation points; the IC and BC penalties are
    identical to the weak-form loss.
    """
    if not isinstance(weights, LossWeights):
        weights = LossWeights(*weights)
    points = np.asarray(points, dtype=np.float64)
    td = problem.is_time_dependent
    dbar = problem.spatial_dim + (1 if td else 0)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    if points.ndim != 2 or points.shape[1] != dbar or points.shape[0] == 0:
        raise ContractError(
            f"collocation points must be nonempty rows of {dbar} coordinates")
    t = points[:, 0] if td else None
    x = [points[:, j] for j in range(1 if td else 0, dbar)]
    value, dt, grads = ad.grad_wrt_inputs(field, t, x, p)
    seconds = ad.second_spatial_derivatives(field, t, x, p)
    r = residual_from_lanes(points, value, dt, grads, seconds, problem, p)
    res_term = ad.mean(r * r) * weights.w1
    penalty = _PenaltySet(problem, training_set)
    ic_values = None
    if penalty.ic_inputs is not None and weights.w2 > 0.0:
        ic_values = _field_values(field, penalty.ic_inputs, True, p)
    bc_values = None
    if penalty.bc_inputs is not None and weights.w3 > 0.0:
        bc_values = _field_values(field, penalty.bc_inputs, td, p)
    ic_term, bc_term = penalty.weighted_terms(weights, ic_values, bc_values, p)
    return _breakdown(res_term, ic_term, bc_term)
