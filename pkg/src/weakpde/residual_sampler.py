"""Residual fields and residual-proportional rejection sampling.

The strong-form PDE residual of a trained field marks where the field is
worst; drawing new training points with acceptance probability |r| / max |r|
concentrates refinement there.  The same machinery samples initial- and
boundary-condition points proportionally to the squared data misfit, and a
parametric field can be sampled against the residual summed over parameter
samples.

Candidates are drawn uniformly over the (margin-shrunk) bounding box of the
space-time region and thinned by the acceptance test, so every sampler here
is reproducible from its seed.  Residual magnitudes are normalized by a max
estimated on a uniform probe grid; an identically zero field degrades to
uniform sampling with a warning instead of dividing by zero.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._errors import ConfigError, ContractError, NumericsError
from .pde_problem import transport_residual

_CHUNK = 8192
CANDIDATE_BUDGET_FACTOR = 1000


@dataclass
class ResidualField:
    """Signed residual evaluator over a sampling region.

    ``evaluator(t, x, p)`` accepts coordinate lanes and may return signed
    values; acceptance always uses the magnitude.  ``bounds`` lists the
    sampling box per axis, time first for time-dependent fields, margins
    already applied.  ``max_abs`` is the probe-grid maximum cached by
    :func:`estimate_max`; sampling requires it.
    """

    evaluator: object
    bounds: tuple
    time_dependent: bool
    domain: object = None
    p: tuple | None = None
    max_abs: float | None = None
    probe_resolution: tuple | None = None

    def __post_init__(self):
        self.bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if not self.bounds:
            raise ContractError("a residual field needs at least one axis")
        if any(hi <= lo for lo, hi in self.bounds):
            raise ConfigError("sampling region is empty (margin too large?)")

    @property
    def dim(self):
        return len(self.bounds)

    def abs_at(self, rows):
        """|residual| lanes at (n, dim) rows."""
        td = self.time_dependent
        t = rows[:, 0] if td else None
        x = [rows[:, j] for j in range(1 if td else 0, rows.shape[1])]
        out = ad.detach(self.evaluator(t, x, self.p))
        out = np.broadcast_to(np.asarray(out, dtype=np.float64), (rows.shape[0],))
        ad.assert_finite("residual values", out)
        return np.abs(out)

    def admissible(self, rows):
        """Bounding-box candidates that actually lie in the spatial domain."""
        if self.domain is None or self.domain.dim == 1:
            return np.ones(rows.shape[0], dtype=bool)
        off = 1 if self.time_dependent else 0
        return np.asarray(self.domain.contains(rows[:, off:]), dtype=bool)


def _shrunk_bounds(problem, margin):
    td = problem.is_time_dependent
    bounds = ([(0.0, problem.time_horizon)] if td else []) + problem.domain.bbox()
    m = np.broadcast_to(np.asarray(margin, dtype=np.float64), (len(bounds),))
    if np.any(m < 0.0):
        raise ConfigError("sampling margins must be nonnegative")
    return tuple((lo + mj, hi - mj) for (lo, hi), mj in zip(bounds, m))


def residual_field(field, problem, p=None, margin=0.0):
    """Strong-form residual of ``field`` wrapped for sampling.

    ``margin`` shrinks the sampling box per axis (scalar or one value per
    axis) so that a test-function support centered at any sampled point
    stays inside the domain.
    """

    def evaluator(t, x, pp):
        return transport_residual(field, t, x, problem, pp)

    return ResidualField(evaluator, _shrunk_bounds(problem, margin),
                         problem.is_time_dependent, domain=problem.domain,
                         p=None if p is None else tuple(np.atleast_1d(p)))


def residual(field, t, x, problem, p=None):
    """Strong-form PDE residual at a point (or coordinate lanes)."""
    return transport_residual(field, t, x, problem, p)


def estimate_max(field, grid_resolution):
    """Max |residual| over a uniform probe grid; cached on the field."""
    res = np.broadcast_to(np.asarray(grid_resolution, dtype=int),
                          (field.dim,)).tolist()
    if any(r < 2 for r in res):
        raise ContractError("probe grid needs at least 2 nodes per axis")
    axes = [np.linspace(lo, hi, r) for (lo, hi), r in zip(field.bounds, res)]
    mesh = np.meshgrid(*axes, indexing="ij")
    rows = np.stack([m.ravel() for m in mesh], axis=1)
    rows = rows[field.admissible(rows)]
    best = float(np.max(field.abs_at(rows))) if rows.shape[0] else 0.0
    field.max_abs = best
    field.probe_resolution = tuple(res)
    return best


def rejection_sample(field, count, rng_seed):
    """Draw ``count`` points with acceptance probability |r| / max |r|.

    Candidates come uniformly from the field's sampling box; the sequence
    is fully determined by ``rng_seed`` (an integer or a Generator).  A
    zero probe maximum degrades to uniform sampling with a warning; an
    acceptance rate so low that 1000x the requested count of candidates
    is exhausted raises ``NumericsError``.
    """
    count = int(count)
    if count < 1:
        raise ContractError("rejection sampling needs count >= 1")
    if field.max_abs is None:
        raise ContractError("run estimate_max before sampling")
    uniform = field.max_abs == 0.0
    if uniform:
        warnings.warn("residual is zero on the probe grid; sampling uniformly",
                      stacklevel=2)
    rng = np.random.default_rng(rng_seed)
    lows = np.array([lo for lo, _ in field.bounds])
    his = np.array([hi for _, hi in field.bounds])
    budget = CANDIDATE_BUDGET_FACTOR * count
    used = 0
    got = 0
    kept = []
    while got < count:
        cand = rng.uniform(lows, his, size=(_CHUNK, field.dim))
        u = rng.uniform(size=_CHUNK)
        ok = field.admissible(cand)
        if uniform:
            accept = ok
        else:
            accept = np.zeros(_CHUNK, dtype=bool)
            if np.any(ok):
                accept[ok] = u[ok] * field.max_abs < field.abs_at(cand[ok])
        picked = cand[accept]
        kept.append(picked)
        got += picked.shape[0]
        used += _CHUNK
        if got < count and used >= budget:
            raise NumericsError(
                f"rejection sampling accepted {got}/{count} points after "
                f"{used} candidates; residual field is degenerate")
    return np.vstack(kept)[:count]


def bic_error_sample(field, problem, counts, rng_seed, probe_resolution=201,
                     param_samples=(None,)):
    """Sample IC/BC penalty points proportionally to the squared data misfit.

    ``counts`` is ``(n_ic, {segment: n})``.  Initial-condition points are
    drawn over the domain with density |f(0,x) - g0(x)|^2; each boundary
    segment is parametrized by arclength and sampled over time x arclength
    with density |f - g_i|^2.  For parametric fields the density sums the
    squared misfit over ``param_samples``.  Returns (ic_points,
    {segment: rows}) shaped like the corresponding ``TrainingSet`` fields.
    """
    n_ic, bc_counts = counts
    n_ic = int(n_ic)
    td = problem.is_time_dependent
    rng = np.random.default_rng(rng_seed)
    samples = [None if p is None else tuple(np.atleast_1d(p))
               for p in param_samples]
    if not samples:
        raise ContractError("misfit sampling needs at least one parameter sample")

    ic_points = None
    if n_ic > 0:
        if not td:
            raise ContractError("steady problems take no initial-condition points")

        def ic_misfit(t, x, p):
            total = None
            for pj in samples:
                diff = np.asarray(ad.detach(
                    field(0.0, x, pj) - problem.initial(0.0, x, pj)),
                    dtype=np.float64)
                total = diff * diff if total is None else total + diff * diff
            return total

        spot = ResidualField(ic_misfit, problem.domain.bbox(), False,
                             domain=problem.domain)
        estimate_max(spot, probe_resolution)
        ic_points = rejection_sample(spot, n_ic, rng)

    bc = {}
    for i in sorted(bc_counts):
        n = int(bc_counts[i])
        if i not in problem.boundary:
            raise ContractError(f"problem has no boundary data for segment {i}")
        if n == 0:
            width = (1 if td else 0) + problem.spatial_dim
            bc[i] = np.zeros((0, width))
            continue
        bc[i] = _sample_segment(field, problem, i, n, rng, probe_resolution,
                                samples)
    return ic_points, bc


def _sample_segment(field, problem, i, n, rng, probe_resolution, samples):
    td = problem.is_time_dependent
    data = problem.boundary[i]
    if problem.spatial_dim == 1:
        end = problem.domain.segment_point(i)

        def to_x(s):
            return [np.broadcast_to(np.float64(end), np.shape(s))]

        axes = []
    else:
        a, b = problem.domain.segment(i)

        def to_x(s):
            return [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]

        axes = [(0.0, 1.0)]
    if td:
        axes = [(0.0, problem.time_horizon)] + axes
    if not axes:
        # steady 1D: the segment is a single point
        rows = np.full((n, 1), problem.domain.segment_point(i))
        return rows

    def misfit(t, x, p):
        s = x[0] if x else np.zeros(np.shape(t))
        phys = to_x(s)
        total = None
        for pj in samples:
            diff = np.asarray(ad.detach(field(t, phys, pj) - data(t, phys, pj)),
                              dtype=np.float64)
            total = diff * diff if total is None else total + diff * diff
        return total

    spot = ResidualField(misfit, axes, td)
    estimate_max(spot, probe_resolution)
    drawn = rejection_sample(spot, n, rng)
    cols = []
    if td:
        cols.append(drawn[:, 0])
        s = drawn[:, 1] if drawn.shape[1] > 1 else np.zeros(n)
    else:
        s = drawn[:, 0]
    if problem.spatial_dim == 1:
        cols.append(np.full(n, problem.domain.segment_point(i)))
    else:
        cols.extend(to_x(s))
    return np.column_stack(cols)


def param_integrated_residual(field, problem, param_samples, margin=0.0):
    """Residual field summing |r(t, x, p_j)| over the parameter samples."""
    samples = [None if p is None else tuple(np.atleast_1d(p))
               for p in param_samples]
    if not samples:
        raise ContractError("parameter integration needs at least one sample")

    def evaluator(t, x, pp):
        total = None
        for pj in samples:
            r = np.abs(np.asarray(ad.detach(
                transport_residual(field, t, x, problem, pj)),
                dtype=np.float64))
            total = r if total is None else total + r
        return total

    return ResidualField(evaluator, _shrunk_bounds(problem, margin),
                         problem.is_time_dependent, domain=problem.domain)
