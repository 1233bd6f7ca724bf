"""Training loop: uniform grids, per-sample ADAM steps, adaptive refinement.

The trainer generates a uniform space-time training set, then minimizes the
weak-form loss with full-batch ADAM, taking one optimizer step per parameter
sample per epoch.  When the windowed total loss stops improving it draws new
training points proportionally to the PDE residual (and the data misfits for
the initial/boundary terms) and keeps going.  A strong-form collocation mode
trains against the pointwise residual instead, serving as the comparison
baseline at matched point budgets.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import mlp
from ._errors import ConfigError, ContractError, NumericsError
from .fe_basis import ElementPatch
from .residual_sampler import (bic_error_sample, estimate_max,
                               param_integrated_residual, rejection_sample)
from .variational_loss import (DEFAULT_QUADRATURE_ORDER, LossAssembly,
                               LossBreakdown, LossWeights, TrainingSet,
                               _param_key, _PenaltySet, residual_from_lanes)

DEFAULT_BC_DENSITY = 20.0  # spatial boundary points per unit segment length


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0.0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("ADAM betas must lie in [0, 1)")
        if not self.epsilon > 0.0:
            raise ConfigError("epsilon must be positive")


@dataclass(frozen=True)
class ConvergenceConfig:
    window: int = 500
    threshold: float = 1e-3

    def __post_init__(self):
        if int(self.window) < 1:
            raise ConfigError("convergence window must be at least 1 epoch")
        object.__setattr__(self, "window", int(self.window))
        if not self.threshold >= 0.0:
            raise ConfigError("convergence threshold must be nonnegative")


LOSS_KINDS = ("variational", "residual")


@dataclass(frozen=True)
class TrainConfig:
    """Epoch budget, loss weights, and refinement behavior."""

    epochs: int
    weights: LossWeights = LossWeights()
    seed: int = 0
    frac: float = 0.5
    adam: AdamConfig = AdamConfig()
    convergence: ConvergenceConfig = ConvergenceConfig()
    max_adaptive_rounds: int = 1
    support_scale: float = 1.0
    loss: str = "variational"
    shuffle: bool = False
    quadrature_order: int = DEFAULT_QUADRATURE_ORDER

    def __post_init__(self):
        if int(self.epochs) < 1:
            raise ConfigError("epochs must be at least 1")
        object.__setattr__(self, "epochs", int(self.epochs))
        if not isinstance(self.weights, LossWeights):
            object.__setattr__(self, "weights", LossWeights(*self.weights))
        if not 0.0 <= self.frac <= 1.0:
            raise ConfigError("refinement fraction must lie in [0, 1]")
        if int(self.max_adaptive_rounds) < 0:
            raise ConfigError("max_adaptive_rounds must be nonnegative")
        object.__setattr__(self, "max_adaptive_rounds",
                           int(self.max_adaptive_rounds))
        if not self.support_scale > 0.0:
            raise ConfigError("support_scale must be positive")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}")


@dataclass(frozen=True)
class TrainingCounts:
    """Uniform training-set sizes.

    ``n_v`` lists interior test functions per space-time axis, time first
    for time-dependent problems.  ``n_ic`` (int for 1D, per-axis tuple for
    2D) defaults to the spatial entries of ``n_v``; ``n_bc`` maps segment
    index to the SPATIAL point count on that segment and defaults to
    ``bc_density`` points per unit length (one point for 1D endpoints);
    time-dependent boundary sets get ``n_bc_time`` (default ``n_v[0]``)
    time samples per spatial point.  Parameter samples come from
    ``param_samples``, a uniform grid of ``n_param`` per axis, or the
    problem's configured samples, in that order of precedence.
    """

    n_v: tuple
    n_ic: object = None
    n_bc: dict | None = None
    n_bc_time: int | None = None
    bc_density: float = DEFAULT_BC_DENSITY
    n_param: int | None = None
    param_samples: tuple | None = None

    def __post_init__(self):
        n_v = tuple(int(n) for n in np.atleast_1d(np.asarray(self.n_v)))
        object.__setattr__(self, "n_v", n_v)
        if any(n < 1 for n in n_v):
            raise ConfigError("n_v entries must be positive")
        if not self.bc_density > 0.0:
            raise ConfigError("bc_density must be positive")


# ---------------------------------------------------------------------------
# uniform training grids


def _axis_bounds(problem):
    td = problem.is_time_dependent
    return ([(0.0, problem.time_horizon)] if td else []) + problem.domain.bbox()


def grid_spacing(problem, n_v):
    """Spacing of the uniform training lattice: (hi - lo) / (n + 1) per axis."""
    bounds = _axis_bounds(problem)
    if len(n_v) != len(bounds):
        raise ConfigError(
            f"n_v needs {len(bounds)} entries (time first) for this problem")
    return tuple((hi - lo) / (n + 1) for (lo, hi), n in zip(bounds, n_v))


def _interior_lattice(problem, n_v):
    """Patch centers on the interior nodes of a uniform space-time grid."""
    td = problem.is_time_dependent
    bounds = _axis_bounds(problem)
    deltas = grid_spacing(problem, n_v)
    axes = [lo + d * np.arange(1, n + 1)
            for (lo, _), d, n in zip(bounds, deltas, n_v)]
    mesh = np.meshgrid(*axes, indexing="ij")
    centers = np.stack([m.ravel() for m in mesh], axis=1)
    idx = np.meshgrid(*[np.arange(1, n + 1) for n in n_v], indexing="ij")
    lattice = np.stack([m.ravel() for m in idx], axis=1)

    if problem.spatial_dim == 2:
        keep = _supports_inside(problem, centers, deltas, td)
        centers = centers[keep]
        lattice = lattice[keep]
    patches = tuple(
        ElementPatch(tuple(c), deltas, tuple(int(k) for k in latt))
        for c, latt in zip(centers, lattice))
    if not patches:
        raise ConfigError("no interior patch fits the domain at these counts")
    return patches, deltas


def _supports_inside(problem, centers, halfwidth, td):
    """Mask of patches whose spatial support corners lie in the domain."""
    off = 1 if td else 0
    x = centers[:, off:]
    h = np.asarray(halfwidth[off:])
    keep = np.ones(centers.shape[0], dtype=bool)
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            corner = x + np.array([sx, sy]) * h
            keep &= np.asarray(problem.domain.contains(corner), dtype=bool)
    return keep


def _ic_grid(problem, n_ic):
    d = problem.spatial_dim
    counts = tuple(int(n) for n in np.atleast_1d(np.asarray(n_ic)))
    if len(counts) != d or any(n < 1 for n in counts):
        raise ConfigError(f"n_ic needs {d} positive entries")
    axes = [np.linspace(lo, hi, n)
            for (lo, hi), n in zip(problem.domain.bbox(), counts)]
    if d == 1:
        return axes[0].reshape(-1, 1)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=1)
    return pts[np.asarray(problem.domain.contains(pts), dtype=bool)]


def _bc_grid(problem, segment, n_spatial, n_time):
    if problem.spatial_dim == 1:
        spatial = problem.domain.segment_points(segment, 1)
    else:
        spatial = problem.domain.segment_points(segment, n_spatial)
    if not problem.is_time_dependent:
        return spatial
    t = np.linspace(0.0, problem.time_horizon, n_time)
    m = spatial.shape[0]
    return np.column_stack([np.repeat(t, m),
                            np.tile(spatial, (t.size, 1))])


def _segment_counts(problem, counts):
    if counts.n_bc is not None:
        out = {}
        for i, n in counts.n_bc.items():
            if i not in problem.boundary:
                raise ConfigError(f"problem has no boundary data for segment {i}")
            if int(n) < 0:
                raise ConfigError("boundary counts must be nonnegative")
            if int(n) > 0:
                out[int(i)] = int(n)
        return out
    out = {}
    for i in sorted(problem.boundary):
        if problem.spatial_dim == 1:
            out[i] = 1
        else:
            length = problem.domain.segment_length(i)
            if length <= 0.0:
                raise ConfigError(f"segment {i} has zero length")
            out[i] = max(2, int(round(counts.bc_density * length)))
    return out


def _param_grid(problem, counts):
    if counts.param_samples is not None:
        return tuple(tuple(float(v) for v in np.atleast_1d(s))
                     for s in counts.param_samples)
    if counts.n_param is not None:
        if problem.parameters is None:
            raise ConfigError("n_param given but the problem has no parameters")
        n = int(counts.n_param)
        if n < 1:
            raise ConfigError("n_param must be positive")
        axes = [np.linspace(lo, hi, n) if n > 1 else np.array([0.5 * (lo + hi)])
                for lo, hi in problem.parameters.bounds]
        mesh = np.meshgrid(*axes, indexing="ij")
        return tuple(tuple(row) for row in
                     np.stack([m.ravel() for m in mesh], axis=1))
    return tuple(problem.param_samples())


def generate_uniform_grid(problem, counts):
    """Uniform TrainingSet over [0,T] x domain (x parameter samples).

    Interior hat supports sit on the interior nodes of a uniform lattice
    with element size equal to the node spacing, so every support stays
    inside the space-time region and adjacent supports overlap like a
    finite-element basis.  Initial points grid the domain, boundary points
    grid [0,T] x segment.
    """
    if not isinstance(counts, TrainingCounts):
        counts = TrainingCounts(**counts) if isinstance(counts, dict) \
            else TrainingCounts(counts)
    td = problem.is_time_dependent
    patches, _ = _interior_lattice(problem, counts.n_v)

    ic = None
    if td:
        n_ic = counts.n_ic
        if n_ic is None:
            n_ic = counts.n_v[1:]
        ic = _ic_grid(problem, n_ic)

    n_time = counts.n_bc_time
    if n_time is None:
        n_time = counts.n_v[0] if td else 0
    bc = {}
    for i, n_spatial in _segment_counts(problem, counts).items():
        bc[i] = _bc_grid(problem, i, n_spatial, int(n_time))

    return TrainingSet(interior=patches, ic_points=ic, bc_points=bc,
                       param_samples=_param_grid(problem, counts))


def resolve_counts(problem, counts):
    """TrainingCounts with every defaulted field made explicit.

    Feeding the result back through :func:`generate_uniform_grid` rebuilds
    the same training set; run manifests store the resolved form.
    """
    if not isinstance(counts, TrainingCounts):
        counts = TrainingCounts(**counts) if isinstance(counts, dict) \
            else TrainingCounts(counts)
    grid_spacing(problem, counts.n_v)  # validates the axis count
    td = problem.is_time_dependent
    n_ic = None
    if td:
        n_ic = counts.n_ic if counts.n_ic is not None else counts.n_v[1:]
        n_ic = tuple(int(n) for n in np.atleast_1d(np.asarray(n_ic)))
    n_time = counts.n_bc_time
    if n_time is None:
        n_time = counts.n_v[0] if td else 0
    params = _param_grid(problem, counts)
    return TrainingCounts(
        n_v=counts.n_v, n_ic=n_ic, n_bc=_segment_counts(problem, counts),
        n_bc_time=int(n_time), bc_density=counts.bc_density,
        param_samples=None if params == (None,) else params)


# ---------------------------------------------------------------------------
# ADAM


@dataclass
class AdamState:
    """Parameter vector with first/second gradient moments."""

    params: np.ndarray
    config: AdamConfig
    m: np.ndarray
    v: np.ndarray
    count: int = 0

    @classmethod
    def fresh(cls, params, config=AdamConfig()):
        params = np.asarray(params, dtype=np.float64)
        return cls(params=params.copy(), config=config,
                   m=np.zeros_like(params), v=np.zeros_like(params))


def adam_step(state, gradient):
    """One bias-corrected ADAM update; mutates and returns ``state``."""
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.params.shape:
        raise ContractError("gradient length does not match the parameters")
    ad.assert_finite("gradient", g)
    cfg = state.config
    state.count += 1
    state.m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    state.v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    mhat = state.m / (1.0 - cfg.beta1 ** state.count)
    vhat = state.v / (1.0 - cfg.beta2 ** state.count)
    state.params = state.params - cfg.learning_rate * mhat / (np.sqrt(vhat)
                                                              + cfg.epsilon)
    return state


def convergence_check(totals, window, threshold):
    """True iff the windowed-mean total stopped improving.

    Compares the mean of the last ``window`` entries against the entry just
    before that window; relative improvement below ``threshold`` (or any
    worsening) counts as converged.  Needs ``window + 1`` entries.
    """
    w = int(window)
    if len(totals) < w + 1:
        return False
    ref = float(totals[-w - 1])
    now = float(np.mean(np.asarray(totals[-w:], dtype=np.float64)))
    return ref - now <= threshold * abs(ref)


# ---------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    """Everything a run produced: parameters, histories, grown training set."""

    adam: AdamState
    mlp_config: mlp.MLPConfig
    normalization: mlp.Normalization
    training_set: TrainingSet
    loss_history: list = field(default_factory=list)
    residual_history: list = field(default_factory=list)
    additions: list = field(default_factory=list)
    uniform_counts: dict = field(default_factory=dict)
    rounds_used: int = 0
    epochs_run: int = 0

    @property
    def params(self):
        return self.adam.params

    def model(self):
        return mlp.Model(self.mlp_config, self.normalization, self.adam.params)


def _augment(rows, p):
    if p is None:
        return rows
    cols = np.broadcast_to(np.asarray(p, dtype=np.float64),
                           (rows.shape[0], len(p)))
    return np.hstack([rows, cols])


class _Batches:
    """Normalized input tables for one training set, cached per sample."""

    def __init__(self, problem, training_set, weights, order, norm, kind):
        self.problem = problem
        self.norm = norm
        self.scales = norm.scales()
        td = problem.is_time_dependent
        d = problem.spatial_dim
        self.spatial_idx = tuple(range(1, 1 + d)) if td else tuple(range(d))
        self.centers = np.array([p.center for p in training_set.interior],
                                dtype=np.float64)
        if kind == "variational":
            self.assembly = LossAssembly(problem, training_set, weights, order)
            self.penalty = self.assembly._penalty
            self.interior = self.assembly.points
        else:
            self.assembly = None
            self.penalty = _PenaltySet(problem, training_set)
            self.interior = self.centers
        self._cache = {}

    def inputs(self, name, rows, p):
        key = (name, _param_key(p))
        hit = self._cache.get(key)
        if hit is None:
            hit = self.norm.apply(_augment(rows, p))
            self._cache[key] = hit
        return hit

    def interior_inputs(self, p):
        return self.inputs("interior", self.interior, p)

    def center_inputs(self, p):
        return self.inputs("centers", self.centers, p)

    def ic_inputs(self, p):
        if self.penalty.ic_inputs is None:
            return None
        return self.inputs("ic", self.penalty.ic_inputs, p)

    def bc_inputs(self, p):
        if self.penalty.bc_inputs is None:
            return None
        return self.inputs("bc", self.penalty.bc_inputs, p)


def _step_variational(batches, config, weights_cfg, adam, p):
    tape = ad.Tape()
    binding, net = mlp.bind_params(tape, config, adam.params)
    scales = batches.scales
    value, firsts, _ = mlp.eval_lanes(config, net, batches.interior_inputs(p),
                                      scales, first=batches.spatial_idx)
    grads = [firsts[j] for j in batches.spatial_idx]
    ic_values = bc_values = None
    xi = batches.ic_inputs(p)
    if xi is not None and weights_cfg.w2 > 0.0:
        ic_values = mlp.eval_lanes(config, net, xi, scales)[0]
    xb = batches.bc_inputs(p)
    if xb is not None and weights_cfg.w3 > 0.0:
        bc_values = mlp.eval_lanes(config, net, xb, scales)[0]
    total, breakdown = batches.assembly.loss_parts(value, grads,
                                                   ic_values, bc_values, p)
    adam_step(adam, ad.grad_wrt_params(total, binding))
    return breakdown


def _residual_lanes(batches, config, net, p):
    """Residual on the patch centers from first+second derivative lanes."""
    td = batches.problem.is_time_dependent
    sp = batches.spatial_idx
    first = ((0,) + sp) if td else sp
    value, firsts, seconds = mlp.eval_lanes(
        config, net, batches.center_inputs(p), batches.scales,
        first=first, second=sp)
    dt = firsts[0] if td else None
    grads = [firsts[j] for j in sp]
    secs = [seconds[j] for j in sp]
    return residual_from_lanes(batches.centers, value, dt, grads, secs,
                               batches.problem, p)


def _step_residual(batches, config, weights_cfg, adam, p):
    tape = ad.Tape()
    binding, net = mlp.bind_params(tape, config, adam.params)
    scales = batches.scales
    r = _residual_lanes(batches, config, net, p)
    res_term = ad.mean(r * r) * weights_cfg.w1
    ic_values = bc_values = None
    xi = batches.ic_inputs(p)
    if xi is not None and weights_cfg.w2 > 0.0:
        ic_values = mlp.eval_lanes(config, net, xi, scales)[0]
    xb = batches.bc_inputs(p)
    if xb is not None and weights_cfg.w3 > 0.0:
        bc_values = mlp.eval_lanes(config, net, xb, scales)[0]
    ic_term, bc_term = batches.penalty.weighted_terms(weights_cfg, ic_values,
                                                      bc_values, p)
    total = res_term + ic_term + bc_term
    breakdown = LossBreakdown(
        float(ad.detach(res_term)), float(ad.detach(ic_term)),
        float(ad.detach(bc_term)), float(ad.detach(total)))
    adam_step(adam, ad.grad_wrt_params(total, binding))
    return breakdown


def _residual_norm(batches, config, params, samples):
    net = mlp.unpack(config, params)
    acc = 0.0
    n = 0
    for p in samples:
        r = _residual_lanes(batches, config, net, p)
        acc += float(np.sum(np.square(r)))
        n += r.shape[0]
    return math.sqrt(acc / n)


# ---------------------------------------------------------------------------
# adaptive refinement


def probe_resolution(problem, halfwidth):
    """Residual probe grid at roughly twice the training resolution."""
    return tuple(max(2, int(round(2.0 * (hi - lo) / h)) + 1)
                 for (lo, hi), h in zip(_axis_bounds(problem), halfwidth))


def _sample_patches(problem, field_fn, samples, count, halfwidth, scale, rng):
    """Rejection-sample interior patches with supports kept inside."""
    h_opt = tuple(scale * h for h in halfwidth)
    rf = param_integrated_residual(field_fn, problem, samples, margin=h_opt)
    estimate_max(rf, probe_resolution(problem, halfwidth))
    td = problem.is_time_dependent
    out = []
    for _ in range(50):
        pts = rejection_sample(rf, count - len(out), rng)
        if problem.spatial_dim == 2:
            keep = _supports_inside(problem, pts, h_opt, td)
            pts = pts[keep]
        out.extend(ElementPatch(tuple(row), h_opt) for row in pts)
        if len(out) >= count:
            return tuple(out[:count])
    raise NumericsError("could not place refinement supports inside the domain")


def _grow_training_set(problem, state, cfg, rng):
    ts = state.training_set
    uc = state.uniform_counts
    q = cfg.frac
    field_fn = state.model().as_field(problem.is_time_dependent)
    samples = list(ts.param_samples)
    halfwidth = ts.interior[0].halfwidth

    n_add = int(math.floor(q * uc["interior"]))
    new_patches = ()
    if n_add > 0:
        new_patches = _sample_patches(problem, field_fn, samples, n_add,
                                      halfwidth, cfg.support_scale, rng)

    n_ic_add = int(math.floor(q * uc["ic"]))
    bc_add = {i: int(math.floor(q * n)) for i, n in uc["bc"].items()}
    bc_add = {i: n for i, n in bc_add.items() if n > 0}
    ic_new, bc_new = bic_error_sample(field_fn, problem,
                                      (n_ic_add, bc_add), rng,
                                      param_samples=samples)

    ic = ts.ic_points
    if ic_new is not None:
        ic = np.vstack([ic, ic_new]) if ic is not None else ic_new
    bc = dict(ts.bc_points)
    for i, rows in bc_new.items():
        if rows.shape[0]:
            bc[i] = np.vstack([bc[i], rows]) if i in bc else rows

    grown = TrainingSet(interior=ts.interior + new_patches, ic_points=ic,
                        bc_points=bc, param_samples=ts.param_samples)
    record = {"interior": len(new_patches),
              "ic": 0 if ic_new is None else int(ic_new.shape[0]),
              "bc": {i: int(rows.shape[0]) for i, rows in bc_new.items()}}
    return grown, record


# ---------------------------------------------------------------------------
# the training loop


def train(problem, mlp_config, train_config, counts):
    """Run the full training procedure and return the final TrainState.

    ``counts`` is a TrainingCounts (or an equivalent dict, or a prebuilt
    TrainingSet).  One ADAM step is taken per parameter sample per epoch on
    the full point batch; the convergence test triggers residual-driven
    point additions while adaptive rounds remain.
    """
    if not isinstance(train_config, TrainConfig):
        raise ConfigError("train_config must be a TrainConfig")
    if mlp_config.input_dim != problem.input_dim:
        raise ConfigError(
            f"model takes {mlp_config.input_dim} inputs but the problem "
            f"has {problem.input_dim}")
    if isinstance(counts, TrainingSet):
        training_set = counts
    else:
        training_set = generate_uniform_grid(problem, counts)

    cfg = train_config
    norm = mlp.Normalization.from_ranges(problem.input_ranges())
    adam = AdamState.fresh(mlp.initialize(mlp_config, cfg.seed), cfg.adam)
    state = TrainState(
        adam=adam, mlp_config=mlp_config, normalization=norm,
        training_set=training_set,
        uniform_counts={
            "interior": len(training_set.interior),
            "ic": training_set.n_ic,
            "bc": {i: rows.shape[0]
                   for i, rows in training_set.bc_points.items()},
        })

    step = _step_variational if cfg.loss == "variational" else _step_residual
    batches = _Batches(problem, training_set, cfg.weights,
                       cfg.quadrature_order, norm, cfg.loss)
    sample_rng = np.random.default_rng([cfg.seed, 1789])
    shuffle_rng = np.random.default_rng([cfg.seed, 923])
    totals = []
    window = cfg.convergence.window
    last_event = 0

    for epoch in range(1, cfg.epochs + 1):
        samples = list(state.training_set.param_samples)
        order = shuffle_rng.permutation(len(samples)) if cfg.shuffle \
            else range(len(samples))
        acc = np.zeros(4)
        try:
            for j in order:
                br = step(batches, mlp_config, cfg.weights, adam, samples[j])
                acc += (br.variational, br.ic, br.bc, br.total)
            rnorm = _residual_norm(batches, mlp_config, adam.params, samples)
        except NumericsError as err:
            wrapped = NumericsError(f"epoch {epoch}: {err}")
            wrapped.state = state
            raise wrapped from err
        breakdown = LossBreakdown(*(float(v) for v in acc))
        if not np.isfinite(breakdown.total):
            bad = [name for name in ("variational", "ic", "bc")
                   if not np.isfinite(getattr(breakdown, name))]
            err = NumericsError(
                f"non-finite loss at epoch {epoch} "
                f"({', '.join(bad)} diverged)")
            err.state = state
            raise err
        state.loss_history.append(breakdown)
        state.residual_history.append(rnorm)
        totals.append(breakdown.total)
        state.epochs_run = epoch

        if (state.rounds_used < cfg.max_adaptive_rounds
                and cfg.frac > 0.0
                and epoch - last_event > window
                and convergence_check(totals, window,
                                      cfg.convergence.threshold)):
            grown, record = _grow_training_set(problem, state, cfg, sample_rng)
            state.training_set = grown
            batches = _Batches(problem, grown, cfg.weights,
                               cfg.quadrature_order, norm, cfg.loss)
            state.rounds_used += 1
            record["epoch"] = epoch
            state.additions.append(record)
            last_event = epoch

    return state
