"""Weak-form loss assembly against closed-form and brute-force oracles."""

import numpy as np
import pytest

from weakpde import autodiff as ad
from weakpde import mlp
from weakpde._errors import ConfigError, ContractError
from weakpde.fe_basis import ElementPatch
from weakpde.pde_problem import (ADPDEProblem, FieldFunction, KAPPA_HIGH,
                                 Polygon2D, benchmark, transport_residual)
from weakpde.reference_oracle import Adv1dtSeries
from weakpde.variational_loss import (LossAssembly, LossBreakdown, LossWeights,
                                      TrainingSet, loss_single,
                                      residual_loss_baseline, total_loss,
                                      variational_term)


def unit_source_steady():
    """Plain steady diffusion on [-1,1]^2 with kappa = 1, u = 0, s = 1."""
    return ADPDEProblem(
        name="unit-source",
        domain=Polygon2D.rectangle(-1.0, 1.0, -1.0, 1.0),
        time_horizon=None,
        kappa=FieldFunction.constant(1.0),
        velocity=FieldFunction.constant([0.0, 0.0]),
        source=FieldFunction.constant(1.0),
        boundary={},
    )


def adv1dt_training_set(nt=10, nx=10, n_ic=25, n_bc=20, params=(None,),
                        problem=None):
    """Uniform lattice of interior patches plus IC/BC point sets."""
    if problem is None:
        problem = benchmark("adv1dt")
    dt = problem.time_horizon / (nt + 1)
    dx = 2.0 / (nx + 1)
    patches = [ElementPatch((i * dt, -1.0 + j * dx), (dt, dx), (i, j))
               for i in range(1, nt + 1) for j in range(1, nx + 1)]
    ic = np.linspace(-1.0, 1.0, n_ic).reshape(-1, 1)
    ts = np.linspace(0.0, problem.time_horizon, n_bc)
    bc = {1: np.column_stack([ts, np.full(n_bc, -1.0)]),
          2: np.column_stack([ts, np.full(n_bc, 1.0)])}
    return problem, TrainingSet(patches, ic, bc, params)


# ---------------------------------------------------------------------------
# variational_term


def test_constant_field_time_dependent_term_vanishes():
    problem = benchmark("adv1dt")

    def field(t, x, p):
        return 3.7

    patch = ElementPatch((1.0, 0.0), (0.3, 0.4))
    assert abs(variational_term(field, patch, problem)) <= 1e-12


def test_manufactured_exact_term_small_and_shrinks_with_h():
    problem = benchmark("manufactured2d", k=1)
    rng = np.random.default_rng(3)
    for _ in range(5):
        center = tuple(rng.uniform(-0.9, 0.9, size=2))
        patch = ElementPatch(center, (0.05, 0.05))
        half = ElementPatch(center, (0.025, 0.025))
        l_h = variational_term(problem.exact, patch, problem)
        l_h2 = variational_term(problem.exact, half, problem)
        l_ref = variational_term(problem.exact, patch, problem, order=5)
        assert abs(l_h) < 1e-4
        assert abs(l_h2) <= 0.5 * abs(l_h)
        # the order-5 value isolates the quadrature error of the default rule
        assert abs(l_ref) < 1e-2 * abs(l_h)


def test_unit_source_term_is_negative_hat_mass():
    problem = unit_source_steady()

    def field(t, x, p):
        return 0.0

    patch = ElementPatch((0.3, 0.2), (0.1, 0.1))
    l = variational_term(field, patch, problem)
    assert abs(l - (-0.01)) < 1e-14


def test_patch_outside_domain_raises():
    problem = benchmark("adv1dt")
    with pytest.raises(ContractError):
        variational_term(lambda t, x, p: 0.0,
                         ElementPatch((1.0, 0.99), (0.2, 0.05)), problem)
    with pytest.raises(ContractError):
        variational_term(lambda t, x, p: 0.0,
                         ElementPatch((0.05, 0.0), (0.2, 0.1)), problem)


def test_patch_dimension_mismatch_raises():
    problem = benchmark("manufactured2d")
    with pytest.raises(ContractError):
        variational_term(lambda t, x, p: 0.0,
                         ElementPatch((0.0,), (0.1,)), problem)


# ---------------------------------------------------------------------------
# loss_single


def test_exact_field_has_zero_ic_bc_penalties():
    problem, ts = adv1dt_training_set(nt=6, nx=6)
    field = Adv1dtSeries(KAPPA_HIGH).as_field()
    out = loss_single(field, ts, problem, LossWeights(1.0, 5.0, 5.0))
    # corner points (t = 0, x = +-1) see sin(pi) rounding, nothing more
    assert out.ic < 1e-30
    assert out.bc < 1e-30
    assert out.total < 1e-3


def test_single_patch_loss_is_squared_term():
    problem = unit_source_steady()

    def field(t, x, p):
        return ad.sin(3.0 * x[0]) * ad.cos(2.0 * x[1])

    patch = ElementPatch((0.25, -0.4), (0.15, 0.1))
    term = variational_term(field, patch, problem)
    out = loss_single(field, TrainingSet([patch]), problem,
                      LossWeights(1.0, 0.0, 0.0))
    assert abs(out.total - term * term) <= 1e-12 * max(1.0, term * term)
    assert out.ic == 0.0 and out.bc == 0.0


def test_duplicated_ic_points_leave_ic_component_unchanged():
    problem, ts = adv1dt_training_set(nt=4, nx=4, n_ic=11)
    doubled = TrainingSet(ts.interior, np.tile(ts.ic_points, (2, 1)),
                          ts.bc_points, ts.param_samples)

    def field(t, x, p):
        return 0.3 * x[0] + 0.1 * t

    w = LossWeights(1.0, 2.0, 2.0)
    a = loss_single(field, ts, problem, w)
    b = loss_single(field, doubled, problem, w)
    assert abs(a.ic - b.ic) <= 1e-14 * max(1.0, a.ic)
    assert a.bc == b.bc


def test_empty_interior_raises():
    problem = benchmark("adv1dt")
    ts = TrainingSet([], np.array([[0.0]]), {})
    with pytest.raises(ContractError, match="interior"):
        loss_single(lambda t, x, p: 0.0, ts, problem, LossWeights())


def test_steady_problem_rejects_nonzero_w2():
    problem = unit_source_steady()
    ts = TrainingSet([ElementPatch((0.0, 0.0), (0.1, 0.1))])
    with pytest.raises(ContractError, match="w2"):
        loss_single(lambda t, x, p: 0.0, ts, problem, LossWeights(1.0, 0.5, 0.0))


def test_w2_without_ic_points_raises():
    problem = benchmark("adv1dt")
    ts = TrainingSet([ElementPatch((1.0, 0.0), (0.2, 0.2))])
    with pytest.raises(ContractError, match="initial-condition"):
        loss_single(lambda t, x, p: 0.0, ts, problem, LossWeights(1.0, 1.0, 0.0))


def test_bc_rows_need_time_column_for_time_dependent():
    problem = benchmark("adv1dt")
    ts = TrainingSet([ElementPatch((1.0, 0.0), (0.2, 0.2))],
                     np.array([[0.0]]), {1: np.array([[-1.0]])})
    with pytest.raises(ContractError, match="columns"):
        loss_single(lambda t, x, p: 0.0, ts, problem, LossWeights())


def test_weight_validation():
    with pytest.raises(ConfigError):
        LossWeights(0.0, 1.0, 1.0)
    with pytest.raises(ConfigError):
        LossWeights(1.0, -1.0, 1.0)
    with pytest.raises(ConfigError):
        LossWeights.from_sequence([1.0])
    assert LossWeights.from_sequence([10.0, 1.0]) == LossWeights(10.0, 0.0, 1.0)
    assert LossWeights.from_sequence([1, 2, 3]).as_tuple() == (1.0, 2.0, 3.0)


# ---------------------------------------------------------------------------
# total_loss


def test_total_loss_singleton_equals_loss_single():
    kappas = benchmark("adv1dt_mor")
    problem, ts = adv1dt_training_set(nt=4, nx=4, params=((0.02,),),
                                      problem=kappas)

    def field(t, x, p):
        return x[0] * x[0] * 0.2 + 0.05 * t

    w = LossWeights(1.0, 1.0, 1.0)
    total = total_loss(field, ts, problem, w)
    single = loss_single(field, ts, problem, w, p=(0.02,))
    assert total == single.total


def test_total_loss_duplicate_sample_doubles():
    kappas = benchmark("adv1dt_mor")
    problem, ts = adv1dt_training_set(nt=4, nx=4,
                                      params=((0.02,), (0.02,)),
                                      problem=kappas)
    problem_single, ts_single = adv1dt_training_set(nt=4, nx=4,
                                                    params=((0.02,),),
                                                    problem=kappas)

    def field(t, x, p):
        return 0.4 * x[0] + 0.1 * t * t

    w = LossWeights(1.0, 1.0, 1.0)
    assert total_loss(field, ts, problem, w) \
        == 2.0 * total_loss(field, ts_single, problem_single, w)


def test_total_loss_vanishes_at_series_truth():
    problem, ts = adv1dt_training_set(nt=10, nx=10)
    field = Adv1dtSeries(KAPPA_HIGH).as_field()
    w = LossWeights(1.0, 10.0, 10.0)
    total = total_loss(field, ts, problem, w)
    assert 0.0 <= total < 1e-3

    # the loss at truth is pure quadrature error: bound the default-order
    # variational terms by their distance to an order-5 reference rule
    a2 = LossAssembly(problem, ts, w, order=2)
    a5 = LossAssembly(problem, ts, w, order=5)
    from weakpde.variational_loss import _field_lanes
    v2, g2 = _field_lanes(field, a2.points, True, None)
    v5, g5 = _field_lanes(field, a5.points, True, None)
    l2 = a2.patch_terms(v2, g2)
    l5 = a5.patch_terms(v5, g5)
    bound = (np.linalg.norm(l2 - l5) + np.linalg.norm(l5)) ** 2
    breakdown = loss_single(field, ts, problem, w)
    assert breakdown.variational <= w.w1 * bound + 1e-10


def test_loss_decreases_when_h_halves_at_truth():
    w = LossWeights(1.0, 10.0, 10.0)
    field = Adv1dtSeries(KAPPA_HIGH).as_field()
    problem, coarse = adv1dt_training_set(nt=8, nx=8)
    _, fine = adv1dt_training_set(nt=17, nx=17)
    total_c = total_loss(field, coarse, problem, w)
    total_f = total_loss(field, fine, problem, w)
    assert total_f <= 0.5 * total_c


# ---------------------------------------------------------------------------
# assembly internals: sharing, ordering, gradients


def test_lattice_sharing_matches_free_patches():
    problem, ts = adv1dt_training_set(nt=5, nx=5)
    free = TrainingSet([ElementPatch(p.center, p.halfwidth, None)
                        for p in ts.interior],
                       ts.ic_points, ts.bc_points, ts.param_samples)

    def field(t, x, p):
        return ad.sin(x[0]) * ad.exp(-0.3 * t)

    w = LossWeights(1.0, 1.0, 1.0)
    shared = loss_single(field, ts, problem, w)
    plain = loss_single(field, free, problem, w)
    assert abs(shared.total - plain.total) <= 1e-12 * max(1.0, plain.total)
    # sharing reduces the evaluation table roughly 4x on a 2D lattice
    a_shared = LossAssembly(problem, ts, w)
    a_free = LossAssembly(problem, free, w)
    assert a_shared.points.shape[0] < a_free.points.shape[0]


def test_inconsistent_lattice_indices_raise():
    problem = benchmark("adv1dt")
    patches = [ElementPatch((0.5, 0.0), (0.25, 0.25), (2, 4)),
               ElementPatch((0.75, 0.0), (0.25, 0.25), (2, 4))]
    with pytest.raises(ContractError, match="lattice"):
        LossAssembly(problem, TrainingSet(patches), LossWeights(1.0, 0.0, 0.0))


def test_patch_order_permutation_is_stable():
    problem, ts = adv1dt_training_set(nt=6, nx=6)
    rng = np.random.default_rng(11)
    order = rng.permutation(len(ts.interior))
    shuffled = TrainingSet([ts.interior[i] for i in order],
                           ts.ic_points, ts.bc_points, ts.param_samples)

    def field(t, x, p):
        return ad.tanh(x[0] + 0.2 * t)

    w = LossWeights(1.0, 1.0, 1.0)
    a = loss_single(field, ts, problem, w).total
    b = loss_single(field, shuffled, problem, w).total
    assert abs(a - b) <= 1e-10 * max(1.0, abs(a))


def test_model_lanes_match_generic_field_path():
    problem, ts = adv1dt_training_set(nt=4, nx=4, n_ic=7, n_bc=6)
    cfg = mlp.MLPConfig(2, (8,))
    norm = mlp.Normalization.from_ranges(problem.input_ranges())
    model = mlp.Model.fresh(cfg, norm, seed=5)
    w = LossWeights(1.0, 10.0, 10.0)
    assembly = LossAssembly(problem, ts, w)

    value, d1, _ = model.evaluate_with_derivs(assembly.points, first=(1,))
    ic_values = model.evaluate(assembly.ic_inputs)
    bc_values = model.evaluate(assembly.bc_inputs)
    total_lanes, _ = assembly.loss_parts(value, [d1[1]], ic_values, bc_values)

    total_field, _ = assembly.loss_for_field(model.as_field(True))
    assert abs(total_lanes - total_field) <= 1e-10 * max(1.0, abs(total_field))


def test_loss_gradient_matches_finite_differences():
    problem, ts = adv1dt_training_set(nt=4, nx=4, n_ic=7, n_bc=6)
    cfg = mlp.MLPConfig(2, (8,))
    norm = mlp.Normalization.from_ranges(problem.input_ranges())
    flat = mlp.initialize(cfg, seed=21)
    w = LossWeights(1.0, 10.0, 10.0)
    assembly = LossAssembly(problem, ts, w)
    scales = norm.scales()

    def tape_total(vec):
        tape = ad.Tape()
        binding, weights = mlp.bind_params(tape, cfg, vec)
        value, d1, _ = mlp.eval_lanes(cfg, weights, norm.apply(assembly.points),
                                      scales=scales, first=(1,))
        ic_values, _, _ = mlp.eval_lanes(cfg, weights,
                                         norm.apply(assembly.ic_inputs))
        bc_values, _, _ = mlp.eval_lanes(cfg, weights,
                                         norm.apply(assembly.bc_inputs))
        total, _ = assembly.loss_parts(value, [d1[1]], ic_values, bc_values)
        return total, binding

    total, binding = tape_total(flat)
    grad = ad.grad_wrt_params(total, binding)
    rng = np.random.default_rng(33)
    for i in rng.choice(flat.size, size=20, replace=False):
        e = np.zeros(flat.size)
        e[i] = 1e-6
        hi, _ = tape_total(flat + e)
        lo, _ = tape_total(flat - e)
        fd = (ad.detach(hi) - ad.detach(lo)) / 2e-6
        assert abs(grad[i] - fd) <= 1e-5 * max(1.0, abs(fd))


def test_breakdown_components_nonnegative_for_random_models():
    problem, ts = adv1dt_training_set(nt=4, nx=4)
    cfg = mlp.MLPConfig(2, (6,))
    norm = mlp.Normalization.from_ranges(problem.input_ranges())
    w = LossWeights(2.0, 3.0, 4.0)
    for seed in range(4):
        model = mlp.Model.fresh(cfg, norm, seed=seed)
        out = loss_single(model.as_field(True), ts, problem, w)
        assert isinstance(out, LossBreakdown)
        assert out.variational >= 0.0 and out.ic >= 0.0 and out.bc >= 0.0
        assert abs(out.total - (out.variational + out.ic + out.bc)) <= 1e-15 * out.total


# ---------------------------------------------------------------------------
# strong-form baseline


def test_residual_baseline_vanishes_at_manufactured_exact():
    problem = benchmark("manufactured2d", k=1)
    rng = np.random.default_rng(7)
    pts = rng.uniform(-0.95, 0.95, size=(40, 2))
    ts = TrainingSet([ElementPatch((0.0, 0.0), (0.1, 0.1))])
    out = residual_loss_baseline(problem.exact, pts, ts, problem,
                                 LossWeights(1.0, 0.0, 0.0))
    assert out.variational < 1e-12
    assert out.total == out.variational


def test_residual_baseline_unit_source_is_one():
    problem = unit_source_steady()
    pts = np.array([[0.1, 0.2], [-0.3, 0.4], [0.5, -0.5]])
    ts = TrainingSet([ElementPatch((0.0, 0.0), (0.1, 0.1))])

    def field(t, x, p):
        return 0.0

    out = residual_loss_baseline(field, pts, ts, problem,
                                 LossWeights(1.0, 0.0, 0.0))
    assert out.variational == 1.0
    assert out.total == 1.0


def test_residual_baseline_matches_pointwise_brute_force():
    problem, ts = adv1dt_training_set(nt=4, nx=4)
    cfg = mlp.MLPConfig(2, (7,))
    norm = mlp.Normalization.from_ranges(problem.input_ranges())
    model = mlp.Model.fresh(cfg, norm, seed=13)
    field = model.as_field(True)
    rng = np.random.default_rng(17)
    pts = np.column_stack([rng.uniform(0.0, 2.0, 9), rng.uniform(-1.0, 1.0, 9)])
    w = LossWeights(1.0, 2.0, 3.0)
    out = residual_loss_baseline(field, pts, ts, problem, w)
    brute = np.mean([transport_residual(field, float(t), [float(x)], problem) ** 2
                     for t, x in pts])
    assert abs(out.variational - w.w1 * brute) <= 1e-12 * max(1.0, brute)
    # the IC/BC penalties must match the weak-form loss exactly
    weak = loss_single(field, ts, problem, w)
    assert out.ic == weak.ic and out.bc == weak.bc


def test_residual_baseline_rejects_bad_points():
    problem = benchmark("adv1dt")
    ts = TrainingSet([ElementPatch((1.0, 0.0), (0.2, 0.2))])
    with pytest.raises(ContractError, match="collocation"):
        residual_loss_baseline(lambda t, x, p: 0.0, np.zeros((0, 2)), ts,
                               problem, LossWeights(1.0, 0.0, 0.0))
    with pytest.raises(ContractError, match="collocation"):
        residual_loss_baseline(lambda t, x, p: 0.0, np.zeros((4, 3)), ts,
                               problem, LossWeights(1.0, 0.0, 0.0))
