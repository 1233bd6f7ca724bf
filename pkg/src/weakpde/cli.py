"""Batch front-end: run experiments from a JSON config and emit CSV reports.

Subcommands:
  train <config>                      run one experiment into a run directory
  eval <checkpoint> [--grid/--param]  evaluate a trained network on a grid
  oracle <selector> [--grid]          solve a catalog problem with a reference method
  sample <checkpoint> --count --seed  draw residual-weighted points from a checkpoint

Exit codes: 0 success, 2 configuration or format errors, 3 numerical
failures, 4 I/O failures.  All outputs are deterministic functions of
(config, seed); no timestamps are written.  The WEAKPDE_WORKERS environment
variable is validated for compatibility, but loss assembly is a single
vectorized pass and always runs single-threaded.
"""

import argparse
import json
import os
import sys
import warnings

import numpy as np

from . import autodiff as ad
from . import mlp
from ._errors import ConfigError, ContractError, DataFormatError, NumericsError
from .pde_problem import benchmark, problem_from_descriptor, transport_residual
from .reference_oracle import (SolutionGrid, error_metric, oracle_for,
                               problem_hash)
from .residual_sampler import (estimate_max, param_integrated_residual,
                               rejection_sample)
from .trainer import (AdamConfig, ConvergenceConfig, TrainConfig,
                      TrainingCounts, grid_spacing, probe_resolution,
                      resolve_counts, train)
from .variational_loss import LossWeights

SCHEMA_VERSION = 1
WORKERS_ENV = "WEAKPDE_WORKERS"

_CONFIG_KEYS = {"schema_version", "problem", "mlp", "train", "counts",
                "output_dir", "report"}
_TRAIN_KEYS = {"epochs", "seed", "weights", "frac", "max_adaptive_rounds",
               "support_scale", "loss", "shuffle", "quadrature_order",
               "adam", "convergence"}
_COUNT_KEYS = {"n_v", "n_ic", "n_bc", "n_bc_time", "bc_density", "n_param",
               "param_samples"}
_REPORT_KEYS = {"grid", "param", "oracle", "oracle_resolution"}


# ---------------------------------------------------------------------------
# document plumbing


def _read_json(path, what):
    with open(path, "r", encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as e:
            raise DataFormatError(f"{what} {path} is not valid JSON: {e}") \
                from None


def _write_json(path, doc):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _write_text(path, text):
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def _check_keys(doc, allowed, context):
    if not isinstance(doc, dict):
        raise ConfigError(f"{context} section must be a JSON object")
    unknown = sorted(set(doc) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown {context} keys: {', '.join(unknown)}")


def _require(doc, key, context):
    if key not in doc or doc[key] is None:
        raise ConfigError(f"{context} needs '{key}'")
    return doc[key]


def _worker_count():
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got '{raw}'") \
            from None
    if n < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1, got {n}")
    if n > 1:
        warnings.warn(f"{WORKERS_ENV}={n} requested, but loss assembly is one "
                      "vectorized pass; running single-threaded", stacklevel=2)
    return 1


# ---------------------------------------------------------------------------
# config sections


def _build_problem(doc):
    _check_keys(doc, {"name", "options"}, "problem")
    name = _require(doc, "name", "problem")
    options = doc.get("options") or {}
    if not isinstance(options, dict):
        raise ConfigError("problem options must be a JSON object")
    return benchmark(name, **options)


def _mlp_config(doc, problem):
    _check_keys(doc, {"widths", "activation"}, "mlp")
    widths = _require(doc, "widths", "mlp")
    return mlp.MLPConfig(problem.input_dim, tuple(int(w) for w in widths),
                         activation=doc.get("activation", "sigmoid"))


def _train_config(doc):
    _check_keys(doc, _TRAIN_KEYS, "train")
    kw = {"epochs": _require(doc, "epochs", "train")}
    for key in ("seed", "frac", "max_adaptive_rounds", "support_scale",
                "loss", "shuffle", "quadrature_order"):
        if key in doc:
            kw[key] = doc[key]
    if "weights" in doc:
        kw["weights"] = LossWeights.from_sequence(doc["weights"])
    if "adam" in doc:
        _check_keys(doc["adam"], {"learning_rate", "beta1", "beta2",
                                  "epsilon"}, "adam")
        kw["adam"] = AdamConfig(**doc["adam"])
    if "convergence" in doc:
        _check_keys(doc["convergence"], {"window", "threshold"}, "convergence")
        kw["convergence"] = ConvergenceConfig(**doc["convergence"])
    return TrainConfig(**kw)


def _counts(doc):
    _check_keys(doc, _COUNT_KEYS, "counts")
    n_v = _require(doc, "n_v", "counts")
    kw = {"n_v": tuple(int(n) for n in n_v)}
    if doc.get("n_ic") is not None:
        n_ic = doc["n_ic"]
        kw["n_ic"] = tuple(int(n) for n in n_ic) if isinstance(n_ic, list) \
            else int(n_ic)
    if doc.get("n_bc") is not None:
        kw["n_bc"] = {int(i): int(n) for i, n in doc["n_bc"].items()}
    for key in ("n_bc_time", "n_param"):
        if doc.get(key) is not None:
            kw[key] = int(doc[key])
    if doc.get("bc_density") is not None:
        kw["bc_density"] = float(doc["bc_density"])
    if doc.get("param_samples") is not None:
        kw["param_samples"] = tuple(
            tuple(float(v) for v in np.atleast_1d(s))
            for s in doc["param_samples"])
    return TrainingCounts(**kw)


def _n_axes(problem):
    return (1 if problem.is_time_dependent else 0) + problem.spatial_dim


def _default_report_grid(problem):
    td = problem.is_time_dependent
    if problem.spatial_dim == 1:
        return (101, 201) if td else (201,)
    return (41, 61, 61) if td else (101, 101)


def _report_options(doc, problem):
    doc = doc or {}
    _check_keys(doc, _REPORT_KEYS, "report")
    grid = tuple(int(n) for n in doc["grid"]) if doc.get("grid") \
        else _default_report_grid(problem)
    if len(grid) != _n_axes(problem) or any(n < 2 for n in grid):
        raise ConfigError(
            f"report grid needs {_n_axes(problem)} axis counts of at least 2")
    param = doc.get("param")
    if problem.parameters is not None:
        if param is None:
            param = tuple(0.5 * (lo + hi) for lo, hi in
                          problem.parameters.bounds)
        else:
            param = tuple(float(v) for v in param)
        if len(param) != problem.parameters.dim:
            raise ConfigError(
                f"report param needs {problem.parameters.dim} values")
    elif param is not None:
        raise ConfigError("report param given but the problem has no parameters")
    resolution = None
    if doc.get("oracle_resolution") is not None:
        resolution = tuple(int(n) for n in doc["oracle_resolution"])
    return grid, param, bool(doc.get("oracle", True)), resolution


def _train_doc(cfg):
    return {
        "epochs": cfg.epochs, "seed": cfg.seed,
        "weights": list(cfg.weights.as_tuple()), "frac": cfg.frac,
        "max_adaptive_rounds": cfg.max_adaptive_rounds,
        "support_scale": cfg.support_scale, "loss": cfg.loss,
        "shuffle": cfg.shuffle, "quadrature_order": cfg.quadrature_order,
        "adam": {"learning_rate": cfg.adam.learning_rate,
                 "beta1": cfg.adam.beta1, "beta2": cfg.adam.beta2,
                 "epsilon": cfg.adam.epsilon},
        "convergence": {"window": cfg.convergence.window,
                        "threshold": cfg.convergence.threshold},
    }


def _counts_doc(rc):
    return {
        "n_v": list(rc.n_v),
        "n_ic": None if rc.n_ic is None else list(rc.n_ic),
        "n_bc": {str(i): int(n) for i, n in sorted(rc.n_bc.items())},
        "n_bc_time": rc.n_bc_time,
        "bc_density": rc.bc_density,
        "param_samples": None if rc.param_samples is None
        else [list(s) for s in rc.param_samples],
    }


# ---------------------------------------------------------------------------
# grid evaluation


def _axis_names(problem):
    names = ("t",) if problem.is_time_dependent else ()
    return names + tuple(f"x{i + 1}" for i in range(problem.spatial_dim))


def _grid_axes(problem, resolution):
    bounds = ([(0.0, problem.time_horizon)] if problem.is_time_dependent
              else []) + problem.domain.bbox()
    if len(resolution) != len(bounds):
        raise ConfigError(f"grid needs {len(bounds)} axis counts (time first)")
    if any(int(n) < 2 for n in resolution):
        raise ConfigError("grid needs at least 2 points per axis")
    return tuple(np.linspace(lo, hi, int(n))
                 for (lo, hi), n in zip(bounds, resolution))


def _mesh_points(axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def _with_params(pts, p):
    if p is None:
        return pts
    cols = np.broadcast_to(np.asarray(p, dtype=np.float64),
                           (pts.shape[0], len(p)))
    return np.hstack([pts, cols])


def _model_values(model, pts):
    X = model.normalization.apply(pts)
    weights = mlp.unpack(model.config, model.params)
    value, _, _ = mlp.eval_lanes(model.config, weights, X)
    return np.asarray(value, dtype=np.float64)


def _provenance(problem, resolution, p, method, **extra):
    doc = {"method": method, "resolution": [int(n) for n in resolution],
           "problem_hash": problem_hash(problem),
           "p": None if p is None else [float(v) for v in p]}
    doc.update(extra)
    return doc


def _solution_grid(model, problem, resolution, p):
    axes = _grid_axes(problem, resolution)
    vals = _model_values(model, _with_params(_mesh_points(axes), p))
    return SolutionGrid(_axis_names(problem), axes,
                        vals.reshape([a.size for a in axes]),
                        provenance=_provenance(problem, resolution, p, "mlp"))


def _snapshot_grid(model, problem, resolution, p, t):
    axes = _grid_axes(problem, (2,) + tuple(resolution))[1:]
    pts = _mesh_points(axes)
    full = np.hstack([np.full((pts.shape[0], 1), float(t)), pts])
    vals = _model_values(model, _with_params(full, p))
    names = _axis_names(problem)[1:]
    return SolutionGrid(names, axes, vals.reshape([a.size for a in axes]),
                        provenance=_provenance(problem, resolution, p,
                                               "mlp-snapshot", t=float(t)))


def _residual_grid(model, problem, resolution, p):
    axes = _grid_axes(problem, resolution)
    pts = _mesh_points(axes)
    field = model.as_field(problem.is_time_dependent)
    td = problem.is_time_dependent
    t = pts[:, 0] if td else None
    x = [pts[:, j] for j in range(1 if td else 0, pts.shape[1])]
    vals = np.asarray(ad.detach(transport_residual(field, t, x, problem, p)),
                      dtype=np.float64)
    vals = np.broadcast_to(vals, (pts.shape[0],))
    return SolutionGrid(_axis_names(problem), axes,
                        vals.reshape([a.size for a in axes]),
                        provenance=_provenance(problem, resolution, p,
                                               "strong-residual"))


# ---------------------------------------------------------------------------
# artifact writers


def _write_loss_history(path, state):
    lines = ["epoch,variational,ic,bc,total,residual_norm"]
    history = zip(state.loss_history, state.residual_history)
    for epoch, (b, r) in enumerate(history, start=1):
        lines.append(f"{epoch},{b.variational!r},{b.ic!r},{b.bc!r},"
                     f"{b.total!r},{r!r}")
    _write_text(path, "\n".join(lines) + "\n")


def _point_rows(kind, segment, rows, n_uniform, prefix=()):
    out = []
    for k, row in enumerate(rows):
        source = "uniform" if k < n_uniform else "optimal"
        coords = tuple(prefix) + tuple(np.atleast_1d(row))
        out.append(f"{kind},{segment},{source},"
                   + ",".join(repr(float(c)) for c in coords))
    return out


def _write_training_points(path, problem, state):
    ts = state.training_set
    uc = state.uniform_counts
    lines = ["kind,segment,source," + ",".join(_axis_names(problem))]
    centers = np.array([p.center for p in ts.interior])
    lines += _point_rows("interior", "", centers, uc["interior"])
    if ts.ic_points is not None:
        lines += _point_rows("ic", "", ts.ic_points, uc["ic"], prefix=(0.0,))
    for i in sorted(ts.bc_points):
        lines += _point_rows("bc", i, ts.bc_points[i], uc["bc"].get(i, 0))
    _write_text(path, "\n".join(lines) + "\n")


def _write_checkpoint(path, model, problem, state, train_cfg, counts_doc):
    _write_json(path, {
        "format": "weakpde-checkpoint",
        "schema_version": SCHEMA_VERSION,
        "model": model.to_doc(),
        "problem": problem.descriptor(),
        "optimizer": {"m": state.adam.m.tolist(), "v": state.adam.v.tolist(),
                      "count": int(state.adam.count)},
        "train": _train_doc(train_cfg),
        "counts": counts_doc,
        "epochs_run": state.epochs_run,
        "rounds_used": state.rounds_used,
    })


def _load_checkpoint(path):
    doc = _read_json(path, "checkpoint")
    if not isinstance(doc, dict) or doc.get("format") != "weakpde-checkpoint":
        raise DataFormatError(f"{path}: not a checkpoint document")
    try:
        model = mlp.Model.from_doc(doc["model"])
        problem = problem_from_descriptor(doc["problem"])
    except KeyError as e:
        raise DataFormatError(f"{path}: checkpoint lacks {e}") from None
    if model.config.input_dim != problem.input_dim:
        raise DataFormatError(
            f"{path}: model input dim {model.config.input_dim} does not "
            f"match problem input dim {problem.input_dim}")
    return doc, model, problem


def _courant(problem, counts):
    if not problem.is_time_dependent:
        return None
    deltas = grid_spacing(problem, counts.n_v)
    return problem.char_velocity * deltas[0] / min(deltas[1:])


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args):
    doc = _read_json(args.config, "config")
    _check_keys(doc, _CONFIG_KEYS, "config")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"config schema_version must be {SCHEMA_VERSION}, "
                          f"got {version!r}")
    problem = _build_problem(_require(doc, "problem", "config"))
    mlp_cfg = _mlp_config(_require(doc, "mlp", "config"), problem)
    train_cfg = _train_config(_require(doc, "train", "config"))
    counts = resolve_counts(problem, _counts(_require(doc, "counts", "config")))
    grid_res, report_param, want_oracle, oracle_res = _report_options(
        doc.get("report"), problem)
    out_dir = str(_require(doc, "output_dir", "config"))
    _worker_count()

    os.makedirs(out_dir, exist_ok=True)

    def join(name):
        return os.path.join(out_dir, name)

    counts_doc = _counts_doc(counts)
    _write_json(join("resolved_config.json"), {
        "schema_version": SCHEMA_VERSION,
        "problem": problem.descriptor(),
        "mlp": {"widths": list(mlp_cfg.widths),
                "activation": mlp_cfg.activation},
        "train": _train_doc(train_cfg),
        "counts": counts_doc,
        "output_dir": out_dir,
        "report": {"grid": list(grid_res),
                   "param": None if report_param is None
                   else list(report_param),
                   "oracle": want_oracle,
                   "oracle_resolution": None if oracle_res is None
                   else list(oracle_res)},
    })

    state = train(problem, mlp_cfg, train_cfg, counts)
    norm = mlp.Normalization.from_ranges(problem.input_ranges())
    model = mlp.Model(mlp_cfg, norm, state.params, seed=train_cfg.seed)

    _write_checkpoint(join("checkpoint.json"), model, problem, state,
                      train_cfg, counts_doc)
    _write_loss_history(join("loss_history.csv"), state)
    _write_training_points(join("training_points.csv"), problem, state)
    _solution_grid(model, problem, grid_res, report_param).save(
        join("solution.csv"))
    _residual_grid(model, problem, grid_res, report_param).save(
        join("residual.csv"))

    err = reference = None
    if want_oracle:
        oracle = oracle_for(problem, p=report_param, resolution=oracle_res)
        vals = _model_values(model,
                             _with_params(oracle.points(), report_param))
        err = error_metric(vals, oracle.values)
        reference = oracle.provenance.get("method")

    ts = state.training_set
    final = state.loss_history[-1]
    _write_json(join("report.json"), {
        "schema_version": SCHEMA_VERSION,
        "problem": problem.name,
        "n_params": mlp.param_count(mlp_cfg),
        "peclet": problem.peclet(report_param),
        "courant": _courant(problem, counts),
        "epochs_run": state.epochs_run,
        "rounds_used": state.rounds_used,
        "final_loss": {"variational": final.variational, "ic": final.ic,
                       "bc": final.bc, "total": final.total},
        "final_residual_norm": state.residual_history[-1],
        "err": err,
        "err_reference": reference,
        "training_points": {
            "interior": len(ts.interior),
            "ic": ts.n_ic,
            "bc": {str(i): int(rows.shape[0])
                   for i, rows in sorted(ts.bc_points.items())},
        },
    })
    return 0


def _parse_grid(text):
    try:
        res = tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"--grid must be comma-separated integers, "
                          f"got '{text}'") from None
    return res


def _parse_param_values(items, problem):
    """--param occurrences -> list of parameter tuples (or [None])."""
    if problem.parameters is None:
        if items:
            raise ConfigError("--param given but the problem has no parameters")
        return [None]
    if not items:
        return [tuple(0.5 * (lo + hi) for lo, hi in problem.parameters.bounds)]
    out = []
    for item in items:
        try:
            values = tuple(float(part) for part in item.split(","))
        except ValueError:
            raise ConfigError(f"--param must be comma-separated numbers, "
                              f"got '{item}'") from None
        if len(values) != problem.parameters.dim:
            raise ConfigError(f"--param needs {problem.parameters.dim} values")
        out.append(values)
    return out


def _warn_if_outside(problem, p):
    if p is None:
        return
    for v, (lo, hi) in zip(p, problem.parameters.bounds):
        if not lo <= v <= hi:
            warnings.warn(f"parameter value {v} lies outside the trained "
                          f"range [{lo}, {hi}]; extrapolating", stacklevel=2)


def _sweep_path(out, index, n_total):
    if n_total == 1:
        return out
    stem, ext = os.path.splitext(out)
    return f"{stem}_p{index}{ext or '.csv'}"


def cmd_eval(args):
    _, model, problem = _load_checkpoint(args.checkpoint)
    td = problem.is_time_dependent
    if args.time is not None and not td:
        raise ConfigError("--time given for a steady problem")
    snapshot = args.time is not None
    default = _default_report_grid(problem)
    wanted = len(default) - (1 if snapshot else 0)
    res = _parse_grid(args.grid) if args.grid else \
        (default[1:] if snapshot else default)
    if len(res) != wanted:
        raise ConfigError(f"--grid needs {wanted} axis counts")
    if snapshot and not 0.0 <= args.time <= problem.time_horizon:
        warnings.warn(f"time {args.time} lies outside the trained range "
                      f"[0, {problem.time_horizon}]; extrapolating",
                      stacklevel=2)
    params = _parse_param_values(args.param, problem)
    for index, p in enumerate(params):
        _warn_if_outside(problem, p)
        grid = _snapshot_grid(model, problem, res, p, args.time) if snapshot \
            else _solution_grid(model, problem, res, p)
        grid.save(_sweep_path(args.out, index, len(params)))
    return 0


def cmd_oracle(args):
    options = {}
    for item in args.option:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--option needs key=value, got '{item}'")
        try:
            options[key] = json.loads(raw)
        except json.JSONDecodeError:
            options[key] = raw
    problem = benchmark(args.selector, **options)
    params = _parse_param_values(args.param, problem) \
        if args.param or problem.parameters is not None else [None]
    if len(params) != 1:
        raise ConfigError("oracle takes at most one --param")
    resolution = _parse_grid(args.grid) if args.grid else None
    oracle_for(problem, p=params[0], resolution=resolution).save(args.out)
    return 0


def cmd_sample(args):
    doc, model, problem = _load_checkpoint(args.checkpoint)
    if args.count < 1:
        raise ConfigError("--count must be positive")
    counts_doc = doc.get("counts") or {}
    if not counts_doc.get("n_v"):
        raise DataFormatError(f"{args.checkpoint}: checkpoint lacks training "
                              "counts needed to size the residual probe")
    n_v = tuple(int(n) for n in counts_doc["n_v"])
    deltas = grid_spacing(problem, n_v)
    scale = float(doc.get("train", {}).get("support_scale", 1.0))
    stored = counts_doc.get("param_samples")
    samples = [None] if not stored else \
        [tuple(float(v) for v in s) for s in stored]

    field = model.as_field(problem.is_time_dependent)
    margin = tuple(scale * h for h in deltas)
    rf = param_integrated_residual(field, problem, samples, margin=margin)
    estimate_max(rf, probe_resolution(problem, deltas))
    pts = rejection_sample(rf, args.count, args.seed)
    density = rf.abs_at(pts)

    lines = [",".join(_axis_names(problem)) + ",residual"]
    for row, r in zip(pts, density):
        lines.append(",".join(repr(float(c)) for c in row)
                     + f",{float(r)!r}")
    _write_text(args.out, "\n".join(lines) + "\n")
    return 0


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(
        prog="weakpde",
        description="Weak-form neural solver for advection-diffusion problems.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run an experiment from a JSON config")
    p.add_argument("config", help="path to the experiment configuration")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a grid")
    p.add_argument("checkpoint")
    p.add_argument("--grid", help="comma-separated points per axis, time first")
    p.add_argument("--param", action="append", default=[],
                   help="parameter values 'v1[,v2]'; repeat to sweep")
    p.add_argument("--time", type=float, default=None,
                   help="fix t and evaluate a spatial snapshot")
    p.add_argument("--out", default="eval.csv")

    p = sub.add_parser("oracle", help="solve a catalog problem by a reference method")
    p.add_argument("selector", help="benchmark name")
    p.add_argument("--option", action="append", default=[], metavar="KEY=VALUE",
                   help="benchmark option, value parsed as JSON")
    p.add_argument("--grid", help="solver resolution, comma-separated, time first")
    p.add_argument("--param", action="append", default=[],
                   help="parameter values for parametric problems")
    p.add_argument("--out", default="oracle.csv")

    p = sub.add_parser("sample", help="draw residual-weighted points from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", default="samples.csv")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    handler = {"train": cmd_train, "eval": cmd_eval,
               "oracle": cmd_oracle, "sample": cmd_sample}[args.command]
    try:
        return handler(args)
    except (ConfigError, ContractError, DataFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericsError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"i/o failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
