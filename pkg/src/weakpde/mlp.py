"""Fully connected network over normalized space-time-parameter inputs.

The parameter vector is flat and ordered layer by layer, weights
(row-major, fan-in by fan-out) before biases, hidden layers first, output
layer last.  Scalar output.  Inputs are affinely normalized to [-1, 1]
per coordinate; the normalization map is part of the model and is stored
with it, so saved models are self-contained.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._errors import ConfigError, DataFormatError

_ACTIVATIONS = ("sigmoid", "tanh")


@dataclass(frozen=True)
class MLPConfig:
    input_dim: int
    widths: tuple
    activation: str = "sigmoid"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.input_dim < 1:
            raise ConfigError("input_dim must be at least 1")
        if len(self.widths) < 1 or any(w < 1 for w in self.widths):
            raise ConfigError("at least one hidden layer with positive width required")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"activation must be one of {_ACTIVATIONS}")

    def layer_shapes(self):
        """(fan_in, fan_out) per affine layer, output layer included."""
        dims = (self.input_dim,) + self.widths + (1,)
        return [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]


def param_count(config):
    """Total trainable scalars: sum over layers of (fan_in + 1) * fan_out."""
    return sum((fi + 1) * fo for fi, fo in config.layer_shapes())


def initialize(config, seed):
    """Glorot-uniform weights, zero biases, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in config.layer_shapes():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return np.concatenate(parts)


def unpack(config, flat):
    """Flat vector -> [(W, b)] per layer.  Length/finiteness are contract-checked."""
    flat = np.asarray(flat, dtype=np.float64)
    expected = param_count(config)
    if flat.shape != (expected,):
        raise DataFormatError(
            f"parameter vector has length {flat.size}, expected {expected}")
    ad.assert_finite("parameters", flat)
    out = []
    pos = 0
    for fan_in, fan_out in config.layer_shapes():
        w = flat[pos:pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = flat[pos:pos + fan_out]
        pos += fan_out
        out.append((w, b))
    return out


def bind_params(tape, config, flat):
    """Register a flat parameter vector as tape leaves, shaped per layer.

    Returns (binding, weights): ``weights`` feeds :func:`eval_lanes`, the
    binding feeds ``ad.grad_wrt_params``.  Gradient order matches ``flat``.
    """
    arrays = []
    for w, b in unpack(config, flat):
        arrays.append(w)
        arrays.append(b)
    binding = ad.ParamsBinding(tape, arrays)
    weights = [(binding.leaves[2 * i], binding.leaves[2 * i + 1])
               for i in range(len(binding.leaves) // 2)]
    return binding, weights


def _act_value(name, z):
    return ad.sigmoid(z) if name == "sigmoid" else ad.tanh(z)


def _act_first(name, a):
    # derivative expressed through the activation value
    return a - a * a if name == "sigmoid" else 1.0 - a * a


def _act_second(name, a, a1):
    return a1 * (1.0 - 2.0 * a) if name == "sigmoid" else -2.0 * a * a1


def eval_lanes(config, weights, X, scales=None, first=(), second=()):
    """Batched evaluation with selected input-derivative lanes.

    ``X`` is (P, input_dim), already normalized; ``scales[j]`` is the
    normalized-to-physical tangent factor for coordinate j (1/halfwidth).
    ``first`` and ``second`` are input column indices; second-derivative
    lanes require the matching first lane and are diagonal (d^2/dx_j^2).
    Derivative lanes run through the same dispatched primitives as the
    value lane, so ``weights`` may be tape Vars during training or plain
    arrays for inference.  Returns (value, {j: first}, {j: second}).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != config.input_dim:
        raise ConfigError(f"input batch must be (P, {config.input_dim})")
    first = tuple(first)
    second = tuple(second)
    if any(j not in first for j in second):
        raise ConfigError("second-derivative lanes require the matching first lane")
    if scales is None:
        scales = np.ones(config.input_dim)

    act = config.activation
    n_layers = len(config.widths)
    a = X
    da = {}
    d2a = {}
    for layer, (w, b) in enumerate(weights):
        if layer == 0:
            z = ad.affine(a, w, b)
            # input tangents are constant unit columns: seed straight from W rows
            dz = {j: ad.row(w, j) * float(scales[j]) for j in first}
            d2z = {j: None for j in second}
        else:
            z = ad.affine(a, w, b)
            dz = {j: ad.affine(da[j], w) for j in first}
            d2z = {j: ad.affine(d2a[j], w) for j in second}
        if layer == n_layers:
            # linear output layer
            value = ad.reshape(z, (-1,))
            dvalue = {j: ad.reshape(dz[j], (-1,)) for j in first}
            d2value = {j: ad.reshape(d2z[j], (-1,)) for j in second}
            return value, dvalue, d2value
        a = _act_value(act, z)
        if first:
            a1 = _act_first(act, a)
            da = {j: a1 * dz[j] for j in first}
        if second:
            a2 = _act_second(act, a, a1)
            d2a = {}
            for j in second:
                curv = a2 * (dz[j] * dz[j])
                d2a[j] = curv if d2z[j] is None else curv + a1 * d2z[j]
    raise AssertionError("unreachable: output layer handled inside the loop")


class Normalization:
    """Per-coordinate affine map from physical ranges onto [-1, 1]."""

    __slots__ = ("center", "halfwidth")

    def __init__(self, center, halfwidth):
        self.center = np.asarray(center, dtype=np.float64)
        self.halfwidth = np.asarray(halfwidth, dtype=np.float64)
        if self.center.shape != self.halfwidth.shape or self.center.ndim != 1:
            raise ConfigError("normalization center/halfwidth must be equal-length vectors")
        if np.any(self.halfwidth <= 0.0):
            raise ConfigError("normalization halfwidths must be positive")

    @classmethod
    def from_ranges(cls, ranges):
        """ranges: sequence of (lo, hi) per input coordinate."""
        ranges = [(float(lo), float(hi)) for lo, hi in ranges]
        if any(hi <= lo for lo, hi in ranges):
            raise ConfigError("normalization ranges must have hi > lo")
        center = [(lo + hi) / 2.0 for lo, hi in ranges]
        halfwidth = [(hi - lo) / 2.0 for lo, hi in ranges]
        return cls(center, halfwidth)

    @property
    def dim(self):
        return self.center.size

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.center) / self.halfwidth

    def scales(self):
        """d(normalized)/d(physical) per coordinate."""
        return 1.0 / self.halfwidth


class Model:
    """Network config + normalization + flat parameters; JSON round-trippable."""

    __slots__ = ("config", "normalization", "params", "seed")

    def __init__(self, config, normalization, params, seed=None):
        if normalization.dim != config.input_dim:
            raise ConfigError("normalization dimension does not match input_dim")
        self.config = config
        self.normalization = normalization
        self.params = np.asarray(params, dtype=np.float64)
        unpack(config, self.params)  # validates length and finiteness
        self.seed = seed

    @classmethod
    def fresh(cls, config, normalization, seed):
        return cls(config, normalization, initialize(config, seed), seed=seed)

    def evaluate(self, X):
        """Plain batched values at physical inputs X of shape (P, input_dim)."""
        Xn = self.normalization.apply(X)
        value, _, _ = eval_lanes(self.config, unpack(self.config, self.params), Xn)
        return value

    def evaluate_with_derivs(self, X, first=(), second=()):
        Xn = self.normalization.apply(X)
        return eval_lanes(self.config, unpack(self.config, self.params), Xn,
                          scales=self.normalization.scales(), first=first,
                          second=second)

    def as_field(self, time_dependent):
        """Adapter to the field protocol ``f(t, x, p)``.

        Coordinates may be scalars, lanes, or duals; parameters fill the
        trailing input slots.  Slower than the lane evaluator; meant for
        generic derivative queries and tests.
        """
        weights = unpack(self.config, self.params)
        center = self.normalization.center
        halfw = self.normalization.halfwidth
        cfg = self.config

        def field(t, x, p):
            cols = []
            if time_dependent:
                cols.append(t)
            cols.extend(x)
            if p is not None:
                if isinstance(p, (list, tuple, np.ndarray)):
                    cols.extend(p)
                else:
                    cols.append(p)
            if len(cols) != cfg.input_dim:
                raise ConfigError(
                    f"field got {len(cols)} coordinates, expected {cfg.input_dim}")
            acts = [(c - center[j]) / halfw[j] for j, c in enumerate(cols)]
            for layer, (w, b) in enumerate(weights):
                zs = []
                for m in range(w.shape[1]):
                    z = b[m]
                    for k in range(w.shape[0]):
                        z = z + acts[k] * w[k, m]
                    zs.append(z)
                if layer == len(cfg.widths):
                    return zs[0]
                acts = [_act_value(cfg.activation, z) for z in zs]
            raise AssertionError("unreachable")

        return field

    def to_doc(self):
        return {
            "format": "weakpde-model",
            "version": 1,
            "config": {
                "input_dim": self.config.input_dim,
                "widths": list(self.config.widths),
                "activation": self.config.activation,
            },
            "normalization": {
                "center": self.normalization.center.tolist(),
                "halfwidth": self.normalization.halfwidth.tolist(),
            },
            "seed": self.seed,
            "params": self.params.tolist(),
        }

    @classmethod
    def from_doc(cls, doc):
        try:
            if doc.get("format") != "weakpde-model":
                raise DataFormatError("not a model document")
            cfg = MLPConfig(input_dim=int(doc["config"]["input_dim"]),
                            widths=tuple(doc["config"]["widths"]),
                            activation=doc["config"]["activation"])
            norm = Normalization(doc["normalization"]["center"],
                                 doc["normalization"]["halfwidth"])
            return cls(cfg, norm, np.asarray(doc["params"], dtype=np.float64),
                       seed=doc.get("seed"))
        except (KeyError, TypeError) as e:
            raise DataFormatError(f"malformed model document: {e}") from e

    def save(self, path):
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_doc(), f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, "r", encoding="utf-8") as f:
            try:
                doc = json.load(f)
            except json.JSONDecodeError as e:
                raise DataFormatError(f"model file is not valid JSON: {e}") from e
        return cls.from_doc(doc)
