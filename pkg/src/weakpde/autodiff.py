"""Scalar-lane automatic differentiation.

Two composable mechanisms:

* :class:`Dual` -- forward-mode number carrying a value and one directional
  tangent.  Nesting duals (components that are themselves duals) gives exact
  second derivatives.
* :class:`Tape` / :class:`Var` -- reverse-mode graph for gradients of a
  scalar loss with respect to network parameters.

Values held by either mechanism are floats or numpy arrays.  An array is
treated as a batch of independent scalar lanes sharing one computation
graph; this keeps the per-operation Python overhead off the training hot
path while preserving scalar semantics exactly (every lane is differentiated
independently, there is no cross-lane coupling in any primitive).

Field code must route math through the module-level functions (:func:`exp`,
:func:`sin`, ...) and the overloaded operators; both dispatch on operand
type, so the same expression runs on plain numbers, arrays, duals, tape
variables, and duals-over-variables (forward over reverse).
"""
from __future__ import annotations

import numpy as np

from ._errors import ContractError, NonFiniteError

__all__ = [
    "Dual",
    "Tape",
    "Var",
    "ParamsBinding",
    "backward",
    "grad_wrt_params",
    "grad_wrt_inputs",
    "second_spatial_derivatives",
    "detach",
    "assert_finite",
    "exp",
    "log",
    "sin",
    "cos",
    "tanh",
    "sigmoid",
    "sqrt",
    "where",
    "vsum",
    "mean",
    "segment_sum",
    "gather",
    "affine",
    "reshape",
    "row",
]


def _as_value(x):
    """Coerce a payload to float or a float64 ndarray."""
    if isinstance(x, (Dual, Var)):
        raise ContractError("traced object used where a plain value is required")
    if isinstance(x, np.ndarray):
        return x.astype(np.float64, copy=False)
    if np.isscalar(x):
        return float(x)
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (the adjoint of numpy broadcasting)."""
    g = np.asarray(grad, dtype=np.float64)
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    if shape == ():
        return float(g)
    return g


def assert_finite(name, value):
    """Raise :class:`NonFiniteError` naming the first offending coordinate."""
    a = np.asarray(detach(value), dtype=np.float64)
    ok = np.isfinite(a)
    if not ok.all():
        idx = int(np.argmin(ok.ravel()))
        raise NonFiniteError(f"{name}: non-finite value at flat index {idx}")
    return value


# ---------------------------------------------------------------------------
# reverse mode


class Tape:
    """Operation recorder for reverse-mode differentiation."""

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes = []

    def __len__(self):
        return len(self._nodes)

    def variable(self, value):
        """Register a leaf the graph can be differentiated against."""
        return self._record(_as_value(value), (), None)

    def _record(self, value, parents, vjp):
        index = len(self._nodes)
        self._nodes.append((parents, vjp))
        return Var(self, index, value)

    def clear(self):
        self._nodes.clear()


class Var:
    """Node in a :class:`Tape` graph.  Construct via ``tape.variable``."""

    __slots__ = ("tape", "index", "value")
    # Without this numpy would absorb us into object arrays on `ndarray + Var`.
    __array_ufunc__ = None

    def __init__(self, tape, index, value):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self):
        return np.shape(self.value)

    def __repr__(self):
        return f"Var(index={self.index}, shape={np.shape(self.value)})"

    # arithmetic; anything involving a Dual is deferred to Dual's reflected op
    def __add__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _binary(self, other, lambda a, b: a + b,
                       lambda g, a, b, o: g, lambda g, a, b, o: g)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _binary(self, other, lambda a, b: a - b,
                       lambda g, a, b, o: g, lambda g, a, b, o: -g)

    def __rsub__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _binary(other, self, lambda a, b: a - b,
                       lambda g, a, b, o: g, lambda g, a, b, o: -g)

    def __mul__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _binary(self, other, lambda a, b: a * b,
                       lambda g, a, b, o: g * b, lambda g, a, b, o: g * a)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _binary(self, other, lambda a, b: a / b,
                       lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b)

    def __rtruediv__(self, other):
        if isinstance(other, Dual):
            return NotImplemented
        return _binary(other, self, lambda a, b: a / b,
                       lambda g, a, b, o: g / b, lambda g, a, b, o: -g * o / b)

    def __neg__(self):
        return _unary(self, lambda a: -a, lambda g, a, o: -g)

    def __pow__(self, n):
        if not np.isscalar(n):
            raise ContractError("Var exponent must be a plain scalar constant")
        n = float(n)
        return _unary(self, lambda a: a ** n, lambda g, a, o: g * n * a ** (n - 1.0))


def _operand(x):
    return (x.value, x) if isinstance(x, Var) else (_as_value(x), None)


def _binary(a, b, fwd, da, db):
    av, avar = _operand(a)
    bv, bvar = _operand(b)
    node = avar or bvar
    if avar is not None and bvar is not None and avar.tape is not bvar.tape:
        raise ContractError("operands recorded on different tapes")
    out = fwd(av, bv)
    parents = []
    pulls = []
    if avar is not None:
        parents.append(avar.index)
        pulls.append(lambda g: _unbroadcast(da(g, av, bv, out), np.shape(av)))
    if bvar is not None:
        parents.append(bvar.index)
        pulls.append(lambda g: _unbroadcast(db(g, av, bv, out), np.shape(bv)))
    return node.tape._record(out, tuple(parents), lambda g: tuple(p(g) for p in pulls))


def _unary(a, fwd, d):
    out = fwd(a.value)
    av = a.value
    return a.tape._record(
        out, (a.index,), lambda g: (_unbroadcast(d(g, av, out), np.shape(av)),))


def backward(output, seed=1.0):
    """Reverse sweep from a scalar ``output``.

    Returns a list indexed by tape position; entry i is the gradient of
    ``output`` with respect to node i, or None when independent.
    """
    if not isinstance(output, Var):
        raise ContractError("backward target must be a Var")
    nodes = output.tape._nodes
    grads = [None] * (output.index + 1)
    grads[output.index] = seed
    for i in range(output.index, -1, -1):
        g = grads[i]
        if g is None:
            continue
        parents, vjp = nodes[i]
        if vjp is None:
            continue
        for parent, pg in zip(parents, vjp(g)):
            if grads[parent] is None:
                grads[parent] = pg
            else:
                grads[parent] = grads[parent] + pg
    return grads


class ParamsBinding:
    """Parameter tensors registered as tape leaves, differentiable as one flat vector."""

    __slots__ = ("tape", "leaves", "size")

    def __init__(self, tape, arrays):
        for k, a in enumerate(arrays):
            assert_finite(f"parameter tensor {k}", a)
        self.tape = tape
        # copy: the trainer may rebuild the flat vector while a tape is alive
        self.leaves = [tape.variable(np.array(a, dtype=np.float64)) for a in arrays]
        self.size = int(sum(np.size(v.value) for v in self.leaves))


def grad_wrt_params(output, binding):
    """Gradient of a scalar loss node with respect to a parameter binding.

    The result is flat, ordered like the binding's tensors, and always of
    length ``binding.size``.
    """
    if not isinstance(output, Var) or output.tape is not binding.tape:
        raise ContractError("loss node does not live on the binding's tape")
    grads = backward(output)
    parts = []
    for leaf in binding.leaves:
        g = grads[leaf.index] if leaf.index < len(grads) else None
        if g is None:
            parts.append(np.zeros(np.size(leaf.value)))
        else:
            parts.append(np.asarray(g, dtype=np.float64).ravel())
    flat = np.concatenate(parts) if parts else np.zeros(0)
    if flat.size != binding.size:
        raise ContractError("gradient length does not match parameter count")
    return assert_finite("parameter gradient", flat)


# ---------------------------------------------------------------------------
# forward mode


class Dual:
    """Forward-mode number: a value and one directional tangent.

    ``tangent=None`` encodes a structural zero.  Components may be floats,
    arrays, Vars, or Duals; nesting yields second derivatives.
    """

    __slots__ = ("value", "tangent")
    __array_ufunc__ = None

    def __init__(self, value, tangent=None):
        self.value = value
        self.tangent = tangent

    def __repr__(self):
        return f"Dual({self.value!r}, {self.tangent!r})"

    def __add__(self, other):
        ov, ot = _components(other)
        return Dual(self.value + ov, _tadd(self.tangent, ot))

    __radd__ = __add__

    def __sub__(self, other):
        ov, ot = _components(other)
        return Dual(self.value - ov, _tadd(self.tangent, _tneg(ot)))

    def __rsub__(self, other):
        ov, ot = _components(other)
        return Dual(ov - self.value, _tadd(ot, _tneg(self.tangent)))

    def __mul__(self, other):
        ov, ot = _components(other)
        t = _tadd(None if self.tangent is None else self.tangent * ov,
                  None if ot is None else self.value * ot)
        return Dual(self.value * ov, t)

    __rmul__ = __mul__

    def __truediv__(self, other):
        ov, ot = _components(other)
        out = self.value / ov
        t = _tadd(None if self.tangent is None else self.tangent / ov,
                  None if ot is None else -(out / ov) * ot)
        return Dual(out, t)

    def __rtruediv__(self, other):
        ov, ot = _components(other)
        out = ov / self.value
        t = _tadd(None if ot is None else ot / self.value,
                  None if self.tangent is None else -(out / self.value) * self.tangent)
        return Dual(out, t)

    def __neg__(self):
        return Dual(-self.value, _tneg(self.tangent))

    def __pow__(self, n):
        if not np.isscalar(n):
            raise ContractError("Dual exponent must be a plain scalar constant")
        n = float(n)
        t = None if self.tangent is None else (n * self.value ** (n - 1.0)) * self.tangent
        return Dual(self.value ** n, t)


def _components(x):
    if isinstance(x, Dual):
        return x.value, x.tangent
    return x, None


def _tadd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _tneg(a):
    return None if a is None else -a


def detach(x):
    """Strip all tracing, returning the underlying float or array."""
    while isinstance(x, (Dual, Var)):
        x = x.value
    return x


# ---------------------------------------------------------------------------
# type-dispatched math


def exp(x):
    if isinstance(x, Dual):
        v = exp(x.value)
        return Dual(v, None if x.tangent is None else v * x.tangent)
    if isinstance(x, Var):
        return _unary(x, np.exp, lambda g, a, o: g * o)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.value), None if x.tangent is None else x.tangent / x.value)
    if isinstance(x, Var):
        return _unary(x, np.log, lambda g, a, o: g / a)
    return np.log(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.value), None if x.tangent is None else cos(x.value) * x.tangent)
    if isinstance(x, Var):
        return _unary(x, np.sin, lambda g, a, o: g * np.cos(a))
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.value), None if x.tangent is None else -sin(x.value) * x.tangent)
    if isinstance(x, Var):
        return _unary(x, np.cos, lambda g, a, o: -g * np.sin(a))
    return np.cos(x)


def tanh(x):
    if isinstance(x, Dual):
        v = tanh(x.value)
        return Dual(v, None if x.tangent is None else (1.0 - v * v) * x.tangent)
    if isinstance(x, Var):
        return _unary(x, np.tanh, lambda g, a, o: g * (1.0 - o * o))
    return np.tanh(x)


def sigmoid(x):
    # tanh form stays finite for large negative inputs
    if isinstance(x, Dual):
        v = sigmoid(x.value)
        return Dual(v, None if x.tangent is None else v * (1.0 - v) * x.tangent)
    if isinstance(x, Var):
        return _unary(x, _sigmoid_np, lambda g, a, o: g * o * (1.0 - o))
    return _sigmoid_np(x)


def _sigmoid_np(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def sqrt(x):
    if isinstance(x, Dual):
        v = sqrt(x.value)
        return Dual(v, None if x.tangent is None else (0.5 / v) * x.tangent)
    if isinstance(x, Var):
        return _unary(x, np.sqrt, lambda g, a, o: g * 0.5 / o)
    return np.sqrt(x)


def where(cond, a, b):
    """Lane select on a detached boolean mask (no gradient through ``cond``)."""
    cond = np.asarray(detach(cond), dtype=bool)
    if isinstance(a, Dual) or isinstance(b, Dual):
        av, at = _components(a)
        bv, bt = _components(b)
        if at is None and bt is None:
            t = None
        else:
            zero = 0.0
            t = where(cond, zero if at is None else at, zero if bt is None else bt)
        return Dual(where(cond, av, bv), t)
    if isinstance(a, Var) or isinstance(b, Var):
        return _binary(a, b, lambda x, y: np.where(cond, x, y),
                       lambda g, x, y, o: g * cond,
                       lambda g, x, y, o: g * ~cond)
    return np.where(cond, a, b)


# ---------------------------------------------------------------------------
# structure operations (lanes in, lanes or scalar out)


def vsum(x):
    """Sum every lane to a single scalar."""
    if isinstance(x, Dual):
        return Dual(vsum(x.value), None if x.tangent is None else vsum(x.tangent))
    if isinstance(x, Var):
        shape = np.shape(x.value)
        return x.tape._record(float(np.sum(x.value)), (x.index,),
                              lambda g: (g * np.ones(shape),))
    return float(np.sum(x))


def mean(x):
    n = np.size(detach(x))
    return vsum(x) / float(n)


def segment_sum(x, segments, num_segments):
    """Sum lanes into ``num_segments`` buckets given by the int array ``segments``."""
    segments = np.asarray(segments, dtype=np.intp)
    if isinstance(x, Dual):
        return Dual(segment_sum(x.value, segments, num_segments),
                    None if x.tangent is None
                    else segment_sum(x.tangent, segments, num_segments))
    if isinstance(x, Var):
        out = np.bincount(segments, weights=x.value, minlength=num_segments)
        return x.tape._record(out, (x.index,), lambda g: (g[segments],))
    return np.bincount(segments, weights=np.asarray(x, dtype=np.float64),
                       minlength=num_segments)


def gather(x, indices):
    """Select lanes of a 1-D value by integer index (duplicates allowed)."""
    indices = np.asarray(indices, dtype=np.intp)
    if isinstance(x, Dual):
        return Dual(gather(x.value, indices),
                    None if x.tangent is None else gather(x.tangent, indices))
    if isinstance(x, Var):
        n = np.shape(x.value)[0]
        return x.tape._record(x.value[indices], (x.index,),
                              lambda g: (np.bincount(indices, weights=g, minlength=n),))
    return np.asarray(x, dtype=np.float64)[indices]


def affine(x, w, b=None):
    """``x @ w + b`` for a (P, k) batch against (k, m) weights.

    Contractions go through non-optimized einsum on purpose: it is
    single-threaded and bitwise reproducible regardless of BLAS build.
    """
    if isinstance(x, Dual):
        v = affine(x.value, w, b)
        if x.tangent is None:
            return v
        return Dual(v, affine(x.tangent, w, None))
    if isinstance(w, Dual) or isinstance(b, Dual):
        raise ContractError("dual-valued weights are not supported; bind them on a tape")
    xv, xvar = _operand(x)
    wv, wvar = _operand(w)
    out = np.einsum("pk,km->pm", xv, wv)
    if b is not None:
        bv, bvar = _operand(b)
        out = out + bv
    else:
        bv, bvar = None, None
    node = xvar or wvar or bvar
    if node is None:
        return out
    parents = []
    pulls = []
    if xvar is not None:
        parents.append(xvar.index)
        pulls.append(lambda g: np.einsum("pm,km->pk", g, wv))
    if wvar is not None:
        parents.append(wvar.index)
        pulls.append(lambda g: np.einsum("pk,pm->km", xv, g))
    if bvar is not None:
        parents.append(bvar.index)
        pulls.append(lambda g: _unbroadcast(g, np.shape(bv)))
    return node.tape._record(out, tuple(parents), lambda g: tuple(p(g) for p in pulls))


def reshape(x, shape):
    """Lane-preserving reshape (total size unchanged)."""
    if isinstance(x, Dual):
        return Dual(reshape(x.value, shape),
                    None if x.tangent is None else reshape(x.tangent, shape))
    if isinstance(x, Var):
        orig = np.shape(x.value)
        return x.tape._record(np.reshape(x.value, shape), (x.index,),
                              lambda g: (np.reshape(g, orig),))
    return np.reshape(x, shape)


def row(w, j):
    """Row ``j`` of a (k, m) tensor; used to seed first-layer tangents."""
    j = int(j)
    if isinstance(w, Var):
        wv = w.value

        def pull(g):
            out = np.zeros_like(wv)
            out[j] = g
            return out

        return w.tape._record(wv[j], (w.index,), lambda g: (pull(g),))
    return np.asarray(w, dtype=np.float64)[j]


# ---------------------------------------------------------------------------
# field-level derivative queries


def _one_like(v):
    v = detach(v)
    return 1.0 if np.isscalar(v) or np.shape(v) == () else np.ones(np.shape(v))


def _zeros_like(v):
    v = detach(v)
    return 0.0 if np.isscalar(v) or np.shape(v) == () else np.zeros(np.shape(v))


def _value_tangent(out, ref):
    if isinstance(out, Dual):
        t = out.tangent if out.tangent is not None else _zeros_like(out.value)
        return out.value, t
    # field constant along the seeded coordinate
    return out, _zeros_like(ref)


def grad_wrt_inputs(field, t, x, p=None):
    """Value, time derivative, and spatial gradient of ``field`` at a point.

    ``field`` is called as ``field(t, x, p)`` with ``x`` a coordinate
    sequence.  Pass ``t=None`` for steady fields; the time slot of the
    result is then None.  Coordinates may be scalars or equal-length arrays
    (independent lanes).
    """
    x = list(x)
    dt = None
    value = None
    if t is not None:
        out = field(Dual(t, _one_like(t)), x, p)
        value, dt = _value_tangent(out, t)
    grad = []
    for j in range(len(x)):
        seeded = list(x)
        seeded[j] = Dual(x[j], _one_like(x[j]))
        out = field(t, seeded, p)
        v, g = _value_tangent(out, x[j])
        if value is None:
            value = v
        grad.append(g)
    assert_finite("field value", value)
    if dt is not None:
        assert_finite("time derivative", dt)
    for j, g in enumerate(grad):
        assert_finite(f"spatial gradient component {j}", g)
    return value, dt, grad


def second_spatial_derivatives(field, t, x, p=None):
    """Diagonal second spatial derivatives d2f/dx_j^2, one per coordinate."""
    x = list(x)
    out = []
    for j in range(len(x)):
        seeded = list(x)
        seeded[j] = Dual(Dual(x[j], _one_like(x[j])), _one_like(x[j]))
        r = field(t, seeded, p)
        if isinstance(r, Dual) and isinstance(r.tangent, Dual) \
                and r.tangent.tangent is not None:
            d2 = r.tangent.tangent
        else:
            d2 = _zeros_like(x[j])
        out.append(assert_finite(f"second derivative component {j}", d2))
    return out
