"""Compactly supported test functions and quadrature.

Test functions are multilinear hats on axis-aligned boxes.  A hat centered
at ``c`` with halfwidths ``h`` has support ``[c - h, c + h]``, value 1 at
the center, 0 on the support boundary, and is assembled from 2^d cubical
elements that share the center as a corner.  On the reference element
``[-1, 1]^d`` the two 1-D shape functions are

    phi_1(xi) = 0.5 (1 - xi),   phi_2(xi) = 0.5 (1 + xi)

and multi-d shapes are tensor products.  The isoparametric map from the
reference element to a physical box is affine, so the Jacobian is the
constant diagonal ``diag(h_elem) / 2``.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ._errors import ContractError

_GAUSS_MAX_ORDER = 5
_GAUSS = {n: np.polynomial.legendre.leggauss(n) for n in range(1, _GAUSS_MAX_ORDER + 1)}


def gauss_legendre(order):
    """Nodes and weights on [-1, 1]; exact for polynomials of degree 2*order - 1."""
    if order not in _GAUSS:
        raise ContractError(f"quadrature order must be in 1..{_GAUSS_MAX_ORDER}, got {order}")
    nodes, weights = _GAUSS[order]
    return nodes.copy(), weights.copy()


def shape_1d(i, xi):
    """1-D linear shape function i in {1, 2} on the reference interval."""
    xi = np.asarray(xi, dtype=np.float64)
    if i == 1:
        return 0.5 * (1.0 - xi)
    if i == 2:
        return 0.5 * (1.0 + xi)
    raise ContractError(f"shape index must be 1 or 2, got {i}")


def shape_1d_deriv(i):
    """Constant reference derivative of shape_1d."""
    if i == 1:
        return -0.5
    if i == 2:
        return 0.5
    raise ContractError(f"shape index must be 1 or 2, got {i}")


def shape_nd(indices, xi):
    """Tensor-product shape value at reference point(s).

    ``indices`` is a length-d corner selector; ``xi`` is (d,) or (Q, d).
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    if xi.shape[1] != len(indices):
        raise ContractError("reference point dimension does not match corner selector")
    out = np.ones(xi.shape[0])
    for j, i in enumerate(indices):
        out = out * shape_1d(i, xi[:, j])
    return out if out.size > 1 else float(out[0])


def shape_grad_physical(indices, xi, h_elem):
    """Physical gradient of a tensor-product shape on a box with side lengths h_elem.

    Component j carries the chain-rule factor 2 / h_elem[j].
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=np.float64))
    d = len(indices)
    grad = np.empty((xi.shape[0], d))
    for j in range(d):
        g = np.full(xi.shape[0], shape_1d_deriv(indices[j]) * 2.0 / h_elem[j])
        for k in range(d):
            if k != j:
                g = g * shape_1d(indices[k], xi[:, k])
        grad[:, j] = g
    return grad


@dataclass(frozen=True)
class ElementPatch:
    """Support of one hat test function.

    ``lattice`` is the integer index of the center when the patch sits on a
    uniform grid (lets the assembly share elements between neighbors); None
    for free-floating patches.
    """

    center: tuple
    halfwidth: tuple
    lattice: tuple | None = None

    def __post_init__(self):
        if len(self.center) != len(self.halfwidth):
            raise ContractError("center and halfwidth dimension mismatch")
        if any(h <= 0.0 for h in self.halfwidth):
            raise ContractError("patch halfwidths must be positive")

    @property
    def dim(self):
        return len(self.center)

    def support(self):
        lo = tuple(c - h for c, h in zip(self.center, self.halfwidth))
        hi = tuple(c + h for c, h in zip(self.center, self.halfwidth))
        return lo, hi


def patch_elements(patch):
    """Yield (sigma, lo, hi, corner) for the 2^d elements of a patch.

    sigma_j = 0 marks the element on the negative side of the center along
    axis j; the center is then that element's high corner (index 2).
    """
    d = patch.dim
    for sigma in itertools.product((0, 1), repeat=d):
        lo = tuple(patch.center[j] - patch.halfwidth[j] if sigma[j] == 0
                   else patch.center[j] for j in range(d))
        hi = tuple(patch.center[j] if sigma[j] == 0
                   else patch.center[j] + patch.halfwidth[j] for j in range(d))
        corner = tuple(2 if sigma[j] == 0 else 1 for j in range(d))
        yield sigma, lo, hi, corner


def element_quadrature(lo, hi, corner, order):
    """Tensor Gauss-Legendre rule on the box [lo, hi] with hat shape data.

    Returns (points (Q, d), weights (Q,), v (Q,), grad (Q, d)); weights
    absorb the Jacobian determinant prod(h_j) / 2^d, and grad is physical.
    """
    d = len(lo)
    nodes, wts = gauss_legendre(order)
    h_elem = [hi[j] - lo[j] for j in range(d)]
    axes = np.meshgrid(*([nodes] * d), indexing="ij")
    xi = np.stack([a.ravel() for a in axes], axis=1)
    waxes = np.meshgrid(*([wts] * d), indexing="ij")
    w = np.prod(np.stack([a.ravel() for a in waxes], axis=1), axis=1)
    jac = 1.0
    for j in range(d):
        jac *= h_elem[j] / 2.0
    points = np.empty_like(xi)
    for j in range(d):
        points[:, j] = lo[j] + (xi[:, j] + 1.0) * 0.5 * h_elem[j]
    v = np.atleast_1d(shape_nd(corner, xi))
    grad = shape_grad_physical(corner, xi, h_elem)
    return points, w * jac, v, grad


@dataclass
class PatchQuadrature:
    """Concatenated quadrature data over every element of one patch."""

    points: np.ndarray   # (Q, d)
    weights: np.ndarray  # (Q,), Jacobian included
    v: np.ndarray        # (Q,)
    grad: np.ndarray     # (Q, d), physical


def quadrature_points(patch, order):
    """All quadrature data for a patch: 2^d elements x order^d nodes."""
    pts, wts, vs, grads = [], [], [], []
    for _, lo, hi, corner in patch_elements(patch):
        p, w, v, g = element_quadrature(lo, hi, corner, order)
        pts.append(p)
        wts.append(w)
        vs.append(v)
        grads.append(g)
    return PatchQuadrature(np.concatenate(pts), np.concatenate(wts),
                           np.concatenate(vs), np.concatenate(grads))


def integrate_over_support(integrand, patch, order, time_axis=False):
    """Quadrature sum of ``integrand(point, v, grad_x, v_dot)`` over the support.

    With ``time_axis`` the patch's 0th coordinate is time: ``v_dot`` receives
    the test function's time derivative and ``grad_x`` only the spatial part.
    Without it ``v_dot`` is None.
    """
    quad = quadrature_points(patch, order)
    total = 0.0
    for q in range(quad.points.shape[0]):
        if time_axis:
            v_dot = quad.grad[q, 0]
            grad_x = quad.grad[q, 1:]
        else:
            v_dot = None
            grad_x = quad.grad[q]
        total = total + quad.weights[q] * integrand(quad.points[q], quad.v[q],
                                                    grad_x, v_dot)
    return total


def hat_mass(patch):
    """Exact integral of the hat over its support: prod(h_j)."""
    out = 1.0
    for h in patch.halfwidth:
        out *= h
    return out
