"""Reverse-mode automatic differentiation on a dynamic tape.

Every value is a 2-D float64 array; scalars ride along as 1x1. The op set is
deliberately small and closed: composite quantities (divisions, diagonal
embeddings, row stacking) are built from these primitives rather than added
as new ops. Gradients accumulate in a fixed order (descending node index),
``sum``/``mean``/``dot`` reduce with math.fsum so their forward values do not
depend on element order, and relu takes derivative 0 at exactly 0.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericalError


class Var:
    """Handle to one tape node. Holds the forward value and its node id."""

    __slots__ = ("value", "tape", "nid")

    def __init__(self, value: np.ndarray, tape: "Tape", nid: int):
        self.value = value
        self.tape = tape
        self.nid = nid

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(nid={self.nid}, shape={self.value.shape})"


def _coerce_value(value, where: str) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{where}: values must be 2-D (scalars as 1x1), got ndim={arr.ndim}")
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{where}: non-finite value")
    return arr


class Tape:
    """Append-only record of the computation. One graph, one backward pass."""

    def __init__(self):
        self._parents: list[tuple[int, ...]] = []
        self._vjps: list[Callable | None] = []
        self._shapes: list[tuple[int, int]] = []
        self.leaf_ids: list[int] = []
        self.last_visited = 0

    def __len__(self):
        return len(self._parents)

    def leaf(self, value, requires_grad: bool = False) -> Var:
        v = self._record(_coerce_value(value, "leaf"), (), None)
        if requires_grad:
            self.leaf_ids.append(v.nid)
        return v

    def constant(self, value) -> Var:
        return self.leaf(value, requires_grad=False)

    def _record(self, value: np.ndarray, parents: tuple[int, ...], vjp) -> Var:
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._shapes.append(value.shape)
        return Var(value, self, len(self._parents) - 1)


def _unary(op: str, a: Var, value: np.ndarray, vjp) -> Var:
    if not isinstance(a, Var):
        raise ContractError(f"{op}: operand must be a Var")
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{op}: produced a non-finite value")
    return a.tape._record(value, (a.nid,), vjp)


def _pair(op: str, a, b) -> tuple[Var, Var]:
    if isinstance(a, Var) and isinstance(b, Var):
        if a.tape is not b.tape:
            raise ContractError(f"{op}: operands come from different tapes")
        return a, b
    if isinstance(a, Var):
        return a, a.tape.constant(b)
    if isinstance(b, Var):
        return b.tape.constant(a), b
    raise ContractError(f"{op}: at least one operand must be a Var")


def _binary(op: str, a: Var, b: Var, value: np.ndarray, vjp) -> Var:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{op}: produced a non-finite value")
    return a.tape._record(value, (a.nid, b.nid), vjp)


def _same_shape(op: str, a: Var, b: Var):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shapes {a.value.shape} and {b.value.shape} differ")


def add(a, b) -> Var:
    a, b = _pair("add", a, b)
    _same_shape("add", a, b)
    return _binary("add", a, b, a.value + b.value, lambda g: (g, g))


def sub(a, b) -> Var:
    a, b = _pair("sub", a, b)
    _same_shape("sub", a, b)
    return _binary("sub", a, b, a.value - b.value, lambda g: (g, -g))


def mul(a, b) -> Var:
    a, b = _pair("mul", a, b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _binary("mul", a, b, av * bv, lambda g: (g * bv, g * av))


def matmul(a, b) -> Var:
    a, b = _pair("matmul", a, b)
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul: inner dimensions {a.value.shape} x {b.value.shape} do not match"
        )
    av, bv = a.value, b.value
    return _binary("matmul", a, b, av @ bv, lambda g: (g @ bv.T, av.T @ g))


def matvec(a, v) -> Var:
    a, v = _pair("matvec", a, v)
    if v.value.shape[1] != 1:
        raise DimensionError(f"matvec: second operand must be a column, got {v.value.shape}")
    return matmul(a, v)


def transpose(a: Var) -> Var:
    return _unary("transpose", a, a.value.T.copy(), lambda g: (g.T,))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _unary("scale", a, a.value * c, lambda g: (g * c,))


def broadcast_add_row(a, row) -> Var:
    """a (m,n) plus a (1,n) row replicated down the rows."""
    a, row = _pair("broadcast_add_row", a, row)
    m, n = a.value.shape
    if row.value.shape != (1, n):
        raise DimensionError(
            f"broadcast_add_row: row shape {row.value.shape} does not match matrix {a.value.shape}"
        )
    return _binary(
        "broadcast_add_row",
        a,
        row,
        a.value + row.value,
        lambda g: (g, g.sum(axis=0, keepdims=True)),
    )


def _fsum(arr: np.ndarray) -> float:
    return math.fsum(arr.ravel())


def vsum(a: Var) -> Var:
    """Sum of all entries (exactly rounded, so element order cannot matter)."""
    shape = a.value.shape
    val = np.array([[_fsum(a.value)]])
    return _unary("sum", a, val, lambda g: (np.full(shape, g[0, 0]),))


def vmean(a: Var) -> Var:
    shape = a.value.shape
    size = a.value.size
    if size == 0:
        raise DimensionError("mean: empty operand")
    val = np.array([[_fsum(a.value) / size]])
    return _unary("mean", a, val, lambda g: (np.full(shape, g[0, 0] / size),))


def dot(a, b) -> Var:
    a, b = _pair("dot", a, b)
    _same_shape("dot", a, b)
    av, bv = a.value, b.value
    val = np.array([[_fsum(av * bv)]])
    return _binary("dot", a, b, val, lambda g: (g[0, 0] * bv, g[0, 0] * av))


def square(a: Var) -> Var:
    av = a.value
    return _unary("square", a, av * av, lambda g: (2.0 * av * g,))


def vexp(a: Var) -> Var:
    out = np.exp(a.value)
    return _unary("exp", a, out, lambda g: (out * g,))


def vlog(a: Var) -> Var:
    if np.any(a.value <= 0.0):
        raise NumericalError("log: non-positive operand")
    av = a.value
    return _unary("log", a, np.log(av), lambda g: (g / av,))


def vsqrt(a: Var) -> Var:
    if np.any(a.value < 0.0):
        raise NumericalError("sqrt: negative operand")
    out = np.sqrt(a.value)
    return _unary("sqrt", a, out, lambda g: (g / (2.0 * out),))


def vtanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return _unary("tanh", a, out, lambda g: ((1.0 - out * out) * g,))


def relu(a: Var) -> Var:
    av = a.value
    mask = av > 0.0
    return _unary("relu", a, np.where(mask, av, 0.0), lambda g: (np.where(mask, g, 0.0),))


def softplus(a: Var) -> Var:
    av = a.value
    out = np.logaddexp(0.0, av)
    return _unary("softplus", a, out, lambda g: (expit(av) * g,))


def backward(loss: Var) -> dict[int, np.ndarray]:
    """Gradients of a scalar loss with respect to every requires-grad leaf.

    Returns {node id: gradient array}; leaves the loss does not depend on get
    zeros. Nodes are visited once each, in descending index order, and
    ``tape.last_visited`` records how many were touched.
    """
    if not isinstance(loss, Var):
        raise ContractError("backward: loss must be a Var")
    if loss.value.shape != (1, 1):
        raise ContractError(f"backward: loss must be scalar (1x1), got {loss.value.shape}")
    tape = loss.tape
    grads: list[np.ndarray | None] = [None] * len(tape)
    grads[loss.nid] = np.ones((1, 1))
    visited = 0
    for nid in range(loss.nid, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        visited += 1
        vjp = tape._vjps[nid]
        if vjp is None:
            continue
        for pid, contrib in zip(tape._parents[nid], vjp(g)):
            if grads[pid] is None:
                grads[pid] = contrib.copy()
            else:
                grads[pid] += contrib
    tape.last_visited = visited
    out = {}
    for nid in tape.leaf_ids:
        g = grads[nid]
        out[nid] = g if g is not None else np.zeros(tape._shapes[nid])
    return out


def grad_check(build, point, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``build(tape, var) -> scalar Var`` defines the function; ``point`` is the
    leaf value to differentiate at. Relative error is
    |analytic - numeric| / (|analytic| + 1e-8), maximized over entries.
    """
    p0 = _coerce_value(point, "grad_check")
    tape = Tape()
    v = tape.leaf(p0, requires_grad=True)
    analytic = backward(build(tape, v))[v.nid]

    def f(p: np.ndarray) -> float:
        t = Tape()
        out = build(t, t.leaf(p, requires_grad=True))
        if out.value.shape != (1, 1):
            raise ContractError("grad_check: build must return a scalar Var")
        return float(out.value[0, 0])

    numeric = np.zeros_like(p0)
    for idx in np.ndindex(*p0.shape):
        hi = p0.copy()
        lo = p0.copy()
        hi[idx] += h
        lo[idx] -= h
        numeric[idx] = (f(hi) - f(lo)) / (2.0 * h)
    rel = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(rel.max()) if rel.size else 0.0
