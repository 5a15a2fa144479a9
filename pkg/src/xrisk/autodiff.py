"""Reverse-mode automatic differentiation on dense float64 arrays.

A Node wraps a value and the recipe that produced it. Backward passes build
their vector-Jacobian products out of the same differentiable ops, so a
gradient is itself a Node graph and can be differentiated again (double
backward). A stop-gradient marker passes values forward while contributing
zero derivative downstream.

Scope: scalars, vectors, matrices; no broadcasting beyond scalar-with-array;
no third-derivative guarantees beyond what double backward happens to give.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible for an op; message names op and shapes."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf, which this artifact treats as an error."""


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


class Node:
    """One value in the computation graph.

    parents/vjps describe how to push an upstream gradient to each input.
    requires_grad is False for constants and for anything downstream of
    only constants, which prunes the recorded graph.
    """

    __slots__ = ("value", "parents", "vjps", "requires_grad", "stop_gradient", "name")

    def __init__(self, value, parents=(), vjps=(), requires_grad=False,
                 stop_gradient=False, name=""):
        self.value = _as_array(value)
        self.parents = tuple(parents)
        self.vjps = tuple(vjps)
        self.requires_grad = requires_grad
        self.stop_gradient = stop_gradient
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = self.name or "node"
        return f"Node({tag}, shape={self.value.shape}, grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def leaf(value, name="") -> Node:
    """Differentiable input parameter."""
    v = _as_array(value)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"leaf {name!r} constructed with non-finite entries")
    return Node(v, requires_grad=True, name=name)


def constant(value, name="") -> Node:
    v = _as_array(value)
    if not np.all(np.isfinite(v)):
        raise NonFiniteError(f"constant {name!r} constructed with non-finite entries")
    return Node(v, requires_grad=False, name=name)


def stop_gradient(x) -> Node:
    """Value of x with derivative flow cut."""
    x = as_node(x)
    return Node(x.value, requires_grad=False, stop_gradient=True, name=x.name)


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else _as_array(x)


def _make(op: str, val: np.ndarray, parents: tuple, vjps: tuple) -> Node:
    if not np.all(np.isfinite(val)):
        raise NonFiniteError(f"op {op} produced non-finite values")
    track = any(p.requires_grad for p in parents)
    if not track:
        return Node(val, name=op)
    return Node(val, parents=parents, vjps=vjps, requires_grad=True, name=op)


def _check_elementwise(op: str, a: Node, b: Node):
    # Equal shapes or one scalar operand; anything else is an error.
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def _reduce_to(g: Node, shape) -> Node:
    # Undo scalar-with-array broadcasting in a vjp.
    if g.shape == shape:
        return g
    if shape == ():
        return npsum(g)
    raise ShapeError(f"vjp reduction: cannot reduce {g.shape} to {shape}")


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_elementwise("add", a, b)
    return _make("add", a.value + b.value, (a, b),
                 (lambda g: _reduce_to(g, a.shape),
                  lambda g: _reduce_to(g, b.shape)))


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_elementwise("sub", a, b)
    return _make("sub", a.value - b.value, (a, b),
                 (lambda g: _reduce_to(g, a.shape),
                  lambda g: _reduce_to(neg(g), b.shape)))


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_elementwise("mul", a, b)
    return _make("mul", a.value * b.value, (a, b),
                 (lambda g: _reduce_to(mul(g, b), a.shape),
                  lambda g: _reduce_to(mul(g, a), b.shape)))


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    _check_elementwise("div", a, b)
    return _make("div", a.value / b.value, (a, b),
                 (lambda g: _reduce_to(div(g, b), a.shape),
                  lambda g: _reduce_to(neg(div(mul(g, a), mul(b, b))), b.shape)))


def neg(a) -> Node:
    a = as_node(a)
    return _make("neg", -a.value, (a,), (lambda g: neg(g),))


def exp(a) -> Node:
    a = as_node(a)
    return _make("exp", np.exp(a.value), (a,), (lambda g: mul(g, exp(a)),))


def log(a) -> Node:
    a = as_node(a)
    return _make("log", np.log(a.value), (a,), (lambda g: div(g, a),))


def sqrt(a) -> Node:
    a = as_node(a)
    return _make("sqrt", np.sqrt(a.value), (a,),
                 (lambda g: div(g, mul(constant(2.0), sqrt(a))),))


def square(a) -> Node:
    a = as_node(a)
    return _make("square", np.square(a.value), (a,),
                 (lambda g: mul(g, mul(constant(2.0), a)),))


def tanh(a) -> Node:
    a = as_node(a)
    return _make("tanh", np.tanh(a.value), (a,),
                 (lambda g: mul(g, sub(constant(1.0), square(tanh(a)))),))


def sigmoid(a) -> Node:
    a = as_node(a)
    x = a.value
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _make("sigmoid", out, (a,),
                 (lambda g: mul(g, mul(sigmoid(a), sub(constant(1.0), sigmoid(a)))),))


def logistic_loss(a) -> Node:
    """Elementwise l(x) = log(1 + exp(-x)) via the stable softplus branch."""
    a = as_node(a)
    x = a.value
    val = np.maximum(-x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return _make("logistic_loss", val, (a,),
                 (lambda g: mul(g, sub(sigmoid(a), constant(1.0))),))


def npsum(a) -> Node:
    a = as_node(a)
    return _make("sum", np.sum(a.value), (a,),
                 (lambda g: mul(g, constant(np.ones(a.shape))),))


def mean(a) -> Node:
    a = as_node(a)
    n = max(a.value.size, 1)
    return _make("mean", np.mean(a.value), (a,),
                 (lambda g: mul(g, constant(np.full(a.shape, 1.0 / n))),))


def dot(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 1 or b.value.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: shapes {a.shape} and {b.shape} are incompatible")
    return _make("dot", a.value @ b.value, (a, b),
                 (lambda g: mul(g, b), lambda g: mul(g, a)))


def matvec(m, x) -> Node:
    m, x = as_node(m), as_node(x)
    if m.value.ndim != 2 or x.value.ndim != 1 or m.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: shapes {m.shape} and {x.shape} are incompatible")
    rows, cols = m.shape
    return _make("matvec", m.value @ x.value, (m, x),
                 (lambda g: matmul(reshape(g, (rows, 1)), reshape(x, (1, cols))),
                  lambda g: matvec(transpose(m), g)))


def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return _make("matmul", a.value @ b.value, (a, b),
                 (lambda g: matmul(g, transpose(b)),
                  lambda g: matmul(transpose(a), g)))


def transpose(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 2:
        raise ShapeError(f"transpose: expected matrix, got shape {a.shape}")
    return _make("transpose", a.value.T.copy(), (a,), (lambda g: transpose(g),))


def reshape(a, shape) -> Node:
    a = as_node(a)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}")
    old = a.shape
    return _make("reshape", a.value.reshape(shape), (a,),
                 (lambda g: reshape(g, old),))


def logsumexp(a) -> Node:
    a = as_node(a)
    if a.value.ndim != 1:
        raise ShapeError(f"logsumexp: expected vector, got shape {a.shape}")
    m = float(np.max(a.value))
    val = m + np.log(np.sum(np.exp(a.value - m)))
    return _make("logsumexp", val, (a,), (lambda g: mul(g, softmax(a)),))


def softmax(a) -> Node:
    a = as_node(a)
    return exp(sub(a, logsumexp(a)))


def softmax_cross_entropy(logits, target_onehot) -> Node:
    """log-sum-exp cross-entropy: lse(logits) - logits . onehot."""
    logits, target = as_node(logits), as_node(target_onehot)
    return sub(logsumexp(logits), dot(logits, target))


def norm2(a) -> Node:
    """Squared Euclidean norm."""
    return npsum(square(as_node(a)))


def grad(output: Node, params: Iterable[Node]) -> dict:
    """Reverse-mode gradients of a scalar output w.r.t. each param Node.

    Returns {param: grad Node}. The gradient graph is itself differentiable.
    Params the output does not depend on get zero gradients of matching
    shape (documented behavior, not an error).
    """
    params = list(params)
    if output.value.size != 1:
        raise ShapeError(f"grad: output must be scalar, got shape {output.shape}")

    # Topological order over the requires_grad subgraph, iterative DFS.
    order: list[Node] = []
    state: dict[int, int] = {}
    stack = [output]
    while stack:
        node = stack[-1]
        s = state.get(id(node), 0)
        if s == 0:
            state[id(node)] = 1
            for p in node.parents:
                if p.requires_grad and state.get(id(p), 0) == 0:
                    stack.append(p)
        else:
            stack.pop()
            if s == 1:
                state[id(node)] = 2
                order.append(node)

    grads: dict[int, Node] = {id(output): constant(np.ones(output.shape))}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None:
            continue
        for p, vjp in zip(node.parents, node.vjps):
            if not p.requires_grad:
                continue
            contrib = vjp(g)
            prev = grads.get(id(p))
            grads[id(p)] = contrib if prev is None else add(prev, contrib)

    out = {}
    for p in params:
        gp = grads.get(id(p))
        out[p] = gp if gp is not None else constant(np.zeros(p.shape))
    return out


def grad_of_grad(output: Node, first_params, probe_vectors, second_params) -> dict:
    """Mixed second derivative d(sum_i probe_i . d output/d first_i)/d second.

    Probes are held constant (stop-gradient), matching the weighted
    gradient-matching term's structure.
    """
    first_params = list(first_params)
    if isinstance(probe_vectors, (Node, np.ndarray, float, int)):
        probe_vectors = [probe_vectors]
    elif isinstance(probe_vectors, (list, tuple)) and probe_vectors and \
            all(isinstance(v, (float, int)) for v in probe_vectors):
        # A bare list of numbers is one probe vector, not several probes.
        probe_vectors = [probe_vectors]
    probe_vectors = [stop_gradient(as_node(v)) for v in probe_vectors]
    if len(probe_vectors) != len(first_params):
        raise ShapeError(
            f"grad_of_grad: {len(first_params)} first params but "
            f"{len(probe_vectors)} probe vectors")
    g = grad(output, first_params)
    contracted = None
    for p, v in zip(first_params, probe_vectors):
        term = npsum(mul(constant(v.value), g[p]))
        contracted = term if contracted is None else add(contracted, term)
    return grad(contracted, list(second_params))


def hvp(output: Node, params: list[Node], vectors) -> dict:
    """Hessian-vector product of a scalar output: d(v . grad)/d params."""
    return grad_of_grad(output, params, vectors, params)
