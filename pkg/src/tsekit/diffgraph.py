"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tape records every operation applied to its nodes in topological order.
Leaves are constants, named inputs, or named parameters; only parameters
receive gradients.  The tape can be re-evaluated after rebinding leaves,
which is what `grad_check` uses to compare analytic gradients against
central finite differences.

Values are plain numpy float64 arrays; scalars are 0-d arrays.  Kernels
never mutate their inputs.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
from scipy.special import expit


class GraphError(Exception):
    """Shape mismatch, non-finite value, or tape misuse."""


# ---------------------------------------------------------------------------
# tape and nodes

class Node:
    """Handle to one tape entry. Supports +, -, *, / with nodes or scalars."""

    __slots__ = ("tape", "idx", "kind", "op", "inputs", "attrs", "value", "needs_grad")

    def __init__(self, tape, idx, kind, op, inputs, attrs, value, needs_grad):
        self.tape = tape
        self.idx = idx
        self.kind = kind            # "const" | "input" | "param" | "op"
        self.op = op
        self.inputs = inputs        # tuple of Node
        self.attrs = attrs
        self.value = value
        self.needs_grad = needs_grad

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, _lift(self.tape, other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(self.tape, other))

    def __rsub__(self, other):
        return sub(_lift(self.tape, other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_lift(self.tape, other), self)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        return f"Node({self.idx}, {self.op or self.kind}, shape={self.value.shape})"


def _as_value(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    return v


def _lift(tape: "Tape", x) -> Node:
    if isinstance(x, Node):
        if x.tape is not tape:
            raise GraphError("nodes belong to different tapes")
        return x
    return tape.const(x)


class Tape:
    """Ordered operation record with named, rebind-able leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._names: dict[str, Node] = {}
        self._outputs: dict[str, Node] = {}

    def _leaf(self, kind, name, value, needs_grad):
        if name is not None:
            if name in self._names:
                raise GraphError(f"duplicate leaf name {name!r}")
        v = _as_value(value)
        node = Node(self, len(self.nodes), kind, None, (), name, v, needs_grad)
        self.nodes.append(node)
        if name is not None:
            self._names[name] = node
        return node

    def const(self, value) -> Node:
        return self._leaf("const", None, value, False)

    def input(self, name: str, value) -> Node:
        """Named leaf that can be rebound; not differentiated."""
        return self._leaf("input", name, value, False)

    def param(self, name: str, value) -> Node:
        """Named trainable leaf; receives a gradient in backward()."""
        return self._leaf("param", name, value, True)

    def param_names(self) -> list[str]:
        return [n for n, nd in self._names.items() if nd.kind == "param"]

    def mark_output(self, name: str, node: Node) -> Node:
        self._outputs[name] = node
        return node

    def rebind(self, name: str, value) -> None:
        node = self._names.get(name)
        if node is None:
            raise GraphError(f"unknown leaf {name!r}")
        v = _as_value(value)
        if v.shape != node.value.shape:
            raise GraphError(
                f"rebind {name!r}: shape {v.shape} != bound shape {node.value.shape}")
        node.value = v

    def forward(self) -> None:
        """Recompute every op node, in order, from the current leaf values."""
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            for node in self.nodes:
                if node.kind != "op":
                    continue
                out = _FORWARD[node.op](node.attrs, *[i.value for i in node.inputs])
                if not np.all(np.isfinite(out)):
                    raise GraphError(
                        f"non-finite output at node {node.idx} (op {node.op})")
                node.value = out


def _apply(kind: str, inputs: Iterable[Node], attrs=None) -> Node:
    inputs = tuple(inputs)
    tape = inputs[0].tape
    for n in inputs[1:]:
        if n.tape is not tape:
            raise GraphError("nodes belong to different tapes")
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        out = _FORWARD[kind](attrs, *[n.value for n in inputs])
    if not np.all(np.isfinite(out)):
        raise GraphError(
            f"non-finite output at node {len(tape.nodes)} (op {kind})")
    node = Node(tape, len(tape.nodes), "op", kind, inputs, attrs, out,
                any(n.needs_grad for n in inputs))
    tape.nodes.append(node)
    return node


# ---------------------------------------------------------------------------
# operation registry

_FORWARD: dict[str, Callable] = {}
_VJP: dict[str, Callable] = {}


def register_op(kind: str, forward: Callable, vjp: Callable) -> None:
    """Register an op: forward(attrs, *values) and vjp(attrs, out, values, g)."""
    _FORWARD[kind] = forward
    _VJP[kind] = vjp


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Adjoint of numpy broadcasting: sum g down to the given shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs > 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_matmul(a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise GraphError(f"matmul: incompatible shapes {a.shape} x {b.shape}")


def _stable_sigmoid(x):
    return expit(x)


def _ew(fn):
    # elementwise forward with numpy broadcasting
    return lambda attrs, *v: _as_value(fn(*v))


register_op(
    "add", _ew(lambda a, b: a + b),
    lambda attrs, out, v, g: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)))
register_op(
    "sub", _ew(lambda a, b: a - b),
    lambda attrs, out, v, g: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)))
register_op(
    "mul", _ew(lambda a, b: a * b),
    lambda attrs, out, v, g: (_unbroadcast(g * v[1], v[0].shape),
                              _unbroadcast(g * v[0], v[1].shape)))
register_op(
    "div", _ew(lambda a, b: a / b),
    lambda attrs, out, v, g: (_unbroadcast(g / v[1], v[0].shape),
                              _unbroadcast(-g * v[0] / (v[1] * v[1]), v[1].shape)))


def _matmul_fw(attrs, a, b):
    _check_matmul(a, b)
    return a @ b


register_op("matmul", _matmul_fw,
            lambda attrs, out, v, g: (g @ v[1].T, v[0].T @ g))

register_op("transpose", lambda attrs, a: a.T,
            lambda attrs, out, v, g: (g.T,))


def _reshape_fw(attrs, a):
    if int(np.prod(attrs)) != a.size:
        raise GraphError(f"reshape: cannot reshape {a.shape} to {attrs}")
    return a.reshape(attrs)


register_op("reshape", _reshape_fw,
            lambda attrs, out, v, g: (g.reshape(v[0].shape),))


def _concat_fw(attrs, *vals):
    return np.concatenate(vals, axis=attrs)


def _concat_vjp(attrs, out, vals, g):
    grads = []
    offset = 0
    for a in vals:
        n = a.shape[attrs]
        idx = [slice(None)] * g.ndim
        idx[attrs] = slice(offset, offset + n)
        grads.append(g[tuple(idx)])
        offset += n
    return tuple(grads)


register_op("concat", _concat_fw, _concat_vjp)


def _slice_fw(attrs, a):
    axis, start, stop = attrs
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, stop)
    return a[tuple(idx)]


def _slice_vjp(attrs, out, v, g):
    axis, start, stop = attrs
    z = np.zeros_like(v[0])
    idx = [slice(None)] * z.ndim
    idx[axis] = slice(start, stop)
    z[tuple(idx)] = g
    return (z,)


register_op("slice", _slice_fw, _slice_vjp)


def _sum_fw(attrs, a):
    return _as_value(np.sum(a, axis=attrs))


def _spread(g, shape, axis):
    if axis is None:
        return np.full(shape, g)
    return np.broadcast_to(np.expand_dims(g, axis), shape).copy()


register_op("sum", _sum_fw,
            lambda attrs, out, v, g: (_spread(g, v[0].shape, attrs),))


def _mean_fw(attrs, a):
    return _as_value(np.mean(a, axis=attrs))


def _mean_vjp(attrs, out, v, g):
    n = v[0].size if attrs is None else v[0].shape[attrs]
    return (_spread(g, v[0].shape, attrs) / n,)


register_op("mean", _mean_fw, _mean_vjp)

register_op("broadcast", lambda attrs, a: np.broadcast_to(a, attrs).copy(),
            lambda attrs, out, v, g: (_unbroadcast(g, v[0].shape),))

register_op("tanh", _ew(np.tanh),
            lambda attrs, out, v, g: (g * (1.0 - out * out),))
register_op("sigmoid", _ew(_stable_sigmoid),
            lambda attrs, out, v, g: (g * out * (1.0 - out),))
register_op("relu", _ew(lambda a: np.maximum(a, 0.0)),
            lambda attrs, out, v, g: (g * (v[0] > 0.0),))
register_op("exp", _ew(np.exp),
            lambda attrs, out, v, g: (g * out,))
register_op("log", _ew(np.log),
            lambda attrs, out, v, g: (g / v[0],))
register_op("sqrt", _ew(np.sqrt),
            lambda attrs, out, v, g: (g / (2.0 * out),))
register_op("square", _ew(np.square),
            lambda attrs, out, v, g: (2.0 * v[0] * g,))


def _l2_vjp(attrs, out, v, g):
    n = float(out)
    if n == 0.0:
        return (np.zeros_like(v[0]),)
    return (g * v[0] / n,)


register_op("l2_norm", lambda attrs, a: _as_value(np.sqrt(np.sum(a * a))), _l2_vjp)


def _log_softmax_fw(attrs, a):
    m = np.max(a, axis=-1, keepdims=True)
    s = a - m
    return s - np.log(np.sum(np.exp(s), axis=-1, keepdims=True))


def _log_softmax_vjp(attrs, out, v, g):
    return (g - np.exp(out) * np.sum(g, axis=-1, keepdims=True),)


register_op("log_softmax", _log_softmax_fw, _log_softmax_vjp)


def _gather_index_fw(attrs, a):
    if a.ndim != 1:
        raise GraphError("gather_index expects a 1-d input")
    return _as_value(a[attrs])


def _gather_index_vjp(attrs, out, v, g):
    z = np.zeros_like(v[0])
    z[attrs] = g
    return (z,)


register_op("gather_index", _gather_index_fw, _gather_index_vjp)


def _gather_rows_fw(attrs, a):
    if a.ndim != 2:
        raise GraphError("gather_rows expects a 2-d input")
    return _as_value(a[np.arange(a.shape[0]), attrs])


def _gather_rows_vjp(attrs, out, v, g):
    z = np.zeros_like(v[0])
    z[np.arange(z.shape[0]), attrs] = g
    return (z,)


register_op("gather_rows", _gather_rows_fw, _gather_rows_vjp)

register_op("scale", lambda attrs, a: attrs * a,
            lambda attrs, out, v, g: (attrs * g,))

register_op("permute", lambda attrs, a: np.transpose(a, attrs),
            lambda attrs, out, v, g: (np.transpose(g, np.argsort(attrs)),))


# ---------------------------------------------------------------------------
# public op constructors

def add(a: Node, b: Node) -> Node:
    return _apply("add", (a, b))


def sub(a: Node, b: Node) -> Node:
    return _apply("sub", (a, b))


def mul(a: Node, b: Node) -> Node:
    return _apply("mul", (a, b))


def div(a: Node, b: Node) -> Node:
    return _apply("div", (a, b))


def matmul(a: Node, b: Node) -> Node:
    return _apply("matmul", (a, b))


def transpose(a: Node) -> Node:
    return _apply("transpose", (a,))


def reshape(a: Node, shape) -> Node:
    return _apply("reshape", (a,), tuple(int(s) for s in shape))


def concat(nodes, axis: int) -> Node:
    return _apply("concat", tuple(nodes), int(axis))


def slice_axis(a: Node, axis: int, start: int, stop: int) -> Node:
    return _apply("slice", (a,), (int(axis), int(start), int(stop)))


def sum_(a: Node, axis: int | None = None) -> Node:
    return _apply("sum", (a,), axis)


def mean(a: Node, axis: int | None = None) -> Node:
    return _apply("mean", (a,), axis)


def broadcast_to(a: Node, shape) -> Node:
    return _apply("broadcast", (a,), tuple(int(s) for s in shape))


def tanh(a: Node) -> Node:
    return _apply("tanh", (a,))


def sigmoid(a: Node) -> Node:
    return _apply("sigmoid", (a,))


def relu(a: Node) -> Node:
    return _apply("relu", (a,))


def exp(a: Node) -> Node:
    return _apply("exp", (a,))


def log(a: Node) -> Node:
    return _apply("log", (a,))


def sqrt(a: Node) -> Node:
    return _apply("sqrt", (a,))


def square(a: Node) -> Node:
    return _apply("square", (a,))


def l2_norm(a: Node) -> Node:
    return _apply("l2_norm", (a,))


def log_softmax(a: Node) -> Node:
    """Log-probabilities along the last axis (shift-by-max, fused)."""
    return _apply("log_softmax", (a,))


def gather_index(a: Node, index: int) -> Node:
    return _apply("gather_index", (a,), int(index))


def gather_rows(a: Node, indices) -> Node:
    """out[i] = a[i, indices[i]] for a 2-d input."""
    return _apply("gather_rows", (a,), np.asarray(indices, dtype=np.intp))


def scale(a: Node, c: float) -> Node:
    return _apply("scale", (a,), float(c))


def permute(a: Node, axes) -> Node:
    return _apply("permute", (a,), tuple(int(x) for x in axes))


def dot(a: Node, b: Node) -> Node:
    return sum_(mul(a, b))


def logsumexp(x: Node) -> Node:
    """log(sum(exp(x))) with a detached shift-by-max; overflow-safe."""
    shift = float(np.max(x.value))
    return add(log(sum_(exp(sub(x, x.tape.const(shift))))), x.tape.const(shift))


# ---------------------------------------------------------------------------
# evaluation, backward, gradient checking

def tape_eval(tape: Tape, inputs: dict[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """Rebind the given leaves, recompute the tape, return marked outputs."""
    if inputs:
        for name, value in inputs.items():
            tape.rebind(name, value)
    tape.forward()
    return {name: node.value for name, node in tape._outputs.items()}


def backward(tape: Tape, loss: Node) -> dict[str, np.ndarray]:
    """Accumulate d(loss)/d(param) for every named parameter on the tape.

    Parameters that do not influence the loss get zero tensors.  The walk
    order is fixed (reverse node order), so repeated calls are bitwise
    reproducible.
    """
    if loss.tape is not tape:
        raise GraphError("loss node does not belong to this tape")
    if loss.value.shape != ():
        raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.idx] = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes[: loss.idx + 1]):
        g = grads[node.idx]
        if g is None or node.kind != "op" or not node.needs_grad:
            continue
        vals = [i.value for i in node.inputs]
        gins = _VJP[node.op](node.attrs, node.value, vals, g)
        for inp, gi in zip(node.inputs, gins):
            if gi is None or not inp.needs_grad:
                continue
            if grads[inp.idx] is None:
                grads[inp.idx] = gi
            else:
                grads[inp.idx] = grads[inp.idx] + gi
    out: dict[str, np.ndarray] = {}
    for name, node in tape._names.items():
        if node.kind != "param":
            continue
        g = grads[node.idx]
        out[name] = np.zeros_like(node.value) if g is None else np.asarray(g)
    return out


def grad_check(tape: Tape, loss: Node, params: dict[str, np.ndarray],
               h: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    Every coordinate of every given parameter is perturbed by +-h; the
    relative error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).
    The tape is restored to the given parameter values on return.
    """
    if h <= 0:
        raise GraphError("h must be positive")
    for name, v in params.items():
        tape.rebind(name, v)
    tape.forward()
    analytic = backward(tape, loss)
    max_rel = 0.0
    for name, base in params.items():
        base = _as_value(base)
        work = base.copy()
        flat = work.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        tape.rebind(name, work)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            tape.forward()
            f_plus = float(loss.value)
            flat[i] = orig - h
            tape.forward()
            f_minus = float(loss.value)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise GraphError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = a_flat[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
            if rel > max_rel:
                max_rel = rel
        tape.rebind(name, base)
    tape.forward()
    return max_rel
