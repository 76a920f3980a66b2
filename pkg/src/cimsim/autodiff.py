"""Reverse-mode automatic differentiation on an append-only tape.

Node values are numpy arrays (scalars are 0-d arrays), evaluated eagerly at
record time.  The op set is the one the device laws and the crossbar chain
need: add/sub/mul/neg, exp/log/sinh/tanh, ln(1+e^x), relu, affine, matmul,
plus index/shape plumbing (take, pad, reshape, transpose, axis sums).  Extra
primitives (e.g. the fused FG column-sum) register through
:func:`register_op` with their own vjp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import CimSimError
from .numerics import ln1pexp, sigmoid


class TapeError(CimSimError, ValueError):
    """Misuse of the tape (cross-tape operands, unknown op, ...)."""


@dataclass
class Node:
    op: str
    args: tuple[int, ...]
    value: np.ndarray
    ctx: tuple = ()


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    params: list[int] = field(default_factory=list)

    def append(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


@dataclass(frozen=True)
class DualValue:
    """Handle to one tape node."""

    tape: Tape
    node: int

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.node].value

    def __add__(self, other):
        return record("add", self, other)

    def __sub__(self, other):
        return record("sub", self, other)

    def __mul__(self, other):
        return record("mul", self, other)

    def __neg__(self):
        return record("neg", self)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# op name -> (forward(values, ctx) -> value, vjp(grad, values, out_value, ctx) -> grads)
_OPS: dict = {}


def register_op(name: str, forward, vjp):
    if name in _OPS:
        raise TapeError(f"op {name!r} already registered")
    _OPS[name] = (forward, vjp)


def _ew(f):
    return lambda vals, ctx: f(vals[0])


register_op("const", None, None)
register_op("param", None, None)
register_op(
    "add",
    lambda v, c: v[0] + v[1],
    lambda g, v, o, c: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)),
)
register_op(
    "sub",
    lambda v, c: v[0] - v[1],
    lambda g, v, o, c: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)),
)
register_op(
    "mul",
    lambda v, c: v[0] * v[1],
    lambda g, v, o, c: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)),
)
register_op("neg", _ew(np.negative), lambda g, v, o, c: (-g,))
register_op("exp", _ew(np.exp), lambda g, v, o, c: (g * o,))
register_op("log", _ew(np.log), lambda g, v, o, c: (g / v[0],))
register_op("sinh", _ew(np.sinh), lambda g, v, o, c: (g * np.cosh(v[0]),))
register_op("tanh", _ew(np.tanh), lambda g, v, o, c: (g * (1.0 - o * o),))
register_op("ln1pexp", _ew(ln1pexp), lambda g, v, o, c: (g * sigmoid(v[0]),))
# relu subgradient at exactly 0 is 0: saturated-off columns stay silent
register_op(
    "relu",
    lambda v, c: np.maximum(v[0], 0),
    lambda g, v, o, c: (np.where(v[0] > 0, g, np.zeros((), dtype=g.dtype)),),
)
# affine(x; a, b) = a*x + b with constant a, b (scalars or broadcastable arrays)
register_op(
    "affine",
    lambda v, c: c[0] * v[0] + c[1],
    lambda g, v, o, c: (_unbroadcast(np.asarray(c[0] * g), v[0].shape),),
)
register_op(
    "matmul",
    lambda v, c: v[0] @ v[1],
    lambda g, v, o, c: (g @ v[1].T, v[0].T @ g),
)
register_op(
    "sum",
    lambda v, c: v[0].sum(axis=c[0]),
    lambda g, v, o, c: (np.broadcast_to(np.expand_dims(g, c[0]) if c[0] is not None else g,
                                        v[0].shape),),
)
register_op(
    "reshape",
    lambda v, c: v[0].reshape(c[0]),
    lambda g, v, o, c: (g.reshape(v[0].shape),),
)
register_op(
    "transpose",
    lambda v, c: v[0].transpose(c[0]),
    lambda g, v, o, c: (g.transpose(np.argsort(c[0])),),
)
# take(x; flat_idx, out_shape): gather from the flattened input
register_op(
    "take",
    lambda v, c: v[0].reshape(-1)[c[0]].reshape(c[1]),
    lambda g, v, o, c: (_scatter_add(g, v[0], c[0]),),
)
# pick(x; rows, cols): x[rows, cols] for 2-D x
register_op(
    "pick",
    lambda v, c: v[0][c[0], c[1]],
    lambda g, v, o, c: (_scatter_add_2d(g, v[0], c[0], c[1]),),
)


def _scatter_add(g, x, flat_idx):
    out = np.zeros(x.size, dtype=g.dtype)
    np.add.at(out, flat_idx.reshape(-1), g.reshape(-1))
    return out.reshape(x.shape)


def _scatter_add_2d(g, x, rows, cols):
    out = np.zeros_like(x)
    np.add.at(out, (rows, cols), g)
    return out


def record(op: str, *operands, ctx: tuple = ()) -> DualValue:
    """Append one op node; the forward value is computed immediately."""
    if op not in _OPS:
        raise TapeError(f"unknown op {op!r}")
    if not operands:
        raise TapeError("record needs at least one operand")
    tape = operands[0].tape
    if any(d.tape is not tape for d in operands):
        raise TapeError("operands live on different tapes")
    fwd, _ = _OPS[op]
    values = [tape.nodes[d.node].value for d in operands]
    value = np.asarray(fwd(values, ctx))
    idx = tape.append(Node(op, tuple(d.node for d in operands), value, ctx))
    return DualValue(tape, idx)


def constant(tape: Tape, x) -> DualValue:
    idx = tape.append(Node("const", (), np.asarray(x)))
    return DualValue(tape, idx)


def parameter(tape: Tape, x) -> DualValue:
    idx = tape.append(Node("param", (), np.asarray(x)))
    tape.params.append(idx)
    return DualValue(tape, idx)


def backward(tape: Tape, output: DualValue | int, seed=None) -> dict[int, np.ndarray]:
    """Exact reverse-mode adjoints of ``output`` w.r.t. the tape's parameters.

    Returns {param node index: gradient array}.  ``seed`` defaults to 1 for a
    scalar output.
    """
    out_idx = output.node if isinstance(output, DualValue) else int(output)
    nodes = tape.nodes
    if not 0 <= out_idx < len(nodes):
        raise TapeError(f"output node {out_idx} not on tape")
    adjoint: dict[int, np.ndarray] = {}
    out_val = nodes[out_idx].value
    if seed is None:
        if out_val.size != 1:
            raise TapeError("non-scalar output needs an explicit seed")
        seed = np.ones_like(out_val)
    adjoint[out_idx] = np.asarray(seed, dtype=out_val.dtype)
    for i in range(out_idx, -1, -1):
        g = adjoint.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        if node.op in ("const", "param"):
            if node.op == "param":
                adjoint[i] = g  # keep: reported below
            continue
        _, vjp = _OPS[node.op]
        values = [nodes[a].value for a in node.args]
        grads = vjp(g, values, node.value, node.ctx)
        for a, ga in zip(node.args, grads):
            if ga is None:
                continue
            ga = np.asarray(ga)
            if a in adjoint:
                adjoint[a] = adjoint[a] + ga
            else:
                adjoint[a] = ga
    return {p: adjoint.get(p, np.zeros_like(nodes[p].value)) for p in tape.params}


def adjoints_of(tape: Tape, output: DualValue, wrt: list[DualValue]) -> list[np.ndarray]:
    """Adjoints of arbitrary tape nodes, not just parameters."""
    saved = tape.params
    try:
        tape.params = [d.node for d in wrt]
        grads = backward(tape, output)
    finally:
        tape.params = saved
    return [grads[d.node] for d in wrt]


# convenience wrappers -----------------------------------------------------

def affine(x: DualValue, scale, shift) -> DualValue:
    return record("affine", x, ctx=(scale, shift))


def matmul(a: DualValue, b: DualValue) -> DualValue:
    return record("matmul", a, b)


def sum_along(x: DualValue, axis) -> DualValue:
    return record("sum", x, ctx=(axis,))


def reshape(x: DualValue, shape: tuple) -> DualValue:
    return record("reshape", x, ctx=(tuple(shape),))


def transpose(x: DualValue, axes: tuple) -> DualValue:
    return record("transpose", x, ctx=(tuple(axes),))


def take(x: DualValue, flat_idx: np.ndarray, out_shape: tuple) -> DualValue:
    return record("take", x, ctx=(flat_idx, tuple(out_shape)))


def pick(x: DualValue, rows: np.ndarray, cols: np.ndarray) -> DualValue:
    return record("pick", x, ctx=(rows, cols))


def relu(x: DualValue) -> DualValue:
    return record("relu", x)


def tanh(x: DualValue) -> DualValue:
    return record("tanh", x)


def exp(x: DualValue) -> DualValue:
    return record("exp", x)


def log(x: DualValue) -> DualValue:
    return record("log", x)


def sinh(x: DualValue) -> DualValue:
    return record("sinh", x)


def softplus(x: DualValue) -> DualValue:
    return record("ln1pexp", x)


def logsumexp_rows(z: DualValue) -> DualValue:
    """Row-wise logsumexp of a 2-D node, shift-stabilized by a constant max."""
    m = z.value.max(axis=1, keepdims=True)  # constant shift: gradient-neutral
    shifted = affine(z, np.asarray(1.0, dtype=z.value.dtype), -m)
    s = sum_along(exp(shifted), 1)
    return record("add", log(s), constant(z.tape, m[:, 0]))