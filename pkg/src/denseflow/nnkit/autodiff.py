"""Tape-based reverse-mode differentiation over numpy arrays.

Nodes are appended in execution order, which is already a topological
order; :meth:`Tape.backward` walks it once in reverse. Image tensors use
NHWC layout.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from scipy.special import expit


class NonFiniteError(FloatingPointError):
    def __init__(self, node_id: int, op: str):
        super().__init__(f"non-finite value produced by node {node_id} ({op})")
        self.node_id = node_id
        self.op = op


class DisconnectedError(RuntimeError):
    pass


class Node:
    __slots__ = ("id", "op", "value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, id_, op, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.id = id_
        self.op = op
        self.value = value
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.id}, {self.op}, shape={self.value.shape})"


class Tape:
    def __init__(self, check_finite: bool = True):
        self.nodes: list[Node] = []
        self.check_finite = check_finite

    def leaf(self, value, requires_grad: bool = False, name: str | None = None) -> Node:
        node = Node(len(self.nodes), "leaf", np.asarray(value), requires_grad=requires_grad, name=name)
        self.nodes.append(node)
        return node

    def record(self, op: str, value: np.ndarray, parents: Sequence[Node],
               backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Node:
        needs = any(p.requires_grad for p in parents)
        node = Node(len(self.nodes), op, value, parents, backward_fn if needs else None, needs)
        if self.check_finite and not np.all(np.isfinite(value)):
            raise NonFiniteError(node.id, op)
        self.nodes.append(node)
        return node

    def backward(self, loss: Node, seed=None) -> None:
        """Accumulate d loss / d node into ``node.grad`` for every node feeding ``loss``.

        ``seed`` is the upstream adjoint of ``loss`` (ones by default, i.e. a
        scalar loss seeded with 1).
        """
        if loss.id >= len(self.nodes) or self.nodes[loss.id] is not loss:
            raise DisconnectedError("loss node was not recorded on this tape")
        if not loss.requires_grad:
            raise DisconnectedError("loss node does not depend on any trainable leaf")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value) if seed is None else np.asarray(seed, dtype=loss.value.dtype).reshape(loss.value.shape)
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- primitives


def add(tape: Tape, a: Node, b: Node) -> Node:
    return tape.record("add", a.value + b.value, (a, b),
                       lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(tape: Tape, a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return tape.record("mul", av * bv, (a, b),
                       lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def matmul(tape: Tape, a: Node, b: Node) -> Node:
    av, bv = a.value, b.value
    return tape.record("matmul", av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def linear(tape: Tape, x: Node, w: Node, b: Node | None = None) -> Node:
    """Per-pixel channel mixing: (..., Cin) @ (Cin, Cout) [+ b]."""
    xv, wv = x.value, w.value
    out = xv @ wv
    if b is not None:
        out = out + b.value

    def vjp(g):
        gx = g @ wv.T
        gw = xv.reshape(-1, xv.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        if b is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return tape.record("linear", out, (x, w) if b is None else (x, w, b), vjp)


def sum_(tape: Tape, a: Node) -> Node:
    shape = a.shape
    return tape.record("sum", np.asarray(a.value.sum()), (a,),
                       lambda g: (np.broadcast_to(g, shape).astype(a.value.dtype),))


def mean(tape: Tape, a: Node) -> Node:
    shape, n = a.shape, a.value.size
    return tape.record("mean", np.asarray(a.value.mean()), (a,),
                       lambda g: (np.broadcast_to(g / n, shape).astype(a.value.dtype),))


def square(tape: Tape, a: Node) -> Node:
    av = a.value
    return tape.record("square", av * av, (a,), lambda g: (2.0 * g * av,))


def silu(tape: Tape, a: Node) -> Node:
    x = a.value
    sig = expit(x)
    out = x * sig
    return tape.record("silu", out, (a,), lambda g: (g * (sig * (1.0 + x * (1.0 - sig))),))


def tanh(tape: Tape, a: Node) -> Node:
    out = np.tanh(a.value)
    return tape.record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(tape: Tape, a: Node) -> Node:
    x = a.value
    return tape.record("relu", np.maximum(x, 0), (a,), lambda g: (g * (x > 0),))


def concat(tape: Tape, parts: Sequence[Node], axis: int = -1) -> Node:
    values = [p.value for p in parts]
    out = np.concatenate(values, axis=axis)
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return tape.record("concat", out, parts, back)


def _im2col3(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((n, h, w, 9, c), dtype=x.dtype)
    for k in range(9):
        dy, dx = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, dy:dy + h, dx:dx + w, :]
    return cols.reshape(n * h * w, 9 * c)


def conv3x3(tape: Tape, x: Node, w: Node, b: Node | None = None) -> Node:
    """Stride-1, zero-padded 3x3 convolution. x: (N,H,W,Cin), w: (3,3,Cin,Cout), b: (Cout,)."""
    xv, wv = x.value, w.value
    n, h, wd, cin = xv.shape
    if wv.shape[:3] != (3, 3, cin):
        raise ValueError(f"kernel {wv.shape} does not match input channels {cin}")
    cout = wv.shape[3]
    cols = _im2col3(xv)
    wmat = wv.reshape(9 * cin, cout)
    out = cols @ wmat
    if b is not None:
        out = out + b.value
    out = out.reshape(n, h, wd, cout)

    def back(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(wv.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, h, wd, 9, cin)
            gxp = np.zeros((n, h + 2, wd + 2, cin), dtype=g.dtype)
            for k in range(9):
                dy, dx = divmod(k, 3)
                gxp[:, dy:dy + h, dx:dx + wd, :] += gcols[:, :, :, k, :]
            gx = gxp[:, 1:-1, 1:-1, :]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return tape.record("conv3x3", out, parents, back)


def avgpool2(tape: Tape, x: Node) -> Node:
    """2x2 average pooling; odd trailing rows/cols are dropped."""
    xv = x.value
    n, h, w, c = xv.shape
    h2, w2 = h // 2, w // 2
    out = xv[:, :2 * h2, :2 * w2].reshape(n, h2, 2, w2, 2, c).mean(axis=(2, 4))

    def back(g):
        gx = np.zeros_like(xv)
        gx[:, :2 * h2, :2 * w2] = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0
        return (gx,)

    return tape.record("avgpool2", out, (x,), back)


def upsample2(tape: Tape, x: Node) -> Node:
    """Nearest-neighbour 2x upsampling."""
    out = np.repeat(np.repeat(x.value, 2, axis=1), 2, axis=2)
    n, h, w, c = x.shape

    def back(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return tape.record("upsample2", out, (x,), back)
