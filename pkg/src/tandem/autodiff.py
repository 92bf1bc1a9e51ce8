"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the active :class:`Tape` (define-by-run). Any
tensor that enters an op without a node on the active tape is registered as
a leaf. Outside a tape, ops simply compute values.

Broadcasting is limited to scalar-tensor pairs; everything else has to go
through an explicit op such as :func:`broadcast_to`.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "ShapeError", "tensor", "constant", "backward", "grad",
    "set_debug", "add", "sub", "mul", "matmul", "relu", "tanh", "sigmoid",
    "exp", "log", "softmax_last_dim", "concat_last_dim", "slice_", "sum_",
    "mean", "scale", "reshape", "transpose", "broadcast_to", "stack",
    "clip_min", "primitive",
]


class ShapeError(ValueError):
    pass


_state = threading.local()


def _active() -> "Tape | None":
    return getattr(_state, "tape", None)


def set_debug(flag: bool) -> None:
    """Enable NaN/Inf checks on every op output in the current thread."""
    _state.debug = bool(flag)


def _debug() -> bool:
    return getattr(_state, "debug", False)


class Tensor:
    __slots__ = ("data", "tape", "node", "name", "__weakref__")

    def __init__(self, data, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = None
        self.node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def node_id(self) -> int | None:
        return self.node

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, data={self.data!r})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def tensor(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class _Node:
    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: tuple, vjp):
        self.op = op
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Append-only record of primitive applications.

    Use as a context manager to make it the active tape for this thread.
    Nodes only ever reference earlier nodes, so reverse iteration is a valid
    topological order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, int] = {}
        self._leaf_tensors: dict[int, Tensor] = {}
        self._prev = None

    def __enter__(self):
        self._prev = _active()
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = self._prev
        self._prev = None
        return False

    def __len__(self):
        return len(self.nodes)

    def watch(self, t: Tensor) -> int:
        """Register ``t`` as a leaf (idempotent) and return its node id."""
        if t.tape is self:
            return t.node
        key = id(t)
        nid = self._leaves.get(key)
        if nid is None:
            nid = len(self.nodes)
            self.nodes.append(_Node("leaf", (), None))
            self._leaves[key] = nid
            self._leaf_tensors[nid] = t
        return nid

    def node_of(self, t: Tensor) -> int | None:
        if t.tape is self:
            return t.node
        return self._leaves.get(id(t))

    def is_leaf(self, nid: int) -> bool:
        return self.nodes[nid].op == "leaf"


def _record(op: str, out: np.ndarray, inputs: Sequence, vjp: Callable) -> Tensor:
    if _debug() and not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{op}: non-finite value in output")
    res = Tensor.__new__(Tensor)
    res.data = out
    res.name = None
    tape = _active()
    if tape is None:
        res.tape = None
        res.node = None
        return res
    ids = tuple(tape.watch(x) if isinstance(x, Tensor) else None for x in inputs)
    res.tape = tape
    res.node = len(tape.nodes)
    tape.nodes.append(_Node(op, ids, vjp))
    return res


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _pair_shapes(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise binary -----------------------------------------------------

def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _pair_shapes("add", av, bv)
    sa, sb = av.shape, bv.shape
    return _record("add", av + bv, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(g, sb)))


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _pair_shapes("sub", av, bv)
    sa, sb = av.shape, bv.shape
    return _record("sub", av - bv, (a, b),
                   lambda g: (_reduce_to(g, sa), _reduce_to(-g, sb)))


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    _pair_shapes("mul", av, bv)
    return _record("mul", av * bv, (a, b),
                   lambda g: (_reduce_to(g * bv, av.shape), _reduce_to(g * av, bv.shape)))


def matmul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {av.shape} vs {bv.shape}")
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: batch mismatch {av.shape} vs {bv.shape}")

    def vjp(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        if bv.ndim == 2 and av.ndim > 2:
            gb = av.reshape(-1, av.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(av, -1, -2) @ g
        return ga, gb

    return _record("matmul", av @ bv, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    av = _val(a)
    c = float(c)
    return _record("scale", av * c, (a,), lambda g: (g * c,))


# -- elementwise unary ------------------------------------------------------

def relu(a) -> Tensor:
    av = _val(a)
    pos = av > 0
    return _record("relu", np.maximum(av, 0.0), (a,), lambda g: (g * pos,))


def tanh(a) -> Tensor:
    y = np.tanh(_val(a))
    return _record("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a) -> Tensor:
    y = expit(_val(a))
    return _record("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a) -> Tensor:
    y = np.exp(_val(a))
    return _record("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    av = _val(a)
    return _record("log", np.log(av), (a,), lambda g: (g / av,))


def clip_min(a, lo: float) -> Tensor:
    """max(a, lo); the gradient is zero wherever the floor is active."""
    av = _val(a)
    keep = av > lo
    return _record("clip_min", np.where(keep, av, lo), (a,), lambda g: (g * keep,))


def softmax_last_dim(a) -> Tensor:
    av = _val(a)
    if av.ndim == 0:
        raise ShapeError("softmax_last_dim: needs at least one dimension")
    e = np.exp(av - av.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return _record("softmax_last_dim", y, (a,),
                   lambda g: (y * (g - (g * y).sum(axis=-1, keepdims=True)),))


# -- structural -------------------------------------------------------------

def concat_last_dim(*parts) -> Tensor:
    vals = [_val(p) for p in parts]
    lead = vals[0].shape[:-1]
    for v in vals[1:]:
        if v.shape[:-1] != lead:
            raise ShapeError(f"concat_last_dim: shape mismatch {vals[0].shape} vs {v.shape}")
    cuts = np.cumsum([v.shape[-1] for v in vals])[:-1]
    return _record("concat_last_dim", np.concatenate(vals, axis=-1), parts,
                   lambda g: tuple(np.split(g, cuts, axis=-1)))


def stack(parts: Sequence, axis: int = 0) -> Tensor:
    vals = [_val(p) for p in parts]
    for v in vals[1:]:
        if v.shape != vals[0].shape:
            raise ShapeError(f"stack: shape mismatch {vals[0].shape} vs {v.shape}")
    out = np.stack(vals, axis=axis)
    n = len(vals)

    def vjp(g):
        return tuple(np.take(g, i, axis=axis) for i in range(n))

    return _record("stack", out, tuple(parts), vjp)


def slice_(a, index) -> Tensor:
    """Basic (view-style) indexing, e.g. ``slice_(x, (slice(None), -1))``."""
    av = _val(a)
    try:
        out = av[index]
    except IndexError as exc:
        raise ShapeError(f"slice: index {index!r} invalid for shape {av.shape}") from exc

    def vjp(g):
        full = np.zeros_like(av)
        full[index] = g
        return (full,)

    return _record("slice", np.array(out, dtype=np.float64), (a,), vjp)


def reshape(a, shape) -> Tensor:
    av = _val(a)
    shape = tuple(shape)
    try:
        out = av.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {av.shape} to {shape}") from exc
    return _record("reshape", out, (a,), lambda g: (g.reshape(av.shape),))


def transpose(a, axes=None) -> Tensor:
    av = _val(a)
    if axes is None:
        axes = tuple(range(av.ndim))[:-2] + (av.ndim - 1, av.ndim - 2)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(av, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    """Explicit broadcast, e.g. a bias row ``(m,)`` to a batch ``(B, m)``."""
    av = _val(a)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(av, shape)
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {av.shape} to {shape}") from exc
    return _record("broadcast_to", out, (a,), lambda g: (_reduce_to(g, av.shape),))


def sum_(a, axis=None) -> Tensor:
    av = _val(a)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), av.shape),)

    return _record("sum", np.asarray(av.sum(axis=axis)), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    av = _val(a)
    n = av.size if axis is None else np.prod([av.shape[i] for i in np.atleast_1d(axis)])
    s = sum_(a, axis)
    return scale(s, 1.0 / n)


_PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "relu": relu,
    "tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log,
    "softmax_last_dim": softmax_last_dim, "concat_last_dim": concat_last_dim,
    "slice": slice_, "sum": sum_, "mean": mean, "scale": scale,
    "reshape": reshape, "transpose": transpose, "broadcast_to": broadcast_to,
    "stack": lambda *xs, axis=0: stack(xs, axis=axis), "clip_min": clip_min,
}


def primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    """Apply a primitive by name."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# -- differentiation --------------------------------------------------------

def backward(tape: Tape, output: Tensor) -> dict[int, Tensor]:
    """Gradients of a scalar ``output`` for every leaf node on ``tape``.

    Returns ``{node_id: gradient}``; leaves the output does not depend on get
    a zero gradient.
    """
    if output.data.size != 1 or output.data.ndim > 1:
        raise ShapeError(f"backward: output must have shape () or (1,), got {output.shape}")
    start = tape.node_of(output)
    if start is None:
        raise KeyError("backward: output is not recorded on this tape")
    nodes = tape.nodes
    grads: list = [None] * (start + 1)
    grads[start] = np.ones_like(output.data)
    for i in range(start, -1, -1):
        g = grads[i]
        if g is None:
            continue
        node = nodes[i]
        if node.vjp is None:
            continue
        for nid, pg in zip(node.inputs, node.vjp(g)):
            if nid is None:
                continue
            prev = grads[nid]
            grads[nid] = pg if prev is None else prev + pg
    out = {}
    for nid, t in tape._leaf_tensors.items():
        g = grads[nid] if nid <= start else None
        out[nid] = Tensor(np.zeros(t.shape) if g is None else np.array(g, dtype=np.float64))
    return out


def grad(output: Tensor, wrt: Iterable[Tensor], tape: Tape | None = None) -> list[np.ndarray]:
    """Convenience wrapper: gradients of ``output`` with respect to ``wrt``."""
    tape = tape or output.tape
    if tape is None:
        raise KeyError("grad: output was not recorded on any tape")
    wrt = list(wrt)
    g = backward(tape, output)
    res = []
    for t in wrt:
        nid = tape.node_of(t)
        if nid is None:
            raise KeyError(f"grad: tensor {t.name or ''} absent from tape")
        res.append(g[nid].data if nid in g else np.zeros(t.shape))
    return res
