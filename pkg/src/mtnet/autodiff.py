"""Tape-based reverse-mode differentiation over dense float64 matrices.

Every value is a 2-D ``numpy`` array.  Operations are recorded on a
:class:`Tape` in creation order, which is also a topological order.  The
vector-Jacobian products are themselves written in terms of tape operations,
so calling :func:`grad` with ``create_graph=True`` records the backward pass
and it can be differentiated again.  That is all the machinery needed for
meta-gradients through a handful of unrolled inner steps.

Example::

    tape = Tape()
    w = tape.variable(3.0)
    f = tape.hadamard(w, w)
    (dw,) = grad(tape, f, [w], create_graph=True)   # 6
    (ddw,) = grad(tape, dw, [w])                     # 2
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Node",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "grad",
    "finite_difference",
    "OPS",
]


class ShapeError(ValueError):
    """Input shapes are invalid for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, message: str, op: str | None = None):
        super().__init__(message)
        self.op = op


class Node:
    """One recorded value.  ``id`` is the tape position, or -1 if unrecorded."""

    __slots__ = ("id", "value", "op", "parents", "aux", "requires_grad")

    def __init__(self, value, op, parents=(), aux=None, requires_grad=False, id=-1):
        self.id = id
        self.value = value
        self.op = op
        self.parents = parents
        self.aux = aux
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(id={self.id}, op={self.op!r}, shape={self.value.shape})"


def _as_matrix(value) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise ShapeError(f"expected at most 2 dimensions, got shape {arr.shape}")
    return arr


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# forward rules: (values, aux) -> value ; shape checks raise ShapeError


def _same_shape(op, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _fwd_matmul(vals, aux):
    a, b = vals
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not chain")
    return a @ b


def _fwd_add(vals, aux):
    _same_shape("add", *vals)
    return vals[0] + vals[1]


def _fwd_sub(vals, aux):
    _same_shape("subtract", *vals)
    return vals[0] - vals[1]


def _fwd_hadamard(vals, aux):
    _same_shape("hadamard", *vals)
    return vals[0] * vals[1]


def _fwd_scale(vals, aux):
    return vals[0] * aux


def _fwd_mse(vals, aux):
    _same_shape("mse_loss", *vals)
    d = vals[0] - vals[1]
    return np.array([[np.mean(d * d)]])


def _fwd_broadcast_row(vals, aux):
    (v,) = vals
    if v.shape[1] != 1:
        raise ShapeError(f"broadcast_row: expected a column, got shape {v.shape}")
    return np.repeat(v, aux, axis=1)


def _fwd_expand(vals, aux):
    (s,) = vals
    if s.shape != (1, 1):
        raise ShapeError(f"expand: expected a 1x1 value, got shape {s.shape}")
    return np.full(aux, s[0, 0])


def _fwd_append_row(vals, aux):
    (a,) = vals
    return np.vstack([a, np.full((1, a.shape[1]), aux)])


def _fwd_take_rows(vals, aux):
    (a,) = vals
    if aux != a.shape[0] - 1:
        raise ShapeError(f"take_rows: only dropping the last row is supported (shape {a.shape}, take {aux})")
    return a[:aux].copy()


def _fwd_gumbel(vals, aux):
    zeta = vals[0]
    temperature, g1, g2 = aux
    if g1.shape != zeta.shape or g2.shape != zeta.shape:
        raise ShapeError(f"gumbel_bernoulli: noise shape {g1.shape} vs logits {zeta.shape}")
    # exp(a)/(exp(a)+exp(b)) == sigmoid(a-b); never forms exp(a) directly.
    return _stable_sigmoid((zeta + g1 - g2) / temperature)


_FORWARD: dict[str, Callable] = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "subtract": _fwd_sub,
    "hadamard": _fwd_hadamard,
    "scale": _fwd_scale,
    "transpose": lambda vals, aux: vals[0].T.copy(),
    "relu": lambda vals, aux: np.maximum(vals[0], 0.0),
    "sigmoid": lambda vals, aux: _stable_sigmoid(vals[0]),
    "exp": lambda vals, aux: np.exp(vals[0]),
    "log": lambda vals, aux: np.log(vals[0]),
    "reciprocal": lambda vals, aux: 1.0 / vals[0],
    "mse_loss": _fwd_mse,
    "gumbel_bernoulli": _fwd_gumbel,
    "broadcast_row": _fwd_broadcast_row,
    "sum_cols": lambda vals, aux: vals[0].sum(axis=1, keepdims=True),
    "sum_all": lambda vals, aux: np.array([[vals[0].sum()]]),
    "expand": _fwd_expand,
    "append_row": _fwd_append_row,
    "take_rows": _fwd_take_rows,
}

OPS = tuple(_FORWARD)


class Tape:
    """Append-only record of computation, plus the random stream for stochastic ops."""

    def __init__(self, seed=None, rng: np.random.Generator | None = None):
        self.nodes: list[Node] = []
        self.rng = rng if rng is not None else np.random.default_rng(seed)
        self._recording = True

    def __len__(self) -> int:
        return len(self.nodes)

    @contextmanager
    def recording(self, flag: bool) -> Iterator[None]:
        prev = self._recording
        self._recording = flag
        try:
            yield
        finally:
            self._recording = prev

    def _append(self, node: Node) -> Node:
        if self._recording:
            node.id = len(self.nodes)
            self.nodes.append(node)
        return node

    # leaves ---------------------------------------------------------------

    def variable(self, value) -> Node:
        """A differentiable leaf."""
        return self._append(Node(_as_matrix(value), "leaf", requires_grad=True))

    def constant(self, value) -> Node:
        return self._append(Node(_as_matrix(value), "const"))

    # generic entry point ----------------------------------------------------

    def record(self, op: str, inputs: Sequence[Node], aux=None) -> Node:
        try:
            fwd = _FORWARD[op]
        except KeyError:
            raise ValueError(f"unknown op {op!r}") from None
        with np.errstate(all="ignore"):  # non-finite results are raised just below
            value = fwd([n.value for n in inputs], aux)
        if not np.isfinite(value).all():
            shapes = [n.value.shape for n in inputs]
            raise NonFiniteError(f"op {op!r} produced non-finite values (inputs {shapes})", op=op)
        requires_grad = self._recording and any(n.requires_grad for n in inputs)
        return self._append(Node(value, op, tuple(inputs), aux, requires_grad))

    # convenience wrappers ---------------------------------------------------

    def matmul(self, a, b):
        return self.record("matmul", (a, b))

    def add(self, a, b):
        return self.record("add", (a, b))

    def sub(self, a, b):
        return self.record("subtract", (a, b))

    def hadamard(self, a, b):
        return self.record("hadamard", (a, b))

    def scale(self, a, c: float):
        return self.record("scale", (a,), float(c))

    def transpose(self, a):
        return self.record("transpose", (a,))

    def relu(self, a):
        return self.record("relu", (a,))

    def sigmoid(self, a):
        return self.record("sigmoid", (a,))

    def exp(self, a):
        return self.record("exp", (a,))

    def log(self, a):
        return self.record("log", (a,))

    def reciprocal(self, a):
        return self.record("reciprocal", (a,))

    def mse_loss(self, pred, target):
        return self.record("mse_loss", (pred, target))

    def broadcast_row(self, column, ncols: int):
        return self.record("broadcast_row", (column,), int(ncols))

    def sum_cols(self, a):
        return self.record("sum_cols", (a,))

    def sum_all(self, a):
        return self.record("sum_all", (a,))

    def expand(self, scalar, shape):
        return self.record("expand", (scalar,), tuple(shape))

    def append_row(self, a, value: float = 1.0):
        """``a`` with one constant row appended (bias augmentation)."""
        return self.record("append_row", (a,), float(value))

    def take_rows(self, a, n: int):
        """The first ``n`` rows of ``a``; only ``n = rows - 1`` is supported."""
        return self.record("take_rows", (a,), int(n))

    def gumbel_bernoulli(self, logits, temperature: float, noise=None):
        """Binary Gumbel-Softmax relaxation of Bernoulli(sigmoid(logits)).

        ``noise`` is an optional ``(g1, g2)`` pair; by default both are drawn
        from the tape's stream.  The draws are constants for differentiation.
        """
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        if noise is None:
            g1 = self.rng.gumbel(size=logits.shape)
            g2 = self.rng.gumbel(size=logits.shape)
        else:
            g1, g2 = (np.asarray(g, dtype=np.float64).reshape(logits.shape) for g in noise)
        return self.record("gumbel_bernoulli", (logits,), (float(temperature), g1, g2))


# ---------------------------------------------------------------------------
# vector-Jacobian products, expressed with tape ops so they can be recorded


def _vjp_matmul(t, n, g):
    a, b = n.parents
    ga = t.matmul(g, t.transpose(b)) if a.requires_grad else None
    gb = t.matmul(t.transpose(a), g) if b.requires_grad else None
    return ga, gb


def _vjp_hadamard(t, n, g):
    a, b = n.parents
    ga = t.hadamard(g, b) if a.requires_grad else None
    gb = t.hadamard(g, a) if b.requires_grad else None
    return ga, gb


def _vjp_relu(t, n, g):
    # subgradient at exactly 0 is 0
    step = t.constant((n.parents[0].value > 0).astype(np.float64))
    return (t.hadamard(g, step),)


def _vjp_sigmoid(t, n, g):
    one_minus = t.sub(t.constant(np.ones(n.value.shape)), n)
    return (t.hadamard(g, t.hadamard(n, one_minus)),)


def _vjp_gumbel(t, n, g):
    temperature = n.aux[0]
    one_minus = t.sub(t.constant(np.ones(n.value.shape)), n)
    return (t.scale(t.hadamard(g, t.hadamard(n, one_minus)), 1.0 / temperature),)


def _vjp_reciprocal(t, n, g):
    return (t.scale(t.hadamard(g, t.hadamard(n, n)), -1.0),)


def _vjp_mse(t, n, g):
    pred, target = n.parents
    diff = t.sub(pred, target)
    gp = t.scale(t.hadamard(t.expand(g, diff.shape), diff), 2.0 / diff.value.size)
    return (
        gp if pred.requires_grad else None,
        t.scale(gp, -1.0) if target.requires_grad else None,
    )


_VJP: dict[str, Callable] = {
    "matmul": _vjp_matmul,
    "add": lambda t, n, g: (g, g),
    "subtract": lambda t, n, g: (g, t.scale(g, -1.0)),
    "hadamard": _vjp_hadamard,
    "scale": lambda t, n, g: (t.scale(g, n.aux),),
    "transpose": lambda t, n, g: (t.transpose(g),),
    "relu": _vjp_relu,
    "sigmoid": _vjp_sigmoid,
    "exp": lambda t, n, g: (t.hadamard(g, n),),
    "log": lambda t, n, g: (t.hadamard(g, t.reciprocal(n.parents[0])),),
    "reciprocal": _vjp_reciprocal,
    "mse_loss": _vjp_mse,
    "gumbel_bernoulli": _vjp_gumbel,
    "broadcast_row": lambda t, n, g: (t.sum_cols(g),),
    "sum_cols": lambda t, n, g: (t.broadcast_row(g, n.parents[0].value.shape[1]),),
    "sum_all": lambda t, n, g: (t.expand(g, n.parents[0].value.shape),),
    "expand": lambda t, n, g: (t.sum_all(g),),
    "append_row": lambda t, n, g: (t.take_rows(g, n.value.shape[0] - 1),),
    "take_rows": lambda t, n, g: (t.append_row(g, 0.0),),
}


def grad(tape: Tape, output: Node, wrt: Sequence[Node], create_graph: bool = False) -> list[Node]:
    """Gradients of a scalar ``output`` with respect to each node in ``wrt``.

    With ``create_graph`` the backward computation is recorded on ``tape`` and
    the returned nodes are differentiable.  Otherwise they are recorded as
    constants.  A ``wrt`` node that ``output`` does not depend on gets a zero
    gradient of matching shape.
    """
    if output.value.shape != (1, 1):
        raise ShapeError(f"grad: output must be scalar, got shape {output.value.shape}")
    for w in wrt:
        if w.id < 0 or w.id >= len(tape.nodes) or tape.nodes[w.id] is not w:
            raise ValueError(f"grad: {w!r} is not on this tape")

    wanted = {w.id for w in wrt}
    found: dict[int, Node] = {}
    if output.requires_grad:
        # reachable, gradient-carrying nodes; ids are a topological order
        seen = {output.id: output}
        stack = [output]
        while stack:
            node = stack.pop()
            for p in node.parents:
                if p.requires_grad and p.id not in seen:
                    seen[p.id] = p
                    stack.append(p)
        grads: dict[int, Node] = {}
        with tape.recording(create_graph):
            grads[output.id] = tape.constant(np.ones((1, 1)))
            for nid in sorted(seen, reverse=True):
                g = grads.pop(nid, None)
                if g is None:
                    continue
                if nid in wanted:
                    found[nid] = g
                node = seen[nid]
                if not node.parents:
                    continue
                for p, pg in zip(node.parents, _VJP[node.op](tape, node, g)):
                    if pg is None or not p.requires_grad:
                        continue
                    prev = grads.get(p.id)
                    grads[p.id] = pg if prev is None else tape.add(prev, pg)

    out = []
    for w in wrt:
        g = found.get(w.id)
        if g is None:
            out.append(tape.constant(np.zeros(w.value.shape)))
        elif create_graph:
            out.append(g)
        else:
            out.append(tape.constant(g.value))
    return out


def finite_difference(f: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``at``, entry by entry."""
    if h <= 0:
        raise ValueError(f"step must be positive, got {h}")
    x = np.array(at, dtype=np.float64)
    out = np.empty_like(x)
    flat, g = x.reshape(-1), out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite evaluation at index {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return out
