"""Minimal reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records primitive operations in execution order, which is
already a topological order, so :meth:`Tape.backward` is a single reverse
sweep.  The primitive set is closed: it covers exactly what the embedding
encoder and the contrastive head need.

Example::

    tape = Tape()
    x = tape.variable(np.array(3.0))
    loss = mul(x, x)
    (gx,) = tape.backward(loss, [x])   # -> 6.0
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from gaprune.errors import ContractError, DimensionError

DTYPE = np.float64

_GELU_C = math.sqrt(2.0 / math.pi)

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


def as_tensor(values) -> np.ndarray:
    """Copy ``values`` into a read-only float64 array."""
    arr = np.array(values, dtype=DTYPE, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class _Node:
    parents: tuple[int, ...]
    vjp: Optional[VJP]


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "index", "value")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray):
        self.tape = tape
        self.index = index
        self.value = value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(shape={self.value.shape}, index={self.index})"

    def __add__(self, other: "Var") -> "Var":
        return add(self, other)

    def __mul__(self, other: "Var") -> "Var":
        return mul(self, other)

    def __matmul__(self, other: "Var") -> "Var":
        return matmul(self, other)


class Tape:
    """Single-owner record of primitive operations."""

    def __init__(self) -> None:
        self._nodes: list[_Node] = []
        self._values: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def variable(self, values) -> Var:
        """Record a leaf (parameter or input)."""
        return self._record(as_tensor(values), (), None)

    def _record(self, value: np.ndarray, parents: tuple[Var, ...], vjp: Optional[VJP]) -> Var:
        for p in parents:
            if p.tape is not self:
                raise ContractError("operand recorded on a different tape")
        if value.dtype != DTYPE:
            value = value.astype(DTYPE)
        value.setflags(write=False)
        self._nodes.append(_Node(tuple(p.index for p in parents), vjp))
        self._values.append(value)
        return Var(self, len(self._nodes) - 1, value)

    def backward(self, loss: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        """Return d(loss)/d(v) for each ``v`` in ``wrt``.

        Variables the loss does not depend on get all-zero gradients.
        """
        if loss.tape is not self:
            raise ContractError("loss was recorded on a different tape")
        if loss.value.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: list[Optional[np.ndarray]] = [None] * (loss.index + 1)
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            node = self._nodes[i]
            if g is None or node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                if pg is None:
                    continue
                if grads[parent] is None:
                    grads[parent] = np.array(pg, dtype=DTYPE, copy=True)
                else:
                    grads[parent] += pg
        out = []
        for v in wrt:
            g = grads[v.index] if v.index < len(grads) else None
            out.append(np.zeros_like(v.value) if g is None else g)
        return out


def _tape_of(*vs: Var) -> Tape:
    return vs[0].tape


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(a: Var, b: Var, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcastable") from None


# --- primitives -----------------------------------------------------------


def matmul(a: Var, b: Var) -> Var:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not align")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _tape_of(a)._record(av @ bv, (a, b), vjp)


def transpose(a: Var) -> Var:
    if a.value.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _tape_of(a)._record(a.value.T.copy(), (a,), lambda g: (g.T,))


def add(a: Var, b: Var) -> Var:
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _tape_of(a)._record(a.value + b.value, (a, b),
                               lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Var, b: Var) -> Var:
    _check_broadcast(a, b, "mul")
    av, bv = a.value, b.value
    return _tape_of(a)._record(av * bv, (a, b),
                               lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a: Var, c: float) -> Var:
    c = float(c)
    return _tape_of(a)._record(a.value * c, (a,), lambda g: (g * c,))


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return _tape_of(a)._record(y, (a,), lambda g: (g * (1.0 - y * y),))


def gelu(a: Var) -> Var:
    """Tanh approximation of GELU."""
    x = a.value
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    y = 0.5 * x * (1.0 + t)

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return _tape_of(a)._record(y, (a,), vjp)


def elementwise(kind: str, a: Var, b: Optional[Var] = None, *, c: float = 1.0) -> Var:
    """Dispatch by name over the pointwise primitives."""
    if kind == "add":
        return add(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "tanh":
        return tanh(a)
    if kind == "gelu_approx":
        return gelu(a)
    if kind == "scale":
        return scale(a, c)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def total(a: Var) -> Var:
    """Sum of all elements, as a 0-d value."""
    shape = a.shape
    return _tape_of(a)._record(np.asarray(a.value.sum()), (a,),
                               lambda g: (np.broadcast_to(g, shape),))


def gather_rows(table: Var, rows) -> Var:
    """Select rows of a matrix by index (embedding lookup, slicing)."""
    idx = np.asarray(rows, dtype=np.intp)
    n = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"gather_rows: index out of range for {n} rows")
    tshape = table.shape

    def vjp(g):
        out = np.zeros(tshape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _tape_of(table)._record(table.value[idx], (table,), vjp)


def concat_rows(parts: Sequence[Var]) -> Var:
    if not parts:
        raise ContractError("concat_rows needs at least one operand")
    widths = {p.shape[1:] for p in parts}
    if len(widths) != 1:
        raise DimensionError(f"concat_rows: trailing shapes differ: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _tape_of(*parts)._record(np.concatenate([p.value for p in parts], axis=0), tuple(parts), vjp)


def mean_pool(x: Var, valid: int) -> Var:
    """Mean of the first ``valid`` rows of ``x``."""
    if x.value.ndim != 2:
        raise DimensionError(f"mean_pool: expected tokens x dim, got {x.shape}")
    if not 1 <= valid <= x.shape[0]:
        raise ValueError(f"mean_pool: valid={valid} outside [1, {x.shape[0]}]")
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[:valid] = g / valid
        return (out,)

    return _tape_of(x)._record(x.value[:valid].mean(axis=0), (x,), vjp)


def segment_mean_pool(x: Var, lengths: Sequence[int]) -> Var:
    """Mean-pool consecutive row segments; segment i has ``lengths[i]`` rows."""
    lens = np.asarray(lengths, dtype=np.intp)
    if lens.size == 0 or lens.min() < 1 or lens.sum() != x.shape[0]:
        raise ValueError(f"segment_mean_pool: lengths {list(lens)} do not tile {x.shape[0]} rows")
    seg = np.repeat(np.arange(lens.size), lens)
    sums = np.zeros((lens.size, x.shape[1]), dtype=DTYPE)
    np.add.at(sums, seg, x.value)
    inv = (1.0 / lens)[:, None]

    def vjp(g):
        return ((g * inv)[seg],)

    return _tape_of(x)._record(sums * inv, (x,), vjp)


def l2_normalize(x: Var, eps: float = 1e-12) -> Var:
    """x / (||x|| + eps), row-wise for matrices."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    xv = x.value
    n = np.sqrt((xv * xv).sum(axis=-1, keepdims=True))
    s = n + eps
    y = xv / s

    def vjp(g):
        dot = (xv * g).sum(axis=-1, keepdims=True)
        safe_n = np.where(n > 0, n, 1.0)
        return (g / s - xv * dot / (safe_n * s * s),)

    return _tape_of(x)._record(y, (x,), vjp)


def info_nce(anchors: Var, candidates: Var, positive: Sequence[int], valid: np.ndarray, temperature: float) -> Var:
    """Batch-mean InfoNCE over cosine logits.

    Row i of ``anchors`` scores every candidate row j with
    ``<a_i, c_j> / temperature``; only candidates with ``valid[i, j]`` enter
    its softmax, and ``positive[i]`` names the target column.
    """
    a, c = anchors.value, candidates.value
    if a.ndim != 2 or c.ndim != 2 or a.shape[1] != c.shape[1]:
        raise DimensionError(f"info_nce: anchors {a.shape} and candidates {c.shape} differ in width")
    pos = np.asarray(positive, dtype=np.intp)
    mask = np.asarray(valid, dtype=bool)
    b = a.shape[0]
    if mask.shape != (b, c.shape[0]) or pos.shape != (b,):
        raise DimensionError("info_nce: positive/valid do not match batch and candidate counts")
    if not mask[np.arange(b), pos].all():
        raise ValueError("info_nce: positive candidate masked out")
    tau = float(temperature)
    logits = (a @ c.T) / tau
    shifted = np.where(mask, logits, -np.inf)
    m = shifted.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(shifted - m), 0.0)
    z = e.sum(axis=1, keepdims=True)
    lse = (m + np.log(z))[:, 0]
    losses = lse - logits[np.arange(b), pos]
    prob = e / z

    def vjp(g):
        d = prob.copy()
        d[np.arange(b), pos] -= 1.0
        d *= float(g) / b
        return d @ c / tau, d.T @ a / tau

    return _tape_of(anchors)._record(np.asarray(losses.mean()), (anchors, candidates), vjp)


# --- oracle ---------------------------------------------------------------


def finite_diff_grad(f: Callable[[np.ndarray], float], x, step: float = 1e-5,
                     coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    With ``coords`` only those flat coordinates are probed; the rest of the
    returned array is NaN.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = np.array(x, dtype=DTYPE, copy=True)
    flat = x.reshape(-1)
    out = np.full(flat.shape, np.nan) if coords is not None else np.empty(flat.shape)
    for j in (range(flat.size) if coords is None else coords):
        orig = flat[j]
        flat[j] = orig + step
        hi = float(f(x))
        flat[j] = orig - step
        lo = float(f(x))
        flat[j] = orig
        out[j] = (hi - lo) / (2.0 * step)
    return out.reshape(x.shape)
