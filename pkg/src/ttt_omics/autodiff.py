"""Reverse-mode automatic differentiation over an append-only tape.

Every trainable computation in this package is built from the kernels in
this module, so outer-loop gradients can flow through arbitrarily long
recurrences (in particular the per-token fast-weight updates of the TTT
layer). Tensors are dense float64 with rank <= 3; the leading axis, when
present, is a batch axis and matrix kernels broadcast over it.

The tape is a flat list in creation order, which is automatically a
topological order, so ``backward`` is a single reverse sweep that touches
each node exactly once.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

_MAX_RANK = 3


class TensorNode:
    """One dense tensor on a tape, with its gradient slot.

    ``grad`` is ``None`` until ``backward`` runs; afterwards every node
    that ``requires_grad`` holds an array of the same shape as ``values``.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "parents", "tape", "nid", "_backward")

    def __init__(self, values: np.ndarray, requires_grad: bool, op: str,
                 parents: tuple, tape: "Tape", nid: int,
                 backward: Callable[[np.ndarray], None] | None = None):
        self.values = values
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.op = op
        self.parents = parents
        self.tape = tape
        self.nid = nid
        self._backward = backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self) -> str:
        return f"TensorNode(op={self.op!r}, shape={self.values.shape}, requires_grad={self.requires_grad})"

    # A few operators for readability; the module-level functions are the API.
    def __add__(self, other: "TensorNode") -> "TensorNode":
        return add(self, other)

    def __sub__(self, other: "TensorNode") -> "TensorNode":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, TensorNode):
            return mul(self, other)
        return scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __matmul__(self, other: "TensorNode") -> "TensorNode":
        return matmul(self, other)


class Tape:
    """Append-only record of one forward computation."""

    def __init__(self):
        self.nodes: list[TensorNode] = []

    def tensor(self, values, requires_grad: bool = False) -> TensorNode:
        """Create a leaf node holding ``values`` (coerced to float64)."""
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > _MAX_RANK:
            raise DimensionError(f"rank {arr.ndim} tensor exceeds supported rank {_MAX_RANK}")
        node = TensorNode(arr, requires_grad, "leaf", (), self, len(self.nodes))
        self.nodes.append(node)
        return node

    def param(self, values) -> TensorNode:
        """Create a trainable leaf."""
        return self.tensor(values, requires_grad=True)

    def record(self, values: np.ndarray, parents: tuple, op: str,
               backward: Callable[[np.ndarray], None]) -> TensorNode:
        requires = any(p.requires_grad for p in parents)
        node = TensorNode(values, requires, op, parents, self,
                          len(self.nodes), backward if requires else None)
        self.nodes.append(node)
        return node


def _same_tape(*nodes: TensorNode) -> Tape:
    tape = nodes[0].tape
    for n in nodes[1:]:
        if n.tape is not tape:
            raise ContractError("operands belong to different tapes")
    return tape


def _accum(node: TensorNode, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.zeros_like(node.values)
    node.grad += g


# ---------------------------------------------------------------------------
# matrix kernels


def matmul(a: TensorNode, b: TensorNode) -> TensorNode:
    """Matrix product; either operand may carry a leading batch axis."""
    tape = _same_tape(a, b)
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {av.shape} @ {bv.shape}")
    if av.ndim == 3 and bv.ndim == 3 and av.shape[0] != bv.shape[0]:
        raise DimensionError(f"matmul batch extents differ: {av.shape} @ {bv.shape}")
    out = np.matmul(av, bv)

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(bv, -1, -2))
            if av.ndim == 2 and ga.ndim == 3:
                ga = ga.sum(axis=0)
            _accum(a, ga)
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(av, -1, -2), g)
            if bv.ndim == 2 and gb.ndim == 3:
                gb = gb.sum(axis=0)
            _accum(b, gb)

    return tape.record(out, (a, b), "matmul", backward)


def transpose(a: TensorNode) -> TensorNode:
    """Swap the last two axes."""
    if a.values.ndim < 2:
        raise DimensionError(f"transpose needs rank >= 2, got shape {a.values.shape}")
    out = np.swapaxes(a.values, -1, -2).copy()

    def backward(g: np.ndarray) -> None:
        _accum(a, np.swapaxes(g, -1, -2))

    return a.tape.record(out, (a,), "transpose", backward)


def reshape(a: TensorNode, shape: Sequence[int]) -> TensorNode:
    shape = tuple(shape)
    out = a.values.reshape(shape)

    def backward(g: np.ndarray) -> None:
        _accum(a, g.reshape(a.values.shape))

    return a.tape.record(out, (a,), "reshape", backward)


# ---------------------------------------------------------------------------
# elementwise kernels


def _require_same_shape(op: str, a: TensorNode, b: TensorNode) -> None:
    if a.values.shape != b.values.shape:
        raise DimensionError(f"{op} shape mismatch: {a.values.shape} vs {b.values.shape}")


def add(a: TensorNode, b: TensorNode) -> TensorNode:
    _require_same_shape("add", a, b)
    tape = _same_tape(a, b)

    def backward(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, g)

    return tape.record(a.values + b.values, (a, b), "add", backward)


def sub(a: TensorNode, b: TensorNode) -> TensorNode:
    _require_same_shape("sub", a, b)
    tape = _same_tape(a, b)

    def backward(g: np.ndarray) -> None:
        _accum(a, g)
        _accum(b, -g)

    return tape.record(a.values - b.values, (a, b), "sub", backward)


def mul(a: TensorNode, b: TensorNode) -> TensorNode:
    """Hadamard product of same-shape tensors."""
    _require_same_shape("mul", a, b)
    tape = _same_tape(a, b)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * b.values)
        _accum(b, g * a.values)

    return tape.record(a.values * b.values, (a, b), "mul", backward)


def scale(a: TensorNode, s) -> TensorNode:
    """Multiply by a python float or by a single-element node (learnable scalar)."""
    if isinstance(s, TensorNode):
        if s.values.size != 1:
            raise DimensionError(f"scale factor must be scalar, got shape {s.values.shape}")
        tape = _same_tape(a, s)
        sval = s.values.item()

        def backward(g: np.ndarray) -> None:
            _accum(a, g * sval)
            _accum(s, np.asarray(np.sum(g * a.values)).reshape(s.values.shape))

        return tape.record(a.values * sval, (a, s), "scale", backward)

    c = float(s)

    def backward_const(g: np.ndarray) -> None:
        _accum(a, g * c)

    return a.tape.record(a.values * c, (a,), "scale", backward_const)


def add_bcast(a: TensorNode, b: TensorNode) -> TensorNode:
    """Add ``b`` to ``a`` where b's shape is a trailing suffix of a's.

    Covers bias rows ([..., n, d] + [d]) and shared per-position tables
    ([batch, n, d] + [n, d]); the gradient for ``b`` sums over the leading
    broadcast axes.
    """
    tape = _same_tape(a, b)
    ashape, bshape = a.values.shape, b.values.shape
    if len(bshape) > len(ashape) or ashape[len(ashape) - len(bshape):] != bshape:
        raise DimensionError(f"add_bcast: {bshape} is not a trailing suffix of {ashape}")
    lead = len(ashape) - len(bshape)

    def backward(g: np.ndarray) -> None:
        _accum(a, g)
        gb = g.sum(axis=tuple(range(lead))) if lead else g
        _accum(b, gb)

    return tape.record(a.values + b.values, (a, b), "add_bcast", backward)


def scale_rows(a: TensorNode, s: TensorNode) -> TensorNode:
    """Scale each row of ``a`` [n, d] by the matching entry of ``s``.

    ``s`` may be [n] (one sequence) or [batch, n] (the result gains the
    batch axis); used to turn scalar expression values into embedding rows.
    """
    tape = _same_tape(a, s)
    av, sv = a.values, s.values
    if av.ndim != 2 or sv.ndim not in (1, 2) or sv.shape[-1] != av.shape[0]:
        raise DimensionError(f"scale_rows: rows {av.shape} vs scales {sv.shape}")
    out = av * sv[..., None]

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = g * sv[..., None]
            if ga.ndim == 3:
                ga = ga.sum(axis=0)
            _accum(a, ga)
        if s.requires_grad:
            _accum(s, np.sum(g * av, axis=-1))

    return tape.record(out, (a, s), "scale_rows", backward)


def square(a: TensorNode) -> TensorNode:
    def backward(g: np.ndarray) -> None:
        _accum(a, g * 2.0 * a.values)

    return a.tape.record(a.values * a.values, (a,), "square", backward)


def gelu(a: TensorNode) -> TensorNode:
    """Exact (erf-based) GELU."""
    x = a.values
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def backward(g: np.ndarray) -> None:
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        _accum(a, g * (cdf + x * pdf))

    return a.tape.record(out, (a,), "gelu", backward)


def relu(a: TensorNode) -> TensorNode:
    x = a.values

    def backward(g: np.ndarray) -> None:
        _accum(a, g * (x > 0.0))

    return a.tape.record(np.maximum(x, 0.0), (a,), "relu", backward)


def exp(a: TensorNode) -> TensorNode:
    out = np.exp(a.values)

    def backward(g: np.ndarray) -> None:
        _accum(a, g * out)

    return a.tape.record(out, (a,), "exp", backward)


def log(a: TensorNode) -> TensorNode:
    """Natural log; combine with clamp_min to keep arguments positive."""
    x = a.values

    def backward(g: np.ndarray) -> None:
        _accum(a, g / x)

    return a.tape.record(np.log(x), (a,), "log", backward)


def clamp_min(a: TensorNode, floor: float) -> TensorNode:
    x = a.values
    keep = x >= floor

    def backward(g: np.ndarray) -> None:
        _accum(a, g * keep)

    return a.tape.record(np.maximum(x, floor), (a,), "clamp_min", backward)


def rms_norm(x: TensorNode, gain: TensorNode, eps: float = 1e-6) -> TensorNode:
    """Row-wise root-mean-square normalization with a learnable gain.

    y = x / sqrt(mean(x^2, last axis) + eps) * gain
    """
    tape = _same_tape(x, gain)
    xv, gv = x.values, gain.values
    if gv.ndim != 1 or xv.shape[-1] != gv.shape[0]:
        raise DimensionError(f"rms_norm: input {xv.shape} vs gain {gv.shape}")
    d = xv.shape[-1]
    inv = 1.0 / np.sqrt(np.mean(xv * xv, axis=-1, keepdims=True) + eps)
    out = xv * inv * gv

    def backward(g: np.ndarray) -> None:
        gg = g * gv
        if x.requires_grad:
            # d(inv)/dx_j = -inv^3 * x_j / d, shared across the row
            dot = np.sum(gg * xv, axis=-1, keepdims=True)
            _accum(x, inv * gg - xv * (inv ** 3) * dot / d)
        if gain.requires_grad:
            gy = g * xv * inv
            _accum(gain, gy.reshape(-1, d).sum(axis=0))

    return tape.record(out, (x, gain), "rms_norm", backward)


def softmax_rows(a: TensorNode) -> TensorNode:
    """Softmax over the last axis."""
    x = a.values
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g: np.ndarray) -> None:
        dot = np.sum(g * p, axis=-1, keepdims=True)
        _accum(a, p * (g - dot))

    return a.tape.record(p, (a,), "softmax_rows", backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: TensorNode) -> TensorNode:
    out = np.asarray(a.values.sum())

    def backward(g: np.ndarray) -> None:
        _accum(a, np.full_like(a.values, g.item()))

    return a.tape.record(out, (a,), "sum_all", backward)


def mean_all(a: TensorNode) -> TensorNode:
    n = a.values.size
    out = np.asarray(a.values.mean())

    def backward(g: np.ndarray) -> None:
        _accum(a, np.full_like(a.values, g.item() / n))

    return a.tape.record(out, (a,), "mean_all", backward)


def mean_rows(a: TensorNode) -> TensorNode:
    """Mean over the sequence axis (second-to-last): [..., n, d] -> [..., d]."""
    if a.values.ndim < 2:
        raise DimensionError(f"mean_rows needs a sequence axis, got shape {a.values.shape}")
    n = a.values.shape[-2]
    out = a.values.mean(axis=-2)

    def backward(g: np.ndarray) -> None:
        _accum(a, np.repeat(np.expand_dims(g / n, -2), n, axis=-2))

    return a.tape.record(out, (a,), "mean_rows", backward)


# ---------------------------------------------------------------------------
# sequence (second-to-last axis) kernels


def _seq_axis_check(op: str, a: TensorNode) -> None:
    if a.values.ndim < 2:
        raise DimensionError(f"{op} needs a sequence axis, got shape {a.values.shape}")


def slice_rows(a: TensorNode, start: int, stop: int) -> TensorNode:
    """Slice [start:stop] along the sequence axis (second-to-last)."""
    _seq_axis_check("slice_rows", a)
    out = a.values[..., start:stop, :].copy()

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.values)
            ga[..., start:stop, :] = g
            _accum(a, ga)

    return a.tape.record(out, (a,), "slice_rows", backward)


def concat_rows(nodes: Sequence[TensorNode]) -> TensorNode:
    """Concatenate along the sequence axis."""
    if not nodes:
        raise ContractError("concat_rows of an empty sequence")
    tape = _same_tape(*nodes)
    for n in nodes:
        _seq_axis_check("concat_rows", n)
    out = np.concatenate([n.values for n in nodes], axis=-2)
    lengths = [n.values.shape[-2] for n in nodes]

    def backward(g: np.ndarray) -> None:
        off = 0
        for n, ln in zip(nodes, lengths):
            _accum(n, g[..., off:off + ln, :])
            off += ln

    return tape.record(out, tuple(nodes), "concat_rows", backward)


def take_rows(a: TensorNode, indices: np.ndarray) -> TensorNode:
    """Gather rows along the sequence axis."""
    _seq_axis_check("take_rows", a)
    idx = np.asarray(indices, dtype=np.intp)
    out = a.values[..., idx, :].copy()

    def backward(g: np.ndarray) -> None:
        if a.requires_grad:
            ga = np.zeros_like(a.values)
            if ga.ndim == 2:
                np.add.at(ga, idx, g)
            else:
                np.add.at(ga, (slice(None), idx), g)
            _accum(a, ga)

    return a.tape.record(out, (a,), "take_rows", backward)


def interleave_rows(a: TensorNode, b: TensorNode,
                    positions_a: np.ndarray, positions_b: np.ndarray) -> TensorNode:
    """Merge two row sets into one sequence at the given positions.

    ``positions_a`` and ``positions_b`` must partition 0..n-1; used to
    reinsert masked-position tokens between encoder outputs.
    """
    tape = _same_tape(a, b)
    pa = np.asarray(positions_a, dtype=np.intp)
    pb = np.asarray(positions_b, dtype=np.intp)
    n = pa.size + pb.size
    combined = np.concatenate([pa, pb])
    if len(np.unique(combined)) != n or (n and combined.max() != n - 1):
        raise ContractError("interleave_rows positions must partition 0..n-1")
    if a.values.shape[-2] != pa.size or b.values.shape[-2] != pb.size:
        raise DimensionError(
            f"interleave_rows: rows {a.values.shape} / {b.values.shape} "
            f"vs positions {pa.size} / {pb.size}")
    lead = np.broadcast_shapes(a.values.shape[:-2], b.values.shape[:-2])
    out = np.zeros(lead + (n, a.values.shape[-1]), dtype=np.float64)
    out[..., pa, :] = a.values
    out[..., pb, :] = b.values

    def backward(g: np.ndarray) -> None:
        _accum(a, g[..., pa, :])
        _accum(b, g[..., pb, :])

    return tape.record(out, (a, b), "interleave_rows", backward)


def expand_batch(a: TensorNode, batch: int) -> TensorNode:
    """Tile a rank-2 tensor along a new leading batch axis."""
    if a.values.ndim != 2:
        raise DimensionError(f"expand_batch needs rank 2, got shape {a.values.shape}")
    out = np.broadcast_to(a.values, (batch,) + a.values.shape).copy()

    def backward(g: np.ndarray) -> None:
        _accum(a, g.sum(axis=0))

    return a.tape.record(out, (a,), "expand_batch", backward)


# ---------------------------------------------------------------------------
# spec-surface dispatcher, backward driver, finite differences

_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "scale": scale,
                "gelu": gelu, "square": square}


def elementwise(kind: str, a: TensorNode, b=None) -> TensorNode:
    """Dispatch to an elementwise kernel by name."""
    if kind not in _ELEMENTWISE:
        raise ContractError(f"unknown elementwise kind {kind!r}")
    fn = _ELEMENTWISE[kind]
    if kind in ("gelu", "square"):
        if b is not None:
            raise ContractError(f"{kind} is unary")
        return fn(a)
    if b is None:
        raise ContractError(f"{kind} needs two operands")
    return fn(a, b)


def backward(tape: Tape, root: TensorNode) -> None:
    """Populate gradients of all requires_grad ancestors of ``root``.

    Resets previous gradients first, so repeated calls are bit-identical;
    requires_grad nodes that do not feed the root end with zero grads.
    """
    if root.tape is not tape:
        raise ContractError("root does not belong to this tape")
    if root.values.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.values.shape}")
    for node in tape.nodes:
        node.grad = None
    root.grad = np.ones_like(root.values)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)
    for node in tape.nodes:
        if node.requires_grad and node.grad is None:
            node.grad = np.zeros_like(node.values)


def finite_difference_gradient(f: Callable[[np.ndarray], float],
                               p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function, coordinate by coordinate."""
    if h <= 0:
        raise ContractError("finite difference step must be positive")
    p = np.asarray(p, dtype=np.float64)
    grad = np.zeros_like(p)
    it = np.nditer(p, flags=["multi_index"])
    while not it.finished:
        i = it.multi_index
        bumped = p.copy()
        bumped[i] = p[i] + h
        up = f(bumped)
        bumped[i] = p[i] - h
        down = f(bumped)
        grad[i] = (up - down) / (2.0 * h)
        it.iternext()
    return grad
