"""Dense float32 tensors with a reverse-mode differentiation tape.

Values are stored as 32-bit floats. Each operation evaluates in 64-bit and
truncates its result to the storage format, and backward accumulation also
runs in 64-bit before gradients are truncated on the way out; this keeps
forward values deterministic while leaving enough precision headroom for
finite-difference verification.

Operations record onto the currently active :class:`Tape` (a context
manager), so a fresh graph is built per training step and dropped afterwards.
A tape is confined to one training context; nesting tapes is rejected.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, ParameterError, ShapeError

DEFAULT_ROW_NORM_EPS = 1e-12

_active_tape: "Tape | None" = None


class Tensor:
    """Immutable dense array of float32 values.

    ``requires_grad`` marks leaves whose gradients should be produced by
    :func:`backward`; for op outputs it is derived from the parents.
    """

    __slots__ = ("values", "requires_grad")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float32, order="C", copy=True)
        arr.flags.writeable = False
        self.values = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("out_id", "parents", "backward_fn")

    def __init__(self, out_id, parents, backward_fn):
        self.out_id = out_id
        self.parents = parents
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Creation order is a topological order of the graph, so replaying the
    node list in reverse visits every node exactly once in reverse
    topological order.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _active_tape = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        global _active_tape
        _active_tape = None

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], backward_fn) -> None:
        self._nodes.append(_Node(id(out), parents, backward_fn))
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self._nodes)


def _make(values, parents: tuple[Tensor, ...], backward_fn: Callable) -> Tensor:
    """Create an op output, recording it when a tape is active and any parent is tracked."""
    tape = _active_tape
    track = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(values, requires_grad=track)
    if track:
        tape._record(out, parents, backward_fn)
    return out


def _f64(t: Tensor) -> np.ndarray:
    return t.values.astype(np.float64)


def backward(loss: Tensor, tape: Tape) -> dict[Tensor, Tensor]:
    """Accumulate gradients of a scalar loss and return them per leaf parameter.

    Gradients accumulate in 64-bit slots and are truncated to float32 in the
    returned map. Only leaves with ``requires_grad=True`` appear; detached
    inputs and frozen weights are never materialized.
    """
    if loss.values.ndim != 0:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._produced:
        raise ContractError("loss was not produced on this tape (not reachable from parameters)")

    slots: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    leaf_grads: dict[Tensor, np.ndarray] = {}

    for node in reversed(tape._nodes):
        upstream = slots.pop(node.out_id, None)
        if upstream is None:
            continue
        parent_grads = node.backward_fn(upstream)
        for parent, grad in zip(node.parents, parent_grads):
            if grad is None or not parent.requires_grad:
                continue
            if id(parent) in tape._produced:
                acc = slots.get(id(parent))
                slots[id(parent)] = grad if acc is None else acc + grad
            else:
                acc = leaf_grads.get(parent)
                leaf_grads[parent] = grad if acc is None else acc + grad

    return {p: Tensor(g.astype(np.float32)) for p, g in leaf_grads.items()}


# ---------------------------------------------------------------------------
# primitives


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return _make(_f64(a) + _f64(b), (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return _make(_f64(a) - _f64(b), (a, b), lambda g: (g, -g))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(_f64(a) * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = _f64(a), _f64(b)

    def grad(g):
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), grad)


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"transpose expects a 2-D tensor, got {a.shape}")
    return _make(_f64(a).T, (a,), lambda g: (g.T,))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    if int(np.prod(shape, dtype=np.int64)) != a.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    old = a.shape
    return _make(_f64(a).reshape(shape), (a,), lambda g: (g.reshape(old),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(_f64(a))
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not parts:
        raise ShapeError("concat of an empty sequence")
    ndim = parts[0].values.ndim
    if any(p.values.ndim != ndim for p in parts):
        raise ShapeError("concat operands must share rank")
    if axis < 0 or axis >= ndim:
        raise ShapeError(f"concat axis {axis} out of range for rank {ndim}")
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def grad(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(sizes))
        )

    return _make(np.concatenate([_f64(p) for p in parts], axis=axis), tuple(parts), grad)


def add_rowvec(a: Tensor, v: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m-by-n matrix."""
    if a.values.ndim != 2 or v.values.ndim != 1 or a.shape[1] != v.shape[0]:
        raise ShapeError(f"add_rowvec: incompatible shapes {a.shape} and {v.shape}")
    return _make(_f64(a) + _f64(v), (a, v), lambda g: (g, g.sum(axis=0)))


def sum_all(a: Tensor) -> Tensor:
    shp = a.shape
    return _make(np.sum(_f64(a)), (a,), lambda g: (np.full(shp, float(g), dtype=np.float64),))


def mean(a: Tensor) -> Tensor:
    n = a.size
    shp = a.shape
    return _make(
        np.mean(_f64(a)), (a,), lambda g: (np.full(shp, float(g) / n, dtype=np.float64),)
    )


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error over all elements."""
    _check_same_shape(a, b, "mse")
    diff = _f64(a) - _f64(b)
    n = a.size

    def grad(g):
        d = (2.0 * float(g) / n) * diff
        return d, -d

    return _make(np.mean(diff * diff), (a, b), grad)


def dot_rows(a: Tensor, b: Tensor) -> Tensor:
    """Per-row dot product of two m-by-d matrices, yielding a length-m vector."""
    _check_same_shape(a, b, "dot_rows")
    if a.values.ndim != 2:
        raise ShapeError(f"dot_rows expects 2-D operands, got {a.shape}")
    av, bv = _f64(a), _f64(b)

    def grad(g):
        return g[:, None] * bv, g[:, None] * av

    return _make(np.sum(av * bv, axis=1), (a, b), grad)


def l2_normalize_rows(a: Tensor, eps: float = DEFAULT_ROW_NORM_EPS) -> Tensor:
    """Scale every row to unit Euclidean norm; rejects rows with norm below eps."""
    if a.values.ndim != 2:
        raise ShapeError(f"l2_normalize_rows expects a 2-D tensor, got {a.shape}")
    av = _f64(a)
    norms = np.linalg.norm(av, axis=1, keepdims=True)
    if not np.all(norms > eps):
        bad = int(np.argmin(norms))
        raise DegenerateInputError(f"row {bad} has norm {float(norms[bad, 0]):.3e} <= {eps:.0e}")
    y = av / norms

    def grad(g):
        return ((g - y * np.sum(g * y, axis=1, keepdims=True)) / norms,)

    return _make(y, (a,), grad)


def _check_temperature(temperature: float) -> float:
    t = float(temperature)
    if not np.isfinite(t) or t <= 0.0:
        raise ParameterError(f"temperature must be positive, got {temperature!r}")
    return t


def scaled_row_softmax(logits: Tensor, temperature: float) -> Tensor:
    """Row-wise softmax of logits/temperature, stabilized by per-row max subtraction."""
    t = _check_temperature(temperature)
    if logits.values.ndim != 2:
        raise ShapeError(f"scaled_row_softmax expects a 2-D tensor, got {logits.shape}")
    z = _f64(logits) / t
    z -= z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def grad(g):
        return ((p * g - p * np.sum(p * g, axis=1, keepdims=True)) / t,)

    return _make(p, (logits,), grad)


def scaled_row_log_softmax(logits: Tensor, temperature: float) -> Tensor:
    """Row-wise log-softmax of logits/temperature; stable companion to the softmax."""
    t = _check_temperature(temperature)
    if logits.values.ndim != 2:
        raise ShapeError(f"scaled_row_log_softmax expects a 2-D tensor, got {logits.shape}")
    z = _f64(logits) / t
    z -= z.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    y = z - lse
    p = np.exp(y)

    def grad(g):
        return ((g - p * np.sum(g, axis=1, keepdims=True)) / t,)

    return _make(y, (logits,), grad)


def diagonal(a: Tensor) -> Tensor:
    if a.values.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diagonal expects a square matrix, got {a.shape}")
    n = a.shape[0]

    def grad(g):
        out = np.zeros((n, n), dtype=np.float64)
        np.fill_diagonal(out, g)
        return (out,)

    return _make(np.diagonal(_f64(a)).copy(), (a,), grad)


def gather_rows(a: Tensor, indices: Sequence[int]) -> Tensor:
    if a.values.ndim != 2:
        raise ShapeError(f"gather_rows expects a 2-D tensor, got {a.shape}")
    idx = np.asarray(list(indices), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[0]):
        raise ShapeError(f"gather_rows index out of range for {a.shape[0]} rows")
    shp = a.shape

    def grad(g):
        out = np.zeros(shp, dtype=np.float64)
        np.add.at(out, idx, g)
        return (out,)

    return _make(_f64(a)[idx], (a,), grad)
