"""Dense tensors plus a minimal reverse-mode autodiff tape.

Tensors are float32, row-major, and treated as immutable by every op here
(training code mutates parameter ``.data`` in place between tape lifetimes).
Ops take an optional ``tape``; with ``tape=None`` they compute the identical
numeric result without recording, so taped and tapeless forwards agree
bit-exactly. There is no broadcasting beyond bias-add: every other op
requires exactly matching shapes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError


class Tensor:
    """Shape + float32 payload. ``_wrap`` is the internal any-dtype path
    used by the float64 finite-difference oracle; public constructors
    always coerce to float32."""

    __slots__ = ("data",)

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float32)

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = object.__new__(cls)
        t.data = np.ascontiguousarray(arr)
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on non-scalar tensor of shape {self.shape}")
        return float(self.data.reshape(())[()])

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape})"


class _Node:
    __slots__ = ("tensor", "parents", "backward_fn")

    def __init__(self, tensor, parents, backward_fn):
        self.tensor = tensor
        self.parents = parents  # node indices
        self.backward_fn = backward_fn  # grad -> tuple of parent grads


class Gradients:
    """Result of a backward pass; lookup is by tensor identity."""

    def __init__(self, by_id: dict[int, np.ndarray]):
        self._by_id = by_id

    def get(self, t: Tensor) -> Tensor | None:
        g = self._by_id.get(id(t))
        return None if g is None else Tensor._wrap(g)

    def __getitem__(self, t: Tensor) -> Tensor:
        g = self.get(t)
        if g is None:
            raise KeyError("tensor was not reached by the backward pass")
        return g


class Tape:
    """Ordered record of primitive ops; parents always precede children."""

    def __init__(self):
        self._nodes: list[_Node] = []
        self._pos: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self._nodes)

    def _ensure_leaf(self, t: Tensor) -> int:
        pos = self._pos.get(id(t))
        if pos is None:
            pos = len(self._nodes)
            self._nodes.append(_Node(t, (), None))
            self._pos[id(t)] = pos
        return pos

    def _record(self, out: Tensor, parents: Sequence[Tensor], backward_fn) -> None:
        parent_pos = tuple(self._ensure_leaf(p) for p in parents)
        self._pos[id(out)] = len(self._nodes)
        self._nodes.append(_Node(out, parent_pos, backward_fn))

    def backward(self, output: Tensor) -> Gradients:
        """Accumulate d(output)/d(node) for every node reachable from ``output``.

        ``output`` must be scalar-valued and must have been recorded on this tape.
        """
        pos = self._pos.get(id(output))
        if pos is None:
            raise ContractError("backward: output tensor was not recorded on this tape")
        if output.data.size != 1:
            raise ContractError(
                f"backward: output must be scalar, got shape {output.shape}"
            )
        grads: list[np.ndarray | None] = [None] * len(self._nodes)
        grads[pos] = np.ones_like(output.data)
        for i in range(pos, -1, -1):
            node = self._nodes[i]
            g = grads[i]
            if g is None or node.backward_fn is None:
                continue
            parent_grads = node.backward_fn(g)
            for p_pos, pg in zip(node.parents, parent_grads):
                if grads[p_pos] is None:
                    grads[p_pos] = pg.copy()
                else:
                    grads[p_pos] += pg
        by_id: dict[int, np.ndarray] = {}
        for i, node in enumerate(self._nodes):
            if grads[i] is not None:
                by_id[id(node.tensor)] = grads[i]
        return Gradients(by_id)


def backward(tape: Tape, output: Tensor) -> Gradients:
    return tape.backward(output)


# ---------------------------------------------------------------------------
# primitive ops


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """(n,)@(n,m) -> (m,) or (B,n)@(n,m) -> (B,m)."""
    if b.data.ndim != 2 or a.data.ndim not in (1, 2):
        raise ShapeError(f"matmul: unsupported ranks {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims of {a.shape} and {b.shape} differ")
    out = Tensor._wrap(a.data @ b.data)
    if tape is not None:
        a_data, b_data = a.data, b.data

        def bw(g):
            ga = g @ b_data.T
            if a_data.ndim == 1:
                gb = np.outer(a_data, g)
            else:
                gb = a_data.T @ g
            return ga, gb

        tape._record(out, (a, b), bw)
    return out


def add(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape(a, b, "add")
    out = Tensor._wrap(a.data + b.data)
    if tape is not None:
        tape._record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape(a, b, "sub")
    out = Tensor._wrap(a.data - b.data)
    if tape is not None:
        tape._record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    _same_shape(a, b, "mul")
    out = Tensor._wrap(a.data * b.data)
    if tape is not None:
        a_data, b_data = a.data, b.data
        tape._record(out, (a, b), lambda g: (g * b_data, g * a_data))
    return out


def scale(a: Tensor, c: float, tape: Tape | None = None) -> Tensor:
    c = float(c)
    out = Tensor._wrap(a.data * c)
    if tape is not None:
        tape._record(out, (a,), lambda g: (g * c,))
    return out


def add_bias(x: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """x[..., m] + b[m]; the only broadcast this engine allows."""
    if b.data.ndim != 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError(f"add_bias: input {x.shape} vs bias {b.shape}")
    out = Tensor._wrap(x.data + b.data)
    if tape is not None:
        x_ndim = x.data.ndim

        def bw(g):
            gb = g if x_ndim == 1 else g.sum(axis=tuple(range(x_ndim - 1)))
            return g, gb

        tape._record(out, (x, b), bw)
    return out


def tanh(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor._wrap(np.tanh(x.data))
    if tape is not None:
        o = out.data
        tape._record(out, (x,), lambda g: (g * (1.0 - o * o),))
    return out


def relu(x: Tensor, tape: Tape | None = None) -> Tensor:
    out = Tensor._wrap(np.maximum(x.data, 0))
    if tape is not None:
        mask = (x.data > 0).astype(x.data.dtype)
        tape._record(out, (x,), lambda g: (g * mask,))
    return out


def softplus(x: Tensor, tape: Tape | None = None) -> Tensor:
    # log(1 + e^x) computed as max(x, 0) + log1p(e^-|x|) to avoid overflow.
    d = x.data
    out = Tensor._wrap(np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d))))
    if tape is not None:
        sig = 1.0 / (1.0 + np.exp(-d))
        tape._record(out, (x,), lambda g: (g * sig,))
    return out


def concat(parts: Sequence[Tensor], tape: Tape | None = None) -> Tensor:
    """Concatenate along the last axis; all other dims must match."""
    if not parts:
        raise ContractError("concat: no tensors given")
    ndim = parts[0].data.ndim
    lead = parts[0].shape[:-1]
    for p in parts:
        if p.data.ndim != ndim or p.shape[:-1] != lead:
            raise ShapeError(
                f"concat: incompatible shapes {[p.shape for p in parts]}"
            )
    out = Tensor._wrap(np.concatenate([p.data for p in parts], axis=-1))
    if tape is not None:
        widths = [p.shape[-1] for p in parts]
        splits = np.cumsum(widths)[:-1]

        def bw(g):
            return tuple(np.ascontiguousarray(c) for c in np.split(g, splits, axis=-1))

        tape._record(out, tuple(parts), bw)
    return out


def total(x: Tensor, tape: Tape | None = None) -> Tensor:
    """Sum of all elements; one-element output, read it with ``item()``."""
    out = Tensor._wrap(np.sum(x.data, dtype=x.data.dtype).reshape(()))
    if tape is not None:
        shape, dtype = x.shape, x.data.dtype
        tape._record(out, (x,), lambda g: (np.full(shape, g[()], dtype=dtype),))
    return out


def mean(x: Tensor, tape: Tape | None = None) -> Tensor:
    n = x.size
    if n == 0:
        raise ContractError("mean: empty tensor")
    out = Tensor._wrap((np.sum(x.data, dtype=x.data.dtype) / n).reshape(()))
    if tape is not None:
        shape, dtype = x.shape, x.data.dtype
        tape._record(out, (x,), lambda g: (np.full(shape, g[()] / n, dtype=dtype),))
    return out


def sq_dist(a: Tensor, b: Tensor, tape: Tape | None = None) -> Tensor:
    """Squared euclidean distance, sum((a - b)^2)."""
    d = sub(a, b, tape)
    return total(mul(d, d, tape), tape)


def mse(pred: Tensor, target: Tensor, tape: Tape | None = None) -> Tensor:
    d = sub(pred, target, tape)
    return mean(mul(d, d, tape), tape)


LossFn = Callable[[Tensor, Tape | None], Tensor]
