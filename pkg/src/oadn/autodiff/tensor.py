"""Dense tensors and the recording tape used for reverse-mode differentiation."""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Sequence

import numpy as np

_local = threading.local()


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A numpy array plus the bookkeeping needed to take part in a tape.

    Data is stored as float64 unless a float32 array is passed in explicitly
    (the training loop's fast mode).
    """

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape", "name")

    def __init__(self, data: Any, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != np.float32:
            arr = arr.astype(np.float64, copy=False)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = None
        self._tape: Optional[Tape] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{label})"

    # operator sugar; the named functions in ``ops`` are the real API
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.elementwise_mul(self, other)
        return ops.scale(self, float(other))

    __rmul__ = __mul__

    def __getitem__(self, key):
        from . import ops

        return ops.slice_(self, key)


@dataclass
class Record:
    op: Any
    inputs: tuple
    output: Tensor
    ctx: dict
    attrs: dict = field(default_factory=dict)


class Tape:
    """Ordered log of primitive operations.

    Use as a context manager; every differentiable op executed inside the
    ``with`` block on the same thread is appended in execution order, which is
    a valid topological order by construction.
    """

    def __init__(self):
        self.records: list[Record] = []
        self._next_id = 0
        self._leaves: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def _register(self, t: Tensor) -> None:
        if t._tape is self:
            return
        t._tape = self
        t.node_id = self._next_id
        self._next_id += 1

    def record(self, op, inputs: Sequence[Tensor], output: Tensor, ctx: dict, attrs: dict) -> None:
        for t in inputs:
            if t._tape is not self:
                self._register(t)
                if t.requires_grad:
                    self._leaves[id(t)] = t
        self._register(output)
        self.records.append(Record(op, tuple(inputs), output, ctx, attrs))

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def replay(self) -> list[np.ndarray]:
        """Re-execute every recorded forward from the recorded inputs.

        Returns the recomputed outputs in tape order.  Intermediate inputs are
        taken from the replayed values, so the whole graph is recomputed from
        its leaves.
        """
        fresh: dict[int, np.ndarray] = {}
        outs = []
        for rec in self.records:
            arrays = [fresh.get(id(t), t.data) for t in rec.inputs]
            out = rec.op.forward({}, *arrays, **rec.attrs)
            fresh[id(rec.output)] = out
            outs.append(out)
        return outs


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires_grad tensor recorded on the loss's tape.

    Tensors on the tape that the loss does not depend on get zero gradients.
    Gradients overwrite (not accumulate into) any previous ``.grad``.
    """
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not produced on a tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    seen: list[Tensor] = []
    for rec in reversed(tape.records):
        out = rec.output
        if out.requires_grad:
            seen.append(out)
        g = grads.get(id(out))
        if g is None:
            continue
        in_grads = rec.op.backward(rec.ctx, g)
        for t, gi in zip(rec.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    for t in seen + tape.leaves():
        g = grads.get(id(t))
        t.grad = np.zeros_like(t.data) if g is None else np.asarray(g, dtype=t.data.dtype).reshape(t.shape)


def no_tape(fn: Callable) -> Callable:
    """Decorator: run ``fn`` with recording suspended on this thread."""

    def wrapper(*args, **kwargs):
        stack = _tape_stack()
        saved = stack[:]
        stack.clear()
        try:
            return fn(*args, **kwargs)
        finally:
            stack.extend(saved)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper
