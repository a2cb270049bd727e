"""Minimal reverse-mode tensor engine.

Tensors wrap float32 (optionally float64 for high-precision gradient
checking) numpy arrays. Gradients are recorded on an explicit Tape: while a
tape is active, every differentiable op appends a node holding its inputs,
its output and a backward rule. Replaying the tape in reverse propagates
gradients deterministically (fixed accumulation order, no atomics).
"""

from __future__ import annotations

import numpy as np

__all__ = ["Tensor", "Tape", "no_grad", "active_tape", "backward"]

# stack of active tapes; ops record onto the top one
_TAPE_STACK: list["Tape"] = []

# when True, every op output is validated to be finite (debug aid)
CHECK_FINITE = False


def set_check_finite(enabled: bool) -> None:
    global CHECK_FINITE
    CHECK_FINITE = enabled


class Tensor:
    """An n-dimensional float array with optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # convenience arithmetic (same-shape only; no broadcasting by design)
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of differentiable ops, replayed in reverse by backward."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self):
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False


class no_grad:
    """Context that suspends tape recording (inference mode)."""

    def __enter__(self):
        _TAPE_STACK.append(None)  # type: ignore[arg-type]
        return self

    def __exit__(self, *exc):
        _TAPE_STACK.pop()
        return False


def active_tape() -> Tape | None:
    if not _TAPE_STACK:
        return None
    return _TAPE_STACK[-1]


def record_op(inputs, out_data: np.ndarray, backward_fn) -> Tensor:
    """Create an op output, recording onto the active tape when needed.

    backward_fn(grad_out) must return one gradient array (or None) per input,
    in order.
    """
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError("non-finite values produced by a forward op")
    tape = active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    if needs:
        tape._nodes.append(_Node(tuple(inputs), out, backward_fn))
    return out


def backward(loss: Tensor, tape: Tape, leaves=()) -> None:
    """Propagate gradients from a scalar loss through the tape.

    Leaves passed explicitly get a zero grad buffer even when they are not on
    the loss's ancestry. Accumulation order is the exact reverse of the
    recording order, so replays are bit-identical.
    """
    if loss.size != 1:
        raise ValueError("backward requires a scalar loss")
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape._nodes):
        g_out = node.output.grad
        if g_out is None:
            continue
        grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, grads):
            if g is None or not inp.requires_grad:
                continue
            inp._accumulate(np.asarray(g, dtype=inp.data.dtype))
        node.output.grad = None  # consumed; keeps replays clean and frees memory
    for leaf in leaves:
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
