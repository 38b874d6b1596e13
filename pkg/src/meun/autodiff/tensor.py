"""Tensor, Parameter and the recording tape for reverse-mode differentiation.

Every primitive appends one :class:`Node` to the thread's active tape when at
least one of its inputs requires a gradient. :func:`backward` walks the tape
in reverse, visiting each node once, and then consumes the tape.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from meun.errors import NoTapeError, RankError

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """Dense real array that can take part in a recorded computation."""

    __slots__ = ("data", "requires_grad", "grad", "tape_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.tape_node: Optional[Node] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        g = g.astype(self.data.dtype, copy=False)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """Named trainable tensor with a gradient accumulator and momentum buffer."""

    __slots__ = ("name", "momentum", "lr_group")

    def __init__(self, data, name: str = "", lr_group: str = "head", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.lr_group = lr_group
        self.grad = np.zeros_like(self.data)
        self.momentum = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        self.grad += g.astype(self.data.dtype, copy=False)

    def astype(self, dtype) -> None:
        """Convert value, gradient and momentum in place to ``dtype``."""
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.momentum = self.momentum.astype(dtype)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.lr_group})"


@dataclass(eq=False)
class Node:
    inputs: tuple
    output: Tensor
    backward: BackwardFn
    tape: "Tape"
    index: int
    alive: bool = True


@dataclass(eq=False)
class Tape:
    nodes: list = field(default_factory=list)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        node = Node(tuple(inputs), output, backward, self, len(self.nodes))
        self.nodes.append(node)
        output.tape_node = node

    def clear(self) -> None:
        for node in self.nodes:
            node.alive = False
        self.nodes = []

    def __len__(self) -> int:
        return len(self.nodes)


class _State(threading.local):
    def __init__(self):
        self.tape = Tape()
        self.recording = True


_state = _State()


def get_tape() -> Tape:
    return _state.tape


def is_recording() -> bool:
    return _state.recording


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state.recording
    _state.recording = False
    try:
        yield
    finally:
        _state.recording = prev


def record(data: np.ndarray, inputs: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of a primitive applied to ``inputs``.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    needs = _state.recording and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        _state.tape.record(inputs, out, backward)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
    if loss.size != 1:
        raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss.tape_node
    if node is None or not node.alive:
        raise NoTapeError("loss is not recorded on a live tape")
    tape = node.tape
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for n in reversed(tape.nodes[: node.index + 1]):
        g = grads.pop(id(n.output), None)
        if g is None:
            continue
        in_grads = n.backward(g)
        for t, gi in zip(n.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi).astype(t.data.dtype, copy=False)
            if t.tape_node is not None and t.tape_node.alive and t.tape_node.tape is tape:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            else:
                t._accumulate(gi)
    tape.clear()
