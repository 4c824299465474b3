"""Dense float64 tensors with a tape for reverse-mode differentiation.

Every operation in :mod:`peft_fusion.numcore.ops` produces a new ``Tensor``.
When grad mode is on and any operand requires a gradient, the result carries a
:class:`Node` naming its operands and a local backward rule. ``backward`` orders
the nodes reachable from a scalar loss into a :class:`ComputationTape` and sweeps
it once in reverse.
"""

from __future__ import annotations

import contextlib
import logging
from collections.abc import Callable, Iterator, Sequence
from contextvars import ContextVar
from dataclasses import dataclass, field

import numpy as np

from peft_fusion.exceptions import GraphError, NumericalError, create_error_context

logger = logging.getLogger(__name__)

DTYPE = np.float64

BackwardRule = Callable[[np.ndarray], Sequence[np.ndarray | None]]

_grad_enabled: ContextVar[bool] = ContextVar("peft_fusion_grad_enabled", default=True)


class Tensor:
    """Immutable float64 array with an attached gradient slot.

    Parameters
    ----------
    data : array-like
        Values; copied and stored as a read-only row-major float64 array.
    requires_grad : bool, optional
        Whether ``backward`` should populate ``grad`` for this tensor. Default: False
    name : str | None, optional
        Parameter name, used in diagnostics. Default: None

    Examples
    --------
    >>> w = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    >>> loss = ops.sum(ops.matmul(w, Tensor([[5.0], [6.0]])))
    >>> backward(loss)
    >>> w.grad
    array([[5., 6.],
           [5., 6.]])

    """

    __slots__ = ("_data", "grad", "name", "node", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self._data = _readonly(np.array(data, dtype=DTYPE))
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self._data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        array = np.array(value, dtype=DTYPE)
        if array.shape != self._data.shape:
            raise GraphError(
                f"cannot replace data of shape {self._data.shape} with shape {array.shape}",
                context=create_error_context(component="numcore.tensor", tensor=self.name),
            )
        self._data = _readonly(array)

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def size(self) -> int:
        return int(self._data.size)

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        return float(self._data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self._data.copy()

    def flat(self) -> list[float]:
        """Row-major flat view of the values."""
        return self._data.reshape(-1).tolist()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self._data, requires_grad=False, name=self.name)

    def accumulate_grad(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros(self.shape, dtype=DTYPE)
        self.grad += grad.reshape(self.shape)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"<Tensor shape={self.shape} requires_grad={self.requires_grad}{label}>"

    def __matmul__(self, other: Tensor) -> Tensor:
        from peft_fusion.numcore import ops

        return ops.matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        from peft_fusion.numcore import ops

        return ops.add(self, other)

    def __sub__(self, other: Tensor) -> Tensor:
        from peft_fusion.numcore import ops

        return ops.sub(self, other)

    def __mul__(self, other: Tensor | float) -> Tensor:
        from peft_fusion.numcore import ops

        if isinstance(other, Tensor):
            return ops.multiply(self, other)
        return ops.scale(self, float(other))


@dataclass(slots=True)
class Node:
    """One recorded operation: operands, output and the local backward rule."""

    op: str
    inputs: tuple[Tensor, ...]
    backward: BackwardRule
    output_shape: tuple[int, ...] = field(default=())


def _readonly(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


def is_grad_enabled() -> bool:
    return _grad_enabled.get()


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block (evaluation, generation)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


def record(
    op: str,
    data: np.ndarray,
    inputs: Sequence[Tensor],
    rule: BackwardRule,
) -> Tensor:
    """Wrap a forward result, check it is finite, and attach a node when needed."""
    if not np.all(np.isfinite(data)):
        raise NumericalError(
            f"non-finite result in '{op}' (overflow or invalid value)",
            context=create_error_context(component="numcore", op=op, shape=list(data.shape)),
        )
    out = Tensor(data)
    if is_grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op=op, inputs=tuple(inputs), backward=rule, output_shape=out.shape)
    return out


class ComputationTape:
    """Topologically ordered nodes reachable from one output.

    Every node's operands precede it, so a single reverse sweep delivers each
    tensor's full upstream gradient before its own rule runs.
    """

    def __init__(self, nodes: list[tuple[Tensor, Node]]):
        self.nodes = nodes

    def __len__(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_output(cls, output: Tensor) -> ComputationTape:
        ordered: list[tuple[Tensor, Node]] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            tensor, expanded = stack.pop()
            if tensor.node is None:
                continue
            if expanded:
                ordered.append((tensor, tensor.node))
                continue
            if id(tensor) in visited:
                continue
            visited.add(id(tensor))
            stack.append((tensor, True))
            for parent in tensor.node.inputs:
                if parent.node is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return cls(ordered)

    def sweep(self, output: Tensor, seed: np.ndarray) -> None:
        upstream: dict[int, np.ndarray] = {id(output): seed}
        for tensor, node in reversed(self.nodes):
            grad = upstream.pop(id(tensor), None)
            if grad is None:
                continue
            tensor.accumulate_grad(grad)
            for parent, parent_grad in zip(node.inputs, node.backward(grad), strict=True):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    parent.accumulate_grad(parent_grad)
                elif id(parent) in upstream:
                    upstream[id(parent)] = upstream[id(parent)] + parent_grad
                else:
                    upstream[id(parent)] = parent_grad


def backward(loss: Tensor) -> ComputationTape:
    """Populate ``grad`` on every requires-grad tensor reachable from a scalar loss.

    Gradients accumulate additively: calling ``backward`` twice without zeroing
    doubles them.

    Raises
    ------
    GraphError
        If ``loss`` has more than one element or is not on any tape.

    """
    if loss.size != 1:
        raise GraphError(
            f"backward needs a scalar loss, got shape {loss.shape}",
            context=create_error_context(component="numcore.backward"),
        )
    if not loss.requires_grad:
        raise GraphError(
            "loss is not on the tape: no operand requires a gradient",
            context=create_error_context(component="numcore.backward"),
        )
    seed = np.ones(loss.shape, dtype=DTYPE)
    if loss.node is None:
        loss.accumulate_grad(seed)
        return ComputationTape([])
    tape = ComputationTape.from_output(loss)
    logger.debug("backward sweep over %d nodes", len(tape))
    tape.sweep(loss, seed)
    return tape
