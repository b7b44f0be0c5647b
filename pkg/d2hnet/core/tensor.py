"""
GradNode and the reverse-mode tape.

A GradNode wraps an N x C x H x W array (or a 0-d loss value) and remembers
the nodes it was computed from together with a local backward rule. Calling
``backward()`` on a scalar walks the recorded graph once in reverse
topological order.
"""
import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence, Union

import numpy as np

from d2hnet.utils.validators import validate_image_tensor

ImageTensor = np.ndarray
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """Build no tape inside the block (inference, frozen sub-networks)."""
    previous = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = previous


class GradNode:
    """A value on the autodiff tape."""

    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad", "name")

    def __init__(
        self,
        value: np.ndarray,
        parents: Sequence["GradNode"] = (),
        backward_fn: Optional[BackwardFn] = None,
        requires_grad: bool = False,
        name: Optional[str] = None,
    ):
        self.value = value
        self.grad: Optional[np.ndarray] = None
        self.name = name
        if parents:
            track = is_grad_enabled() and any(p.requires_grad for p in parents)
        else:
            track = requires_grad
        self.requires_grad = track
        self.parents = tuple(parents) if track else ()
        self.backward_fn = backward_fn if track else None

    @classmethod
    def leaf(cls, value: np.ndarray, requires_grad: bool = True, name: Optional[str] = None) -> "GradNode":
        return cls(value, requires_grad=requires_grad, name=name)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.value.shape:
            raise ValueError(
                f"gradient shape {grad.shape} does not match value shape {self.value.shape}"
            )
        if self.grad is None:
            self.grad = grad.astype(self.value.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        """Propagate d(self)/d(leaf) into every leaf's ``grad``."""
        if seed is None:
            if self.value.size != 1:
                raise ValueError("backward() without a seed requires a scalar node")
            seed = np.ones_like(self.value)

        order = _topological_order(self)
        pending = {id(self): seed.astype(self.value.dtype, copy=False)}
        for node in reversed(order):
            grad_out = pending.pop(id(node), None)
            if grad_out is None:
                continue
            if not node.parents:
                node.accumulate(grad_out)
                continue
            parent_grads = node.backward_fn(grad_out)
            for parent, g in zip(node.parents, parent_grads):
                if g is None or not parent.requires_grad:
                    continue
                if id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + g
                else:
                    pending[id(parent)] = g

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"GradNode{label}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _topological_order(root: GradNode) -> list[GradNode]:
    """Iterative DFS post-order; every node appears exactly once."""
    order: list[GradNode] = []
    visited: set[int] = set()
    stack: list[tuple[GradNode, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in visited and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_node(x: Union[GradNode, np.ndarray], name: str = "input") -> GradNode:
    """Wrap a constant array; GradNodes pass through unchanged."""
    if isinstance(x, GradNode):
        return x
    return GradNode(validate_image_tensor(np.asarray(x), name), requires_grad=False, name=name)


def value_of(x: Union[GradNode, np.ndarray]) -> np.ndarray:
    return x.value if isinstance(x, GradNode) else x
