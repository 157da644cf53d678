"""Define-by-run reverse-mode differentiation tape.

A Tape records primitive operations in execution order (which is already
a topological order), each node holding its forward value and a vjp
closure. One tape serves one forward+backward pass; training rebuilds a
fresh tape per step.
"""

import numpy as np

from ..errors import ContractViolation

SINGLE = np.float32
DOUBLE = np.float64
_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))


def check_matrix(a, name="array"):
    """Validate the dense-array contract: float32/float64 ndarray, finite."""
    if not isinstance(a, np.ndarray) or a.dtype not in _DTYPES:
        raise ContractViolation(f"{name}: expected a float32/float64 ndarray")
    if not np.all(np.isfinite(a)):
        raise ContractViolation(f"{name}: contains non-finite entries")
    return a


class Node:
    """One value in the recorded computation graph."""

    __slots__ = ("tape", "value", "grad", "parents", "vjp", "requires_grad", "name")

    def __init__(self, tape, value, parents=(), vjp=None, requires_grad=False, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.parents = parents
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    # A few operators for readability; the ops module holds the real work.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, name={self.name!r})"


class Tape:
    """Ordered record of one forward pass; drives the backward sweep."""

    def __init__(self, recording=True):
        self.recording = recording
        self.nodes = []

    def leaf(self, value, name=None):
        """Wrap a parameter/input array as a differentiable leaf."""
        value = np.asarray(value)
        node = Node(self, value, requires_grad=self.recording, name=name)
        return node

    def constant(self, value):
        """Wrap a non-differentiable array (times, masks, tables)."""
        return Node(self, np.asarray(value))

    def emit(self, value, parents, vjp):
        """Record one primitive result; prunes subgraphs that reach no leaf."""
        needs = self.recording and any(p.requires_grad for p in parents)
        node = Node(self, value, parents=tuple(parents) if needs else (),
                    vjp=vjp if needs else None, requires_grad=needs)
        if needs:
            self.nodes.append(node)
        return node

    def backward(self, out):
        """Accumulate d(out)/d(leaf) into every reachable leaf's .grad."""
        if not isinstance(out, Node) or out.tape is not self:
            raise ContractViolation("backward: output node does not belong to this tape")
        if out.value.size != 1:
            raise ContractViolation("backward: output must be scalar")
        if not self.recording:
            raise ContractViolation("backward: tape was not recording")
        out.grad = np.ones_like(out.value)
        for node in reversed(self.nodes):
            if node.grad is None or node.vjp is None:
                continue
            grads = node.vjp(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g
