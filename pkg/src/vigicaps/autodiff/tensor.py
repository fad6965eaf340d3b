"""Tensor values and the tape that records how they were produced."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import DoubleBackward, NonScalarOutput, ShapeMismatch

BackwardFn = Callable[[np.ndarray], None]


class Tensor:
    """An n-dimensional float64 array that can take part in reverse-mode AD.

    Leaf tensors (parameters, inputs) have ``tape is None`` until an
    operation places its output on a tape. Gradients of leaves accumulate in
    ``grad`` across backward passes until the caller clears them.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, tape: Tape | None = None,
                 name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if self.tape is None:
            raise ShapeMismatch("tensor was not produced by a recorded operation")
        self.tape.target().backward(self, grad)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.slice(self, idx)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)


def _not_scalar(t: Tensor):
    raise NonScalarOutput(f"expected a single element, got shape {t.shape}")


class Tape:
    """Ordered record of primitive applications.

    Backward walks the record in exact reverse order of the forward pass; since
    every record is appended after its inputs exist, that order is a valid
    topological order. A tape may be run backward once; call `reset` to reuse
    it for a fresh forward pass.
    """

    def __init__(self, check_finite: bool = False, implicit: bool = False):
        self.check_finite = check_finite
        self.implicit = implicit
        self._records: list[tuple[Tensor, BackwardFn]] = []
        self._consumed = False
        self._merged_into: Tape | None = None

    def target(self) -> "Tape":
        """The tape this one forwards to after merges (itself if none)."""
        tape = self
        while tape._merged_into is not None:
            tape = tape._merged_into
        return tape

    def merge_into(self, other: "Tape") -> None:
        """Move this tape's records onto ``other``.

        Used when an operation combines a tensor from an implicitly created
        tape (one built from leaf-only operations) with a tensor from another
        tape. The moved records depend only on leaves or on each other, so
        appending them keeps the order topological.
        """
        if self._consumed or other._consumed:
            raise DoubleBackward("cannot merge a tape that already ran backward")
        for out, _ in self._records:
            out.tape = other
        other._records.extend(self._records)
        self._records = []
        self._merged_into = other

    def __len__(self) -> int:
        return len(self._records)

    def tensor(self, data, requires_grad: bool = False, name: str | None = None) -> Tensor:
        """Create a tensor that already belongs to this tape."""
        return Tensor(data, requires_grad=requires_grad, tape=self, name=name)

    def record(self, out: Tensor, backward_fn: BackwardFn) -> None:
        if self._consumed:
            raise DoubleBackward("tape already ran backward; call reset() first")
        if self.check_finite and not np.all(np.isfinite(out.data)):
            raise FloatingPointError("non-finite value produced by a primitive")
        self._records.append((out, backward_fn))

    def backward(self, out: Tensor, grad=None, retain_grads: bool = False) -> None:
        if self._consumed:
            raise DoubleBackward("backward called twice without reset")
        if out.tape is not None:
            out.tape = out.tape.target()
        if out.tape is not self:
            raise ShapeMismatch("output does not belong to this tape")
        if grad is None:
            if out.size != 1:
                raise NonScalarOutput(f"backward needs a seed gradient for shape {out.shape}")
            grad = np.ones(out.shape)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != out.shape:
            raise ShapeMismatch(f"seed gradient {grad.shape} vs output {out.shape}")
        accumulate(out, grad)
        for node, fn in reversed(self._records):
            if node.grad is None:
                continue
            fn(node.grad)
            if not retain_grads:
                node.grad = None
        self._records.clear()
        self._consumed = True

    def reset(self) -> None:
        self._records.clear()
        self._consumed = False


def accumulate(t: Tensor, g: np.ndarray, owned: bool = False) -> None:
    """Add ``g`` into ``t.grad``; ``owned`` means g is a fresh array we may keep."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g if owned else np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g
