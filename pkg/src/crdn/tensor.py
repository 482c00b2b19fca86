"""Dense tensors and the gradient tape.

A :class:`Tensor` wraps a numpy array.  Differentiable operations live in
:mod:`crdn.ops`; while a :class:`GradTape` is active, every operation that
consumes a tensor with ``requires_grad`` appends an entry to the tape.  Entries
are appended in execution order, so the tape is topologically sorted by
construction and the reverse pass is a single backwards sweep.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ShapeError

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_TAPE_STACK: list["GradTape"] = []


class Tensor:
    """Immutable-by-convention array with autodiff bookkeeping.

    Operations never write into ``data``; optimizers rebind ``data`` to a new
    array instead of mutating it.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def check_finite(self, what: str = "tensor") -> "Tensor":
        if not self.is_finite():
            raise FloatingPointError(f"{what} {self.name or ''} contains NaN or Inf".replace("  ", " "))
        return self

    def detach(self) -> "Tensor":
        return Tensor(self.data, name=self.name)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self) -> str:
        grad = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{grad})"

    # Arithmetic dispatches to crdn.ops so overloads are recorded on the tape.
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
        return ops.mul(self, -1.0)

    def sum(self):
        from . import ops
        return ops.sum_all(self)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def zeros(shape: Sequence[int], dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Entry:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple, backward: BackwardFn):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Records differentiable operations for one forward/backward pair.

    Use as a context manager around the forward pass, then call
    :meth:`gradient` once.  A second call raises ``RuntimeError``: the saved
    forward values are released after the first reverse sweep.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._consumed = False

    def __enter__(self) -> "GradTape":
        if self._consumed:
            raise RuntimeError("tape already consumed by a backward pass")
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, out: Tensor, inputs: tuple, backward: BackwardFn) -> None:
        self.entries.append(_Entry(out, inputs, backward))

    def gradient(self, loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
        """Reverse sweep from a scalar ``loss``.

        Returns one array per entry of ``params`` with the parameter's shape.
        Parameters the loss does not depend on get a zero gradient.
        """
        if self._consumed:
            raise RuntimeError("backward already ran on this tape; record a new one")
        if loss.size != 1:
            raise ShapeError(f"loss must be a scalar, got shape {loss.shape}")
        params = list(params)
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g = grads.pop(id(entry.out), None)
            if g is None:
                continue
            in_grads = entry.backward(g)
            for inp, ig in zip(entry.inputs, in_grads):
                if ig is None or not isinstance(inp, Tensor) or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = ig if prev is None else prev + ig
        self.entries = []

        out = []
        for p in params:
            g = grads.get(id(p))
            out.append(np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape))
        return out


def active_tape() -> Optional[GradTape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor, tape: GradTape, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Functional spelling of :meth:`GradTape.gradient`."""
    return tape.gradient(loss, params)


def make_output(data: np.ndarray, inputs: tuple, backward_fn: BackwardFn) -> Tensor:
    """Wrap an op result and record it if any input is being differentiated."""
    tape = active_tape()
    out = Tensor(data)
    if tape is not None and any(isinstance(t, Tensor) and t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, inputs, backward_fn)
    return out
