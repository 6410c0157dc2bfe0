"""Dense float tensors with reverse-mode automatic differentiation.

The engine is deliberately small: numpy arrays hold the data, and a
``Tape`` records every differentiable operation in execution order (a
Wengert list). ``Tape.backward`` walks the list once in reverse and
accumulates gradients into the participating leaf tensors.

Recording rules:

* An operation is recorded only while a ``Tape`` is active on the current
  thread *and* at least one input requires gradients. Outside a tape the
  same functions run as plain numpy computations, which is the fast path
  used for inference.
* A tape may be consumed by ``backward`` exactly once; calling it again
  raises. Leaf gradients accumulate across tapes until ``zero_grad``.
"""

from __future__ import annotations

import threading

import numpy as np

__all__ = ["Tensor", "Tape", "apply_op", "no_grad"]

DEFAULT_DTYPE = np.float32

_tls = threading.local()


def _tape_stack():
    if not hasattr(_tls, "stack"):
        _tls.stack = []
    return _tls.stack


def active_tape():
    """Tape currently recording on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("out", "inputs", "backward_fn")

    def __init__(self, out, inputs, backward_fn):
        self.out = out
        self.inputs = inputs
        self.backward_fn = backward_fn


class Tape:
    """Execution-ordered log of differentiable operations.

    Use as a context manager around the forward pass::

        with Tape() as tape:
            loss = model_loss(...)
        tape.backward(loss)

    Tapes are confined to the thread that opened them; independent tapes
    on different threads do not interact.
    """

    def __init__(self):
        self.ops: list[_Record] = []
        self._consumed = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted: exiting a tape that is not active")
        stack.pop()
        return False

    def record(self, out, inputs, backward_fn):
        self.ops.append(_Record(out, inputs, backward_fn))

    def backward(self, output: "Tensor"):
        """Accumulate d(output)/d(leaf) into every requires_grad leaf.

        ``output`` must be a scalar recorded on this tape. Each recorded
        operation is visited exactly once, in reverse execution order.
        """
        if self._consumed:
            raise RuntimeError("tape already consumed by a previous backward call")
        if output.size != 1:
            raise ValueError(
                f"backward requires a scalar output, got shape {output.shape}"
            )
        self._consumed = True

        produced = {id(r.out) for r in self.ops}
        if id(output) not in produced:
            raise ValueError("output tensor was not produced on this tape")

        # id -> (tensor, grad array); grads for op outputs are dropped as
        # soon as their producing record has been processed.
        grads: dict[int, tuple[Tensor, np.ndarray]] = {
            id(output): (output, np.ones_like(output.data))
        }
        for rec in reversed(self.ops):
            entry = grads.pop(id(rec.out), None)
            if entry is None:
                continue  # not on the path to the output
            gout = entry[1]
            gins = rec.backward_fn(gout)
            for t, g in zip(rec.inputs, gins):
                if g is None or not isinstance(t, Tensor) or not t.requires_grad:
                    continue
                held = grads.get(id(t))
                if held is None:
                    grads[id(t)] = (t, g)
                else:
                    # backward fns may hand back views; never add in place
                    grads[id(t)] = (t, held[1] + g)
            rec.backward_fn = None  # release closure memory early
            rec.out = None

        for tid, (t, g) in grads.items():
            if tid in produced:
                continue
            if t.grad is None:
                t.grad = np.array(g, dtype=t.data.dtype, copy=True)
            else:
                t.grad += g
        self.ops.clear()


class no_grad:
    """Context manager that suppresses recording even inside a tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _tape_stack().pop()
        return False


class Tensor:
    """N-dimensional float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    # -- introspection -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.size == 1 else _fail_item(self)

    def numpy(self):
        """The underlying array (shared, do not mutate in tracked code)."""
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self):
        """Same data, cut from the recorded graph."""
        t = Tensor.__new__(Tensor)
        t.data = self.data
        t.requires_grad = False
        t.grad = None
        return t

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype))

    # -- operator sugar (implemented in ops.py, bound at import) -------
    def __neg__(self):
        from . import ops

        return ops.neg(self)

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

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)


def _fail_item(t):
    raise ValueError(f"item() requires a scalar tensor, got shape {t.shape}")


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x), dtype=dtype)


def apply_op(inputs, out_data, backward_fn):
    """Wrap an op result, recording it when a tape is active.

    ``inputs`` is the tuple of op arguments (Tensors or constants);
    ``backward_fn(gout) -> tuple`` returns one gradient array (or None)
    per input, aligned with ``inputs``.
    """
    tape = active_tape()
    track = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    if track:
        tape.record(out, inputs, backward_fn)
    return out
