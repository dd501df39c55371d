"""Dense float64 tensors with a tape for reverse-mode gradients.

Tensors are thin immutable wrappers around contiguous row-major numpy
arrays. Every primitive below computes eagerly; when a :class:`GradTape` is
active and one of the inputs is tracked by it, the primitive also records a
vector-Jacobian product so :func:`backward` can replay the tape in reverse.

Only the primitives the model and the losses need are provided, and there
is no implicit broadcasting: bias-style additions go through
:func:`add_row`, scalar constants through :func:`scale`/:func:`add_scalar`.
"""

from __future__ import annotations

import math
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import ContractError, DimensionError, UnknownLeafError

__all__ = [
    "Tensor",
    "GradTape",
    "Gradients",
    "backward",
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "add_scalar",
    "add_row",
    "softmax_rows",
    "attend_values",
    "layernorm",
    "relu",
    "log",
    "exp",
    "sigmoid",
    "tsum",
    "mean",
    "concat",
    "slice_axis",
    "reshape",
    "take",
    "save_tensor",
    "load_tensor",
    "dumps_tensor",
    "loads_tensor",
]


class Tensor:
    """Immutable float64 array.

    ``shape`` is a tuple of positive integers (empty for a scalar) and
    ``data`` is the flat row-major payload. Identity semantics: two tensors
    with equal contents are still distinct keys in a gradient dict.
    """

    __slots__ = ("_array", "__weakref__")

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64)
        if shape is not None:
            shape = tuple(int(s) for s in shape)
            if math.prod(shape) != arr.size:
                raise DimensionError(
                    f"cannot view {arr.size} values as shape {shape}"
                )
            arr = arr.reshape(shape)
        if any(s <= 0 for s in arr.shape):
            raise DimensionError(f"tensor dimensions must be positive, got {arr.shape}")
        arr = np.array(arr, order="C")
        arr.setflags(write=False)
        self._array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        out = object.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64)
        if arr.base is not None or arr.flags.writeable or not arr.flags.c_contiguous:
            arr = np.array(arr, order="C")
        arr.setflags(write=False)
        out._array = arr
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def data(self) -> np.ndarray:
        return self._array.reshape(-1)

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self._array

    def item(self) -> float:
        if self._array.size != 1:
            raise ContractError(f"item() needs a single element, shape is {self.shape}")
        return float(self._array.reshape(-1)[0])

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={np.array2string(self._array, threshold=12)})"

    def __len__(self):
        if not self.shape:
            raise TypeError("len() of a scalar tensor")
        return self.shape[0]

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return add_scalar(self, float(other))

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return sub(self, other)
        return add_scalar(self, -float(other))

    def __rsub__(self, other):
        return add_scalar(scale(self, -1.0), float(other))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# tape


@dataclass(frozen=True)
class _Record:
    op: str
    inputs: tuple
    output: Tensor
    vjp: Callable


_local = threading.local()


def _active_tape() -> "GradTape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class GradTape:
    """Ordered log of primitive applications.

    Use as a context manager; mark inputs with :meth:`watch`. One tape per
    evaluation, one thread per tape.

    >>> with GradTape() as tape:
    ...     x = tape.watch(Tensor([1.0, 2.0]))
    ...     y = tsum(mul(x, x))
    >>> backward(y, tape)[x].numpy().tolist()
    [2.0, 4.0]
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._producer: dict[int, int] = {}
        self._leaves: dict[int, Tensor] = {}

    def watch(self, *tensors: Tensor):
        for t in tensors:
            if not isinstance(t, Tensor):
                raise ContractError(f"can only watch tensors, got {type(t).__name__}")
            if id(t) in self._producer:
                raise ContractError("a recorded output cannot become a leaf")
            self._leaves[id(t)] = t
        return tensors[0] if len(tensors) == 1 else tensors

    @property
    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    @property
    def ops(self) -> list[str]:
        return [r.op for r in self.records]

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._leaves or id(t) in self._producer

    def __contains__(self, t) -> bool:
        return isinstance(t, Tensor) and self.tracks(t)

    def __len__(self):
        return len(self.records)

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.remove(self)
        return False

    def _record(self, op, inputs, output, vjp):
        self._producer[id(output)] = len(self.records)
        self.records.append(_Record(op, tuple(inputs), output, vjp))


def _emit(op: str, inputs: Sequence[Tensor], out: np.ndarray, vjp: Callable) -> Tensor:
    result = Tensor._wrap(out)
    tape = _active_tape()
    if tape is not None and any(tape.tracks(t) for t in inputs):
        tape._record(op, inputs, result, vjp)
    return result


class Gradients(dict):
    """Mapping tensor -> gradient tensor; ``order`` lists replayed record indices."""

    order: list[int]


def backward(loss: Tensor, tape: GradTape, wrt: Iterable[Tensor] | None = None) -> Gradients:
    """Gradients of a scalar ``loss`` with respect to tape leaves.

    Returns a :class:`Gradients` dict keyed by the leaf tensors (or by
    ``wrt`` when given). Leaves without a path to the loss get zeros.
    """
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if loss not in tape:
        raise UnknownLeafError("loss was not produced on this tape")
    targets = list(tape.leaves if wrt is None else wrt)
    for t in targets:
        if t not in tape:
            raise UnknownLeafError(f"tensor of shape {t.shape} is not on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    order = []
    stop = tape._producer.get(id(loss), -1)
    for idx in range(stop, -1, -1):
        rec = tape.records[idx]
        g = grads.get(id(rec.output))
        if g is None:
            continue
        order.append(idx)
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not tape.tracks(inp):
                continue
            key = id(inp)
            grads[key] = grads[key] + gi if key in grads else np.array(gi, dtype=np.float64)

    result = Gradients()
    for t in targets:
        g = grads.get(id(t))
        result[t] = Tensor._wrap(np.zeros(t.shape) if g is None else g.reshape(t.shape))
    result.order = order
    return result


# ---------------------------------------------------------------------------
# primitives


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.numpy(), b.numpy()
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _emit("transpose", (a,), a.numpy().T, lambda g: (g.T,))


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.numpy() + b.numpy(), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.numpy() - b.numpy(), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    A, B = a.numpy(), b.numpy()
    return _emit("mul", (a, b), A * B, lambda g: (g * B, g * A))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    A, B = a.numpy(), b.numpy()
    return _emit("div", (a, b), A / B, lambda g: (g / B, -g * A / (B * B)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (a,), a.numpy() * c, lambda g: (g * c,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", (a,), a.numpy() + float(c), lambda g: (g,))


def add_row(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., :] + b`` for a vector ``b`` matching the last axis."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError(f"add_row: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _emit("add_row", (x, b), x.numpy() + b.numpy(), lambda g: (g, g.sum(axis=lead)))


def _split_sum(terms: np.ndarray, group: slice | None, axis: int) -> np.ndarray:
    """Sum over ``axis``; the ``group`` part is added in sorted order.

    Sorting makes that part of the sum independent of how its members are
    ordered, so permuting them leaves the result bit-identical.
    """
    if group is None:
        return terms.sum(axis=axis)
    index = [slice(None)] * terms.ndim
    index[axis] = group
    inside = np.sort(terms[tuple(index)], axis=axis).sum(axis=axis)
    keep = np.ones(terms.shape[axis], dtype=bool)
    keep[group] = False
    return terms.compress(keep, axis=axis).sum(axis=axis) + inside


def softmax_rows(x: Tensor, exchangeable: slice | None = None) -> Tensor:
    """Row-wise softmax.

    ``exchangeable`` names a block of columns whose order must not affect
    the result; their share of the normalizer is summed in sorted order.
    """
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows: expected a matrix, got shape {x.shape}")
    X = x.numpy()
    e = np.exp(X - X.max(axis=1, keepdims=True))
    s = e / _split_sum(e, exchangeable, 1)[:, None]

    def vjp(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit("softmax_rows", (x,), s, vjp)


def attend_values(attn: Tensor, v: Tensor, exchangeable: slice | None = None) -> Tensor:
    """``attn @ v`` where the rows of ``v`` in ``exchangeable`` are mixed order-independently."""
    if attn.ndim != 2 or v.ndim != 2 or attn.shape[1] != v.shape[0]:
        raise DimensionError(f"attend_values: cannot mix {attn.shape} with {v.shape}")
    A, V = attn.numpy(), v.numpy()
    if exchangeable is None:
        out = A @ V
    else:
        keep = np.ones(V.shape[0], dtype=bool)
        keep[exchangeable] = False
        out = A[:, keep] @ V[keep] + _split_sum(A[:, exchangeable, None] * V[None, exchangeable], slice(None), 1)
    return _emit("attend_values", (attn, v), out, lambda g: (g @ V.T, A.T @ g))


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    C = x.shape[-1] if x.ndim else 0
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(
            f"layernorm: gamma {gamma.shape} / beta {beta.shape} do not match last axis of {x.shape}"
        )
    X, G = x.numpy(), gamma.numpy()
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))

    def vjp(g):
        gh = g * G
        dx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layernorm", (x, gamma, beta), xhat * G + beta.numpy(), vjp)


def relu(x: Tensor) -> Tensor:
    X = x.numpy()
    on = X > 0
    return _emit("relu", (x,), np.where(on, X, 0.0), lambda g: (g * on,))


def log(x: Tensor) -> Tensor:
    X = x.numpy()
    if np.any(X <= 0):
        raise ContractError("log: input must be strictly positive")
    return _emit("log", (x,), np.log(X), lambda g: (g / X,))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.numpy())
    return _emit("exp", (x,), e, lambda g: (g * e,))


def _sigmoid(X: np.ndarray) -> np.ndarray:
    out = np.empty_like(X)
    pos = X >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.numpy())
    return _emit("sigmoid", (x,), s, lambda g: (g * s * (1.0 - s),))


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = x.shape
    return _emit("sum", (x,), np.array(x.numpy().sum()), lambda g: (np.full(shape, float(g)),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _emit("mean", (x,), np.array(x.numpy().mean()), lambda g: (np.full(shape, float(g) / n),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat: nothing to concatenate")
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(a != b for k, (a, b) in enumerate(zip(t.shape, ref)) if k != axis % len(ref)):
            raise DimensionError(f"concat along axis {axis}: shapes {ref} and {t.shape} disagree")
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.numpy() for t in tensors], axis=axis)
    return _emit("concat", tensors, out, lambda g: tuple(np.split(g, cuts, axis=axis)))


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= x.shape[axis]:
        raise DimensionError(f"slice [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice", (x,), x.numpy()[index], vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if math.prod(shape) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _emit("reshape", (x,), x.numpy().reshape(shape), lambda g: (g.reshape(old),))


def take(x: Tensor, flat_indices) -> Tensor:
    """Gather elements of the flattened tensor into a vector."""
    idx = np.asarray(flat_indices, dtype=np.intp).reshape(-1)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= x.size:
        raise DimensionError(f"take: indices out of range for {x.size} elements")
    shape, n = x.shape, x.size

    def vjp(g):
        full = np.zeros(n)
        np.add.at(full, idx, g)
        return (full.reshape(shape),)

    return _emit("take", (x,), x.numpy().reshape(-1)[idx], vjp)


# ---------------------------------------------------------------------------
# file format: b"STMA" | u8 version | u8 rank | rank * u64 dims | f64 payload (all LE)

_MAGIC = b"STMA"
_VERSION = 1


def dumps_tensor(t: Tensor) -> bytes:
    head = _MAGIC + struct.pack("<BB", _VERSION, t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape)
    return head + t.numpy().astype("<f8").tobytes(order="C")


def loads_tensor(buf: bytes) -> Tensor:
    if buf[:4] != _MAGIC:
        raise ContractError("not a tensor file: bad magic")
    version, rank = struct.unpack_from("<BB", buf, 4)
    if version != _VERSION:
        raise ContractError(f"unsupported tensor file version {version}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 6)
    offset = 6 + 8 * rank
    count = math.prod(dims)
    if len(buf) != offset + 8 * count:
        raise ContractError(f"payload holds {(len(buf) - offset) / 8} values, header promises {count}")
    arr = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    return Tensor._wrap(arr.astype(np.float64).reshape(dims))


def save_tensor(t: Tensor, path) -> None:
    Path(path).write_bytes(dumps_tensor(t))


def load_tensor(path) -> Tensor:
    return loads_tensor(Path(path).read_bytes())
