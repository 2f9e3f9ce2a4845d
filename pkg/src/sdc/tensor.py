"""Dense float64 tensors with a reverse-mode gradient tape.

Operations are plain functions (``matmul``, ``conv2d``, ...). When at least
one input requires a gradient and a :class:`GradTape` is active, the op
appends a record holding its backward rule; ``tape.backward(loss)`` replays
those records in reverse order.

Without an active tape nothing is recorded, which is the inference path.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class TapeError(RuntimeError):
    """Misuse of the gradient tape (non-scalar loss, double backward, ...)."""


class Tensor:
    """An n-dimensional float64 array that can take part in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        # ascontiguousarray would promote 0-d scalars to shape (1,)
        self.data = arr if arr.flags.c_contiguous else np.ascontiguousarray(arr)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # sugar for the handful of ops the model code uses
    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, other: Tensor) -> Tensor:
        return mul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: tuple[Tensor, ...], output: Tensor, backward: Backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_active: list[GradTape] = []


class GradTape:
    """Ordered log of differentiable ops.

    Use as a context manager::

        with GradTape() as tape:
            loss = cross_entropy(model(x), y)
        tape.backward(loss)

    A tape can be replayed once; call :meth:`reset` before reusing it.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> GradTape:
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: tuple[Tensor, ...], output: Tensor, backward: Backward) -> None:
        if self._consumed:
            raise TapeError("tape already replayed; call reset() before recording")
        self.records.append(_Record(inputs, output, backward))

    def reset(self) -> None:
        self.records = []
        self._consumed = False

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward called twice without reset()")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if not self.records or self.records[-1].output is not loss:
            if not any(r.output is loss for r in self.records):
                raise TapeError("loss was not produced on this tape")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        owners: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self.records):
            g = grads.get(id(rec.output))
            if g is None:
                continue
            for inp, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    owners[key] = inp
        for key, g in grads.items():
            t = owners[key]
            t.grad = g if t.grad is None else t.grad + g


def _emit(out_data: np.ndarray, inputs: tuple[Tensor, ...], backward: Backward) -> Tensor:
    if not np.isfinite(out_data).all():
        raise FloatingPointError("non-finite value produced by forward op")
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _active:
        _active[-1].record(inputs, out, backward)
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g @ B.T, A.T @ g

    return _emit(A @ B, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")

    def backward(g):
        return (g.T,)

    return _emit(a.data.T, (a,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes differ {a.shape} vs {b.shape}")

    def backward(g):
        return g, g

    return _emit(a.data + b.data, (a, b), backward)


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a length-n vector to every row of an m x n matrix."""
    if x.ndim != 2 or bias.shape != (x.shape[1],):
        raise DimensionError(f"add_bias: {bias.shape} does not match rows of {x.shape}")

    def backward(g):
        return g, g.sum(axis=0)

    return _emit(x.data + bias.data, (x, bias), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes differ {a.shape} vs {b.shape}")
    A, B = a.data, b.data

    def backward(g):
        return g * B, g * A

    return _emit(A * B, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    def backward(g):
        return (g * c,)

    return _emit(a.data * c, (a,), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape

    def backward(g):
        return (g.reshape(old),)

    return _emit(a.data.reshape(shape), (a,), backward)


def flatten(a: Tensor) -> Tensor:
    """Collapse all but the leading (batch) axis."""
    return reshape(a, (a.shape[0], -1))


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape

    def backward(g):
        return (np.full(shape, float(g)),)

    return _emit(np.array(a.data.sum()), (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size

    def backward(g):
        return (np.full(shape, float(g) / n),)

    return _emit(np.array(a.data.mean()), (a,), backward)


def pick_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``out[i] = a[i, index[i]]`` for a matrix ``a``."""
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"pick_rows: index {index.shape} vs matrix {a.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _emit(a.data[rows, index], (a,), backward)


# ---------------------------------------------------------------- pointwise


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def backward(g):
        return (g * keep,)

    return _emit(np.where(keep, a.data, 0.0), (a,), backward)


def _check_rows(a: Tensor, name: str) -> None:
    if a.ndim != 2:
        raise DimensionError(f"{name} expects a 2-D batch of logits, got {a.shape}")


def softmax_rows(a: Tensor) -> Tensor:
    _check_rows(a, "softmax_rows")
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=1, keepdims=True)),)

    return _emit(s, (a,), backward)


def log_softmax_rows(a: Tensor) -> Tensor:
    _check_rows(a, "log_softmax_rows")
    z = a.data - a.data.max(axis=1, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    s = np.exp(out)

    def backward(g):
        return (g - s * g.sum(axis=1, keepdims=True),)

    return _emit(out, (a,), backward)


# ---------------------------------------------------------------- convolution


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"conv2d: input {size} with kernel {k}, stride {stride}, padding {padding} "
            "does not give an integer output size"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of an N x C x H x W batch with F x C x kh x kw filters."""
    if x.ndim != 4 or kernel.ndim != 4 or x.shape[1] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {kernel.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = kernel.shape
    ho = _conv_out(h, kh, stride, padding)
    wo = _conv_out(w, kw, stride, padding)

    X = x.data
    if padding:
        X = np.pad(X, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    K = kernel.data.reshape(f, -1)
    # im2col, built once and reused by the kernel gradient
    win = sliding_window_view(X, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = (cols @ K.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        dk = (g2.T @ cols).reshape(kernel.shape)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ K).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(X.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return dx, dk

    return _emit(out, (x, kernel), backward)


def maxpool2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2. Ties resolve to the first element of the window."""
    if x.ndim != 4 or x.shape[2] % 2 or x.shape[3] % 2:
        raise DimensionError(f"maxpool2 needs even spatial dims, got {x.shape}")
    n, c, h, w = x.shape
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    arg = win.argmax(axis=-1)  # argmax returns the first maximum
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        d = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(d, arg[..., None], g[..., None], axis=-1)
        d = d.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (d.reshape(n, c, h, w),)

    return _emit(out, (x,), backward)
