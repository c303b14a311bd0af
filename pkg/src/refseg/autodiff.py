"""Dense tensors with tape-based reverse-mode differentiation.

Values are numpy arrays in float32 or float64, channels-last and row-major
everywhere.  Operations executed while a :class:`Tape` is active append a
backward closure to it; :func:`backward` replays the tape in reverse
execution order, accumulating gradients into every reachable tensor.
Tensors are treated as immutable once created: no operation writes to its
operands, so a tape can always be replayed against the values it captured.

Broadcast semantics for ``add``/``mul``/``sub`` follow numpy; the contract
relied on elsewhere is equal shapes, a scalar against anything, or a
length-C row vector against an (T, C) matrix (the vector applies to every
row).  Gradients of broadcast operands are sum-reduced back to their shape.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import DimensionError, NumericalError, PrecisionError

FLOAT_DTYPES = (np.float32, np.float64)

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed differentiable operations.

    Usable as a context manager; operations run inside the ``with`` block
    are recorded.  Replaying backward visits each recorded operation exactly
    once, newest first.
    """

    __slots__ = ("_nodes",)

    def __init__(self) -> None:
        self._nodes: list[Callable[[], None]] = []

    def record(self, backward_fn: Callable[[], None]) -> None:
        self._nodes.append(backward_fn)

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> bool:
        _TAPE_STACK.pop()
        return False


def active_tape() -> Optional[Tape]:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(backward_fn: Callable[[], None]) -> None:
    tape = active_tape()
    if tape is not None:
        tape.record(backward_fn)


class Tensor:
    """Dense n-dimensional array plus a gradient slot filled by backward."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None) -> None:
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name})"


class Parameter:
    """Named learnable tensor; names are unique within a model."""

    __slots__ = ("name", "value")

    def __init__(self, name: str, value: Tensor) -> None:
        self.name = name
        self.value = value

    @property
    def gradient(self) -> np.ndarray:
        """Accumulated gradient, zeros if the parameter was unreachable."""
        if self.value.grad is None:
            return np.zeros_like(self.value.data)
        return self.value.grad

    def zero_grad(self) -> None:
        self.value.grad = None

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.value.shape})"


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(tensor) into every tensor reachable from loss."""
    if loss.data.size != 1:
        raise DimensionError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    for fn in reversed(tape._nodes):
        fn()


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        # copy: g is often a view of another tensor's gradient buffer
        t.grad = np.array(g, dtype=t.data.dtype)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a broadcast gradient back down to the operand shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _check_same_dtype(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.dtype != b.data.dtype:
        raise PrecisionError(
            f"{op}: mixed precisions {a.data.dtype.name} and {b.data.dtype.name}"
        )


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "add")
    try:
        out = Tensor(a.data + b.data)
    except ValueError:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} do not broadcast")

    def bw():
        g = out.grad
        if g is None:
            return
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    _record(bw)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "sub")
    try:
        out = Tensor(a.data - b.data)
    except ValueError:
        raise DimensionError(f"sub: shapes {a.shape} and {b.shape} do not broadcast")

    def bw():
        g = out.grad
        if g is None:
            return
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    _record(bw)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "mul")
    try:
        out = Tensor(a.data * b.data)
    except ValueError:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} do not broadcast")

    def bw():
        g = out.grad
        if g is None:
            return
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    _record(bw)
    return out


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """Pointwise combine; ``op`` is ``"mul"`` or ``"add"``."""
    if op == "mul":
        return mul(a, b)
    if op == "add":
        return add(a, b)
    raise ValueError(f"elementwise: unknown op {op!r}")


def mulc(a: Tensor, c: float) -> Tensor:
    c = a.data.dtype.type(c)
    out = Tensor(a.data * c)

    def bw():
        if out.grad is not None:
            _accum(a, out.grad * c)

    _record(bw)
    return out


def addc(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data + a.data.dtype.type(c))

    def bw():
        if out.grad is not None:
            _accum(a, out.grad)

    _record(bw)
    return out


def neg(a: Tensor) -> Tensor:
    return mulc(a, -1.0)


def relu(a: Tensor) -> Tensor:
    # subgradient at 0 is 0
    out = Tensor(np.maximum(a.data, 0))

    def bw():
        if out.grad is not None:
            _accum(a, out.grad * (a.data > 0))

    _record(bw)
    return out


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    out = Tensor(y)

    def bw():
        if out.grad is not None:
            _accum(a, out.grad * y * (1.0 - y))

    _record(bw)
    return out


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    out = Tensor(y)

    def bw():
        if out.grad is not None:
            _accum(a, out.grad * y)

    _record(bw)
    return out


def log(a: Tensor) -> Tensor:
    out = Tensor(np.log(a.data))

    def bw():
        if out.grad is not None:
            _accum(a, out.grad / a.data)

    _record(bw)
    return out


def powc(a: Tensor, p: float) -> Tensor:
    """Elementwise power with a constant exponent (data must support it)."""
    out = Tensor(a.data**p)

    def bw():
        if out.grad is not None:
            _accum(a, out.grad * p * a.data ** (p - 1))

    _record(bw)
    return out


# ---------------------------------------------------------------------------
# shape manipulation


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape))

    def bw():
        if out.grad is not None:
            _accum(a, out.grad.reshape(a.shape))

    _record(bw)
    return out


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    ax = tuple(axes) if axes is not None else tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(ax))
    out = Tensor(a.data.transpose(ax))

    def bw():
        if out.grad is not None:
            _accum(a, out.grad.transpose(inv))

    _record(bw)
    return out


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat of zero tensors")
    for p in parts[1:]:
        _check_same_dtype(parts[0], p, "concat")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw():
        g = out.grad
        if g is None:
            return
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(int(lo), int(hi))
            _accum(p, g[tuple(idx)])

    _record(bw)
    return out


def _is_advanced_index(idx) -> bool:
    comps = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(c, (list, np.ndarray)) for c in comps)


def getitem(a: Tensor, idx) -> Tensor:
    """Numpy-style indexing; gradient scatter-adds back into the source."""
    out = Tensor(np.array(a.data[idx]))
    advanced = _is_advanced_index(idx)

    def bw():
        g = out.grad
        if g is None:
            return
        if a.grad is None:
            a.grad = np.zeros_like(a.data)
        if advanced:
            np.add.at(a.grad, idx, g)  # repeated indices accumulate
        else:
            a.grad[idx] += g

    _record(bw)
    return out


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims))

    def bw():
        g = out.grad
        if g is None:
            return
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    _record(bw)
    return out


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        n = a.shape[axis]
    return mulc(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def softmax(a: Tensor, axis: int) -> Tensor:
    """Numerically stabilized softmax; -inf entries map to exactly 0."""
    m = np.max(a.data, axis=axis, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NumericalError("softmax: a slice is fully masked or non-finite")
    e = np.exp(a.data - m)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bw():
        g = out.grad
        if g is None:
            return
        dot = (g * y).sum(axis=axis, keepdims=True)
        _accum(a, y * (g - dot))

    _record(bw)
    return out


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype(a, b, "matmul")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    out = Tensor(a.data @ b.data)

    def bw():
        g = out.grad
        if g is None:
            return
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    _record(bw)
    return out


# ---------------------------------------------------------------------------
# spatial operators (channels-last maps)


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if not pad:
        return x
    h, w, c = x.shape
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[pad : pad + h, pad : pad + w] = x
    return xp


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(H, W, C) -> (H*W, k*k*C) patch matrix, stride 1."""
    h, w, c = x.shape
    xp = _pad_spatial(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    # win: (H, W, C, k, k) -> (H, W, k, k, C) -> (H*W, k*k*C)
    return win.transpose(0, 1, 3, 4, 2).reshape(h * w, k * k * c)


def _conv_forward_f64(x: np.ndarray, k: np.ndarray, b, pad: int) -> np.ndarray:
    # Accumulates taps in (dy, dx, cin) order per output element, matching a
    # scalar reference loop bit-for-bit in any precision.
    h, w, _ = x.shape
    kk = k.shape[0]
    cout = k.shape[3]
    xp = _pad_spatial(x, pad)
    if b is None:
        acc = np.zeros((h, w, cout), dtype=x.dtype)
    else:
        acc = np.broadcast_to(b, (h, w, cout)).copy()
    for dy in range(kk):
        for dx in range(kk):
            patch = xp[dy : dy + h, dx : dx + w, :]
            for ci in range(k.shape[2]):
                acc += patch[:, :, ci : ci + 1] * k[dy, dx, ci, :]
    return acc


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, padding: Optional[int] = None) -> Tensor:
    """Stride-1 2D convolution on an (H, W, Cin) map, spatial size preserved.

    ``kernel`` is (k, k, Cin, Cout) with odd k; default padding (k-1)//2.
    The double-precision forward accumulates taps in a fixed order and is
    bit-reproducible against a naive per-pixel loop.
    """
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape}, kernel {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 != 1:
        raise DimensionError(f"conv2d: kernel size {k} must be odd")
    if kernel.shape[2] != x.shape[2]:
        raise DimensionError(
            f"conv2d: input channels {x.shape} do not match kernel {kernel.shape}"
        )
    _check_same_dtype(x, kernel, "conv2d")
    if bias is not None:
        _check_same_dtype(x, bias, "conv2d")
        if bias.shape != (kernel.shape[3],):
            raise DimensionError(f"conv2d: bias {bias.shape} vs kernel {kernel.shape}")
    pad = (k - 1) // 2 if padding is None else padding
    h, w, cin = x.shape
    cout = kernel.shape[3]

    bdata = None if bias is None else bias.data
    cols_cache = None
    if x.data.dtype == np.float64:
        ydata = _conv_forward_f64(x.data, kernel.data, bdata, pad)
    else:
        # single precision: accumulate in double so the result is within one
        # rounding step of the exact sum, then cast back
        cols_cache = _im2col(x.data, k, pad)
        ydata = cols_cache.astype(np.float64) @ kernel.data.reshape(k * k * cin, cout).astype(np.float64)
        if bdata is not None:
            ydata = ydata + bdata
        ydata = ydata.reshape(h, w, cout).astype(np.float32)
    out = Tensor(ydata)

    def bw():
        g = out.grad
        if g is None:
            return
        gmat = g.reshape(h * w, cout)
        cols = cols_cache if cols_cache is not None else _im2col(x.data, k, pad)
        _accum(kernel, (cols.T @ gmat).reshape(kernel.shape))
        if bias is not None:
            _accum(bias, g.sum(axis=(0, 1)))
        # dx: correlate the output gradient with the spatially flipped kernel,
        # swapping in/out channels; valid because stride is 1 and k is odd.
        kflip = kernel.data[::-1, ::-1, :, :].transpose(0, 1, 3, 2)
        gcols = _im2col(g, k, pad)
        _accum(x, (gcols @ kflip.reshape(k * k * cout, cin)).reshape(x.shape))

    _record(bw)
    return out


_RESIZE_CACHE: dict = {}


def _resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic bilinear interpolation matrix, corners not aligned.

    Output sample i reads source coordinate (i + 0.5) * n_in / n_out - 0.5
    with edge clamping, the standard convention for segmentation decoders.
    """
    key = (n_in, n_out, np.dtype(dtype).name)
    m = _RESIZE_CACHE.get(key)
    if m is not None:
        return m
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        s = (i + 0.5) * n_in / n_out - 0.5
        i0 = math.floor(s)
        frac = s - i0
        lo = min(max(i0, 0), n_in - 1)
        hi = min(max(i0 + 1, 0), n_in - 1)
        m[i, lo] += 1.0 - frac
        m[i, hi] += frac
    _RESIZE_CACHE[key] = m
    return m


def _apply_separable(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    """Apply row/column interpolation matrices to an (H, W, C) map."""
    h, w, c = x.shape
    y = (mh @ x.reshape(h, w * c)).reshape(mh.shape[0], w, c)
    y = y.transpose(1, 0, 2).reshape(w, mh.shape[0] * c)
    y = (mw @ y).reshape(mw.shape[0], mh.shape[0], c)
    return y.transpose(1, 0, 2)


def bilinear_resize_array(x: np.ndarray, out_hw: tuple) -> np.ndarray:
    """Non-differentiable bilinear resize for metrics and dumps."""
    squeeze = x.ndim == 2
    if squeeze:
        x = x[:, :, None]
    mh = _resize_matrix(x.shape[0], out_hw[0], x.dtype)
    mw = _resize_matrix(x.shape[1], out_hw[1], x.dtype)
    y = _apply_separable(x, mh, mw)
    return y[:, :, 0] if squeeze else y


def upsample2x(x: Tensor) -> Tensor:
    """Bilinear 2x upsampling of an (H, W, C) map."""
    if x.ndim != 3:
        raise DimensionError(f"upsample2x: expected (H, W, C), got {x.shape}")
    h, w, _ = x.shape
    mh = _resize_matrix(h, 2 * h, x.data.dtype)
    mw = _resize_matrix(w, 2 * w, x.data.dtype)
    out = Tensor(_apply_separable(x.data, mh, mw))

    def bw():
        g = out.grad
        if g is None:
            return
        _accum(x, _apply_separable(g, mh.T, mw.T))

    _record(bw)
    return out


def avgpool2x(x: Tensor) -> Tensor:
    """Mean over non-overlapping 2x2 blocks of an (H, W, C) map."""
    if x.ndim != 3:
        raise DimensionError(f"avgpool2x: expected (H, W, C), got {x.shape}")
    h, w, c = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avgpool2x: spatial dims must be even, got {x.shape}")
    out = Tensor(x.data.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3)))

    def bw():
        g = out.grad
        if g is None:
            return
        _accum(x, np.repeat(np.repeat(g, 2, axis=0), 2, axis=1) * x.data.dtype.type(0.25))

    _record(bw)
    return out


# ---------------------------------------------------------------------------
# loss


def bce_with_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on sigmoid(logits), log-sum-exp stabilized."""
    if logits.shape != targets.shape:
        raise DimensionError(f"bce: logits {logits.shape} vs targets {targets.shape}")
    x = logits.data
    t = targets.astype(x.dtype)
    per = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    out = Tensor(np.asarray(per.mean(), dtype=x.dtype))

    def bw():
        g = out.grad
        if g is None:
            return
        s = 1.0 / (1.0 + np.exp(-x))
        _accum(logits, (s - t) * (g / x.size))

    _record(bw)
    return out
