"""Parameter management and the attention/feed-forward building blocks."""

from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigError


def linear_init(fan_in: int) -> Callable:
    bound = 1.0 / math.sqrt(fan_in)

    def init(rng, shape, dtype):
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return init


def scaled_init(fan_in: int, gain: float = 1.0) -> Callable:
    """Uniform init with Var = gain/fan_in: preserves activation scale
    through a plain matrix (gain 1) or a matrix feeding ReLU (gain 2).
    Matters here because several projection paths have no normalization
    layer to rescue a shrinking signal."""
    bound = math.sqrt(3.0 * gain / fan_in)

    def init(rng, shape, dtype):
        return rng.uniform(-bound, bound, size=shape).astype(dtype)

    return init


def conv_init(k: int, cin: int) -> Callable:
    std = math.sqrt(2.0 / (k * k * cin))

    def init(rng, shape, dtype):
        return (rng.standard_normal(shape) * std).astype(dtype)

    return init


def normal_init(std: float) -> Callable:
    def init(rng, shape, dtype):
        return (rng.standard_normal(shape) * std).astype(dtype)

    return init


def zeros_init(rng, shape, dtype):
    return np.zeros(shape, dtype=dtype)


def ones_init(rng, shape, dtype):
    return np.ones(shape, dtype=dtype)


class ParamStore:
    """Creates and indexes uniquely named Parameters for one model."""

    def __init__(self, dtype=np.float32, seed: int = 0) -> None:
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self._params: dict[str, Parameter] = {}

    def parameter(self, name: str, shape, init: Callable) -> Parameter:
        if name in self._params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        value = Tensor(init(self.rng, tuple(shape), self.dtype))
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def matrix(self, name: str, fan_in: int, fan_out: int, gain: float = 1.0) -> Parameter:
        return self.parameter(name, (fan_in, fan_out), scaled_init(fan_in, gain))

    def parameters(self) -> list[Parameter]:
        return list(self._params.values())

    def get(self, name: str) -> Parameter:
        return self._params[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.zero_grad()


def linear(x: Tensor, w: Parameter, b: Optional[Parameter] = None) -> Tensor:
    y = ad.matmul(x, w.value)
    if b is not None:
        y = ad.add(y, b.value)
    return y


def map_linear(x: Tensor, w: Parameter, b: Optional[Parameter] = None) -> Tensor:
    """Per-position linear transform of an (H, W, Cin) map."""
    h, wd, c = x.shape
    y = linear(ad.reshape(x, (h * wd, c)), w, b)
    return ad.reshape(y, (h, wd, y.shape[1]))


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, width: int, eps: float = 1e-5) -> None:
        self.gamma = store.parameter(f"{name}.gamma", (width,), ones_init)
        self.beta = store.parameter(f"{name}.beta", (width,), zeros_init)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        mu = ad.tmean(x, axis=-1, keepdims=True)
        xc = ad.sub(x, mu)
        var = ad.tmean(ad.mul(xc, xc), axis=-1, keepdims=True)
        inv = ad.powc(ad.addc(var, self.eps), -0.5)
        return ad.add(ad.mul(ad.mul(xc, inv), self.gamma.value), self.beta.value)


class MultiHeadAttention:
    """Multi-head attention with learned Q, K, V and output projections.

    Self-attention when ``kv`` is omitted; cross-attention otherwise.  There
    is no positional term inside the block, so it is equivariant to row
    permutations of ``x`` and invariant to row permutations of ``kv``.
    ``key_bias`` (one value per key, 0 or -inf) masks keys out.
    """

    def __init__(self, store: ParamStore, name: str, width: int, heads: int) -> None:
        if width % heads != 0:
            raise ConfigError(f"{name}: width {width} not divisible by {heads} heads")
        self.width = width
        self.heads = heads
        self.head_dim = width // heads
        ini = linear_init(width)
        self.wq = store.parameter(f"{name}.wq", (width, width), ini)
        self.bq = store.parameter(f"{name}.bq", (width,), zeros_init)
        # no key bias: a uniform shift of every key cancels inside softmax,
        # so the parameter would be unidentifiable
        self.wk = store.parameter(f"{name}.wk", (width, width), ini)
        self.wv = store.parameter(f"{name}.wv", (width, width), ini)
        self.bv = store.parameter(f"{name}.bv", (width,), zeros_init)
        self.wo = store.parameter(f"{name}.wo", (width, width), ini)
        self.bo = store.parameter(f"{name}.bo", (width,), zeros_init)
        self.last_weights: Optional[np.ndarray] = None  # (heads, Tq, Tk) debug copy

    def __call__(
        self,
        x: Tensor,
        kv: Optional[Tensor] = None,
        key_bias: Optional[np.ndarray] = None,
    ) -> Tensor:
        src = x if kv is None else kv
        q = linear(x, self.wq, self.bq)
        k = linear(src, self.wk)
        v = linear(src, self.wv, self.bv)
        scale = 1.0 / math.sqrt(self.head_dim)
        bias_t = None
        if key_bias is not None:
            bias_t = Tensor(np.asarray(key_bias, dtype=x.data.dtype))
        outs = []
        weights = []
        for h in range(self.heads):
            cols = (slice(None), slice(h * self.head_dim, (h + 1) * self.head_dim))
            qh = ad.getitem(q, cols)
            kh = ad.getitem(k, cols)
            vh = ad.getitem(v, cols)
            logits = ad.mulc(ad.matmul(qh, ad.transpose(kh)), scale)
            if bias_t is not None:
                logits = ad.add(logits, bias_t)
            w = ad.softmax(logits, axis=-1)
            weights.append(w.data)
            outs.append(ad.matmul(w, vh))
        self.last_weights = np.stack(weights)
        return linear(ad.concat(outs, axis=1), self.wo, self.bo)


class FeedForward:
    """Two-layer position-wise MLP with ReLU, hidden width 4x."""

    def __init__(self, store: ParamStore, name: str, width: int, hidden: Optional[int] = None) -> None:
        hidden = hidden or 4 * width
        self.w1 = store.parameter(f"{name}.w1", (width, hidden), linear_init(width))
        self.b1 = store.parameter(f"{name}.b1", (hidden,), zeros_init)
        self.w2 = store.parameter(f"{name}.w2", (hidden, width), linear_init(hidden))
        self.b2 = store.parameter(f"{name}.b2", (width,), zeros_init)

    def __call__(self, x: Tensor) -> Tensor:
        return linear(ad.relu(linear(x, self.w1, self.b1)), self.w2, self.b2)


def mhsa(x: Tensor, block: MultiHeadAttention) -> Tensor:
    """Functional alias used where call sites read better as an operation."""
    return block(x)
