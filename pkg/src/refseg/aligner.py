"""Transformer decoding of fused tokens against queries, followed by the
query-conditioned segmentation head: each query is deserialized into a 3x3
convolution kernel, applied to the shared upsampled feature map to yield a
per-query mask logit map, and a self-attention scorer softmax-weights the
masks into the final prediction.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import DimensionError
from .nn import (
    FeedForward,
    LayerNorm,
    MultiHeadAttention,
    ParamStore,
    conv_init,
    linear,
    linear_init,
    zeros_init,
)


class TransformerDecoder:
    """Decoder layers over the N visual tokens.

    Queries enter only as cross-attention keys/values (no positional terms),
    so the output is invariant to any permutation of the query rows.
    """

    def __init__(self, store: ParamStore, cfg: ModelConfig) -> None:
        c = cfg.fusion_width
        self.cfg = cfg
        self.layers = []
        for i in range(cfg.decoder_layers):
            self.layers.append(
                {
                    "self": MultiHeadAttention(store, f"decoder.layer{i}.self", c, cfg.heads),
                    "ln1": LayerNorm(store, f"decoder.layer{i}.ln1", c),
                    "cross": MultiHeadAttention(store, f"decoder.layer{i}.cross", c, cfg.heads),
                    "ln2": LayerNorm(store, f"decoder.layer{i}.ln2", c),
                    "ffn": FeedForward(store, f"decoder.layer{i}.ffn", c),
                    "ln3": LayerNorm(store, f"decoder.layer{i}.ln3", c),
                }
            )

    def __call__(self, f_vt: Tensor, f_q: Tensor) -> Tensor:
        """(N, C) tokens against (N_q, C) queries -> (S, S, C) features."""
        s = self.cfg.grid_size
        if f_vt.shape[0] != s * s:
            raise DimensionError(f"expected {s * s} visual tokens, got {f_vt.shape}")
        x = f_vt
        for layer in self.layers:
            x = layer["ln1"](ad.add(x, layer["self"](x)))
            x = layer["ln2"](ad.add(x, layer["cross"](x, kv=f_q)))
            x = layer["ln3"](ad.add(x, layer["ffn"](x)))
        return ad.reshape(x, (s, s, self.cfg.fusion_width))


@dataclass
class DynamicKernel:
    """3x3 single-output-channel kernel deserialized from one query."""

    weights: Tensor      # (3, 3, Cp)
    bias: Tensor         # scalar
    source_query: int

    def serialize(self) -> np.ndarray:
        """Inverse of the deserialization: 9*Cp weights then the bias."""
        return np.concatenate(
            [self.weights.data.reshape(-1), self.bias.data.reshape(1)]
        )


@dataclass
class MaskBundle:
    masks: list        # N_q mask logit maps, each (4S, 4S)
    scores: Tensor     # (N_q,) mask weights
    y: Tensor          # (4S, 4S) aggregated logit map

    def masks_array(self) -> np.ndarray:
        return np.stack([m.data for m in self.masks])


class MaskGenerator:
    """Projects decoded features to the mask grid and synthesizes per-query
    convolution kernels."""

    def __init__(self, store: ParamStore, cfg: ModelConfig) -> None:
        c = cfg.fusion_width
        cp = cfg.kernel_channels
        self.cfg = cfg
        self.conv_p = store.parameter("aligner.conv_p.kernel", (3, 3, c, cp), conv_init(3, c))
        self.conv_p_b = store.parameter("aligner.conv_p.bias", (cp,), zeros_init)
        self.w_p = store.parameter("aligner.w_p", (c, 9 * cp + 1), linear_init(c))
        self.b_p = store.parameter("aligner.b_p", (9 * cp + 1,), zeros_init)
        # fixed-kernel ablation head: one ordinary learned conv over F_p
        self.fixed_kernel = store.parameter("aligner.fixed.kernel", (3, 3, cp, 1), conv_init(3, cp))
        self.fixed_bias = store.parameter("aligner.fixed.bias", (1,), zeros_init)

    def project_fp(self, f_s: Tensor) -> Tensor:
        """(S, S, C) -> (4S, 4S, Cp): upsample, 3x3 conv, upsample."""
        mid = ad.conv2d(ad.upsample2x(f_s), self.conv_p.value, self.conv_p_b.value)
        return ad.upsample2x(mid)

    def kernel_from_query(self, f_qn: Tensor, index: int = 0) -> DynamicKernel:
        """ReLU(W_p f_qn + b_p) split as 9*Cp kernel taps then one bias.

        Tap order is (kernel row, kernel column, channel), i.e. a row-major
        reshape of the leading 9*Cp entries to (3, 3, Cp).  With
        kernel_activation="identity" the ReLU (and the non-negativity of the
        kernel) is dropped.
        """
        cp = self.cfg.kernel_channels
        row = ad.reshape(f_qn, (1, f_qn.shape[0]))
        raw = linear(row, self.w_p, self.b_p)
        if self.cfg.kernel_activation == "relu":
            raw = ad.relu(raw)
        f_pn = ad.reshape(raw, (9 * cp + 1,))
        weights = ad.reshape(ad.getitem(f_pn, slice(0, 9 * cp)), (3, 3, cp))
        bias = ad.getitem(f_pn, slice(9 * cp, 9 * cp + 1))
        return DynamicKernel(weights=weights, bias=bias, source_query=index)

    def apply_dynamic_kernel(self, f_p: Tensor, kernel: DynamicKernel) -> Tensor:
        """Convolve the shared map with one query's kernel: a logit map."""
        if kernel.weights.shape[2] != f_p.shape[2]:
            raise DimensionError(
                f"kernel channels {kernel.weights.shape} vs map {f_p.shape}"
            )
        k4 = ad.reshape(kernel.weights, (3, 3, f_p.shape[2], 1))
        out = ad.conv2d(f_p, k4, ad.reshape(kernel.bias, (1,)))
        return ad.reshape(out, (f_p.shape[0], f_p.shape[1]))

    def fixed_head(self, f_p: Tensor) -> Tensor:
        out = ad.conv2d(f_p, self.fixed_kernel.value, self.fixed_bias.value)
        return ad.reshape(out, (f_p.shape[0], f_p.shape[1]))


class QueryEstimator:
    """Scores queries with self-attention and a linear head, softmaxed so
    the scores are positive and sum to one.  The head carries no bias: a
    shared offset on every query logit cancels inside the softmax."""

    def __init__(self, store: ParamStore, cfg: ModelConfig) -> None:
        c = cfg.fusion_width
        self.attn = MultiHeadAttention(store, "estimator.attn", c, cfg.heads)
        self.w_s = store.parameter("estimator.w_s", (c, 1), linear_init(c))

    def __call__(self, f_q: Tensor) -> Tensor:
        h = self.attn(f_q)
        logits = ad.reshape(linear(h, self.w_s), (f_q.shape[0],))
        return ad.softmax(logits, axis=0)


def aggregate(masks: list, scores: Tensor) -> Tensor:
    """Weighted sum of mask logit maps; weights broadcast per mask."""
    if len(masks) != scores.shape[0]:
        raise DimensionError(f"{len(masks)} masks vs {scores.shape[0]} scores")
    y = None
    for n, mask in enumerate(masks):
        term = ad.mul(mask, ad.getitem(scores, n))
        y = term if y is None else ad.add(y, term)
    return y
