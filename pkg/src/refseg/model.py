"""End-to-end model: encoders, fusion neck, query generator, decoder and
the dynamic-kernel segmentation head, with the ablation modes used by the
trend experiments.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .aligner import (
    MaskBundle,
    MaskGenerator,
    QueryEstimator,
    TransformerDecoder,
    aggregate,
)
from .autodiff import Tensor
from .config import ModelConfig, TRAIN_MODES
from .encoders import ImageEncoder, TextEncoder, TokenSequence, Vocabulary, tokenize
from .errors import ConfigError
from .neck import FusionNeck
from .nn import ParamStore
from .queries import QueryGenerator


class Model:
    """A full referring-segmentation network over one (image, expression).

    ``mode`` selects the segmentation head behavior:
      full          dynamic per-query kernels, score-weighted mask sum
      fixed_kernel  one learned conv head on the shared map, a single mask
      no_estimator  dynamic kernels, masks summed with unit weights
      no_fvg        full head, but word features skip the vision gate
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary, seed: int = 0) -> None:
        dtype = np.float64 if cfg.precision == "double" else np.float32
        self.cfg = cfg
        self.vocab = vocab
        self.store = ParamStore(dtype=dtype, seed=seed)
        self.text_encoder = TextEncoder(self.store, cfg, vocab.size)
        self.image_encoder = ImageEncoder(self.store, cfg)
        self.neck = FusionNeck(self.store, cfg)
        self.query_gen = QueryGenerator(self.store, cfg)
        self.decoder = TransformerDecoder(self.store, cfg)
        self.mask_gen = MaskGenerator(self.store, cfg)
        self.estimator = QueryEstimator(self.store, cfg)

    @property
    def dtype(self):
        return self.store.dtype

    def parameters(self):
        return self.store.parameters()

    def zero_grad(self) -> None:
        self.store.zero_grad()

    def tokenize(self, expression: str) -> TokenSequence:
        return tokenize(expression, self.vocab, self.cfg.max_tokens)

    def forward(
        self,
        image: Tensor,
        tokens: TokenSequence,
        mode: str = "full",
        query_permutation: Optional[Sequence[int]] = None,
    ) -> MaskBundle:
        if mode not in TRAIN_MODES:
            raise ConfigError(f"unknown mode {mode!r}")
        text = self.text_encoder(tokens)
        feats = self.image_encoder(image)
        fused = self.neck(feats, text.f_tg)
        queries = self.query_gen(feats, text, tokens, use_fvg=(mode != "no_fvg"))

        f_q = queries.f_q
        if query_permutation is not None:
            f_q = ad.getitem(f_q, np.asarray(query_permutation, dtype=np.int64))

        f_s = self.decoder(fused.f_vt, f_q)
        f_p = self.mask_gen.project_fp(f_s)

        if mode == "fixed_kernel":
            mask = self.mask_gen.fixed_head(f_p)
            return MaskBundle(masks=[mask], scores=Tensor(np.ones(1, dtype=self.dtype)), y=mask)

        # one conv with the kernels stacked as output channels is the same
        # math as a conv per query, but shares the patch extraction
        nq = self.cfg.num_queries
        kernels = []
        for n in range(nq):
            f_qn = ad.reshape(
                ad.getitem(f_q, (slice(n, n + 1), slice(None))), (self.cfg.fusion_width,)
            )
            kernels.append(self.mask_gen.kernel_from_query(f_qn, index=n))
        stack = ad.concat(
            [ad.reshape(k.weights, (3, 3, self.cfg.kernel_channels, 1)) for k in kernels], axis=3
        )
        biases = ad.concat([ad.reshape(k.bias, (1,)) for k in kernels], axis=0)
        joint = ad.conv2d(f_p, stack, biases)
        side = f_p.shape[0]
        masks = [
            ad.reshape(ad.getitem(joint, (slice(None), slice(None), n)), (side, side))
            for n in range(nq)
        ]

        if mode == "no_estimator":
            scores = Tensor(np.ones(self.cfg.num_queries, dtype=self.dtype))
        else:
            scores = self.estimator(f_q)
        return MaskBundle(masks=masks, scores=scores, y=aggregate(masks, scores))

    def forward_expression(self, image: Tensor, expression: str, mode: str = "full") -> MaskBundle:
        return self.forward(image, self.tokenize(expression), mode=mode)

    def predict_logits(self, image_array: np.ndarray, expression: str, mode: str = "full") -> np.ndarray:
        """Inference helper: no tape, returns the aggregated logit map."""
        image = Tensor(np.asarray(image_array, dtype=self.dtype))
        return self.forward_expression(image, expression, mode=mode).y.data
