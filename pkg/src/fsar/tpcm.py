"""Text-guided prototype construction.

Support features are enhanced by cross-attention against their class text
(query = features + repeated text, key/value = features with the text row
appended); query videos run the same block in self-attention form since
their text is unknown.  Both branches share one parameter set, so support
and query land in the same feature space.
"""

from __future__ import annotations

import numpy as np

from fsar.tensor import (
    DimensionError,
    ParamRegistry,
    Tensor,
    concat,
    gelu,
    layer_norm,
    matmul,
    softmax,
    stack,
)


class PrototypeBuilder:
    """Shared cross/self-attention enhancement block over (T, D') features."""

    def __init__(self, registry: ParamRegistry, dim: int, rng: np.random.Generator,
                 heads: int = 1, prefix: str = "tpcm"):
        if dim % heads != 0:
            raise DimensionError(f"tpcm dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        scale = 1.0 / np.sqrt(dim)
        hidden = 4 * dim

        def p(name: str, arr: np.ndarray) -> Tensor:
            return registry.add(f"{prefix}.{name}", Tensor(arr), frozen=False)

        # output maps start at zero: the block initially reduces to the
        # text-anchor shift on support features and the identity on queries,
        # so prototype matching is never scrambled by a random block early on
        self.ln_attn_g = p("ln_attn_g", np.ones(dim))
        self.ln_attn_b = p("ln_attn_b", np.zeros(dim))
        self.wq = p("wq", rng.standard_normal((dim, dim)) * scale)
        self.wk = p("wk", rng.standard_normal((dim, dim)) * scale)
        self.wv = p("wv", rng.standard_normal((dim, dim)) * scale)
        self.wo = p("wo", np.zeros((dim, dim)))
        self.bq = p("bq", np.zeros(dim))
        self.bk = p("bk", np.zeros(dim))
        self.bv = p("bv", np.zeros(dim))
        self.bo = p("bo", np.zeros(dim))
        self.ln_ffn_g = p("ln_ffn_g", np.ones(dim))
        self.ln_ffn_b = p("ln_ffn_b", np.zeros(dim))
        self.w1 = p("w1", rng.standard_normal((dim, hidden)) * scale)
        self.b1 = p("b1", np.zeros(hidden))
        self.w2 = p("w2", np.zeros((hidden, dim)))
        self.b2 = p("b2", np.zeros(dim))

    def _attention(self, q_in: Tensor, kv_in: Tensor) -> Tensor:
        """LN on both inputs, then multi-head attention of q over kv."""
        nq = q_in.shape[0]
        nk = kv_in.shape[0]
        d, h = self.dim, self.heads
        dh = d // h
        qn = layer_norm(q_in, self.ln_attn_g, self.ln_attn_b)
        kn = layer_norm(kv_in, self.ln_attn_g, self.ln_attn_b)
        q = (matmul(qn, self.wq) + self.bq).reshape(nq, h, dh).swapaxes(0, 1)
        k = (matmul(kn, self.wk) + self.bk).reshape(nk, h, dh).swapaxes(0, 1)
        v = (matmul(kn, self.wv) + self.bv).reshape(nk, h, dh).swapaxes(0, 1)
        att = softmax(matmul(q, k.swapaxes(1, 2)) * (1.0 / np.sqrt(dh)), axis=-1)
        mixed = matmul(att, v).swapaxes(0, 1).reshape(nq, d)
        return matmul(mixed, self.wo) + self.bo

    def _ffn(self, x: Tensor) -> Tensor:
        h = layer_norm(x, self.ln_ffn_g, self.ln_ffn_b)
        return matmul(gelu(matmul(h, self.w1) + self.b1), self.w2) + self.b2

    def enhance_support(self, features: Tensor, text_vector: np.ndarray | Tensor) -> Tensor:
        """Cross-attention enhancement of one support video (T, D').

        q = features + Repeat(text); k = v = [features ; text] of length T+1.
        """
        text = text_vector if isinstance(text_vector, Tensor) else Tensor(np.asarray(text_vector, dtype=np.float64))
        if features.shape[1] != self.dim or text.shape[-1] != self.dim:
            raise DimensionError(f"feature dim mismatch: {features.shape} vs text {text.shape}")
        text = text.reshape(1, self.dim) if text.ndim == 1 else text
        t = features.shape[0]
        q_in = features + concat([text] * t, axis=0)
        kv = concat([features, text], axis=0)  # (T+1, D')
        bar = q_in + self._attention(q_in, kv)
        return bar + self._ffn(bar)

    def enhance_query(self, features: Tensor) -> Tensor:
        """Self-attention variant: q = k = v = features, same weights."""
        if features.shape[1] != self.dim:
            raise DimensionError(f"feature dim mismatch: {features.shape} vs dim {self.dim}")
        bar = features + self._attention(features, features)
        return bar + self._ffn(bar)

    def build_prototypes(
        self,
        support_features: dict[int, list[Tensor]],
        text_vectors: dict[int, np.ndarray],
        query_features: list[Tensor],
    ) -> tuple[dict[int, Tensor], list[Tensor]]:
        """Enhance everything; K>1 prototypes average after enhancement."""
        prototypes: dict[int, Tensor] = {}
        for class_id, videos in support_features.items():
            enhanced = [self.enhance_support(f, text_vectors[class_id]) for f in videos]
            if len(enhanced) == 1:
                prototypes[class_id] = enhanced[0]
            else:
                prototypes[class_id] = stack(enhanced, axis=0).mean(axis=0)
        return prototypes, [self.enhance_query(f) for f in query_features]
