"""Frozen deterministic text-embedding provider.

Stands in for a pre-trained language tower: each (class, template) pair maps
to a fixed pseudo-token sequence which is pushed through a small frozen
transformer.  Nothing here is trainable; the provider's parameters exist so
the artifact's parameter census reflects a realistic frozen text stack.

Eighteen candidate templates are modeled as eighteen template-specific token
prefixes.  Training draws one template uniformly; evaluation averages all
eighteen embeddings and re-normalizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fsar.data import InputError
from fsar.tensor import ParamRegistry, Tensor

NUM_TEMPLATES = 18


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray  # (text_dim,), unit norm
    class_id: int
    template_id: int  # -1 for the evaluation-time template average


def _token_vector(width: int, provider_seed: int, token_id: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([provider_seed, 0x70, token_id]))
    v = rng.standard_normal(width)
    return v / np.linalg.norm(v)


def _np_layer_norm(x: np.ndarray, g: np.ndarray, b: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def _np_softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class TextProvider:
    """Frozen text tower over pseudo-token sequences.

    known_classes bounds the valid class ids; embed requests outside it are
    input errors (mirrors a closed label vocabulary).
    """

    def __init__(
        self,
        text_dim: int,
        known_classes: int,
        seed: int,
        width: int = 32,
        layers: int = 2,
        heads: int = 4,
        tokens: int = 6,
        registry: ParamRegistry | None = None,
        prefix: str = "text_frozen",
    ):
        if width % heads != 0:
            raise InputError(f"text width {width} not divisible by heads {heads}")
        self.text_dim = text_dim
        self.known_classes = known_classes
        self.seed = seed
        self.width = width
        self.layers = layers
        self.heads = heads
        self.tokens = tokens
        self._cache: dict[tuple[int, int], np.ndarray] = {}

        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7E]))
        w = width
        scale = 1.0 / np.sqrt(w)

        def frozen(name: str, arr: np.ndarray) -> np.ndarray:
            t = Tensor(arr)
            if registry is not None:
                registry.add(f"{prefix}.{name}", t, frozen=True)
            return t.data

        self.pos = frozen("pos", rng.standard_normal((tokens, w)) * 0.1)
        self.blocks = []
        for l in range(layers):
            blk = {
                "ln1_g": frozen(f"block{l}.ln1_g", np.ones(w)),
                "ln1_b": frozen(f"block{l}.ln1_b", np.zeros(w)),
                "wq": frozen(f"block{l}.wq", rng.standard_normal((w, w)) * scale),
                "wk": frozen(f"block{l}.wk", rng.standard_normal((w, w)) * scale),
                "wv": frozen(f"block{l}.wv", rng.standard_normal((w, w)) * scale),
                "wo": frozen(f"block{l}.wo", rng.standard_normal((w, w)) * scale),
                "bq": frozen(f"block{l}.bq", np.zeros(w)),
                "bk": frozen(f"block{l}.bk", np.zeros(w)),
                "bv": frozen(f"block{l}.bv", np.zeros(w)),
                "bo": frozen(f"block{l}.bo", np.zeros(w)),
                "ln2_g": frozen(f"block{l}.ln2_g", np.ones(w)),
                "ln2_b": frozen(f"block{l}.ln2_b", np.zeros(w)),
                "w1": frozen(f"block{l}.w1", rng.standard_normal((w, 4 * w)) * scale),
                "b1": frozen(f"block{l}.b1", np.zeros(4 * w)),
                "w2": frozen(f"block{l}.w2", rng.standard_normal((4 * w, w)) * (0.5 / np.sqrt(w))),
                "b2": frozen(f"block{l}.b2", np.zeros(w)),
            }
            self.blocks.append(blk)
        self.lnf_g = frozen("ln_final_g", np.ones(w))
        self.lnf_b = frozen("ln_final_b", np.zeros(w))
        self.proj = frozen("proj", rng.standard_normal((w, text_dim)) * scale)

    # -- forward (plain numpy; the tower is frozen) ------------------------------

    def _token_ids(self, class_id: int, template_id: int) -> list[int]:
        rng = np.random.default_rng(
            np.random.SeedSequence([self.seed, 0xC1A55, class_id, template_id])
        )
        return [int(x) for x in rng.integers(0, 2**31 - 1, size=self.tokens)]

    def _encode(self, class_id: int, template_id: int) -> np.ndarray:
        key = (class_id, template_id)
        if key in self._cache:
            return self._cache[key]
        ids = self._token_ids(class_id, template_id)
        x = np.stack([_token_vector(self.width, self.seed, t) for t in ids]) + self.pos
        dh = self.width // self.heads
        for blk in self.blocks:
            h = _np_layer_norm(x, blk["ln1_g"], blk["ln1_b"])
            q = (h @ blk["wq"] + blk["bq"]).reshape(-1, self.heads, dh).swapaxes(0, 1)
            k = (h @ blk["wk"] + blk["bk"]).reshape(-1, self.heads, dh).swapaxes(0, 1)
            v = (h @ blk["wv"] + blk["bv"]).reshape(-1, self.heads, dh).swapaxes(0, 1)
            att = _np_softmax(q @ k.swapaxes(-1, -2) / np.sqrt(dh)) @ v
            att = att.swapaxes(0, 1).reshape(-1, self.width)
            x = x + att @ blk["wo"] + blk["bo"]
            h = _np_layer_norm(x, blk["ln2_g"], blk["ln2_b"])
            x = x + np.tanh(h @ blk["w1"] + blk["b1"]) @ blk["w2"] + blk["b2"]
        last = _np_layer_norm(x[-1], self.lnf_g, self.lnf_b)
        out = last @ self.proj
        out = out / np.linalg.norm(out)
        self._cache[key] = out
        return out

    def embed_class_text(
        self, class_id: int, mode: str, rng: np.random.Generator | None = None
    ) -> TextEmbedding:
        """Train mode: one of the 18 templates, uniformly. Eval: their mean."""
        if not (0 <= class_id < self.known_classes):
            raise InputError(f"unknown class id {class_id} (provider knows {self.known_classes})")
        if mode == "train":
            if rng is None:
                raise InputError("train-mode embedding needs an rng")
            template = int(rng.integers(0, NUM_TEMPLATES))
            return TextEmbedding(self._encode(class_id, template), class_id, template)
        if mode == "eval":
            mean = np.mean(
                [self._encode(class_id, t) for t in range(NUM_TEMPLATES)], axis=0
            )
            return TextEmbedding(mean / np.linalg.norm(mean), class_id, -1)
        raise InputError(f"unknown mode {mode!r}")

    def template_embeddings(self, class_id: int) -> np.ndarray:
        """All 18 per-template embeddings, stacked (for tests and averaging)."""
        if not (0 <= class_id < self.known_classes):
            raise InputError(f"unknown class id {class_id} (provider knows {self.known_classes})")
        return np.stack([self._encode(class_id, t) for t in range(NUM_TEMPLATES)])
