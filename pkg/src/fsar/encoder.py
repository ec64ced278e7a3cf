"""Frozen vision backbone with temporal, multimodal and joint adaptation.

Layer structure, per block, for the support branch (query branch drops the
text token):

    x_ta   = cls(z) + AdapterT(T-MSA(LN1(cls(z))))        temporal stream
    z_std  = z + MSA(LN1(z))                              frozen attention
    cat    = [z_std ; x_ta ; text]                        token concat
    u      = cat + AdapterM(M-MSA(LN1(cat)))              multimodal mixing
    x      = u[:, :N+1]                                   Select
    out    = x + MLP(LN2(x)) + r * AdapterJ(LN2(x))       joint adaptation

T-MSA, M-MSA and ST-MSA are literally the same frozen attention weights
applied to different token layouts.  All adapters are skipless bottlenecks
with zero-initialized up-projections, so at initialization the whole stack
computes exactly the frozen backbone; text and temporal tokens only start
influencing retained tokens once AdapterM moves away from zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from fsar.data import VideoRecord
from fsar.tensor import (
    ContractError,
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


@dataclass(frozen=True)
class BackboneConfig:
    layers: int = 2
    dim: int = 32
    heads: int = 4
    patch_tokens: int = 4  # N; grid_rows * grid_cols
    frames: int = 4  # T
    text_dim: int = 16  # D'
    patch_dim: int = 16  # length of one raw patch vector
    adapter_ratio: float = 0.25
    joint_scale_r: float = 0.5
    adapter_skip: bool = False  # internal skip inside every adapter
    train_output_proj: bool = True

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ContractError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.patch_tokens < 1:
            raise ContractError("patch_tokens must be >= 1")
        if self.frames < 2:
            raise ContractError("frames must be >= 2 for temporal adaptation")
        if not (0.0 < self.adapter_ratio < 1.0):
            raise ContractError("adapter_ratio must lie in (0, 1)")

    @property
    def bottleneck(self) -> int:
        return int(self.adapter_ratio * self.dim)


class Adapter:
    """Bottleneck residual adapter: down-project, GELU, zero-init up-project."""

    def __init__(self, registry: ParamRegistry, name: str, dim: int, hidden: int,
                 rng: np.random.Generator, has_skip: bool = False):
        self.has_skip = has_skip
        self.down = registry.add(f"{name}.down", Tensor(rng.standard_normal((dim, hidden)) / np.sqrt(dim)), frozen=False)
        self.b_down = registry.add(f"{name}.b_down", Tensor(np.zeros(hidden)), frozen=False)
        self.up = registry.add(f"{name}.up", Tensor(np.zeros((hidden, dim))), frozen=False)
        self.b_up = registry.add(f"{name}.b_up", Tensor(np.zeros(dim)), frozen=False)

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(gelu(matmul(x, self.down) + self.b_down), self.up) + self.b_up
        return x + y if self.has_skip else y


def _mlp(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return matmul(gelu(matmul(x, w1) + b1), w2) + b2


class MultimodalEncoder:
    """The adapted two-branch encoder plus the frozen reference path."""

    def __init__(self, config: BackboneConfig, registry: ParamRegistry, rng: np.random.Generator):
        self.config = config
        self.registry = registry
        c = config
        d, n = c.dim, c.patch_tokens
        scale = 1.0 / np.sqrt(d)

        def frozen(name: str, arr: np.ndarray) -> Tensor:
            return registry.add(f"backbone.{name}", Tensor(arr), frozen=True)

        self.embed_w = frozen("patch_embed.w", rng.standard_normal((c.patch_dim, d)) / np.sqrt(c.patch_dim))
        self.embed_b = frozen("patch_embed.b", np.zeros(d))
        self.cls_token = frozen("cls", rng.standard_normal(d) * 0.02)
        self.pos = frozen("pos", rng.standard_normal((n + 1, d)) * 0.02)

        self.blocks: list[dict[str, Tensor]] = []
        self.adapters_t: list[Adapter] = []
        self.adapters_m: list[Adapter] = []
        self.adapters_j: list[Adapter] = []
        for l in range(c.layers):
            blk = {
                "ln1_g": frozen(f"block{l}.ln1_g", np.ones(d)),
                "ln1_b": frozen(f"block{l}.ln1_b", np.zeros(d)),
                "wq": frozen(f"block{l}.wq", rng.standard_normal((d, d)) * scale),
                "wk": frozen(f"block{l}.wk", rng.standard_normal((d, d)) * scale),
                "wv": frozen(f"block{l}.wv", rng.standard_normal((d, d)) * scale),
                "wo": frozen(f"block{l}.wo", rng.standard_normal((d, d)) * scale),
                "bq": frozen(f"block{l}.bq", np.zeros(d)),
                "bk": frozen(f"block{l}.bk", np.zeros(d)),
                "bv": frozen(f"block{l}.bv", np.zeros(d)),
                "bo": frozen(f"block{l}.bo", np.zeros(d)),
                "ln2_g": frozen(f"block{l}.ln2_g", np.ones(d)),
                "ln2_b": frozen(f"block{l}.ln2_b", np.zeros(d)),
                "w1": frozen(f"block{l}.w1", rng.standard_normal((d, 4 * d)) * scale),
                "b1": frozen(f"block{l}.b1", np.zeros(4 * d)),
                "w2": frozen(f"block{l}.w2", rng.standard_normal((4 * d, d)) * (0.5 / np.sqrt(d))),
                "b2": frozen(f"block{l}.b2", np.zeros(d)),
            }
            self.blocks.append(blk)
            h = c.bottleneck
            self.adapters_t.append(Adapter(registry, f"adapter.block{l}.temporal", d, h, rng, c.adapter_skip))
            self.adapters_m.append(Adapter(registry, f"adapter.block{l}.multimodal", d, h, rng, c.adapter_skip))
            self.adapters_j.append(Adapter(registry, f"adapter.block{l}.joint", d, h, rng, c.adapter_skip))

        self.ln_post_g = frozen("ln_post_g", np.ones(d))
        self.ln_post_b = frozen("ln_post_b", np.zeros(d))
        self.fc_text_w = registry.add("fc_text.w", Tensor(rng.standard_normal((c.text_dim, d)) / np.sqrt(c.text_dim)), frozen=False)
        self.fc_text_b = registry.add("fc_text.b", Tensor(np.zeros(d)), frozen=False)
        self.proj = registry.add(
            "proj.visual", Tensor(rng.standard_normal((d, c.text_dim)) * scale),
            frozen=not c.train_output_proj,
        )

    # -- building blocks ---------------------------------------------------------

    def attend(self, x: Tensor, layer: int, key_mask: np.ndarray | None = None) -> Tensor:
        """Multi-head self-attention with the frozen layer weights.

        x has shape (batch, tokens, dim); T-MSA / M-MSA / ST-MSA differ only
        in the token layout they are handed.  key_mask (tokens,) True entries
        are excluded from every query's attention.
        """
        blk = self.blocks[layer]
        c = self.config
        b, s, d = x.shape
        dh = d // c.heads

        def split(t: Tensor) -> Tensor:
            return t.reshape(b, s, c.heads, dh).swapaxes(1, 2)  # (b, heads, s, dh)

        q = split(matmul(x, blk["wq"]) + blk["bq"])
        k = split(matmul(x, blk["wk"]) + blk["bk"])
        v = split(matmul(x, blk["wv"]) + blk["bv"])
        logits = matmul(q, k.swapaxes(2, 3)) * (1.0 / np.sqrt(dh))
        if key_mask is not None:
            bias = np.where(key_mask, -1e30, 0.0)
            logits = logits + Tensor(bias.reshape(1, 1, 1, s))
        att = softmax(logits, axis=-1)
        mixed = matmul(att, v).swapaxes(1, 2).reshape(b, s, d)
        return matmul(mixed, blk["wo"]) + blk["bo"]

    def ln1(self, x: Tensor, layer: int) -> Tensor:
        blk = self.blocks[layer]
        return layer_norm(x, blk["ln1_g"], blk["ln1_b"])

    def ln2(self, x: Tensor, layer: int) -> Tensor:
        blk = self.blocks[layer]
        return layer_norm(x, blk["ln2_g"], blk["ln2_b"])

    def mlp(self, x: Tensor, layer: int) -> Tensor:
        blk = self.blocks[layer]
        return _mlp(x, blk["w1"], blk["b1"], blk["w2"], blk["b2"])

    # -- adaptation operations -----------------------------------------------------

    def patch_embed(self, frames: np.ndarray) -> Tensor:
        """Project patch grids, prepend the [class] token, add positions.

        frames: (T, rows, cols, patch_dim) -> tokens (T, N+1, dim).
        """
        c = self.config
        t = frames.shape[0]
        n = frames.shape[1] * frames.shape[2]
        if n != c.patch_tokens or frames.shape[3] != c.patch_dim:
            raise DimensionError(
                f"grid {frames.shape[1:]} incompatible with config "
                f"(patch_tokens={c.patch_tokens}, patch_dim={c.patch_dim})"
            )
        patches = Tensor(frames.reshape(t, n, c.patch_dim).astype(np.float64))
        emb = matmul(patches, self.embed_w) + self.embed_b  # (T, N, D)
        cls_rows = stack([self.cls_token.reshape(1, c.dim)] * t, axis=0)  # (T, 1, D)
        tokens = concat([cls_rows, emb], axis=1)
        return tokens + self.pos

    def frozen_block(self, z: Tensor, layer: int) -> dict[str, Tensor]:
        """One plain ViT block; sub-results exposed for interleaving and tests."""
        attn_out = self.attend(self.ln1(z, layer), layer)
        after_attn = z + attn_out
        mlp_out = self.mlp(self.ln2(after_attn, layer), layer)
        return {
            "attn_out": attn_out,
            "after_attn": after_attn,
            "mlp_out": mlp_out,
            "out": after_attn + mlp_out,
        }

    def temporal_adapt(self, cls_tokens: Tensor, layer: int) -> Tensor:
        """Attention over the T [class] tokens, adapter without internal skip."""
        t = cls_tokens.shape[0]
        if t < 2:
            raise ContractError("temporal adaptation needs at least 2 frames")
        x = cls_tokens.reshape(1, t, self.config.dim)
        mixed = self.attend(self.ln1(x, layer), layer)
        adapted = self.adapters_t[layer](mixed)
        return (x + adapted).reshape(t, 1, self.config.dim)

    def project_text(self, text_vector: np.ndarray, t: int) -> Tensor:
        """FC_text then Repeat: (D',) -> (T, 1, D) with T identical rows."""
        vec = Tensor(np.asarray(text_vector, dtype=np.float64).reshape(1, self.config.text_dim))
        row = matmul(vec, self.fc_text_w) + self.fc_text_b  # (1, D)
        return stack([row] * t, axis=0)  # (T, 1, D)

    def multimodal_adapt_support(
        self, z: Tensor, cls_adapted: Tensor, text_proj: Tensor, layer: int,
        key_mask: np.ndarray | None = None,
    ) -> Tensor:
        """Residual adapter over M-MSA on [z; x_TA; text]: (T, N+3, D)."""
        if z.shape[0] != cls_adapted.shape[0] or z.shape[0] != text_proj.shape[0]:
            raise DimensionError(
                f"token-axis mismatch: z {z.shape}, cls {cls_adapted.shape}, text {text_proj.shape}"
            )
        cat = concat([z, cls_adapted, text_proj], axis=1)
        return cat + self.adapters_m[layer](self.attend(self.ln1(cat, layer), layer, key_mask))

    def spatiotemporal_adapt_query(self, z: Tensor, cls_adapted: Tensor, layer: int) -> Tensor:
        """Query-branch variant without text: (T, N+2, D), same weights."""
        if z.shape[0] != cls_adapted.shape[0]:
            raise DimensionError(f"token-axis mismatch: z {z.shape}, cls {cls_adapted.shape}")
        cat = concat([z, cls_adapted], axis=1)
        return cat + self.adapters_m[layer](self.attend(self.ln1(cat, layer), layer))

    def joint_adapt(self, z_branch: Tensor, layer: int) -> Tensor:
        """Select the first N+1 tokens, then MLP plus scaled parallel adapter."""
        n1 = self.config.patch_tokens + 1
        x = z_branch[:, :n1, :]
        h = self.ln2(x, layer)
        return x + self.mlp(h, layer) + self.config.joint_scale_r * self.adapters_j[layer](h)

    # -- full stacks ------------------------------------------------------------

    def _layer(self, z: Tensor, layer: int, text_proj: Tensor | None) -> Tensor:
        cls = z[:, 0:1, :]
        x_ta = self.temporal_adapt(cls, layer)
        z_std = z + self.attend(self.ln1(z, layer), layer)
        if text_proj is not None:
            u = self.multimodal_adapt_support(z_std, x_ta, text_proj, layer)
        else:
            u = self.spatiotemporal_adapt_query(z_std, x_ta, layer)
        return self.joint_adapt(u, layer)

    def _pool(self, z: Tensor) -> Tensor:
        cls_feats = z[:, 0, :]  # (T, D)
        return matmul(layer_norm(cls_feats, self.ln_post_g, self.ln_post_b), self.proj)

    def encode_support(self, video: VideoRecord | np.ndarray, text_vector: np.ndarray) -> Tensor:
        """Per-frame [class] features of the support branch: (T, D')."""
        frames = video.frames if isinstance(video, VideoRecord) else video
        z = self.patch_embed(frames)
        text_proj = self.project_text(text_vector, frames.shape[0])
        for l in range(self.config.layers):
            z = self._layer(z, l, text_proj)
        return self._pool(z)

    def encode_query(self, video: VideoRecord | np.ndarray) -> Tensor:
        """Per-frame [class] features of the query branch: (T, D')."""
        frames = video.frames if isinstance(video, VideoRecord) else video
        z = self.patch_embed(frames)
        for l in range(self.config.layers):
            z = self._layer(z, l, None)
        return self._pool(z)

    def encode_frozen(self, video: VideoRecord | np.ndarray) -> Tensor:
        """Reference path: plain frozen ViT, no adapters anywhere."""
        frames = video.frames if isinstance(video, VideoRecord) else video
        z = self.patch_embed(frames)
        for l in range(self.config.layers):
            z = self.frozen_block(z, l)["out"]
        return self._pool(z)
