from __future__ import annotations

import dataclasses

import numpy as np
import pytest

from fsar.encoder import Adapter, BackboneConfig, MultimodalEncoder
from fsar.tensor import ContractError, DimensionError, ParamRegistry, Tensor


def make_encoder(seed=0, **kw):
    cfg = BackboneConfig(**kw)
    reg = ParamRegistry()
    enc = MultimodalEncoder(cfg, reg, np.random.default_rng(seed))
    return enc, reg, cfg


def random_video(cfg: BackboneConfig, seed=1) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rows = 2
    cols = cfg.patch_tokens // 2
    return rng.standard_normal((cfg.frames, rows, cols, cfg.patch_dim))


# -- independent numpy oracles ----------------------------------------------------


def np_ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_attention(x, blk, heads):
    b, s, d = x.shape
    dh = d // heads

    def split(t):
        return t.reshape(b, s, heads, dh).swapaxes(1, 2)

    q = split(x @ blk["wq"].data + blk["bq"].data)
    k = split(x @ blk["wk"].data + blk["bk"].data)
    v = split(x @ blk["wv"].data + blk["bv"].data)
    att = np_softmax(q @ k.swapaxes(-1, -2) / np.sqrt(dh)) @ v
    return att.swapaxes(1, 2).reshape(b, s, d) @ blk["wo"].data + blk["bo"].data


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x**3)))


def np_adapter(x, adapter: Adapter):
    y = np_gelu(x @ adapter.down.data + adapter.b_down.data) @ adapter.up.data + adapter.b_up.data
    return x + y if adapter.has_skip else y


def randomize_adapter(adapter: Adapter, rng) -> None:
    adapter.up.data[...] = rng.standard_normal(adapter.up.shape) * 0.3
    adapter.b_up.data[...] = rng.standard_normal(adapter.b_up.shape) * 0.1


# -- patch embedding ---------------------------------------------------------------


def test_patch_embed_zero_everything_gives_zero_tokens():
    enc, _, cfg = make_encoder()
    enc.embed_w.data[...] = 0
    enc.embed_b.data[...] = 0
    enc.cls_token.data[...] = 0
    enc.pos.data[...] = 0
    out = enc.patch_embed(random_video(cfg))
    assert out.shape == (cfg.frames, cfg.patch_tokens + 1, cfg.dim)
    np.testing.assert_array_equal(out.data, 0.0)


def test_patch_embed_position_encoding_is_additive():
    enc, _, cfg = make_encoder()
    video = random_video(cfg)
    with_pos = enc.patch_embed(video).data
    saved = enc.pos.data.copy()
    enc.pos.data[...] = 0
    without_pos = enc.patch_embed(video).data
    np.testing.assert_allclose(with_pos - without_pos, np.broadcast_to(saved, with_pos.shape), atol=1e-12)


def test_patch_embed_matches_loop_oracle():
    enc, _, cfg = make_encoder()
    video = random_video(cfg)
    out = enc.patch_embed(video).data
    t = cfg.frames
    flat = video.reshape(t, cfg.patch_tokens, cfg.patch_dim)
    for ti in range(t):
        want_cls = enc.cls_token.data + enc.pos.data[0]
        np.testing.assert_allclose(out[ti, 0], want_cls, atol=1e-12)
        for p in range(cfg.patch_tokens):
            want = flat[ti, p] @ enc.embed_w.data + enc.embed_b.data + enc.pos.data[p + 1]
            np.testing.assert_allclose(out[ti, p + 1], want, atol=1e-12)


def test_patch_embed_grid_mismatch():
    enc, _, cfg = make_encoder()
    bad = np.zeros((cfg.frames, 3, 3, cfg.patch_dim))
    with pytest.raises(DimensionError):
        enc.patch_embed(bad)


# -- frozen block -------------------------------------------------------------------


def test_frozen_block_zero_weights_is_residual_identity():
    enc, _, cfg = make_encoder()
    for blk in enc.blocks:
        blk["wo"].data[...] = 0
        blk["bo"].data[...] = 0
        blk["w2"].data[...] = 0
        blk["b2"].data[...] = 0
    z = enc.patch_embed(random_video(cfg))
    out = enc.frozen_block(z, 0)["out"]
    np.testing.assert_allclose(out.data, z.data, atol=1e-12)


def test_single_head_two_token_attention_hand_computed():
    enc, _, cfg = make_encoder(heads=1, dim=8, patch_tokens=2, patch_dim=4, text_dim=4)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((1, 2, 8))
    blk = enc.blocks[0]
    q = x[0] @ blk["wq"].data + blk["bq"].data
    k = x[0] @ blk["wk"].data + blk["bk"].data
    v = x[0] @ blk["wv"].data + blk["bv"].data
    logits = q @ k.T / np.sqrt(8.0)
    att = np_softmax(logits)
    want = (att @ v) @ blk["wo"].data + blk["bo"].data
    got = enc.attend(Tensor(x), 0).data[0]
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_frozen_stack_matches_plain_transformer_oracle():
    enc, _, cfg = make_encoder(seed=5)
    video = random_video(cfg, seed=6)
    got = enc.encode_frozen(video).data

    t = cfg.frames
    flat = video.reshape(t, cfg.patch_tokens, cfg.patch_dim)
    z = flat @ enc.embed_w.data + enc.embed_b.data
    cls = np.broadcast_to(enc.cls_token.data, (t, 1, cfg.dim))
    z = np.concatenate([cls, z], axis=1) + enc.pos.data
    for blk in enc.blocks:
        z = z + np_attention(np_ln(z, blk["ln1_g"].data, blk["ln1_b"].data), blk, cfg.heads)
        h = np_ln(z, blk["ln2_g"].data, blk["ln2_b"].data)
        z = z + np_gelu(h @ blk["w1"].data + blk["b1"].data) @ blk["w2"].data + blk["b2"].data
    want = np_ln(z[:, 0, :], enc.ln_post_g.data, enc.ln_post_b.data) @ enc.proj.data
    np.testing.assert_allclose(got, want, atol=1e-9)


# -- temporal adaptation ---------------------------------------------------------------


def test_temporal_adapt_identity_at_init():
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(4)
    cls = Tensor(rng.standard_normal((cfg.frames, 1, cfg.dim)))
    out = enc.temporal_adapt(cls, 0)
    np.testing.assert_array_equal(out.data, cls.data)


def test_temporal_attention_uniform_for_identical_frames():
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(5)
    row = rng.standard_normal(cfg.dim)
    two = Tensor(np.stack([row, row])[None, :, :])  # (1, 2, D)
    one = Tensor(row[None, None, :])  # (1, 1, D)
    out_two = enc.attend(two, 0).data
    out_one = enc.attend(one, 0).data
    # uniform 0.5/0.5 weights over identical values reduce to the single-token case
    np.testing.assert_allclose(out_two[0, 0], out_one[0, 0], atol=1e-12)
    np.testing.assert_allclose(out_two[0, 1], out_one[0, 0], atol=1e-12)


def test_temporal_adapt_matches_composition_oracle():
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(6)
    randomize_adapter(enc.adapters_t[1], rng)
    cls = rng.standard_normal((cfg.frames, 1, cfg.dim))
    got = enc.temporal_adapt(Tensor(cls), 1).data

    blk = enc.blocks[1]
    x = cls.reshape(1, cfg.frames, cfg.dim)
    mixed = np_attention(np_ln(x, blk["ln1_g"].data, blk["ln1_b"].data), blk, cfg.heads)
    want = (x + np_adapter(mixed, enc.adapters_t[1])).reshape(cfg.frames, 1, cfg.dim)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_temporal_adapt_rejects_single_frame():
    enc, _, cfg = make_encoder()
    with pytest.raises(ContractError):
        enc.temporal_adapt(Tensor(np.zeros((1, 1, cfg.dim))), 0)


# -- text projection ---------------------------------------------------------------------


def test_project_text_repeat_semantics():
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(7)
    vec = rng.standard_normal(cfg.text_dim)
    out = enc.project_text(vec, cfg.frames).data
    assert out.shape == (cfg.frames, 1, cfg.dim)
    for ti in range(1, cfg.frames):
        np.testing.assert_array_equal(out[ti], out[0])


def test_project_text_zero_vector_zero_output():
    enc, _, cfg = make_encoder()
    out = enc.project_text(np.zeros(cfg.text_dim), cfg.frames).data
    np.testing.assert_array_equal(out, 0.0)  # bias is zero-initialized


def test_project_text_matches_loop_oracle():
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(8)
    vec = rng.standard_normal(cfg.text_dim)
    want = np.array(
        [sum(vec[i] * enc.fc_text_w.data[i, j] for i in range(cfg.text_dim)) for j in range(cfg.dim)]
    )
    out = enc.project_text(vec, cfg.frames).data
    np.testing.assert_allclose(out[0, 0], want + enc.fc_text_b.data, atol=1e-12)


# -- multimodal / spatiotemporal adaptation ------------------------------------------------


def test_multimodal_support_token_count_and_identity_at_init():
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(9)
    z = Tensor(rng.standard_normal((cfg.frames, cfg.patch_tokens + 1, cfg.dim)))
    cls = Tensor(rng.standard_normal((cfg.frames, 1, cfg.dim)))
    text = Tensor(rng.standard_normal((cfg.frames, 1, cfg.dim)))
    out = enc.multimodal_adapt_support(z, cls, text, 0)
    assert out.shape == (cfg.frames, cfg.patch_tokens + 3, cfg.dim)
    cat = np.concatenate([z.data, cls.data, text.data], axis=1)
    np.testing.assert_array_equal(out.data, cat)


def test_spatiotemporal_query_token_count_and_identity_at_init():
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(10)
    z = Tensor(rng.standard_normal((cfg.frames, cfg.patch_tokens + 1, cfg.dim)))
    cls = Tensor(rng.standard_normal((cfg.frames, 1, cfg.dim)))
    out = enc.spatiotemporal_adapt_query(z, cls, 0)
    assert out.shape == (cfg.frames, cfg.patch_tokens + 2, cfg.dim)
    np.testing.assert_array_equal(out.data, np.concatenate([z.data, cls.data], axis=1))


def test_token_axis_mismatch_raises():
    enc, _, cfg = make_encoder()
    z = Tensor(np.zeros((cfg.frames, cfg.patch_tokens + 1, cfg.dim)))
    cls = Tensor(np.zeros((cfg.frames - 1, 1, cfg.dim)))
    with pytest.raises(DimensionError):
        enc.spatiotemporal_adapt_query(z, cls, 0)


def test_masked_text_support_equals_query_branch():
    """Sharing oracle: support attention with the text key masked reproduces the
    query branch on the first N+2 tokens, proving M-MSA and ST-MSA share weights."""
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(11)
    randomize_adapter(enc.adapters_m[0], rng)
    z = Tensor(rng.standard_normal((cfg.frames, cfg.patch_tokens + 1, cfg.dim)))
    cls = Tensor(rng.standard_normal((cfg.frames, 1, cfg.dim)))
    zero_text = Tensor(np.zeros((cfg.frames, 1, cfg.dim)))
    n2 = cfg.patch_tokens + 2
    mask = np.zeros(cfg.patch_tokens + 3, dtype=bool)
    mask[-1] = True  # hide the text token from every query
    support_out = enc.multimodal_adapt_support(z, cls, zero_text, 0, key_mask=mask)
    query_out = enc.spatiotemporal_adapt_query(z, cls, 0)
    np.testing.assert_allclose(support_out.data[:, :n2, :], query_out.data, atol=1e-9)


def test_attention_weights_are_single_set_per_layer():
    enc, reg, cfg = make_encoder()
    attn_names = [n for n in reg.names() if n.endswith((".wq", ".wk", ".wv", ".wo"))]
    assert len(attn_names) == 4 * cfg.layers  # no per-path duplicates
    # mutating the shared weights moves all three attention paths
    rng = np.random.default_rng(12)
    z = Tensor(rng.standard_normal((cfg.frames, cfg.patch_tokens + 1, cfg.dim)))
    cls = Tensor(rng.standard_normal((cfg.frames, 1, cfg.dim)))
    text = Tensor(rng.standard_normal((cfg.frames, 1, cfg.dim)))
    randomize_adapter(enc.adapters_t[0], rng)
    randomize_adapter(enc.adapters_m[0], rng)
    before = [
        enc.temporal_adapt(cls, 0).data.copy(),
        enc.multimodal_adapt_support(z, cls, text, 0).data.copy(),
        enc.spatiotemporal_adapt_query(z, cls, 0).data.copy(),
    ]
    enc.blocks[0]["wq"].data += rng.standard_normal(enc.blocks[0]["wq"].shape) * 0.3
    after = [
        enc.temporal_adapt(cls, 0).data,
        enc.multimodal_adapt_support(z, cls, text, 0).data,
        enc.spatiotemporal_adapt_query(z, cls, 0).data,
    ]
    for b, a in zip(before, after):
        assert np.abs(a - b).max() > 1e-9


# -- joint adaptation -------------------------------------------------------------------------


def test_joint_adapt_r_zero_is_frozen_mlp_path():
    enc, _, cfg = make_encoder(joint_scale_r=0.0)
    rng = np.random.default_rng(13)
    randomize_adapter(enc.adapters_j[0], rng)
    u = Tensor(rng.standard_normal((cfg.frames, cfg.patch_tokens + 3, cfg.dim)))
    out = enc.joint_adapt(u, 0).data
    x = u.data[:, : cfg.patch_tokens + 1, :]
    blk = enc.blocks[0]
    h = np_ln(x, blk["ln2_g"].data, blk["ln2_b"].data)
    want = x + np_gelu(h @ blk["w1"].data + blk["b1"].data) @ blk["w2"].data + blk["b2"].data
    np.testing.assert_allclose(out, want, atol=1e-12)


def test_joint_adapt_token_count_and_zero_adapter_oracle():
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(14)
    for extra in (2, 3):  # query and support branch widths
        u = Tensor(rng.standard_normal((cfg.frames, cfg.patch_tokens + extra, cfg.dim)))
        out = enc.joint_adapt(u, 1)
        assert out.shape == (cfg.frames, cfg.patch_tokens + 1, cfg.dim)
        x = u.data[:, : cfg.patch_tokens + 1, :]
        blk = enc.blocks[1]
        h = np_ln(x, blk["ln2_g"].data, blk["ln2_b"].data)
        want = x + np_gelu(h @ blk["w1"].data + blk["b1"].data) @ blk["w2"].data + blk["b2"].data
        np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_joint_adapt_nonzero_adapter_matches_oracle():
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(15)
    randomize_adapter(enc.adapters_j[0], rng)
    u = Tensor(rng.standard_normal((cfg.frames, cfg.patch_tokens + 3, cfg.dim)))
    out = enc.joint_adapt(u, 0).data
    x = u.data[:, : cfg.patch_tokens + 1, :]
    blk = enc.blocks[0]
    h = np_ln(x, blk["ln2_g"].data, blk["ln2_b"].data)
    mlp = np_gelu(h @ blk["w1"].data + blk["b1"].data) @ blk["w2"].data + blk["b2"].data
    want = x + mlp + cfg.joint_scale_r * np_adapter(h, enc.adapters_j[0])
    np.testing.assert_allclose(out, want, atol=1e-9)


# -- full encoder -----------------------------------------------------------------------------


def test_identity_at_init_both_branches_bitwise():
    enc, _, cfg = make_encoder(seed=20)
    rng = np.random.default_rng(21)
    for trial in range(3):
        video = random_video(cfg, seed=100 + trial)
        text = rng.standard_normal(cfg.text_dim)
        frozen = enc.encode_frozen(video).data
        support = enc.encode_support(video, text).data
        query = enc.encode_query(video).data
        np.testing.assert_array_equal(support, frozen)
        np.testing.assert_array_equal(query, frozen)


def test_encode_output_shape():
    enc, _, cfg = make_encoder(text_dim=16, frames=4)
    video = random_video(cfg)
    out = enc.encode_query(video)
    assert out.shape == (4, 16)


def test_adapter_skip_flag():
    reg = ParamRegistry()
    rng = np.random.default_rng(22)
    ad = Adapter(reg, "a", dim=6, hidden=2, rng=rng, has_skip=True)
    randomize_adapter(ad, rng)
    x = Tensor(rng.standard_normal((3, 6)))
    np.testing.assert_allclose(ad(x).data, np_adapter(x.data, ad), atol=1e-12)
    assert np.abs(ad(x).data - x.data).max() > 1e-6  # still not the identity


def test_zero_init_adapter_outputs_exact_zero():
    enc, _, cfg = make_encoder()
    rng = np.random.default_rng(23)
    x = Tensor(rng.standard_normal((5, cfg.dim)))
    np.testing.assert_array_equal(enc.adapters_m[0](x).data, 0.0)


def test_encoder_gradients_reach_all_adapter_groups():
    enc, reg, cfg = make_encoder()
    rng = np.random.default_rng(24)
    # move the multimodal adapters off zero so upstream paths carry gradient
    for l in range(cfg.layers):
        randomize_adapter(enc.adapters_m[l], rng)
        randomize_adapter(enc.adapters_t[l], rng)
        randomize_adapter(enc.adapters_j[l], rng)
    video = random_video(cfg)
    text = rng.standard_normal(cfg.text_dim)
    loss = (enc.encode_support(video, text) * Tensor(rng.standard_normal((cfg.frames, cfg.text_dim)))).sum()
    loss.backward()
    for name, t in reg.trainable().items():
        assert t.grad is not None and np.abs(t.grad).max() > 0, f"no gradient on {name}"


def test_encoder_gradient_matches_finite_differences_spotcheck():
    enc, reg, cfg = make_encoder(layers=1, dim=8, heads=2, patch_tokens=2, patch_dim=4, text_dim=4)
    rng = np.random.default_rng(25)
    for l in range(cfg.layers):
        randomize_adapter(enc.adapters_m[l], rng)
    video = random_video(cfg, seed=26)
    text = rng.standard_normal(cfg.text_dim)
    weights = rng.standard_normal((cfg.frames, cfg.text_dim))

    def loss_value():
        return (enc.encode_support(video, text) * Tensor(weights)).sum()

    reg.zero_grad()
    loss_value().backward()
    h = 1e-5
    for name in ("fc_text.w", "adapter.block0.multimodal.up", "proj.visual"):
        t = reg[name]
        flat = t.data.reshape(-1)
        for idx in (0, flat.size // 2):
            keep = flat[idx]
            flat[idx] = keep + h
            up = loss_value().item()
            flat[idx] = keep - h
            down = loss_value().item()
            flat[idx] = keep
            fd = (up - down) / (2 * h)
            an = t.grad.reshape(-1)[idx]
            assert abs(fd - an) < 1e-4 * max(1.0, abs(fd)), f"{name}[{idx}]: {fd} vs {an}"
