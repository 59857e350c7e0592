import numpy as np
import pytest

from dwdropin.tensor import ConfigError, matmul, seeded_fill, softmax_rows
from dwdropin.vit import (
    BlockParams,
    ModelConfig,
    block_forward,
    explicit_attention,
    grid,
    head_attention,
    head_cols,
    head_energy,
    head_rows,
    init_model,
    layer_norm,
    mhsa_forward,
    mhsa_forward_headsum,
    model_forward,
    qkv_project,
)

from conftest import TINY, make_inputs


def random_block(cfg, seed):
    return init_model(cfg, seed).blocks[0]


class TestConfig:
    def test_dims_must_factor(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_b=1, n_h=3, d=8, d_h=4, m=4, k=3)

    def test_grid_hosts_kernel(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_b=1, n_h=1, d=4, d_h=4, m=2, k=3)

    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig(n_b=1, n_h=1, d=4, d_h=4, m=4, k=2)

    def test_roundtrip(self):
        assert ModelConfig.from_dict(TINY.to_dict()) == TINY


class TestQkvProject:
    def test_zero_input(self, tiny_model):
        blk = tiny_model.blocks[0]
        q, k, v = qkv_project(np.zeros((TINY.n, TINY.d), np.float32), blk, 0)
        assert not q.any() and not k.any() and not v.any()

    def test_selector_weights(self, rng):
        cfg = TINY
        blk = random_block(cfg, 7)
        blk.w_q[:, : cfg.d_h] = np.eye(cfg.d, cfg.d_h, dtype=np.float32)
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        q, _, _ = qkv_project(x, blk, 0)
        np.testing.assert_array_equal(q, x[:, : cfg.d_h])

    def test_matches_slice_then_matmul(self, rng):
        cfg = TINY
        blk = random_block(cfg, 8)
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        for h in range(cfg.n_h):
            q, k, v = qkv_project(x, blk, h)
            np.testing.assert_array_equal(q, matmul(x, head_cols(blk.w_q, h, cfg.d_h)))
            np.testing.assert_array_equal(k, matmul(x, head_cols(blk.w_k, h, cfg.d_h)))
            np.testing.assert_array_equal(v, matmul(x, head_cols(blk.w_v, h, cfg.d_h)))

    def test_head_out_of_range(self, tiny_model):
        with pytest.raises(ConfigError):
            qkv_project(np.zeros((TINY.n, TINY.d), np.float32), tiny_model.blocks[0], 2)


class TestHeadEnergy:
    def test_zero_queries_uniform(self, rng):
        k = rng.standard_normal((6, 4)).astype(np.float32)
        e = head_energy(np.zeros((6, 4), np.float32), k)
        np.testing.assert_allclose(e, 1 / 6, atol=1e-7)

    def test_zero_keys_uniform(self, rng):
        q = rng.standard_normal((6, 4)).astype(np.float32)
        np.testing.assert_allclose(head_energy(q, np.zeros((6, 4), np.float32)), 1 / 6,
                                   atol=1e-7)

    def test_against_two_step_oracle(self, rng):
        q = rng.standard_normal((4, 3)).astype(np.float32)
        k = rng.standard_normal((4, 3)).astype(np.float32)
        expected = softmax_rows((q @ k.T) * np.float32(1 / np.sqrt(3)))
        np.testing.assert_allclose(head_energy(q, k), expected, atol=1e-7)

    def test_rows_stochastic_on_model(self, desk_model, rng):
        cfg = desk_model.config
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        for h in range(cfg.n_h):
            q, k, _ = qkv_project(x, desk_model.blocks[0], h)
            sums = head_energy(q, k).sum(axis=1)
            np.testing.assert_allclose(sums, 1.0, atol=1e-6)


class TestHeadAttention:
    def test_uniform_mixing(self, rng):
        cfg = TINY
        blk = random_block(cfg, 9)
        blk.w_q[:] = 0
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        _, _, v = qkv_project(x, blk, 1)
        out = head_attention(x, blk, 1)
        np.testing.assert_allclose(out, np.broadcast_to(v.mean(axis=0), out.shape),
                                   atol=1e-6)

    def test_single_token_passthrough(self):
        cfg = ModelConfig(n_b=1, n_h=1, d=4, d_h=4, m=1, k=1)
        blk = init_model(cfg, 3).blocks[0]
        x = seeded_fill((1, 4), 5, "gaussian")
        _, _, v = qkv_project(x, blk, 0)
        np.testing.assert_allclose(head_attention(x, blk, 0), v, atol=1e-7)


class TestExplicitAttention:
    def test_identity_energy(self, rng):
        v = rng.standard_normal((4, 4, 3)).astype(np.float32)
        e = np.eye(16, dtype=np.float32)
        np.testing.assert_allclose(explicit_attention(e, v), v, atol=1e-7)

    def test_uniform_energy(self, rng):
        v = rng.standard_normal((3, 3, 2)).astype(np.float32)
        e = np.full((9, 9), 1 / 9, dtype=np.float32)
        out = explicit_attention(e, v)
        np.testing.assert_allclose(out, np.broadcast_to(v.mean(axis=(0, 1)), out.shape),
                                   atol=1e-6)

    def test_matches_flattened_matmul(self, rng):
        for _ in range(5):
            m, d_h = 5, 6
            e = softmax_rows(rng.standard_normal((m * m, m * m)).astype(np.float32))
            v = rng.standard_normal((m, m, d_h)).astype(np.float32)
            ref = grid(matmul(e, v.reshape(m * m, d_h)), m)
            np.testing.assert_allclose(explicit_attention(e, v), ref, atol=1e-6)

    def test_grid_mismatch(self, rng):
        with pytest.raises(Exception):
            explicit_attention(np.eye(10, dtype=np.float32),
                               rng.standard_normal((3, 3, 2)).astype(np.float32))


class TestMhsa:
    def test_identity_output_projection(self, rng):
        cfg = TINY
        blk = random_block(cfg, 11)
        blk.w_o = np.eye(cfg.d, dtype=np.float32)
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        heads = np.concatenate([head_attention(x, blk, h) for h in range(cfg.n_h)], axis=1)
        np.testing.assert_allclose(mhsa_forward(x, blk), heads, atol=1e-6)

    def test_single_head_degenerate_concat(self, rng):
        cfg = ModelConfig(n_b=1, n_h=1, d=8, d_h=8, m=4, k=3)
        blk = init_model(cfg, 13).blocks[0]
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        np.testing.assert_allclose(mhsa_forward(x, blk),
                                   matmul(head_attention(x, blk, 0), blk.w_o), atol=1e-7)

    def test_concat_equals_headsum(self, desk_model, rng):
        cfg = desk_model.config
        for blk in desk_model.blocks[:2]:
            x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
            np.testing.assert_allclose(mhsa_forward(x, blk), mhsa_forward_headsum(x, blk),
                                       atol=1e-5)

    def test_head_permutation_invariance(self, rng):
        cfg = TINY
        blk = random_block(cfg, 17)
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        baseline = mhsa_forward(x, blk)
        perm = [1, 0]
        d_h = cfg.d_h

        def permute_cols(w):
            return np.concatenate([head_cols(w, p, d_h) for p in perm], axis=1)

        permuted = BlockParams(
            n_h=cfg.n_h, d_h=d_h,
            w_q=permute_cols(blk.w_q), w_k=permute_cols(blk.w_k),
            w_v=permute_cols(blk.w_v),
            w_o=np.concatenate([head_rows(blk.w_o, p, d_h) for p in perm], axis=0),
            ffn_w1=blk.ffn_w1, ffn_w2=blk.ffn_w2,
            norm1_scale=blk.norm1_scale, norm1_shift=blk.norm1_shift,
            norm2_scale=blk.norm2_scale, norm2_shift=blk.norm2_shift,
        )
        np.testing.assert_allclose(mhsa_forward(x, permuted), baseline, atol=1e-5)


class TestBlockAndModelForward:
    def test_zero_weights_residual_only(self, rng):
        cfg = TINY
        model = init_model(cfg, 19)
        for blk in model.blocks:
            for name in ("w_q", "w_k", "w_v", "w_o", "ffn_w1", "ffn_w2"):
                getattr(blk, name)[:] = 0
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        np.testing.assert_allclose(model_forward(x, model), x + model.pos_enc, atol=1e-7)

    def test_ffn_zeroed_isolates_attention(self, rng):
        cfg = TINY
        model = init_model(cfg, 23)
        blk = model.blocks[0]
        blk.ffn_w2[:] = 0
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        attn_in = layer_norm(x, blk.norm1_scale, blk.norm1_shift)
        np.testing.assert_allclose(block_forward(x, blk), x + mhsa_forward(attn_in, blk),
                                   atol=1e-7)

    def test_two_block_model_composes(self, rng):
        cfg = ModelConfig(n_b=2, n_h=2, d=8, d_h=4, m=4, k=3, ffn_mult=2)
        model = init_model(cfg, 29)
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        manual = block_forward(block_forward(x + model.pos_enc, model.blocks[0]),
                               model.blocks[1])
        np.testing.assert_array_equal(model_forward(x, model), manual)

    def test_deterministic_init(self):
        a = init_model(TINY, 31)
        b = init_model(TINY, 31)
        np.testing.assert_array_equal(a.pos_enc, b.pos_enc)
        for ba, bb in zip(a.blocks, b.blocks):
            np.testing.assert_array_equal(ba.w_q, bb.w_q)
            np.testing.assert_array_equal(ba.ffn_w2, bb.ffn_w2)

    def test_attn_tap_sees_every_block(self, tiny_model):
        seen = []
        x = make_inputs(TINY, 1, 5)[0]
        model_forward(x, tiny_model, attn_tap=lambda b, a: seen.append((b, a.shape)))
        assert seen == [(0, (TINY.n, TINY.d)), (1, (TINY.n, TINY.d))]


class TestExplicitVsHeadAttention:
    def test_agreement_on_model(self, desk_model, rng):
        cfg = desk_model.config
        blk = desk_model.blocks[1]
        x = rng.standard_normal((cfg.n, cfg.d)).astype(np.float32)
        for h in range(cfg.n_h):
            q, k, v = qkv_project(x, blk, h)
            e = head_energy(q, k)
            np.testing.assert_allclose(explicit_attention(e, grid(v, cfg.m)),
                                       grid(head_attention(x, blk, h), cfg.m), atol=1e-6)
