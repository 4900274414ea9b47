import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oamixer.errors import ConfigError, DimensionError
from oamixer.gradcheck import grad_check
from oamixer.labels import MULTI_CLASS, PatchLabels, pairwise_distance_matrix
from oamixer.layers import (
    ATTENTION,
    CONV,
    KINDS,
    TOKEN_MLP,
    AttentionLayer,
    Block,
    ChannelMLP,
    ConvMixing,
    TokenMLP,
    attention_oamix,
    attention_vanilla,
    attention_weights,
    block_forward,
    channel_mlp,
    conv_mixing_oamix,
    conv_mixing_vanilla,
    linearize_token_mlp,
    token_mlp_oamix,
    token_mlp_residual,
    token_mlp_vanilla,
    toeplitz_from_kernel,
)
from oamixer.mask import MaskScale, ReweightMask, augment_cls, build_mask
from oamixer.tensor import Tensor, depthwise_conv2d, identity, mul, sum_

F64 = np.float64


def rand_mask(rng, n, lo=0.05):
    m = rng.uniform(lo, 1, size=(n, n))
    m = (m + m.T) / 2
    np.fill_diagonal(m, 1.0)
    return ReweightMask(Tensor(m))


def binary_distances(rng, n, batch=None):
    shape = (n,) if batch is None else (batch, n)
    y = rng.random(shape)[..., None]
    return np.abs(y - np.swapaxes(y, -1, -2))


def np_softmax(z):
    z = z - z.max(-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(-1, keepdims=True)


def attention_reference(x, layer, mask=None):
    """Per-head float64 loops over heads; returns (weights [H,T,T], output [T,D])."""
    t, d = x.shape
    h, dh = layer.heads, layer.head_dim
    q, k, v = (x @ w.data for w in (layer.wq, layer.wk, layer.wv))
    heads, weights = [], []
    for i in range(h):
        sl = slice(i * dh, (i + 1) * dh)
        a = np_softmax(q[:, sl] @ k[:, sl].T / math.sqrt(dh))
        if mask is not None:
            a = mask * a
            a = a / a.sum(-1, keepdims=True)
        weights.append(a)
        heads.append(a @ v[:, sl])
    return np.stack(weights), np.concatenate(heads, axis=1) @ layer.wo.data + layer.bo.data


class TestAttention:
    def test_single_token(self):
        rng = np.random.default_rng(0)
        layer = AttentionLayer(8, 2, rng, F64)
        layer.bo.data[...] = rng.normal(size=8)
        x = rng.normal(size=(1, 8))
        out = attention_vanilla(Tensor(x), layer).data
        np.testing.assert_allclose(out, x @ layer.wv.data @ layer.wo.data + layer.bo.data, atol=1e-12)

    def test_zero_query_key_is_uniform(self):
        rng = np.random.default_rng(1)
        layer = AttentionLayer(6, 3, rng, F64)
        layer.wq.data[...] = 0
        layer.wk.data[...] = 0
        layer.wo.data[...] = np.eye(6)
        x = rng.normal(size=(5, 6))
        out = attention_vanilla(Tensor(x), layer).data
        v = x @ layer.wv.data
        np.testing.assert_allclose(out, np.tile(v.mean(0), (5, 1)), atol=1e-12)

    def test_matches_reference(self):
        rng = np.random.default_rng(2)
        layer = AttentionLayer(8, 2, rng, F64)
        x = rng.normal(size=(4, 8))
        _, ref = attention_reference(x, layer)
        assert np.abs(attention_vanilla(Tensor(x), layer).data - ref).max() <= 1e-6

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            AttentionLayer(10, 4, np.random.default_rng(0))

    def test_ones_mask_bitwise(self):
        rng = np.random.default_rng(3)
        layer = AttentionLayer(8, 4, rng, F64)
        x = Tensor(rng.normal(size=(2, 7, 8)))
        ones = ReweightMask(Tensor(np.ones((7, 7))))
        assert np.array_equal(attention_oamix(x, layer, ones).data, attention_vanilla(x, layer).data)

    def test_two_token_hand_example(self):
        layer = AttentionLayer(2, 1, np.random.default_rng(4), F64)
        layer.wq.data[...] = 0
        layer.wk.data[...] = 0
        x = Tensor(np.random.default_rng(4).normal(size=(2, 2)))
        m = ReweightMask(Tensor(np.array([[1.0, 0.5], [0.5, 1.0]])))
        a = attention_weights(x, layer, m).data[0, 0]
        np.testing.assert_allclose(a, [[2 / 3, 1 / 3], [1 / 3, 2 / 3]], atol=1e-15)

    def test_five_tokens_two_step_oracle(self):
        rng = np.random.default_rng(5)
        layer = AttentionLayer(8, 2, rng, F64)
        x = rng.normal(size=(5, 8))
        mask = rand_mask(rng, 5)
        a = attention_weights(Tensor(x), layer, mask).data[0]
        ref_a, ref_out = attention_reference(x, layer, mask.m.data)
        assert np.abs(a.sum(-1) - 1).max() <= 1e-6
        assert np.abs(a - ref_a).max() <= 1e-6
        assert np.abs(attention_oamix(Tensor(x), layer, mask).data - ref_out).max() <= 1e-6

    def test_row_stochastic_random_draws(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            t = int(rng.integers(1, 9))
            layer = AttentionLayer(8, 2, rng, F64)
            x = Tensor(rng.normal(scale=3, size=(t, 8)))
            kappa = MaskScale(0, F64)
            kappa.value = float(rng.uniform(0, 10))
            mask = build_mask(binary_distances(rng, t), kappa)
            a = attention_weights(x, layer, mask).data
            assert np.abs(a.sum(-1) - 1).max() <= 1e-6

    def test_cls_row_neutral(self):
        rng = np.random.default_rng(7)
        layer = AttentionLayer(8, 2, rng, F64)
        x = Tensor(rng.normal(size=(6, 8)))
        mask = augment_cls(rand_mask(rng, 5))
        masked = attention_weights(x, layer, mask).data
        plain = attention_weights(x, layer).data
        assert np.abs(masked[..., 0, :] - plain[..., 0, :]).max() <= 1e-6

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(8)
        layer = AttentionLayer(8, 2, rng, F64)
        x = rng.normal(size=(6, 8))
        mask = rand_mask(rng, 6).m.data
        perm = rng.permutation(6)
        out = attention_oamix(Tensor(x), layer, ReweightMask(Tensor(mask))).data
        out_p = attention_oamix(Tensor(x[perm]), layer, ReweightMask(Tensor(mask[np.ix_(perm, perm)]))).data
        assert np.abs(out_p - out[perm]).max() <= 1e-6

    def test_mask_size_mismatch(self):
        rng = np.random.default_rng(9)
        layer = AttentionLayer(8, 2, rng, F64)
        with pytest.raises(DimensionError):
            attention_oamix(Tensor(rng.normal(size=(5, 8))), layer, rand_mask(rng, 4))

    def test_batched_per_image_masks(self):
        rng = np.random.default_rng(10)
        layer = AttentionLayer(8, 2, rng, F64)
        x = rng.normal(size=(3, 4, 8))
        masks = np.stack([rand_mask(rng, 4).m.data for _ in range(3)])
        out = attention_oamix(Tensor(x), layer, ReweightMask(Tensor(masks))).data
        for i in range(3):
            _, ref = attention_reference(x[i], layer, masks[i])
            assert np.abs(out[i] - ref).max() <= 1e-9


def token_mlp_loop(x, w1, w2, act):
    out = np.zeros_like(x)
    for c in range(x.shape[1]):
        out[:, c] = w2 @ act(w1 @ x[:, c])
    return out


def np_gelu(v):
    return 0.5 * v * (1 + np.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))


class TestTokenMLP:
    def test_identity_config(self):
        mlp = TokenMLP(4, 4, np.random.default_rng(0), F64, activation=identity)
        mlp.w1.data[...] = np.eye(4)
        mlp.w2.data[...] = np.eye(4)
        x = np.random.default_rng(0).normal(size=(4, 3))
        np.testing.assert_array_equal(token_mlp_vanilla(Tensor(x), mlp).data, x)

    def test_zero_weights(self):
        mlp = TokenMLP(4, 6, np.random.default_rng(1), F64)
        mlp.w1.data[...] = 0
        mlp.w2.data[...] = 0
        out = token_mlp_vanilla(Tensor(np.random.default_rng(1).normal(size=(4, 3))), mlp).data
        assert np.all(out == 0)

    def test_per_channel_oracle(self):
        rng = np.random.default_rng(2)
        mlp = TokenMLP(4, 8, rng, F64)
        mlp.w1.data[...] = rng.normal(size=(8, 4))
        mlp.w2.data[...] = rng.normal(size=(4, 8))
        x = rng.normal(size=(4, 3))
        ref = token_mlp_loop(x, mlp.w1.data, mlp.w2.data, np_gelu)
        assert np.abs(token_mlp_vanilla(Tensor(x), mlp).data - ref).max() <= 1e-6

    def test_linearize_single_layer(self):
        mlp = TokenMLP(4, 4, np.random.default_rng(3), F64)
        mlp.weights = [mlp.w1]
        assert np.array_equal(linearize_token_mlp(mlp).data, mlp.w1.data)

    def test_linearize_identity_second(self):
        mlp = TokenMLP(4, 4, np.random.default_rng(4), F64)
        mlp.w2.data[...] = np.eye(4)
        np.testing.assert_allclose(linearize_token_mlp(mlp).data, mlp.w1.data, atol=1e-15)

    def test_linearize_matmul_oracle(self):
        rng = np.random.default_rng(5)
        mlp = TokenMLP(4, 6, rng, F64)
        mlp.w1.data[...] = rng.normal(size=(6, 4))
        mlp.w2.data[...] = rng.normal(size=(4, 6))
        ref = np.array([[sum(mlp.w2.data[i, t] * mlp.w1.data[t, j] for t in range(6)) for j in range(4)]
                        for i in range(4)])
        assert linearize_token_mlp(mlp).data.shape == (4, 4)
        assert np.abs(linearize_token_mlp(mlp).data - ref).max() <= 1e-12

    def test_ones_mask_exact(self):
        rng = np.random.default_rng(6)
        for _ in range(10):
            mlp = TokenMLP(5, 7, rng, F64)
            mlp.w1.data[...] = rng.normal(size=(7, 5))
            x = Tensor(rng.normal(size=(2, 5, 3)))
            ones = ReweightMask(Tensor(np.ones((5, 5))))
            assert np.array_equal(token_mlp_oamix(x, mlp, ones).data, token_mlp_vanilla(x, mlp).data)

    def test_identity_activation_zero_residual(self):
        rng = np.random.default_rng(7)
        mlp = TokenMLP(4, 6, rng, F64, activation=identity)
        x = rng.normal(size=(4, 2))
        mask = rand_mask(rng, 4)
        lin = linearize_token_mlp(mlp).data
        assert np.all(token_mlp_residual(Tensor(x), mlp).data == 0)
        out = token_mlp_oamix(Tensor(x), mlp, mask).data
        assert np.abs(out - (mask.m.data * lin) @ x).max() <= 1e-12

    def test_term_by_term_oracle(self):
        rng = np.random.default_rng(8)
        mlp = TokenMLP(4, 6, rng, F64)
        mlp.w1.data[...] = rng.normal(size=(6, 4))
        x = rng.normal(size=(4, 2))
        mask = rand_mask(rng, 4).m.data
        w1, w2 = mlp.w1.data, mlp.w2.data
        lin = w2 @ w1
        ref = np.zeros_like(x)
        for c in range(2):
            col = x[:, c]
            masked_linear = (mask * lin) @ col
            residual = w2 @ np_gelu(w1 @ col) - lin @ col
            ref[:, c] = masked_linear + residual
        out = token_mlp_oamix(Tensor(x), mlp, ReweightMask(Tensor(mask))).data
        assert np.abs(out - ref).max() <= 1e-6

    def test_cls_mask_rejected(self):
        rng = np.random.default_rng(9)
        mlp = TokenMLP(4, 6, rng, F64)
        with pytest.raises(DimensionError):
            token_mlp_oamix(Tensor(rng.normal(size=(4, 2))), mlp, augment_cls(rand_mask(rng, 3)))

    def test_wrong_token_count(self):
        mlp = TokenMLP(4, 6, np.random.default_rng(10), F64)
        with pytest.raises(DimensionError):
            token_mlp_vanilla(Tensor(np.zeros((5, 2))), mlp)


def make_conv(rng, grid, s=3, channels=1, shared=True):
    conv = ConvMixing(grid, s, channels, rng, F64, shared=shared)
    conv.kernel.data[...] = rng.normal(size=conv.kernel.shape)
    return conv


def flat_tokens(x):
    """[C, H, W] grid -> [N, C] row-major tokens."""
    c = x.shape[0]
    return x.reshape(c, -1).T


class TestToeplitz:
    def test_delta_kernel(self):
        conv = ConvMixing((3, 4), 3, 1, np.random.default_rng(0), F64)
        conv.kernel.data[...] = 0
        conv.kernel.data[0, 1, 1] = 1
        np.testing.assert_array_equal(toeplitz_from_kernel(conv).data, np.eye(12))

    @pytest.mark.parametrize("s", [1, 3, 5])
    def test_single_patch_grid(self, s):
        conv = make_conv(np.random.default_rng(s), (1, 1), s)
        w = toeplitz_from_kernel(conv).data
        assert w.shape == (1, 1) and w[0, 0] == conv.kernel.data[0, s // 2, s // 2]

    def test_random_4x5(self):
        rng = np.random.default_rng(1)
        conv = make_conv(rng, (4, 5))
        w = toeplitz_from_kernel(conv).data
        for _ in range(20):
            x = rng.normal(size=(1, 4, 5))
            direct = depthwise_conv2d(Tensor(x), conv.kernel).data.reshape(-1)
            assert np.abs(w @ x.reshape(-1) - direct).max() <= 1e-12

    def test_property_100_instances(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            gh, gw = (int(v) for v in rng.integers(1, 7, size=2))
            s = int(rng.choice([1, 3, 5]))
            conv = make_conv(rng, (gh, gw), s)
            w = toeplitz_from_kernel(conv).data
            x = rng.normal(size=(1, gh, gw))
            direct = depthwise_conv2d(Tensor(x), conv.kernel).data.reshape(-1)
            assert np.abs(w @ x.reshape(-1) - direct).max() <= 1e-12

    def test_per_channel(self):
        rng = np.random.default_rng(3)
        conv = make_conv(rng, (3, 3), channels=4, shared=False)
        w = toeplitz_from_kernel(conv).data
        x = rng.normal(size=(4, 3, 3))
        direct = depthwise_conv2d(Tensor(x), conv.kernel).data
        for c in range(4):
            assert np.abs(w[c] @ x[c].reshape(-1) - direct[c].reshape(-1)).max() <= 1e-12

    def test_gradient_in_kernel(self):
        rng = np.random.default_rng(4)
        conv = make_conv(rng, (3, 4))
        wt = Tensor(rng.normal(size=(12, 12)))
        err = grad_check(lambda: sum_(mul(toeplitz_from_kernel(conv), wt)), [conv.kernel])
        assert err <= 1e-6


class TestConvMixing:
    def test_even_kernel(self):
        with pytest.raises(ConfigError):
            ConvMixing((3, 3), 4, 1, np.random.default_rng(0))

    @pytest.mark.parametrize("shared", [True, False])
    def test_ones_mask_exact(self, shared):
        rng = np.random.default_rng(1)
        conv = make_conv(rng, (4, 4), channels=3, shared=shared)
        x = Tensor(rng.normal(size=(2, 16, 3)))
        ones = ReweightMask(Tensor(np.ones((16, 16))))
        assert np.array_equal(conv_mixing_oamix(x, conv, ones).data, conv_mixing_vanilla(x, conv).data)

    def test_vanilla_is_depthwise(self):
        rng = np.random.default_rng(2)
        conv = make_conv(rng, (3, 5), channels=2)
        x = rng.normal(size=(2, 3, 5))
        out = conv_mixing_vanilla(Tensor(flat_tokens(x)), conv).data
        direct = depthwise_conv2d(Tensor(x), conv.kernel).data
        np.testing.assert_array_equal(out, flat_tokens(direct))

    def test_large_kappa_limit(self):
        rng = np.random.default_rng(3)
        conv = make_conv(rng, (3, 3), channels=2)
        # one distinct class per patch: every off-diagonal cosine distance is 1
        d = pairwise_distance_matrix(PatchLabels(np.eye(9), MULTI_CLASS))
        kappa = MaskScale(0, F64)
        kappa.value = 50.0
        mask = build_mask(d, kappa)
        x = rng.normal(size=(9, 2))
        out = conv_mixing_oamix(Tensor(x), conv, mask).data
        centre = conv.kernel.data[0, 1, 1]
        assert np.abs(out - centre * x).max() <= 1e-6

    def test_masked_matrix_oracle(self):
        rng = np.random.default_rng(4)
        for shared in (True, False):
            conv = make_conv(rng, (4, 5), channels=3, shared=shared)
            w = toeplitz_from_kernel(conv).data
            mask = rand_mask(rng, 20)
            x = rng.normal(size=(20, 3))
            out = conv_mixing_oamix(Tensor(x), conv, mask).data
            for c in range(3):
                wc = w if shared else w[c]
                ref = (mask.m.data * wc) @ x[:, c]
                assert np.abs(out[:, c] - ref).max() <= 1e-6

    def test_grid_mismatch(self):
        rng = np.random.default_rng(5)
        conv = make_conv(rng, (3, 3))
        with pytest.raises(DimensionError):
            conv_mixing_oamix(Tensor(rng.normal(size=(8, 2))), conv, rand_mask(rng, 8))
        with pytest.raises(DimensionError):
            conv_mixing_oamix(Tensor(rng.normal(size=(9, 2))), conv, rand_mask(rng, 8))


class TestChannelMLP:
    def test_zero_weights(self):
        mlp = ChannelMLP(4, np.random.default_rng(0), F64)
        for p in mlp.parameters():
            p.data[...] = 0
        assert np.all(channel_mlp(Tensor(np.ones((3, 4))), mlp).data == 0)

    def test_identity_configuration(self):
        mlp = ChannelMLP(4, np.random.default_rng(1), F64, hidden=4, activation=identity)
        mlp.fc1.weight.data[...] = np.eye(4)
        mlp.fc2.weight.data[...] = np.eye(4)
        x = np.random.default_rng(1).normal(size=(3, 4))
        np.testing.assert_array_equal(channel_mlp(Tensor(x), mlp).data, x)

    def test_hidden_is_four_d(self):
        mlp = ChannelMLP(6, np.random.default_rng(2), F64)
        assert mlp.fc1.weight.shape == (6, 24) and mlp.fc2.weight.shape == (24, 6)

    def test_per_row_oracle(self):
        rng = np.random.default_rng(3)
        mlp = ChannelMLP(4, rng, F64)
        for p in mlp.parameters():
            p.data[...] = rng.normal(size=p.shape)
        x = rng.normal(size=(5, 4))
        ref = np.stack([np_gelu(row @ mlp.fc1.weight.data + mlp.fc1.bias.data) @ mlp.fc2.weight.data
                        + mlp.fc2.bias.data for row in x])
        assert np.abs(channel_mlp(Tensor(x), mlp).data - ref).max() <= 1e-6


def make_block(kind, rng, oamix, dim=8, n=4, dtype=F64):
    return Block(kind, dim, rng, dtype=dtype, heads=2, n_tokens=n, token_hidden=6,
                 grid=(2, n // 2), oamix=oamix, has_cls=kind == ATTENTION)


def tokens_for(kind, n):
    return n + 1 if kind == ATTENTION else n


class TestBlock:
    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_weights_pure_residual(self, kind):
        rng = np.random.default_rng(0)
        blk = make_block(kind, rng, oamix=False)
        for name, p in blk.named_parameters():
            if not name.endswith(("gamma", "beta")):
                p.data[...] = 0
        x = rng.normal(size=(tokens_for(kind, 4), 8))
        np.testing.assert_array_equal(blk(Tensor(x)).data, x)

    @pytest.mark.parametrize("kind", KINDS)
    def test_kappa_zero_matches_vanilla(self, kind):
        van = make_block(kind, np.random.default_rng(1), oamix=False, dtype=np.float32)
        oam = make_block(kind, np.random.default_rng(1), oamix=True, dtype=np.float32)
        rng = np.random.default_rng(2)
        x = Tensor(rng.normal(size=(3, tokens_for(kind, 4), 8)).astype(np.float32))
        d = binary_distances(rng, 4, batch=3).astype(np.float32)
        assert np.array_equal(van(x).data, oam(x, d).data)

    @pytest.mark.parametrize("kind", KINDS)
    def test_grad_check_all_parameters(self, kind):
        rng = np.random.default_rng(3)
        blk = make_block(kind, rng, oamix=True)
        blk.kappa.value = 0.9
        for name, p in blk.named_parameters():
            if name.endswith(("bias", "bo", "beta")):
                p.data[...] = rng.normal(scale=0.1, size=p.shape)
        t = tokens_for(kind, 4)
        x = Tensor(rng.normal(size=(2, t, 8)))
        d = binary_distances(rng, 4, batch=2)
        w = Tensor(rng.normal(size=(2, t, 8)))
        err = grad_check(lambda: sum_(mul(blk(x, d), w)), blk.parameters(), eps=1e-6)
        assert err <= 1e-4

    @pytest.mark.parametrize("kind", KINDS)
    def test_kappa_gets_gradient(self, kind):
        rng = np.random.default_rng(4)
        blk = make_block(kind, rng, oamix=True)
        for p in blk.parameters():
            p.data[...] = rng.normal(scale=0.5, size=p.shape)
        blk.kappa.value = 0.5
        t = tokens_for(kind, 4)
        x = Tensor(rng.normal(size=(t, 8)))
        d = binary_distances(rng, 4)
        err = grad_check(lambda: sum_(mul(blk(x, d), blk(x, d))), [blk.kappa.raw], eps=1e-6)
        assert err <= 1e-4
        assert blk.kappa.raw.grad != 0

    def test_missing_distances(self):
        blk = make_block(TOKEN_MLP, np.random.default_rng(5), oamix=True)
        with pytest.raises(ConfigError):
            block_forward(blk, Tensor(np.zeros((4, 8))))

    def test_distances_on_vanilla(self):
        blk = make_block(CONV, np.random.default_rng(6), oamix=False)
        with pytest.raises(ConfigError):
            block_forward(blk, Tensor(np.zeros((4, 8))), np.zeros((4, 4)))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            Block("pooling", 8, np.random.default_rng(0))

    @pytest.mark.parametrize("kind", KINDS)
    def test_shape_preserved(self, kind):
        blk = make_block(kind, np.random.default_rng(7), oamix=True)
        t = tokens_for(kind, 4)
        out = blk(Tensor(np.ones((t, 8))), np.zeros((4, 4)))
        assert out.shape == (t, 8)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 6), st.floats(0.01, 1.0), st.integers(0, 2**31))
def test_masked_attention_rows_sum_to_one(t, lo, seed):
    rng = np.random.default_rng(seed)
    layer = AttentionLayer(4, 2, rng, F64)
    x = Tensor(rng.normal(scale=5, size=(t, 4)))
    a = attention_weights(x, layer, rand_mask(rng, t, lo)).data
    assert np.abs(a.sum(-1) - 1).max() <= 1e-6
