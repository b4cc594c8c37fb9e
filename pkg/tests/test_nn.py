import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpvt import nn
from cpvt.errors import ConfigError, ContractError, ShapeError
from cpvt.rng import stream
from cpvt.tensor import Tensor, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


def f64_block(seed=0, d=8, heads=2, ratio=2, activation="relu"):
    return nn.init_block(stream(seed, "test/block"), d, heads, ratio, np.float64, activation)


def randomize(params, seed=0, scale=0.5):
    """Replace small init weights with O(1) values so checks exercise every path."""
    g = rng(seed)
    for t in params:
        t.data = g.standard_normal(t.shape) * scale


def block_tensors(b: nn.BlockParams):
    out = [b.norm1.gamma, b.norm1.beta, b.norm2.gamma, b.norm2.beta]
    for lin in (b.attn.q, b.attn.k, b.attn.v, b.attn.o, b.ffn.fc1, b.ffn.fc2):
        out += [lin.weight, lin.bias]
    return out


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_vector_is_zero():
    d = 6
    y = nn.layer_norm(Tensor(np.full((2, d), 3.7)), Tensor(np.ones(d)), Tensor(np.zeros(d)))
    # the mean of a constant row can be off by one ulp, which 1/sqrt(eps) magnifies
    assert np.max(np.abs(y.data)) <= 1e-9
    assert np.array_equal(nn.layer_norm(Tensor(np.full((1, d), 2.0)), Tensor(np.ones(d)), Tensor(np.zeros(d))).data,
                          np.zeros((1, d)))


def test_layer_norm_unit_variance():
    x = Tensor(rng(1).standard_normal((5, 64)) * 4 + 2)
    y = nn.layer_norm(x, Tensor(np.ones(64)), Tensor(np.zeros(64))).data
    assert np.max(np.abs(y.var(axis=-1) - 1.0)) <= 1e-6
    assert np.max(np.abs(y.mean(axis=-1))) <= 1e-12


def test_layer_norm_affine_on_constant_input():
    d = 4
    y = nn.layer_norm(Tensor(np.full((3, d), -1.0)), Tensor(np.full(d, 2.0)), Tensor(np.full(d, 3.0)))
    assert np.array_equal(y.data, np.full((3, d), 3.0))


def test_layer_norm_grad():
    x = Tensor(rng(2).standard_normal((2, 3, 5)))
    gamma, beta = Tensor(rng(3).standard_normal(5)), Tensor(rng(4).standard_normal(5))
    assert grad_check(nn.layer_norm, [x, gamma, beta]) <= 1e-4


def test_layer_norm_shape_mismatch():
    with pytest.raises(ShapeError):
        nn.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# -- attention ------------------------------------------------------------------

def mhsa_single_head_oracle(x, p: nn.MHSAParams):
    """Loop-level single-head attention, sharing no code with nn.mhsa."""
    B, N, d = x.shape
    out = np.zeros((B, N, d))
    for b in range(B):
        q = x[b] @ p.q.weight.data + p.q.bias.data
        k = x[b] @ p.k.weight.data + p.k.bias.data
        v = x[b] @ p.v.weight.data + p.v.bias.data
        ctx = np.zeros((N, d))
        for i in range(N):
            e = [sum(q[i, t] * k[j, t] for t in range(d)) / math.sqrt(d) for j in range(N)]
            m = max(e)
            w = [math.exp(v_ - m) for v_ in e]
            s = sum(w)
            for j in range(N):
                ctx[i] += (w[j] / s) * v[j]
        out[b] = ctx @ p.o.weight.data + p.o.bias.data
    return out


def test_mhsa_single_head_matches_oracle():
    p = nn.init_mhsa(stream(0, "t"), 6, 1, np.float64)
    randomize([t for lin in (p.q, p.k, p.v, p.o) for t in (lin.weight, lin.bias)])
    x = rng(5).standard_normal((2, 5, 6))
    assert np.max(np.abs(nn.mhsa(Tensor(x), p).data - mhsa_single_head_oracle(x, p))) <= 1e-12


def test_mhsa_single_token():
    p = nn.init_mhsa(stream(1, "t"), 4, 2, np.float64)
    x = rng(6).standard_normal((1, 1, 4))
    out, scores = nn.mhsa(Tensor(x), p, return_scores=True)
    assert np.array_equal(scores, np.ones((1, 2, 1, 1)))
    v = x @ p.v.weight.data + p.v.bias.data
    assert np.max(np.abs(out.data - (v @ p.o.weight.data + p.o.bias.data))) <= 1e-15


def test_mhsa_scores_rows_sum_to_one():
    p = nn.init_mhsa(stream(2, "t"), 8, 2, np.float64)
    _, scores = nn.mhsa(Tensor(rng(7).standard_normal((3, 7, 8))), p, return_scores=True)
    assert scores.shape == (3, 2, 7, 7)
    assert np.max(np.abs(scores.sum(-1) - 1.0)) <= 1e-12


def test_mhsa_empty_sequence():
    p = nn.init_mhsa(stream(0, "t"), 4, 1, np.float64)
    with pytest.raises(ContractError):
        nn.mhsa(Tensor(np.zeros((1, 0, 4))), p)


def test_mhsa_heads_must_divide():
    with pytest.raises(ConfigError):
        nn.init_mhsa(stream(0, "t"), 6, 4, np.float64)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 9), st.integers(0, 10_000))
def test_mhsa_permutation_equivariance(n, seed):
    p = nn.init_mhsa(stream(seed, "perm"), 8, 2, np.float64)
    randomize([t for lin in (p.q, p.k, p.v, p.o) for t in (lin.weight, lin.bias)], seed)
    g = rng(seed)
    x = g.standard_normal((2, n, 8))
    perm = g.permutation(n)
    a = nn.mhsa(Tensor(x[:, perm]), p).data
    b = nn.mhsa(Tensor(x), p).data[:, perm]
    assert np.max(np.abs(a - b)) <= 1e-6


# -- feed-forward ---------------------------------------------------------------

def ffn_loop(x, p: nn.FFNParams):
    w1, b1, w2, b2 = (t.data for t in (p.fc1.weight, p.fc1.bias, p.fc2.weight, p.fc2.bias))
    out = np.zeros((x.shape[0], w2.shape[1]))
    for r in range(x.shape[0]):
        h = [max(0.0, sum(x[r, i] * w1[i, j] for i in range(w1.shape[0])) + b1[j]) for j in range(w1.shape[1])]
        for c in range(w2.shape[1]):
            out[r, c] = sum(h[j] * w2[j, c] for j in range(len(h))) + b2[c]
    return out


def test_ffn_matches_loop():
    p = nn.init_ffn(stream(0, "ffn"), 5, 7, np.float64)
    randomize([p.fc1.weight, p.fc1.bias, p.fc2.weight, p.fc2.bias])
    x = rng(8).standard_normal((4, 5))
    assert np.max(np.abs(nn.ffn(Tensor(x), p).data - ffn_loop(x, p))) <= 1e-12


def test_ffn_relu_kill_gives_bias():
    p = nn.init_ffn(stream(0, "ffn"), 3, 4, np.float64)
    p.fc1.weight.data[:] = 1.0
    p.fc1.bias.data[:] = 0.0
    p.fc2.bias.data[:] = [0.5, -1.0, 2.0]
    y = nn.ffn(Tensor(-np.ones((2, 3))), p).data
    assert np.array_equal(y, np.tile([0.5, -1.0, 2.0], (2, 1)))


def test_ffn_identity_weights():
    d = 4
    p = nn.FFNParams(nn.LinearParams(Tensor(np.eye(d)), Tensor(np.zeros(d))),
                     nn.LinearParams(Tensor(np.eye(d)), Tensor(np.zeros(d))))
    x = rng(9).uniform(0.1, 1.0, size=(3, d))
    assert np.array_equal(nn.ffn(Tensor(x), p).data, x)


def test_ffn_unknown_activation():
    p = nn.init_ffn(stream(0, "ffn"), 3, 4, np.float64, activation="swish")
    with pytest.raises(ConfigError):
        nn.ffn(Tensor(np.ones((1, 3))), p)


# -- encoder block ----------------------------------------------------------------

@pytest.mark.parametrize("placement", ["pre", "post"])
@pytest.mark.parametrize("activation", ["relu", "gelu"])
def test_encoder_block_grad_check(placement, activation):
    blk = f64_block(d=4, heads=2, ratio=2, activation=activation)
    randomize(block_tensors(blk), seed=3)
    x = Tensor(rng(10).standard_normal((2, 3, 4)))
    assert grad_check(lambda t: nn.encoder_block(t, blk, placement), x) <= 1e-4


def test_encoder_block_param_grads():
    blk = f64_block(d=4, heads=2, ratio=2)
    params = block_tensors(blk)
    randomize(params, seed=4)
    x = Tensor(rng(11).standard_normal((1, 3, 4)))
    for t in (blk.attn.q.weight, blk.ffn.fc1.weight, blk.norm1.gamma):
        assert grad_check(lambda w: nn.encoder_block(x, blk), t) <= 1e-4


def test_encoder_block_bad_placement():
    with pytest.raises(ConfigError):
        nn.encoder_block(Tensor(np.ones((1, 2, 8))), f64_block(), "middle")


# -- depthwise / separable convolution -----------------------------------------------

def dw(kernel, padding="zero"):
    return nn.DepthwiseConvParams(Tensor(np.asarray(kernel, dtype=np.float64)), padding)


def test_identity_kernel():
    k = np.zeros((2, 3, 3))
    k[:, 1, 1] = 1.0
    x = rng(12).standard_normal((1, 2, 5, 4))
    assert np.array_equal(nn.depthwise_conv2d(Tensor(x), dw(k)).data, x)


def test_all_ones_zero_padding():
    y = nn.depthwise_conv2d(Tensor(np.ones((1, 1, 3, 3))), dw(np.ones((1, 3, 3)))).data[0, 0]
    assert y.tolist() == [[4, 6, 4], [6, 9, 6], [4, 6, 4]]


def test_all_ones_circular():
    y = nn.depthwise_conv2d(Tensor(np.ones((1, 1, 3, 3))), dw(np.ones((1, 3, 3)), "circular")).data
    assert np.array_equal(y, np.full((1, 1, 3, 3), 9.0))


def test_no_padding_shrinks():
    y = nn.depthwise_conv2d(Tensor(np.ones((1, 1, 5, 6))), dw(np.ones((1, 3, 3)), "none"))
    assert y.shape == (1, 1, 3, 4)


def test_even_kernel_rejected():
    with pytest.raises(ConfigError):
        dw(np.ones((1, 2, 2)))
    with pytest.raises(ConfigError):
        nn.init_depthwise(stream(0, "k"), 3, 4, "zero", np.float64)


def test_unknown_padding_rejected():
    with pytest.raises(ConfigError):
        dw(np.ones((1, 3, 3)), "reflect")


@pytest.mark.parametrize("mode", ["zero", "circular", "none"])
@pytest.mark.parametrize("k", [1, 3])
def test_depthwise_grad_check(mode, k):
    x = Tensor(rng(13).standard_normal((2, 2, 4, 5)))
    w = Tensor(rng(14).standard_normal((2, k, k)))
    assert grad_check(lambda a, b: nn.depthwise_conv2d(a, nn.DepthwiseConvParams(b, mode)), [x, w]) <= 1e-4


def test_circular_conv_equivariant_to_roll():
    x = rng(15).standard_normal((1, 3, 6, 5))
    p = dw(rng(16).standard_normal((3, 3, 3)), "circular")
    for shift in [(1, 0), (0, 2), (-2, 3), (5, 4)]:
        a = nn.depthwise_conv2d(Tensor(np.roll(x, shift, axis=(2, 3))), p).data
        b = np.roll(nn.depthwise_conv2d(Tensor(x), p).data, shift, axis=(2, 3))
        assert np.max(np.abs(a - b)) <= 1e-12


def test_fan_in_kernel_init_bounds():
    p = nn.init_depthwise(stream(0, "k"), 64, 3, "zero", np.float64)
    assert np.max(np.abs(p.kernel.data)) <= 1 / 3
    assert p.kernel.data.std() > 0.1
    q = nn.init_depthwise(stream(0, "k"), 64, 3, "zero", np.float64, init="trunc_normal")
    assert np.max(np.abs(q.kernel.data)) <= 0.04


def separable_oracle(x, kernel, pw):
    """Zero-padded depthwise then 1x1, by explicit loops."""
    B, C, H, W = x.shape
    k = kernel.shape[-1]
    h = k // 2
    mid = np.zeros_like(x)
    for b in range(B):
        for c in range(C):
            for r in range(H):
                for q in range(W):
                    s = 0.0
                    for i in range(k):
                        for j in range(k):
                            rr, qq = r + i - h, q + j - h
                            if 0 <= rr < H and 0 <= qq < W:
                                s += x[b, c, rr, qq] * kernel[c, i, j]
                    mid[b, c, r, q] = s
    return np.einsum("bchw,cd->bdhw", mid, pw)


def test_separable_matches_oracle():
    g = rng(17)
    x, kernel, pw = g.standard_normal((2, 3, 4, 4)), g.standard_normal((3, 3, 3)), g.standard_normal((3, 5))
    y = nn.separable_conv2d(Tensor(x), dw(kernel), Tensor(pw)).data
    assert np.max(np.abs(y - separable_oracle(x, kernel, pw))) <= 1e-12


def test_separable_identity_pointwise():
    g = rng(18)
    x, kernel = g.standard_normal((1, 3, 4, 4)), g.standard_normal((3, 3, 3))
    a = nn.separable_conv2d(Tensor(x), dw(kernel), Tensor(np.eye(3))).data
    assert np.array_equal(a, nn.depthwise_conv2d(Tensor(x), dw(kernel)).data)


def test_separable_param_count():
    assert nn.separable_param_count(192, 3, 1) == 192 ** 2 + 9 * 192 == 38592
    assert nn.separable_param_count(192, 3, 1) - 37632 == 960
    assert nn.separable_param_count(192, 3, 4) == 4 * 38592


def test_pointwise_grad_check():
    x = Tensor(rng(19).standard_normal((1, 2, 3, 3)))
    w = Tensor(rng(20).standard_normal((2, 3)))
    assert grad_check(nn.pointwise_conv2d, [x, w]) <= 1e-4


# -- patch embedding ----------------------------------------------------------------

@pytest.mark.parametrize("size,tokens,grid", [(224, 196, (14, 14)), (384, 576, (24, 24))])
def test_patch_embed_token_counts(size, tokens, grid):
    p = nn.init_linear(stream(0, "pe"), 3 * 16 * 16, 8, np.float32)
    out = nn.patch_embed(np.zeros((1, 3, size, size), dtype=np.float32), 16, p)
    assert out.data.shape == (1, tokens, 8) and out.grid == grid


def test_patch_embed_single_patch_is_flatten_linear():
    p = nn.init_linear(stream(1, "pe"), 2 * 4 * 4, 5, np.float64)
    x = rng(21).standard_normal((3, 2, 4, 4))
    out = nn.patch_embed(x, 4, p).data.data
    ref = x.reshape(3, -1) @ p.weight.data + p.bias.data
    assert np.max(np.abs(out[:, 0] - ref)) <= 1e-13


def test_patch_embed_row_major_order():
    # token r*Wg + c must come from tile (r, c)
    p = nn.LinearParams(Tensor(np.ones((4, 1))), Tensor(np.zeros(1)))
    x = np.zeros((1, 1, 4, 6))
    x[0, 0, 2:4, 4:6] = 1.0  # tile (1, 2)
    out = nn.patch_embed(x, 2, p).data.data[0, :, 0]
    assert out.argmax() == 1 * 3 + 2 and out.max() == 4.0


def test_patch_embed_indivisible():
    p = nn.init_linear(stream(0, "pe"), 16, 4, np.float64)
    with pytest.raises(ContractError, match="S=4"):
        nn.patch_embed(np.zeros((1, 1, 10, 8)), 4, p)


# -- AdamW ----------------------------------------------------------------------------

def test_adamw_zero_grad_no_decay_is_noop():
    p = Tensor(rng(22).standard_normal(4))
    before = p.data.copy()
    st_ = nn.AdamWState.for_params([p])
    nn.adamw_step([p], [np.zeros(4)], st_, lr=0.1, wd=0.0)
    assert np.array_equal(p.data, before)


def test_adamw_zero_grad_shrinks():
    p = Tensor(np.array([2.0, -4.0]))
    nn.adamw_step([p], [np.zeros(2)], nn.AdamWState.for_params([p]), lr=0.1, wd=0.5)
    assert np.array_equal(p.data, np.array([2.0, -4.0]) * (1 - 0.1 * 0.5))


def test_adamw_hand_computed_step():
    p = Tensor(np.array([1.0]))
    nn.adamw_step([p], [np.array([0.5])], nn.AdamWState.for_params([p]), lr=0.1, wd=0.01,
                  betas=(0.9, 0.999), eps=1e-8)
    # m = 0.05, v = 0.00025; bias-corrected 0.5 and 0.25; decay 1 -> 0.999
    expected = 0.999 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert p.data[0] == pytest.approx(expected, abs=1e-15)


def test_adamw_rejects_nonpositive_lr():
    p = Tensor(np.ones(1))
    with pytest.raises(ConfigError):
        nn.adamw_step([p], [np.ones(1)], nn.AdamWState.for_params([p]), lr=0.0)
