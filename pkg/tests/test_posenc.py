import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cpvt import nn
from cpvt.errors import ConfigError, ContractError, ResolutionError
from cpvt.grid import TokenGrid, tokens_to_image
from cpvt.posenc import (
    EncodingParams,
    EncodingScheme,
    PEGSpec,
    RelativeBias,
    apply_scheme,
    bicubic_resize,
    init_peg,
    init_relative,
    peg_forward,
    peg_forward_masked,
    relative_index,
    relative_mhsa,
    resize_learnable_pe,
    sincos_2d,
    sinusoidal_pe,
)
from cpvt.rng import stream
from cpvt.tensor import Tensor, grad_check


def rng(seed=0):
    return np.random.default_rng(seed)


# -- sinusoidal tables -------------------------------------------------------------

def test_sinusoidal_position_zero():
    pe = sinusoidal_pe(1, 16)[0]
    assert np.array_equal(pe[0::2], np.zeros(8)) and np.array_equal(pe[1::2], np.ones(8))


def test_sinusoidal_first_entry():
    assert sinusoidal_pe(2, 8)[1, 0] == math.sin(1.0)


def test_sinusoidal_bounded():
    pe = sinusoidal_pe(10_001, 32)
    assert pe.min() >= -1.0 and pe.max() <= 1.0


def test_sinusoidal_odd_dim_rejected():
    with pytest.raises(ConfigError):
        sinusoidal_pe(4, 7)


@pytest.mark.parametrize("d", [2, 10, 64])
def test_sinusoidal_against_mpmath(d):
    mpmath.mp.dps = 40
    pe = sinusoidal_pe(130, d)
    for pos in (0, 1, 7, 64, 129):
        for i in range(d // 2):
            angle = mpmath.mpf(pos) / mpmath.power(10000, mpmath.mpf(2 * i) / d)
            assert abs(pe[pos, 2 * i] - float(mpmath.sin(angle))) <= 1e-12
            assert abs(pe[pos, 2 * i + 1] - float(mpmath.cos(angle))) <= 1e-12


def sincos_reference(hg, wg, d):
    """Loop generator: row index in the first half, column index in the second."""
    half = d // 2
    out = np.zeros((hg * wg, d))
    for r in range(hg):
        for c in range(wg):
            t = r * wg + c
            for base, pos in ((0, r), (half, c)):
                for i in range(half // 2):
                    w = pos / 10000 ** (2 * i / half)
                    out[t, base + 2 * i] = math.sin(w)
                    out[t, base + 2 * i + 1] = math.cos(w)
    return out


def test_sincos_2d_matches_second_implementation():
    assert np.max(np.abs(sincos_2d(14, 14, 192) - sincos_reference(14, 14, 192))) <= 1e-12


def test_sincos_2d_origin_and_rows():
    t = sincos_2d(3, 4, 8)
    assert np.array_equal(t[0, 0::2], np.zeros(4)) and np.array_equal(t[0, 1::2], np.ones(4))
    for r in range(3):
        row = t[r * 4:(r + 1) * 4, :4]
        assert np.array_equal(row, np.broadcast_to(row[0], row.shape))


def test_sincos_2d_dim_check():
    with pytest.raises(ConfigError):
        sincos_2d(2, 2, 6)


# -- bicubic resize ---------------------------------------------------------------------

def test_resize_identity():
    f = rng(1).standard_normal((5, 4, 3))
    assert np.max(np.abs(bicubic_resize(f, 5, 4) - f)) <= 1e-6


def test_resize_constant_field():
    f = np.full((3, 5, 2), 1.25)
    assert np.max(np.abs(bicubic_resize(f, 7, 2) - 1.25)) <= 1e-12


def test_resize_2x2_to_3x3_closed_form():
    # At the half-way sample the Keys taps are -3/32, 19/32, 19/32, -3/32; with only two
    # source samples the clamped outer taps fold in, leaving plain averages.
    a, b, c, d = 1.0, 3.0, -2.0, 5.0
    f = np.array([[a, b], [c, d]])[:, :, None]
    out = bicubic_resize(f, 3, 3)[:, :, 0]
    expected = np.array([
        [a, (a + b) / 2, b],
        [(a + c) / 2, (a + b + c + d) / 4, (b + d) / 2],
        [c, (c + d) / 2, d],
    ])
    assert np.max(np.abs(out - expected)) <= 1e-12


def test_resize_target_too_small():
    with pytest.raises(ConfigError):
        bicubic_resize(np.ones((2, 2, 1)), 0, 3)


def test_resize_learnable_keeps_mean_row_norm():
    pe = rng(2).standard_normal((4, 4, 6)).astype(np.float32)
    out = resize_learnable_pe(pe, 7, 5)
    assert out.shape == (7, 5, 6) and out.dtype == np.float32
    before = np.linalg.norm(pe.reshape(-1, 6), axis=1).mean()
    after = np.linalg.norm(out.reshape(-1, 6), axis=1).mean()
    assert after == pytest.approx(before, rel=1e-5)


def test_resize_learnable_needs_two_rows():
    with pytest.raises(ContractError):
        resize_learnable_pe(np.ones((1, 4, 2)), 3, 3)


# -- relative position bias ---------------------------------------------------------

def mhsa_params(d, heads, seed=0, scale=0.5):
    p = nn.init_mhsa(stream(seed, "rel"), d, heads, np.float64)
    g = rng(seed)
    for lin in (p.q, p.k, p.v, p.o):
        lin.weight.data = g.standard_normal(lin.weight.shape) * scale
        lin.bias.data = g.standard_normal(lin.bias.shape) * scale
    return p


def zero_bias(dk, clip=8, value=False):
    z = lambda: Tensor(np.zeros((2 * clip + 1, dk)))
    return RelativeBias(z(), z(), clip, z() if value else None, z() if value else None)


def test_zero_tables_equal_plain_mhsa():
    p = mhsa_params(8, 2)
    x = Tensor(rng(3).standard_normal((2, 1 + 6, 8)))
    a = relative_mhsa(x, p, zero_bias(4, value=True), (2, 3), has_cls=True).data
    assert np.max(np.abs(a - nn.mhsa(x, p).data)) <= 1e-14


def test_relative_index_clipping():
    dr, dc = relative_index((1, 20), clip=3)
    assert dr.min() == dr.max() == 3
    assert dc[0, 19] == 6 and dc[19, 0] == 0 and dc[0, 2] == 5 and dc[5, 5] == 3
    far = np.abs(np.arange(20)[None, :] - np.arange(20)[:, None]) >= 3
    assert set(np.unique(dc[far])) == {0, 6}


def test_relative_two_tokens_hand_expansion():
    # grid 1x2, one head: a_ij = row[K] + col[K + (c_j - c_i)]
    d, K = 3, 2
    p = mhsa_params(d, 1, seed=5)
    g = rng(6)
    bias = RelativeBias(Tensor(g.standard_normal((5, d))), Tensor(g.standard_normal((5, d))), K)
    x = g.standard_normal((1, 2, d))
    q = x[0] @ p.q.weight.data + p.q.bias.data
    k = x[0] @ p.k.weight.data + p.k.bias.data
    v = x[0] @ p.v.weight.data + p.v.bias.data
    row, col = bias.key_row.data, bias.key_col.data
    out = np.zeros((2, d))
    for i in range(2):
        e = [q[i] @ (k[j] + row[K] + col[K + j - i]) / math.sqrt(d) for j in range(2)]
        w = np.exp(np.array(e) - max(e))
        w /= w.sum()
        out[i] = w @ v
    expected = out @ p.o.weight.data + p.o.bias.data
    got = relative_mhsa(Tensor(x), p, bias, (1, 2)).data[0]
    assert np.max(np.abs(got - expected)) <= 1e-12


def test_relative_class_token_pairs_unbiased():
    p = mhsa_params(4, 1, seed=7)
    g = rng(8)
    bias = init_relative(stream(0, "r"), 4, 2, False, np.float64)
    bias.key_row.data = g.standard_normal(bias.key_row.shape)
    bias.key_col.data = g.standard_normal(bias.key_col.shape)
    x = Tensor(g.standard_normal((1, 5, 4)))
    _, scores = relative_mhsa(x, p, bias, (2, 2), has_cls=True, return_scores=True)
    _, plain = nn.mhsa(x, p, return_scores=True)
    # the class-token query row sees no relative term
    assert np.max(np.abs(scores[0, 0, 0] - plain[0, 0, 0])) <= 1e-14
    assert np.max(np.abs(scores[0, 0, 1:] - plain[0, 0, 1:])) > 1e-6


def test_relative_requires_grid():
    with pytest.raises(ContractError):
        relative_mhsa(Tensor(np.ones((1, 4, 4))), mhsa_params(4, 1), zero_bias(4), None)


@pytest.mark.parametrize("value", [False, True])
def test_relative_grad_check(value):
    p = mhsa_params(4, 2, seed=9)
    bias = init_relative(stream(1, "r"), 2, 2, value, np.float64)
    for t in bias.tensors():
        t.data = rng(10).standard_normal(t.shape)
    x = Tensor(rng(11).standard_normal((1, 7, 4)))
    assert grad_check(lambda a, kr: relative_mhsa(a, p, RelativeBias(kr, bias.key_col, 2, bias.value_row,
                                                                     bias.value_col), (2, 3), True),
                      [x, bias.key_row]) <= 1e-4


# -- PEG ----------------------------------------------------------------------------

def tokens(B=2, grid=(4, 5), d=3, cls=False, seed=0):
    n = grid[0] * grid[1] + (1 if cls else 0)
    return TokenGrid(Tensor(rng(seed).standard_normal((B, n, d))), grid, has_cls=cls)


def random_peg(d, spec=PEGSpec(), seed=0):
    peg = init_peg(stream(seed, "peg"), d, spec, np.float64)
    for c in peg.convs:
        c.kernel.data = rng(seed + 100).standard_normal(c.kernel.shape)
    return peg


def test_zero_kernel_is_identity():
    t = tokens(cls=True)
    peg = random_peg(3)
    peg.convs[0].kernel.data[:] = 0.0
    assert np.array_equal(peg_forward(t, peg).data.data, t.data.data)


@pytest.mark.parametrize("padding", ["zero", "circular", "none"])
def test_class_token_bitwise_unchanged(padding):
    t = tokens(cls=True)
    out = peg_forward(t, random_peg(3, PEGSpec(padding=padding)))
    assert np.array_equal(out.data.data[:, 0], t.data.data[:, 0])
    assert out.has_cls and out.grid == t.grid


def peg_loop(x_img, kernel):
    """Residual plus zero-padded per-channel correlation, one channel at a time."""
    B, C, H, W = x_img.shape
    k = kernel.shape[-1]
    h = k // 2
    out = x_img.copy()
    for b in range(B):
        for c in range(C):
            for r in range(H):
                for q in range(W):
                    for i in range(k):
                        for j in range(k):
                            rr, qq = r + i - h, q + j - h
                            if 0 <= rr < H and 0 <= qq < W:
                                out[b, c, r, q] += x_img[b, c, rr, qq] * kernel[c, i, j]
    return out


def test_peg_matches_loop_oracle():
    t = tokens(grid=(4, 5), d=3)
    peg = random_peg(3)
    got = tokens_to_image(peg_forward(t, peg).data, t.grid).data
    ref = peg_loop(tokens_to_image(t.data, t.grid).data, peg.convs[0].kernel.data)
    assert np.max(np.abs(got - ref)) <= 1e-12


def test_peg_none_padding_leaves_border_unencoded():
    t = tokens(grid=(5, 5), d=2)
    out = peg_forward(t, random_peg(2, PEGSpec(padding="none"))).data.data.reshape(2, 5, 5, 2)
    src = t.data.data.reshape(2, 5, 5, 2)
    border = np.ones((5, 5), bool)
    border[1:-1, 1:-1] = False
    assert np.array_equal(out[:, border], src[:, border])
    assert not np.allclose(out[:, ~border], src[:, ~border])


def test_peg_separable_runs_and_counts():
    spec = PEGSpec(function="separable", layers=2)
    peg = init_peg(stream(0, "sep"), 6, spec, np.float64)
    assert sum(t.size for t in peg.tensors()) == nn.separable_param_count(6, 3, 2)
    out = peg_forward(tokens(d=6, cls=True), peg)
    assert out.data.shape == (2, 21, 6)


def test_peg_grad_check():
    t = tokens(B=1, grid=(3, 3), d=2, cls=True)
    peg = random_peg(2, PEGSpec(layers=2, padding="circular"))
    k0 = peg.convs[0].kernel

    def f(x, k):
        peg.convs[0] = nn.DepthwiseConvParams(k, "circular")
        return peg_forward(TokenGrid(x, (3, 3), has_cls=True), peg).data

    assert grad_check(f, [t.data, k0]) <= 1e-4


def test_peg_spec_validation():
    for bad in (PEGSpec(kernel=4), PEGSpec(layers=0), PEGSpec(function="full"), PEGSpec(padding="reflect"),
                PEGSpec(positions=()), PEGSpec(positions=(0, 0)), PEGSpec(init="ones")):
        with pytest.raises(ConfigError):
            bad.validate()
    with pytest.raises(ConfigError):
        PEGSpec(positions=(12,)).validate(depth=12)
    PEGSpec(positions=(-1, 11)).validate(depth=12)


# -- masked PEG ----------------------------------------------------------------------

def test_masked_all_false_equals_plain():
    t, peg = tokens(cls=True), random_peg(3)
    a = peg_forward_masked(t, np.zeros(20, bool), peg).data.data
    assert np.array_equal(a, peg_forward(t, peg).data.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_masked_positions_restored_exactly(seed):
    t, peg = tokens(grid=(5, 6), cls=True, seed=seed % 50), random_peg(3, seed=seed % 7)
    mask = rng(seed).random((2, 30)) < 0.4
    out = peg_forward_masked(t, mask, peg).data.data[:, 1:]
    src = t.data.data[:, 1:]
    assert np.array_equal(out[mask], src[mask])


def test_masked_far_interior_matches_plain():
    t, peg = tokens(grid=(8, 8), d=2), random_peg(2)
    mask = np.zeros((8, 8), bool)
    mask[:, 6:] = True  # right-hand padding columns
    out = peg_forward_masked(t, mask.ravel(), peg).data.data.reshape(2, 8, 8, 2)
    plain = peg_forward(t, peg).data.data.reshape(2, 8, 8, 2)
    assert np.max(np.abs(out[:, 1:6, 1:5] - plain[:, 1:6, 1:5])) <= 1e-12


def test_masked_bad_shape():
    with pytest.raises(ContractError):
        peg_forward_masked(tokens(), np.zeros(7, bool), random_peg(3))


# -- scheme dispatch -----------------------------------------------------------------

def test_scheme_none_is_identity():
    t = tokens()
    for phase in (-1, 0, 3):
        assert apply_scheme(t, EncodingScheme("none"), phase) is t


def test_learnable_added_once():
    t = tokens(grid=(2, 3), d=4, cls=True)
    table = Tensor(rng(1).standard_normal((2, 3, 4)))
    cls_pos = Tensor(rng(2).standard_normal(4))
    params = EncodingParams(pos_table=table, cls_pos=cls_pos)
    out = apply_scheme(t, EncodingScheme("learnable"), -1, params)
    assert np.array_equal(out.data.data[:, 1:], t.data.data[:, 1:] + table.data.reshape(6, 4))
    assert np.array_equal(out.data.data[:, 0], t.data.data[:, 0] + cls_pos.data)
    assert apply_scheme(out, EncodingScheme("learnable"), 0, params) is out
    with pytest.raises(ContractError):
        apply_scheme(out, EncodingScheme("learnable"), -1, params)


def test_learnable_grid_mismatch():
    t = tokens(grid=(3, 3), d=4)
    params = EncodingParams(pos_table=Tensor(rng(1).standard_normal((2, 2, 4))))
    with pytest.raises(ResolutionError):
        apply_scheme(t, EncodingScheme("learnable"), -1, params)
    out = apply_scheme(t, EncodingScheme("learnable"), -1, params, resize=True)
    assert out.abs_pe_applied and out.data.shape == t.data.shape


@pytest.mark.parametrize("variant", ["sinusoidal1d", "sincos2d"])
def test_fixed_tables_at_input_only(variant):
    t = tokens(grid=(2, 2), d=8)
    out = apply_scheme(t, EncodingScheme(variant), -1)
    assert out.abs_pe_applied and not np.array_equal(out.data.data, t.data.data)
    assert apply_scheme(t, EncodingScheme(variant), 2) is t


def test_peg_positions_trigger_exactly_five_phases():
    d = 3
    spec = PEGSpec(positions=(0, 1, 2, 3, 4))
    scheme = EncodingScheme("peg", spec)
    params = EncodingParams(pegs={p: random_peg(d, spec, seed=p) for p in spec.positions})
    t = tokens(d=d)
    fired = [phase for phase in range(-1, 12) if apply_scheme(t, scheme, phase, params) is not t]
    assert fired == [0, 1, 2, 3, 4]


def test_peg_missing_params():
    with pytest.raises(ContractError):
        apply_scheme(tokens(), EncodingScheme("peg"), 0, EncodingParams())


def test_relative_scheme_leaves_tokens():
    t = tokens()
    assert apply_scheme(t, EncodingScheme("relative"), -1) is t
