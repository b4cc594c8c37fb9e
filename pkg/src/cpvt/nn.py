"""Transformer building blocks on top of :mod:`cpvt.tensor`.

Every layer is a plain function of its input and a small parameter record, so
the same code serves training, probing and finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .grid import TokenGrid
from .rng import trunc_normal
from .tensor import Tensor, gelu, matmul, pad2d, relu, softmax

PADDING_MODES = ("zero", "circular", "none")


@dataclass
class LinearParams:
    weight: Tensor  # [d_in, d_out]
    bias: Tensor | None = None  # [d_out]

    def __post_init__(self):
        if self.weight.ndim != 2:
            raise ShapeError(f"linear weight must be 2-D, got {self.weight.shape}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(f"linear bias {self.bias.shape} does not match weight {self.weight.shape}")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class NormParams:
    gamma: Tensor
    beta: Tensor


@dataclass
class MHSAParams:
    q: LinearParams
    k: LinearParams
    v: LinearParams
    o: LinearParams
    heads: int

    def __post_init__(self):
        d = self.q.d_in
        if d % self.heads:
            raise ConfigError("heads", f"dim {d} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.q.d_in

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


@dataclass
class FFNParams:
    fc1: LinearParams
    fc2: LinearParams
    activation: str = "relu"


@dataclass
class DepthwiseConvParams:
    kernel: Tensor  # [C, k, k]
    padding: str = "zero"

    def __post_init__(self):
        if self.kernel.ndim != 3 or self.kernel.shape[1] != self.kernel.shape[2]:
            raise ShapeError(f"depthwise kernel must be [C, k, k], got {self.kernel.shape}")
        if self.k % 2 == 0:
            raise ConfigError("kernel", f"kernel size must be odd, got {self.k}")
        if self.padding not in PADDING_MODES:
            raise ConfigError("padding", f"unknown padding mode {self.padding!r}")

    @property
    def k(self) -> int:
        return self.kernel.shape[1]

    @property
    def channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def pad(self) -> int:
        return 0 if self.padding == "none" else (self.k - 1) // 2


@dataclass
class BlockParams:
    norm1: NormParams
    attn: MHSAParams
    norm2: NormParams
    ffn: FFNParams


# -- initialisers --------------------------------------------------------------

def init_linear(gen: np.random.Generator, d_in: int, d_out: int, dtype, bias: bool = True) -> LinearParams:
    w = Tensor(trunc_normal(gen, (d_in, d_out), 0.02, dtype), requires_grad=True)
    b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True) if bias else None
    return LinearParams(w, b)


def init_norm(d: int, dtype) -> NormParams:
    return NormParams(Tensor(np.ones(d, dtype=dtype), requires_grad=True),
                      Tensor(np.zeros(d, dtype=dtype), requires_grad=True))


def init_mhsa(gen: np.random.Generator, d: int, heads: int, dtype) -> MHSAParams:
    return MHSAParams(*(init_linear(gen, d, d, dtype) for _ in range(4)), heads=heads)


def init_ffn(gen: np.random.Generator, d: int, hidden: int, dtype, activation: str = "relu") -> FFNParams:
    return FFNParams(init_linear(gen, d, hidden, dtype), init_linear(gen, hidden, d, dtype), activation)


def init_block(gen: np.random.Generator, d: int, heads: int, ffn_ratio: int, dtype, activation: str = "relu") -> BlockParams:
    return BlockParams(init_norm(d, dtype), init_mhsa(gen, d, heads, dtype), init_norm(d, dtype),
                       init_ffn(gen, d, d * ffn_ratio, dtype, activation))


def init_depthwise(gen: np.random.Generator, channels: int, k: int, padding: str, dtype,
                   init: str = "fan_in") -> DepthwiseConvParams:
    """``fan_in``: uniform in +-1/sqrt(k*k) (one input channel per filter); ``trunc_normal``: std 0.02."""
    if k % 2 == 0 or k < 1:
        raise ConfigError("kernel", f"kernel size must be odd and >= 1, got {k}")
    if init == "fan_in":
        bound = 1.0 / k
        data = gen.uniform(-bound, bound, size=(channels, k, k)).astype(dtype)
    elif init == "trunc_normal":
        data = trunc_normal(gen, (channels, k, k), 0.02, dtype)
    else:
        raise ConfigError("peg_init", f"unknown kernel init {init!r}")
    return DepthwiseConvParams(Tensor(data, requires_grad=True), padding)


# -- layers ---------------------------------------------------------------------

def linear(x: Tensor, p: LinearParams) -> Tensor:
    y = matmul(x, p.weight)
    return y if p.bias is None else y + p.bias


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape} / beta {beta.shape} vs feature dim {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data
    lead = tuple(range(x.ndim - 1))

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(xhat * gd + beta.data, (x, gamma, beta), bw, "layer_norm")


def norm(x: Tensor, p: NormParams) -> Tensor:
    return layer_norm(x, p.gamma, p.beta)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    B, N, d = x.shape
    return x.reshape(B, N, heads, d // heads).transpose(0, 2, 1, 3)


def mhsa(
    x: Tensor,
    p: MHSAParams,
    return_scores: bool = False,
    logit_bias: Callable[[Tensor], Tensor] | None = None,
    value_bias: Callable[[Tensor], Tensor] | None = None,
):
    """Multi-head self-attention ``softmax(Q K^T / sqrt(d_k)) V`` per head, then ``W^O``.

    ``logit_bias(q)`` may return a ``[B, h, N, N]`` term added to ``Q K^T`` before
    scaling; ``value_bias(attn)`` may return a ``[B, h, N, d_k]`` term added to the
    weighted values. With ``return_scores`` the normalized ``[B, h, N, N]`` score
    array is returned alongside the output.
    """
    if x.ndim != 3:
        raise ShapeError(f"mhsa expects [B, N, d], got {x.shape}")
    B, N, d = x.shape
    if N == 0:
        raise ContractError("mhsa: sequence is empty")
    if d != p.dim:
        raise ShapeError(f"mhsa: token dim {d} does not match parameter dim {p.dim}")
    h, dk = p.heads, p.head_dim
    q = _split_heads(linear(x, p.q), h)
    k = _split_heads(linear(x, p.k), h)
    v = _split_heads(linear(x, p.v), h)
    logits = matmul(q, k.swapaxes(-1, -2))
    if logit_bias is not None:
        logits = logits + logit_bias(q)
    attn = softmax(logits * (1.0 / math.sqrt(dk)), axis=-1)
    ctx = matmul(attn, v)
    if value_bias is not None:
        ctx = ctx + value_bias(attn)
    out = linear(ctx.transpose(0, 2, 1, 3).reshape(B, N, d), p.o)
    if return_scores:
        return out, attn.data.copy()
    return out


def ffn(x: Tensor, p: FFNParams) -> Tensor:
    h = linear(x, p.fc1)
    if p.activation == "relu":
        h = relu(h)
    elif p.activation == "gelu":
        h = gelu(h)
    else:
        raise ConfigError("activation", f"unknown activation {p.activation!r}")
    return linear(h, p.fc2)


def encoder_block(
    x: Tensor,
    p: BlockParams,
    norm_placement: str = "pre",
    return_scores: bool = False,
    logit_bias=None,
    value_bias=None,
):
    """One transformer encoder layer with residual connections.

    ``pre``: ``x + attn(LN(x))`` then ``x + ffn(LN(x))``.
    ``post``: ``LN(x + attn(x))`` then ``LN(x + ffn(x))``.
    """
    kw = dict(return_scores=True, logit_bias=logit_bias, value_bias=value_bias)
    if norm_placement == "pre":
        a, scores = mhsa(norm(x, p.norm1), p.attn, **kw)
        x = x + a
        x = x + ffn(norm(x, p.norm2), p.ffn)
    elif norm_placement == "post":
        a, scores = mhsa(x, p.attn, **kw)
        x = norm(x + a, p.norm1)
        x = norm(x + ffn(x, p.ffn), p.norm2)
    else:
        raise ConfigError("norm", f"unknown norm placement {norm_placement!r}")
    return (x, scores) if return_scores else x


def _correlate_valid(x: Tensor, kernel: Tensor) -> Tensor:
    B, C, Hp, Wp = x.shape
    k = kernel.shape[-1]
    Ho, Wo = Hp - k + 1, Wp - k + 1
    if Ho < 1 or Wo < 1:
        raise ContractError(f"depthwise conv: {Hp}x{Wp} input is smaller than a {k}x{k} kernel")
    xd, wd = x.data, kernel.data
    out = np.zeros((B, C, Ho, Wo), dtype=np.result_type(xd, wd))
    for i in range(k):
        for j in range(k):
            out += xd[:, :, i:i + Ho, j:j + Wo] * wd[:, i, j, None, None]

    def bw(g):
        gx = np.zeros(xd.shape, dtype=g.dtype)
        gw = np.zeros(wd.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                gx[:, :, i:i + Ho, j:j + Wo] += g * wd[:, i, j, None, None]
                gw[:, i, j] = (g * xd[:, :, i:i + Ho, j:j + Wo]).sum(axis=(0, 2, 3))
        return gx, gw

    return Tensor._make(out, (x, kernel), bw, "depthwise_conv")


def depthwise_conv2d(x: Tensor, p: DepthwiseConvParams) -> Tensor:
    """Per-channel cross-correlation of ``x[B, C, H, W]`` with a ``k x k`` filter.

    ``zero`` and ``circular`` padding keep the spatial size; ``none`` shrinks it
    by ``k - 1`` along each axis.
    """
    if x.ndim != 4 or x.shape[1] != p.channels:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} vs kernel {p.kernel.shape}")
    if p.pad:
        x = pad2d(x, p.pad, p.padding)
    return _correlate_valid(x, p.kernel)


def pointwise_conv2d(x: Tensor, weight: Tensor) -> Tensor:
    """1x1 convolution; ``weight`` is ``[C_in, C_out]``."""
    if x.ndim != 4 or weight.ndim != 2 or weight.shape[0] != x.shape[1]:
        raise ShapeError(f"pointwise_conv2d: input {x.shape} vs weight {weight.shape}")
    y = matmul(x.transpose(0, 2, 3, 1), weight)
    return y.transpose(0, 3, 1, 2)


def separable_conv2d(x: Tensor, dw: DepthwiseConvParams, pw: Tensor) -> Tensor:
    return pointwise_conv2d(depthwise_conv2d(x, dw), pw)


def separable_param_count(d: int, k: int, layers: int = 1) -> int:
    return layers * (d * d + k * k * d)


def patch_embed(images, patch: int, p: LinearParams) -> TokenGrid:
    """Split ``images[B, C, H, W]`` into ``patch x patch`` tiles and project each linearly.

    The flattened tile is ordered ``(C, row, col)``, matching a strided
    convolution's weight layout.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.ndim != 4:
        raise ShapeError(f"patch_embed expects [B, C, H, W], got {x.shape}")
    B, C, H, W = x.shape
    if H % patch or W % patch:
        raise ContractError(f"image {H}x{W} is not divisible by patch size S={patch}")
    Hg, Wg = H // patch, W // patch
    if C * patch * patch != p.d_in:
        raise ShapeError(f"patch_embed: {C}x{patch}x{patch} patches vs projection input {p.d_in}")
    tiles = x.reshape(B, C, Hg, patch, Wg, patch).transpose(0, 2, 4, 1, 3, 5)
    tokens = linear(tiles.reshape(B, Hg * Wg, C * patch * patch), p)
    return TokenGrid(tokens, (Hg, Wg))


# -- optimizer -----------------------------------------------------------------

@dataclass
class AdamWState:
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor]) -> "AdamWState":
        return cls(0, [np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamWState,
    lr: float,
    wd: float = 0.05,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> None:
    """In-place AdamW update with decoupled weight decay and bias-corrected moments."""
    if lr <= 0:
        raise ConfigError("lr", f"learning rate must be positive, got {lr}")
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ShapeError("adamw_step: optimizer state does not match parameters")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data *= 1.0 - lr * wd
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)
