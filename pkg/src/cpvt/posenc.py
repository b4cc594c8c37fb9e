"""Positional information schemes: none, learnable, 1-D/2-D sinusoidal, relative, PEG.

PEG (positional encoding generator) reshapes patch tokens back to their grid,
runs a small convolutional function ``F`` over it and adds the result to the
tokens. The class token, when present, bypasses the convolution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ResolutionError, ShapeError
from .grid import TokenGrid, image_to_tokens, tokens_to_image
from .nn import (
    PADDING_MODES,
    DepthwiseConvParams,
    MHSAParams,
    depthwise_conv2d,
    init_depthwise,
    mhsa,
    pointwise_conv2d,
)
from .rng import trunc_normal
from .tensor import Tensor, concat, matmul, pad2d, where

VARIANTS = ("none", "learnable", "sinusoidal1d", "sincos2d", "relative", "peg")
PEG_FUNCTIONS = ("depthwise", "separable")
PEG_INITS = ("fan_in", "trunc_normal")
INPUT_PHASE = -1


# -- fixed tables ----------------------------------------------------------------

def sinusoidal_pe(n: int, d: int) -> np.ndarray:
    """``[n, d]`` table with ``sin`` on even and ``cos`` on odd columns."""
    if d % 2:
        raise ConfigError("dim", f"sinusoidal encoding needs an even dimension, got {d}")
    pos = np.arange(n, dtype=np.float64)[:, None]
    inv = np.power(10000.0, -np.arange(0, d, 2, dtype=np.float64) / d)
    angles = pos * inv[None, :]
    out = np.empty((n, d), dtype=np.float64)
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


def sincos_2d(hg: int, wg: int, d: int) -> np.ndarray:
    """Row index encoded in the first ``d/2`` columns, column index in the last ``d/2``."""
    if d % 4:
        raise ConfigError("dim", f"2-D sin-cos encoding needs dim divisible by 4, got {d}")
    rows = sinusoidal_pe(hg, d // 2)
    cols = sinusoidal_pe(wg, d // 2)
    r, c = np.divmod(np.arange(hg * wg), wg)
    return np.concatenate([rows[r], cols[c]], axis=1)


# -- bicubic resize ----------------------------------------------------------------

def _cubic(x: float, a: float = -0.75) -> float:
    x = abs(x)
    if x <= 1.0:
        return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    if x < 2.0:
        return a * (((x - 5.0) * x + 8.0) * x - 4.0)
    return 0.0


def _interp_matrix(n_in: int, n_out: int) -> np.ndarray:
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = 0.0 if n_out == 1 else i * (n_in - 1) / (n_out - 1)
        x0 = math.floor(src)
        t = src - x0
        for tap, w in ((-1, _cubic(t + 1.0)), (0, _cubic(t)), (1, _cubic(1.0 - t)), (2, _cubic(2.0 - t))):
            m[i, min(max(x0 + tap, 0), n_in - 1)] += w
    return m


def bicubic_resize(field: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    """Channelwise bicubic interpolation of ``field[H, W, C]`` (corner-aligned, Keys a=-0.75)."""
    if new_h < 1 or new_w < 1:
        raise ConfigError("resize", f"target grid must be at least 1x1, got {new_h}x{new_w}")
    mh = _interp_matrix(field.shape[0], new_h)
    mw = _interp_matrix(field.shape[1], new_w)
    return np.einsum("ah,hwc,bw->abc", mh, np.asarray(field, dtype=np.float64), mw)


def resize_learnable_pe(pe, new_h: int, new_w: int) -> np.ndarray:
    """Resize a ``[Hg, Wg, d]`` table, rescaled so the mean row L2 norm is unchanged."""
    arr = pe.data if isinstance(pe, Tensor) else np.asarray(pe)
    if arr.ndim != 3:
        raise ShapeError(f"expected a [Hg, Wg, d] table, got {arr.shape}")
    if arr.shape[0] < 2 or arr.shape[1] < 2:
        raise ContractError(f"source grid {arr.shape[:2]} is too small to interpolate")
    out = bicubic_resize(arr, new_h, new_w)
    before = np.linalg.norm(arr.reshape(-1, arr.shape[2]), axis=1).mean()
    after = np.linalg.norm(out.reshape(-1, arr.shape[2]), axis=1).mean()
    if after > 0:
        out *= before / after
    return out.astype(arr.dtype)


# -- relative position bias ---------------------------------------------------------

@dataclass
class RelativeBias:
    """Per-axis key (and optional value) tables indexed by clipped offsets in ``[-K, K]``."""

    key_row: Tensor  # [2K+1, d_k]
    key_col: Tensor
    clip: int = 8
    value_row: Tensor | None = None
    value_col: Tensor | None = None

    def __post_init__(self):
        size = 2 * self.clip + 1
        for t in (self.key_row, self.key_col, self.value_row, self.value_col):
            if t is not None and (t.ndim != 2 or t.shape[0] != size):
                raise ShapeError(f"relative table must be [{size}, d_k], got {t.shape}")

    def tensors(self) -> list[Tensor]:
        return [t for t in (self.key_row, self.key_col, self.value_row, self.value_col) if t is not None]


def init_relative(gen: np.random.Generator, head_dim: int, clip: int, value_bias: bool, dtype) -> RelativeBias:
    def table():
        return Tensor(trunc_normal(gen, (2 * clip + 1, head_dim), 0.02, dtype), requires_grad=True)

    kr, kc = table(), table()
    vr, vc = (table(), table()) if value_bias else (None, None)
    return RelativeBias(kr, kc, clip, vr, vc)


def relative_index(grid: tuple[int, int], clip: int) -> tuple[np.ndarray, np.ndarray]:
    """Row/col offset table indices ``clip(r_j - r_i, -K, K) + K`` for every token pair."""
    hg, wg = grid
    r, c = np.divmod(np.arange(hg * wg), wg)
    dr = np.clip(r[None, :] - r[:, None], -clip, clip) + clip
    dc = np.clip(c[None, :] - c[:, None], -clip, clip) + clip
    return dr, dc


def _one_hot_pairs(index: np.ndarray, size: int, has_cls: bool, dtype) -> np.ndarray:
    n = index.shape[0]
    off = 1 if has_cls else 0
    oh = np.zeros((n + off, n + off, size), dtype=dtype)
    i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    oh[i + off, j + off, index] = 1.0
    return oh


def relative_bias_fns(bias: RelativeBias, grid: tuple[int, int], has_cls: bool, dtype):
    """Build the ``(logit_bias, value_bias)`` callbacks :func:`cpvt.nn.mhsa` accepts."""
    size = 2 * bias.clip + 1
    n_all = grid[0] * grid[1] + (1 if has_cls else 0)
    dr, dc = relative_index(grid, bias.clip)
    oh_r = _one_hot_pairs(dr, size, has_cls, dtype)
    oh_c = _one_hot_pairs(dc, size, has_cls, dtype)
    ohT_r = Tensor(np.ascontiguousarray(np.swapaxes(oh_r, 1, 2)))
    ohT_c = Tensor(np.ascontiguousarray(np.swapaxes(oh_c, 1, 2)))

    def gather(by_offset: Tensor, oh_t: Tensor) -> Tensor:
        # [B, h, N, R] -> [B, h, N, N] through a per-query one-hot contraction
        B, h = by_offset.shape[:2]
        return matmul(by_offset.reshape(B, h, n_all, 1, size), oh_t).reshape(B, h, n_all, n_all)

    def logit_bias(q: Tensor) -> Tensor:
        return (gather(matmul(q, bias.key_row.transpose()), ohT_r)
                + gather(matmul(q, bias.key_col.transpose()), ohT_c))

    if bias.value_row is None:
        return logit_bias, None
    oh_r_t, oh_c_t = Tensor(oh_r), Tensor(oh_c)

    def value_bias(attn: Tensor) -> Tensor:
        B, h = attn.shape[:2]
        a = attn.reshape(B, h, n_all, 1, n_all)
        mr = matmul(a, oh_r_t).reshape(B, h, n_all, size)
        mc = matmul(a, oh_c_t).reshape(B, h, n_all, size)
        return matmul(mr, bias.value_row) + matmul(mc, bias.value_col)

    return logit_bias, value_bias


def relative_mhsa(
    x: Tensor,
    params: MHSAParams,
    bias: RelativeBias,
    grid: tuple[int, int] | None,
    has_cls: bool = False,
    return_scores: bool = False,
):
    """Self-attention with 2-D clipped relative key (and optionally value) terms.

    ``e_ij = q_i . (k_j + a_ij) / sqrt(d_k)`` with ``a_ij = row[dr] + col[dc]``.
    Pairs that involve the class token get no relative term.
    """
    if grid is None:
        raise ContractError("relative attention needs the token grid coordinates")
    n = grid[0] * grid[1]
    if x.ndim != 3 or x.shape[1] != n + (1 if has_cls else 0):
        raise ContractError(f"tokens {x.shape} do not match grid {grid} (class token: {has_cls})")
    lb, vb = relative_bias_fns(bias, grid, has_cls, x.dtype)
    return mhsa(x, params, return_scores=return_scores, logit_bias=lb, value_bias=vb)


# -- PEG ------------------------------------------------------------------------------

@dataclass(frozen=True)
class PEGSpec:
    kernel: int = 3
    layers: int = 1
    function: str = "depthwise"
    padding: str = "zero"
    positions: tuple[int, ...] = (0,)
    init: str = "fan_in"

    def validate(self, depth: int | None = None) -> None:
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("peg_kernel", f"must be odd and >= 1, got {self.kernel}")
        if self.layers < 1:
            raise ConfigError("peg_layers", f"must be >= 1, got {self.layers}")
        if self.function not in PEG_FUNCTIONS:
            raise ConfigError("peg_function", f"must be one of {PEG_FUNCTIONS}, got {self.function!r}")
        if self.padding not in PADDING_MODES:
            raise ConfigError("peg_padding", f"must be one of {PADDING_MODES}, got {self.padding!r}")
        if self.init not in PEG_INITS:
            raise ConfigError("peg_init", f"must be one of {PEG_INITS}, got {self.init!r}")
        if not self.positions:
            raise ConfigError("peg_positions", "at least one position is required")
        if len(set(self.positions)) != len(self.positions):
            raise ConfigError("peg_positions", f"duplicate positions in {self.positions}")
        if depth is not None:
            bad = [p for p in self.positions if not -1 <= p < depth]
            if bad:
                raise ConfigError("peg_positions", f"{bad} outside [-1, {depth - 1}]")


@dataclass
class PEGParams:
    spec: PEGSpec
    convs: list[DepthwiseConvParams]
    pointwise: list[Tensor] | None = None  # [C, C] per layer when separable

    def tensors(self) -> list[Tensor]:
        return [c.kernel for c in self.convs] + list(self.pointwise or [])


def init_peg(gen: np.random.Generator, dim: int, spec: PEGSpec, dtype) -> PEGParams:
    spec.validate()
    convs = [init_depthwise(gen, dim, spec.kernel, spec.padding, dtype, spec.init) for _ in range(spec.layers)]
    pw = None
    if spec.function == "separable":
        pw = [Tensor(trunc_normal(gen, (dim, dim), 0.02, dtype), requires_grad=True) for _ in range(spec.layers)]
    return PEGParams(spec, convs, pw)


def peg_transform(x: Tensor, peg: PEGParams) -> Tensor:
    """``F``: the stacked convolutions of a PEG on ``x[B, C, Hg, Wg]``.

    Without padding each layer trims the border; the result is zero-filled
    back to the input size, so border tokens receive no encoding.
    """
    y = x
    for i, conv in enumerate(peg.convs):
        y = depthwise_conv2d(y, conv)
        if peg.pointwise is not None:
            y = pointwise_conv2d(y, peg.pointwise[i])
    trim = (x.shape[2] - y.shape[2]) // 2
    if trim:
        y = pad2d(y, trim, "zero")
    return y


def peg_forward(tokens: TokenGrid, peg: PEGParams) -> TokenGrid:
    """Patch tokens -> grid -> ``x + F(x)`` -> tokens; the class token is untouched."""
    patches = tokens.patches()
    if patches.shape[1] != tokens.num_patches:
        raise ContractError(f"{patches.shape[1]} patch tokens do not form grid {tokens.grid}")
    img = tokens_to_image(patches, tokens.grid)
    out = img + peg_transform(img, peg)
    return tokens.with_patches(image_to_tokens(out))


def peg_forward_masked(tokens: TokenGrid, mask, peg: PEGParams) -> TokenGrid:
    """PEG for padded batches: convolve the full grid, then restore masked tokens.

    ``mask`` is boolean over patch tokens, shape ``[N]`` or ``[B, N]``; true marks
    padding. Restored positions take the input value, so no gradient reaches
    them through the convolution.
    """
    patches = tokens.patches()
    B, N, C = patches.shape
    mask = np.asarray(mask, dtype=bool)
    if mask.shape not in ((N,), (B, N)):
        raise ContractError(f"mask shape {mask.shape} does not match {N} patch tokens (batch {B})")
    full = np.broadcast_to(mask.reshape(-1, N, 1) if mask.ndim == 2 else mask[None, :, None], (B, N, C))
    img = tokens_to_image(patches, tokens.grid)
    conv = image_to_tokens(img + peg_transform(img, peg))
    return tokens.with_patches(where(full, patches, conv))


# -- scheme dispatch -------------------------------------------------------------------

@dataclass(frozen=True)
class EncodingScheme:
    variant: str = "peg"
    peg: PEGSpec = field(default_factory=PEGSpec)
    rel_clip: int = 8
    rel_value_bias: bool = False

    def validate(self, depth: int | None = None) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError("scheme", f"must be one of {VARIANTS}, got {self.variant!r}")
        if self.variant == "peg":
            self.peg.validate(depth)
        if self.variant == "relative" and self.rel_clip < 1:
            raise ConfigError("rel_clip", f"must be >= 1, got {self.rel_clip}")


@dataclass
class EncodingParams:
    """Learned state owned by a scheme (only the fields its variant uses are set)."""

    pos_table: Tensor | None = None  # [Hg, Wg, d]
    cls_pos: Tensor | None = None  # [d]
    pegs: dict[int, PEGParams] = field(default_factory=dict)
    relative: list[RelativeBias] = field(default_factory=list)


def _add_patch_table(tokens: TokenGrid, table: np.ndarray | Tensor, cls_pos: Tensor | None = None) -> TokenGrid:
    patches = tokens.patches()
    t = table if isinstance(table, Tensor) else Tensor(table.astype(patches.dtype))
    out = tokens.with_patches(patches + t, abs_pe_applied=True)
    if cls_pos is not None and tokens.has_cls:
        out = out.with_data(concat([out.data[:, :1] + cls_pos, out.data[:, 1:]], axis=1))
    return out


def apply_scheme(
    tokens: TokenGrid,
    scheme: EncodingScheme,
    phase: int,
    params: EncodingParams | None = None,
    resize: bool = False,
) -> TokenGrid:
    """Apply whatever ``scheme`` contributes at ``phase``.

    ``phase`` is ``-1`` for the encoder input and ``i`` for the output of
    encoder ``i``. Absolute tables are added once at the input; PEG runs at its
    configured positions; relative attention and ``none`` leave tokens as-is.
    """
    v = scheme.variant
    if v in ("none", "relative"):
        return tokens
    if v == "peg":
        if phase not in scheme.peg.positions:
            return tokens
        if params is None or phase not in params.pegs:
            raise ContractError(f"no PEG parameters for position {phase}")
        return peg_forward(tokens, params.pegs[phase])
    if phase != INPUT_PHASE:
        return tokens
    if tokens.abs_pe_applied:
        raise ContractError("absolute position table already added to these tokens")
    hg, wg = tokens.grid
    d = tokens.data.shape[2]
    if v == "sinusoidal1d":
        return _add_patch_table(tokens, sinusoidal_pe(hg * wg, d))
    if v == "sincos2d":
        return _add_patch_table(tokens, sincos_2d(hg, wg, d))
    if v == "learnable":
        if params is None or params.pos_table is None:
            raise ContractError("learnable scheme has no position table")
        table = params.pos_table
        if tuple(table.shape[:2]) != (hg, wg):
            if not resize:
                raise ResolutionError(
                    f"learnable position table was built for a {table.shape[0]}x{table.shape[1]} grid but "
                    f"the input gives {hg}x{wg}; pass resize=True to bicubically interpolate the table"
                )
            resized = resize_learnable_pe(table, hg, wg)
            return _add_patch_table(tokens, resized.reshape(hg * wg, d), params.cls_pos)
        return _add_patch_table(tokens, table.reshape(hg * wg, d), params.cls_pos)
    raise ConfigError("scheme", f"unknown variant {v!r}")
