"""DeiT / CPVT model assembly, attention extraction and complexity accounting."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, ResolutionError
from .grid import TokenGrid
from .posenc import (
    INPUT_PHASE,
    PEG_FUNCTIONS,
    VARIANTS,
    EncodingParams,
    EncodingScheme,
    PEGSpec,
    apply_scheme,
    init_peg,
    init_relative,
    relative_bias_fns,
)
from .rng import stream, trunc_normal
from .tensor import Tensor, concat, no_grad

log = logging.getLogger(__name__)

HEADS = ("cls", "gap")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 12
    dim: int = 192
    heads: int = 3
    patch_size: int = 16
    image_size: int = 224
    in_chans: int = 3
    num_classes: int = 1000
    head: str = "cls"
    scheme: str = "peg"
    peg_kernel: int = 3
    peg_layers: int = 1
    peg_function: str = "depthwise"
    peg_padding: str = "zero"
    peg_positions: tuple[int, ...] = (0,)
    peg_init: str = "fan_in"
    rel_clip: int = 8
    rel_value_bias: bool = False
    ffn_ratio: int = 4
    norm: str = "pre"
    activation: str = "relu"
    precision: str = "float32"
    freeze_peg: bool = False
    drop_rate: float = 0.0
    drop_path: float = 0.0

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        """Tiny / small / base widths (all 12 layers, 16x16 patches, 224 input)."""
        sizes = {"tiny": (192, 3), "small": (384, 6), "base": (768, 12)}
        if name not in sizes:
            raise ConfigError("preset", f"unknown preset {name!r}")
        dim, heads = sizes[name]
        return cls(dim=dim, heads=heads, **overrides)

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def grid(self) -> tuple[int, int]:
        g = self.image_size // self.patch_size
        return g, g

    @property
    def encoding(self) -> EncodingScheme:
        peg = PEGSpec(self.peg_kernel, self.peg_layers, self.peg_function, self.peg_padding, tuple(self.peg_positions),
                      self.peg_init)
        return EncodingScheme(self.scheme, peg, self.rel_clip, self.rel_value_bias)

    def validate(self) -> None:
        for name in ("depth", "dim", "heads", "patch_size", "image_size", "in_chans", "num_classes", "ffn_ratio"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        if self.dim % self.heads:
            raise ConfigError("heads", f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.image_size % self.patch_size:
            raise ConfigError("image_size", f"{self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.head not in HEADS:
            raise ConfigError("head", f"must be one of {HEADS}, got {self.head!r}")
        if self.norm not in ("pre", "post"):
            raise ConfigError("norm", f"must be 'pre' or 'post', got {self.norm!r}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError("activation", f"must be 'relu' or 'gelu', got {self.activation!r}")
        if self.precision not in PRECISIONS:
            raise ConfigError("precision", f"must be one of {tuple(PRECISIONS)}, got {self.precision!r}")
        if self.scheme not in VARIANTS:
            raise ConfigError("scheme", f"must be one of {VARIANTS}, got {self.scheme!r}")
        if self.peg_function not in PEG_FUNCTIONS:
            raise ConfigError("peg_function", f"must be one of {PEG_FUNCTIONS}, got {self.peg_function!r}")
        for name in ("drop_rate", "drop_path"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(name, f"must lie in [0, 1), got {getattr(self, name)}")
        if self.scheme == "sinusoidal1d" and self.dim % 2:
            raise ConfigError("dim", "sinusoidal encoding needs an even dimension")
        if self.scheme == "sincos2d" and self.dim % 4:
            raise ConfigError("dim", "2-D sin-cos encoding needs dim divisible by 4")
        self.encoding.validate(self.depth)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["peg_positions"] = tuple(self.peg_positions)
        return d

    def to_text(self) -> str:
        """Canonical ``key=value`` lines, keys sorted."""
        from .config import format_value

        return "".join(f"{k}={format_value(v)}\n" for k, v in sorted(self.to_dict().items()))

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        from .config import parse_flat

        return cls(**parse_flat(text, cls.field_types()))

    @classmethod
    def field_types(cls) -> dict[str, type]:
        types = {}
        for f in fields(cls):
            types[f.name] = tuple if f.name == "peg_positions" else type(f.default)
        return types


class CPVT:
    """A built model: parameters plus the config that shaped them."""

    def __init__(self, cfg: ModelConfig, patch: nn.LinearParams, cls_token: Tensor | None,
                 enc: EncodingParams, blocks: list[nn.BlockParams], norm: nn.NormParams, head: nn.LinearParams):
        self.cfg = cfg
        self.patch = patch
        self.cls_token = cls_token
        self.enc = enc
        self.blocks = blocks
        self.norm = norm
        self.head = head

    # -- parameters ---------------------------------------------------------
    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = [("patch_embed.weight", self.patch.weight), ("patch_embed.bias", self.patch.bias)]
        if self.cls_token is not None:
            out.append(("cls_token", self.cls_token))
        if self.enc.pos_table is not None:
            out.append(("pos_embed", self.enc.pos_table))
        if self.enc.cls_pos is not None:
            out.append(("pos_embed_cls", self.enc.cls_pos))
        for pos in sorted(self.enc.pegs):
            peg = self.enc.pegs[pos]
            for i, conv in enumerate(peg.convs):
                out.append((f"peg.{pos}.conv{i}.kernel", conv.kernel))
            for i, pw in enumerate(peg.pointwise or []):
                out.append((f"peg.{pos}.pointwise{i}", pw))
        for i, blk in enumerate(self.blocks):
            p = f"blocks.{i}."
            out += [(p + "norm1.gamma", blk.norm1.gamma), (p + "norm1.beta", blk.norm1.beta)]
            for nm in ("q", "k", "v", "o"):
                lin = getattr(blk.attn, nm)
                out += [(p + f"attn.{nm}.weight", lin.weight), (p + f"attn.{nm}.bias", lin.bias)]
            out += [(p + "norm2.gamma", blk.norm2.gamma), (p + "norm2.beta", blk.norm2.beta)]
            out += [(p + "ffn.fc1.weight", blk.ffn.fc1.weight), (p + "ffn.fc1.bias", blk.ffn.fc1.bias),
                    (p + "ffn.fc2.weight", blk.ffn.fc2.weight), (p + "ffn.fc2.bias", blk.ffn.fc2.bias)]
            if self.enc.relative:
                rel = self.enc.relative[i]
                for nm in ("key_row", "key_col", "value_row", "value_col"):
                    t = getattr(rel, nm)
                    if t is not None:
                        out.append((p + f"rel.{nm}", t))
        out += [("norm.gamma", self.norm.gamma), ("norm.beta", self.norm.beta),
                ("head.weight", self.head.weight), ("head.bias", self.head.bias)]
        return out

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def trainable_parameters(self) -> list[Tensor]:
        frozen = self.cfg.freeze_peg
        return [t for n, t in self.named_parameters() if not (frozen and n.startswith("peg."))]

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    # -- forward -----------------------------------------------------------
    def forward_features(self, images, return_attention: bool = False, resize_pe: bool = False):
        """Encoder output tokens ``[B, N', d]`` (after the final norm)."""
        cfg = self.cfg
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=cfg.dtype))
        if x.dtype != cfg.dtype:
            x = Tensor(x.data.astype(cfg.dtype))
        if x.ndim != 4 or x.shape[1] != cfg.in_chans:
            raise ContractError(f"expected images [B, {cfg.in_chans}, H, W], got {x.shape}")
        tokens = nn.patch_embed(x, cfg.patch_size, self.patch)
        if self.cls_token is not None:
            B, _, d = tokens.data.shape
            cls = Tensor(np.zeros((B, 1, d), dtype=cfg.dtype)) + self.cls_token
            tokens = TokenGrid(concat([cls, tokens.data], axis=1), tokens.grid, has_cls=True)
        scheme = cfg.encoding
        tokens = apply_scheme(tokens, scheme, INPUT_PHASE, self.enc, resize=resize_pe)
        records = []
        for i, blk in enumerate(self.blocks):
            lb = vb = None
            if self.enc.relative:
                lb, vb = relative_bias_fns(self.enc.relative[i], tokens.grid, tokens.has_cls, cfg.dtype)
            out, scores = nn.encoder_block(tokens.data, blk, cfg.norm, return_scores=True, logit_bias=lb, value_bias=vb)
            records.append(scores)
            tokens = apply_scheme(tokens.with_data(out), scheme, i, self.enc)
        feats = nn.norm(tokens.data, self.norm)
        out = tokens.with_data(feats)
        return (out, records) if return_attention else out

    def forward(self, images, return_attention: bool = False, resize_pe: bool = False):
        res = self.forward_features(images, return_attention, resize_pe)
        tokens, records = res if return_attention else (res, None)
        if self.cfg.head == "cls":
            pooled = tokens.data[:, 0]
        else:
            pooled = tokens.patches().mean(axis=1)
        logits = nn.linear(pooled, self.head)
        return (logits, records) if return_attention else logits

    __call__ = forward


def build_model(cfg: ModelConfig, seed: int = 0) -> CPVT:
    cfg.validate()
    if cfg.drop_rate or cfg.drop_path:
        log.warning("dropout/stochastic depth rates are recorded but not applied")
    dt = cfg.dtype
    d = cfg.dim
    patch = nn.init_linear(stream(seed, "init/patch_embed"), cfg.in_chans * cfg.patch_size ** 2, d, dt)
    cls_token = None
    if cfg.head == "cls":
        cls_token = Tensor(np.zeros((1, d), dtype=dt), requires_grad=True)
    enc = EncodingParams()
    scheme = cfg.encoding
    if scheme.variant == "learnable":
        hg, wg = cfg.grid
        enc.pos_table = Tensor(trunc_normal(stream(seed, "init/pos_embed"), (hg, wg, d), 0.02, dt), requires_grad=True)
        if cfg.head == "cls":
            enc.cls_pos = Tensor(trunc_normal(stream(seed, "init/pos_embed_cls"), (d,), 0.02, dt), requires_grad=True)
    elif scheme.variant == "peg":
        for pos in scheme.peg.positions:
            enc.pegs[pos] = init_peg(stream(seed, f"init/peg.{pos}"), d, scheme.peg, dt)
    elif scheme.variant == "relative":
        enc.relative = [init_relative(stream(seed, f"init/blocks.{i}.rel"), d // cfg.heads, scheme.rel_clip,
                                      scheme.rel_value_bias, dt) for i in range(cfg.depth)]
    blocks = [nn.init_block(stream(seed, f"init/blocks.{i}"), d, cfg.heads, cfg.ffn_ratio, dt, cfg.activation)
              for i in range(cfg.depth)]
    head = nn.init_linear(stream(seed, "init/head"), d, cfg.num_classes, dt)
    return CPVT(cfg, patch, cls_token, enc, blocks, nn.init_norm(d, dt), head)


def forward(model: CPVT, images, return_attention: bool = False, resize_pe: bool = False):
    return model.forward(images, return_attention=return_attention, resize_pe=resize_pe)


def forward_variable_resolution(model: CPVT, images, resize_pe: bool = False) -> Tensor:
    """Run at whatever grid ``images`` produce, with the build-time parameters.

    PEG, relative, sinusoidal and ``none`` need nothing extra; a learnable table
    must be bicubically resized (``resize_pe=True``) or a
    :class:`ResolutionError` is raised.
    """
    cfg = model.cfg
    H, W = np.shape(images.data if isinstance(images, Tensor) else images)[2:]
    if cfg.scheme == "learnable" and (H // cfg.patch_size, W // cfg.patch_size) != cfg.grid and not resize_pe:
        raise ResolutionError(
            f"learnable position table covers a {cfg.grid[0]}x{cfg.grid[1]} grid; "
            f"{H}x{W} input needs resize_pe=True"
        )
    return model.forward(images, resize_pe=resize_pe)


@dataclass
class AttentionRecord:
    layer: int
    head: int
    sample: int
    scores: np.ndarray  # [N', N'], rows sum to 1
    normalization: str = "softmax"


def attention_scores(model: CPVT, images, layer: int, resize_pe: bool = False) -> list[AttentionRecord]:
    if not 0 <= layer < model.cfg.depth:
        raise ContractError(f"layer {layer} out of range for depth {model.cfg.depth}")
    with no_grad():
        _, records = model.forward(images, return_attention=True, resize_pe=resize_pe)
    arr = records[layer]
    return [AttentionRecord(layer, h, b, arr[b, h]) for b in range(arr.shape[0]) for h in range(arr.shape[1])]


# -- complexity ------------------------------------------------------------------

def peg_param_count(d: int, k: int = 3, layers: int = 1, function: str = "depthwise") -> int:
    if function == "separable":
        return nn.separable_param_count(d, k, layers)
    return d * layers * k * k


def peg_flops(hg: int, wg: int, d: int, k: int = 3, layers: int = 1, function: str = "depthwise") -> int:
    """Multiply-accumulates of one PEG on an ``hg x wg`` grid."""
    macs = hg * wg * d * layers * k * k
    if function == "separable":
        macs += layers * hg * wg * d * d
    return macs


def learnable_pe_param_count(hg: int, wg: int, d: int) -> int:
    return hg * wg * d


def count_params_flops(model: CPVT, image_size: int | None = None) -> dict:
    """Exact parameter counts and analytic MAC counts (1 MAC = 1 FLOP) per group."""
    cfg = model.cfg
    groups: dict[str, int] = {}
    for name, t in model.named_parameters():
        if name.startswith("blocks.") and ".rel." in name:
            key = "relative"
        else:
            key = name.split(".")[0]
        groups[key] = groups.get(key, 0) + t.size
    size = image_size or cfg.image_size
    hg = wg = size // cfg.patch_size
    n = hg * wg
    nt = n + (1 if cfg.head == "cls" else 0)
    d = cfg.dim
    hidden = d * cfg.ffn_ratio
    flops = {
        "patch_embed": n * cfg.in_chans * cfg.patch_size ** 2 * d,
        "blocks": cfg.depth * (4 * nt * d * d + 2 * nt * nt * d + 2 * nt * d * hidden),
        "head": d * cfg.num_classes,
    }
    enc = cfg.encoding
    if enc.variant == "peg":
        flops["peg"] = len(enc.peg.positions) * peg_flops(hg, wg, d, enc.peg.kernel, enc.peg.layers, enc.peg.function)
    if enc.variant == "relative":
        terms = 4 if enc.rel_value_bias else 2
        flops["relative"] = cfg.depth * terms * nt * (2 * enc.rel_clip + 1) * d
    return {
        "params": sum(groups.values()),
        "flops_per_forward": sum(flops.values()),
        "params_by_group": groups,
        "flops_by_group": flops,
    }


def with_overrides(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
