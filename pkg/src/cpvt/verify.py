"""Independent oracles and behavioural probes.

Each probe returns a :class:`ProbeReport`, deterministic for a given seed and
printable as a single ``key=value`` line.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import nn
from .errors import ContractError, DivergenceError
from .grid import TokenGrid, grid_coords, image_to_tokens, tokens_to_image
from .harness import SyntheticTask, generate_dataset, TrainRun, train
from .model import CPVT, ModelConfig
from .posenc import PEGParams, PEGSpec, init_peg, peg_forward, peg_transform
from .rng import stream
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Tolerances:
    oracle: float = 1e-12  # float64 oracle equality
    layer: float = 1e-6  # float64 layer-level invariances
    model: float = 1e-5  # model-level invariances, float32 accumulation
    grad: float = 1e-4  # finite-difference relative error
    fd_eps: float = 1e-5
    perm_variance: float = 1e-3  # a PEG must move some permuted output by more than this
    leakage_gap: float = 0.2  # R2(zero) - R2(circular)
    ridge: float = 1e-6
    fixed_peg_margin: float = 0.02


TOL = Tolerances()


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


@dataclass
class ProbeReport:
    name: str
    passed: bool
    metrics: dict = field(default_factory=dict)
    tolerance: float | None = None
    seed: int = 0

    def to_line(self) -> str:
        parts = [f"probe={self.name}", f"status={'pass' if self.passed else 'fail'}", f"seed={self.seed}"]
        if self.tolerance is not None:
            parts.append(f"tol={self.tolerance:g}")
        parts += [f"{k}={_fmt(v)}" for k, v in self.metrics.items()]
        return " ".join(parts)

    __str__ = to_line


# -- convolution expansion oracle ---------------------------------------------------

def conv_expansion_oracle(x, w, k: int) -> np.ndarray:
    """``y[m] = x[m] + sum_ij x[m + (i, j) - k//2] * w[i, j]``, out-of-range reads are zero.

    ``x`` is ``[1, 1, H, W]``, ``w`` is ``[k, k]``. Written as plain loops over
    Python floats so it shares nothing with the vectorised convolution.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    w = np.asarray(w.data if isinstance(w, Tensor) else w, dtype=np.float64).reshape(k, k)
    if x.ndim != 4 or x.shape[:2] != (1, 1):
        raise ContractError(f"oracle is single-channel: expected [1, 1, H, W], got {x.shape}")
    H, W = x.shape[2:]
    img = x[0, 0].tolist()
    ker = w.tolist()
    half = k // 2
    out = [[0.0] * W for _ in range(H)]
    for r in range(H):
        for c in range(W):
            acc = 0.0
            for i in range(k):
                for j in range(k):
                    rr, cc = r + i - half, c + j - half
                    if 0 <= rr < H and 0 <= cc < W:
                        acc += img[rr][cc] * ker[i][j]
            out[r][c] = img[r][c] + acc
    return np.array(out, dtype=np.float64).reshape(1, 1, H, W)


def conv_expansion_probe(seed: int = 0, trials: int = 50, kernels: Sequence[int] = (1, 3, 5),
                         max_grid: int = 8) -> ProbeReport:
    """Compare a one-layer zero-padded PEG with the loop oracle on random grids."""
    gen = stream(seed, "probe/conv_expansion")
    worst = 0.0
    for t in range(trials):
        k = kernels[t % len(kernels)]
        H, W = (int(v) for v in gen.integers(1, max_grid + 1, size=2))
        x = gen.standard_normal((1, 1, H, W))
        w = gen.standard_normal((k, k))
        peg = PEGParams(PEGSpec(kernel=k), [nn.DepthwiseConvParams(Tensor(w[None].copy()), "zero")])
        tokens = TokenGrid(image_to_tokens(Tensor(x)), (H, W))
        with no_grad():
            got = tokens_to_image(peg_forward(tokens, peg).data, (H, W)).data
        worst = max(worst, float(np.max(np.abs(got - conv_expansion_oracle(x, w, k)))))
    return ProbeReport("conv_expansion", worst <= TOL.oracle, {"trials": trials, "max_abs_dev": worst},
                       TOL.oracle, seed)


# -- translation ----------------------------------------------------------------------

def _peg_reach(peg: PEGParams) -> int:
    return sum(c.k // 2 for c in peg.convs)


def _with_padding(peg: PEGParams, mode: str) -> PEGParams:
    spec = replace(peg.spec, padding=mode)
    return PEGParams(spec, [nn.DepthwiseConvParams(c.kernel, mode) for c in peg.convs], peg.pointwise)


def _shift(a: np.ndarray, shift: tuple[int, int]) -> np.ndarray:
    return np.roll(a, shift, axis=(-2, -1))


def translation_probe(target, shift: tuple[int, int], padding_mode: str | None = None, seed: int = 0,
                      grid: tuple[int, int] = (8, 8), dim: int = 8, batch: int = 2,
                      margin: int | None = None, border_content: bool = False) -> ProbeReport:
    """Max deviation between ``T(shift(x))`` and ``shift(T(x))``.

    ``target`` is a :class:`PEGParams` layer or a :class:`CPVT` model. For a
    layer, ``padding_mode`` re-runs the same kernels under that padding. For a
    model, the check is on logits under a patch-aligned cyclic image shift,
    which is exact only for circular padding with average pooling.

    Under zero padding the input is confined to the interior with ``margin``
    empty tokens on every side; a margin smaller than ``|shift| + reach`` is a
    contract violation. ``border_content=True`` drops the margin on purpose: the
    deviation is then reported but not judged.
    """
    gen = stream(seed, "probe/translation")
    shift = (int(shift[0]), int(shift[1]))
    if isinstance(target, CPVT):
        return _model_translation(target, shift, padding_mode, gen, batch, seed)
    peg = target if padding_mode is None else _with_padding(target, padding_mode)
    mode = peg.spec.padding
    Hg, Wg = grid
    dim = peg.convs[0].channels
    x = gen.standard_normal((batch, dim, Hg, Wg))
    judged = True
    metrics: dict = {"layer": "peg", "padding": mode, "shift": shift}
    if mode == "zero":
        need = max(abs(shift[0]), abs(shift[1])) + _peg_reach(peg)
        if border_content:
            judged = False
        else:
            margin = need if margin is None else margin
            if margin < need:
                raise ContractError(f"margin {margin} is below |shift| + reach = {need} for zero padding")
            if 2 * margin >= min(Hg, Wg):
                raise ContractError(f"margin {margin} leaves no interior on a {Hg}x{Wg} grid")
            x[:, :, :margin] = 0
            x[:, :, Hg - margin:] = 0
            x[:, :, :, :margin] = 0
            x[:, :, :, Wg - margin:] = 0
            metrics["margin"] = margin
    elif mode == "none":
        judged = False

    def run(a):
        with no_grad():
            img = Tensor(a)
            return (img + peg_transform(img, peg)).data

    dev = float(np.max(np.abs(run(_shift(x, shift)) - _shift(run(x), shift))))
    metrics["max_abs_dev"] = dev
    if not judged:
        metrics["informational"] = True
        return ProbeReport("translation", True, metrics, None, seed)
    return ProbeReport("translation", dev <= TOL.layer, metrics, TOL.layer, seed)


def _model_translation(model: CPVT, shift, padding_mode, gen, batch, seed) -> ProbeReport:
    cfg = model.cfg
    if padding_mode is not None and cfg.scheme == "peg" and padding_mode != cfg.peg_padding:
        raise ContractError(f"model uses {cfg.peg_padding!r} padding, probe asked for {padding_mode!r}")
    x = gen.standard_normal((batch, cfg.in_chans, cfg.image_size, cfg.image_size)).astype(cfg.dtype)
    px = (shift[0] * cfg.patch_size, shift[1] * cfg.patch_size)
    with no_grad():
        a = model(_shift(x, px)).data
        b = model(x).data
    dev = float(np.max(np.abs(a - b)))
    exact = cfg.head == "gap" and (cfg.scheme == "none" or (cfg.scheme == "peg" and cfg.peg_padding == "circular"))
    metrics = {"layer": "model", "head": cfg.head, "scheme": cfg.scheme, "shift": shift, "max_abs_dev": dev}
    if not exact:
        metrics["informational"] = True
        return ProbeReport("translation", True, metrics, None, seed)
    return ProbeReport("translation", dev <= TOL.model, metrics, TOL.model, seed)


# -- permutation ----------------------------------------------------------------------

@dataclass
class TokenStack:
    """Encoder blocks on patch tokens (no class token), optionally with PEGs after given blocks."""

    blocks: list[nn.BlockParams]
    grid: tuple[int, int]
    pegs: dict[int, PEGParams] = field(default_factory=dict)
    norm_placement: str = "pre"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        tokens = TokenGrid(Tensor(x), self.grid)
        with no_grad():
            if -1 in self.pegs:
                tokens = peg_forward(tokens, self.pegs[-1])
            for i, blk in enumerate(self.blocks):
                tokens = tokens.with_data(nn.encoder_block(tokens.data, blk, self.norm_placement))
                if i in self.pegs:
                    tokens = peg_forward(tokens, self.pegs[i])
        return tokens.data.data

    @property
    def dim(self) -> int:
        return self.blocks[0].attn.dim


def build_stack(seed: int = 0, depth: int = 2, dim: int = 16, heads: int = 2, grid: tuple[int, int] = (4, 4),
                peg: PEGSpec | None = None, dtype=np.float64) -> TokenStack:
    blocks = [nn.init_block(stream(seed, f"stack/blocks.{i}"), dim, heads, 4, dtype) for i in range(depth)]
    pegs = {}
    if peg is not None:
        pegs = {p: init_peg(stream(seed, f"stack/peg.{p}"), dim, peg, dtype) for p in peg.positions}
    return TokenStack(blocks, grid, pegs)


def permutation_probe(stack: TokenStack, trials: int = 20, seed: int = 0,
                      permutations: Sequence[np.ndarray] | None = None) -> ProbeReport:
    """Compare ``stack(x[:, perm])`` with ``stack(x)[:, perm]`` over random token permutations.

    A stack without PEGs passes when every trial agrees within the model
    tolerance; a PEG stack passes when some trial differs by more than
    ``TOL.perm_variance``.
    """
    if permutations is None and trials < 20:
        raise ContractError(f"permutation probe needs at least 20 trials, got {trials}")
    gen = stream(seed, "probe/permutation")
    N = stack.grid[0] * stack.grid[1]
    perms = list(permutations) if permutations is not None else [gen.permutation(N) for _ in range(trials)]
    devs = []
    for perm in perms:
        x = gen.standard_normal((2, N, stack.dim))
        devs.append(float(np.max(np.abs(stack(x[:, perm]) - stack(x)[:, perm]))))
    has_peg = bool(stack.pegs)
    if has_peg:
        passed = any(d > TOL.perm_variance for d in devs)
        tol = TOL.perm_variance
    else:
        passed = all(d <= TOL.model for d in devs)
        tol = TOL.model
    metrics = {"stack": "peg" if has_peg else "plain", "trials": len(perms), "max_abs_dev": max(devs),
               "min_abs_dev": min(devs)}
    return ProbeReport("permutation", passed, metrics, tol, seed)


# -- zero-padding position leakage -------------------------------------------------------

def peg_features(seed: int, padding_mode: str, grid: tuple[int, int] = (14, 14), dim: int = 64, stack: int = 3,
                 images: int = 64, constant: bool = False) -> np.ndarray:
    """Encodings ``out - in`` of a fixed random PEG stack, ``[images, N, dim]``.

    Kernels depend only on ``seed``, so the padding modes are compared on the
    same weights. Inputs are uniform in [0, 1] (or all 0.5 with ``constant``).
    """
    Hg, Wg = grid
    gen = stream(seed, "probe/leakage/kernels")
    spec = PEGSpec(padding=padding_mode)
    pegs = [init_peg(gen, dim, spec, np.float64) for _ in range(stack)]
    if constant:
        x = np.full((images, Hg * Wg, dim), 0.5)
    else:
        x = stream(seed, "probe/leakage/images").uniform(0.0, 1.0, size=(images, Hg * Wg, dim))
    tokens = TokenGrid(Tensor(x), grid)
    with no_grad():
        for peg in pegs:
            tokens = peg_forward(tokens, peg)
    return tokens.data.data - x


def readout_r2(features: np.ndarray, grid: tuple[int, int], ridge: float = TOL.ridge) -> float:
    """Held-out R2 of a linear map from token features to normalised (row, col).

    The first half of the images fits the readout, the second half scores it.
    R2 is averaged over the two coordinates.
    """
    Hg, Wg = grid
    if Hg < 2 or Wg < 2:
        raise ContractError(f"a {Hg}x{Wg} grid has no position to predict")
    n, N, d = features.shape
    if n < 2:
        raise ContractError("need at least two images for a held-out split")
    target = grid_coords(grid) / np.array([Hg - 1, Wg - 1], dtype=np.float64)
    half = n // 2

    def design(f):
        flat = f.reshape(-1, d)
        return np.concatenate([flat, np.ones((len(flat), 1))], axis=1)

    A = design(features[:half])
    Y = np.tile(target, (half, 1))
    W = np.linalg.solve(A.T @ A + ridge * np.eye(A.shape[1]), A.T @ Y)
    pred = design(features[half:]) @ W
    truth = np.tile(target, (n - half, 1))
    ss_res = ((pred - truth) ** 2).sum(axis=0)
    ss_tot = ((truth - truth.mean(axis=0)) ** 2).sum(axis=0)
    return float(np.mean(1.0 - ss_res / ss_tot))


def position_leakage_probe(seed: int = 0, grid: tuple[int, int] = (14, 14), dim: int = 64, stack: int = 3,
                           images: int = 64) -> ProbeReport:
    """Readout R2 of token coordinates from PEG encodings, zero vs circular padding."""
    metrics: dict = {"grid": grid, "dim": dim, "stack": stack, "features": "peg_encoding"}
    if grid[0] < 2 or grid[1] < 2:
        metrics["rejected"] = "degenerate_grid"
        return ProbeReport("position_leakage", False, metrics, TOL.leakage_gap, seed)
    r2 = {mode: readout_r2(peg_features(seed, mode, grid, dim, stack, images), grid)
          for mode in ("zero", "circular")}
    gap = r2["zero"] - r2["circular"]
    metrics.update(r2_zero=r2["zero"], r2_circular=r2["circular"], gap=gap)
    return ProbeReport("position_leakage", gap >= TOL.leakage_gap, metrics, TOL.leakage_gap, seed)


# -- desk-scale training comparisons --------------------------------------------------------

SHIFTED_TASK = SyntheticTask(placement="center-only", test_placement="uniform-random")
TOY_MODEL = ModelConfig(depth=2, dim=32, heads=2, patch_size=8, image_size=64, in_chans=1, num_classes=4)

VARIANTS: dict[str, dict] = {
    "peg_gap": dict(scheme="peg", head="gap"),
    "learnable_cls": dict(scheme="learnable", head="cls"),
    "fixed_peg_gap": dict(scheme="peg", head="gap", freeze_peg=True),
    "none_gap": dict(scheme="none", head="gap"),
    "none_cls": dict(scheme="none", head="cls"),
}


def train_variant(variant: str, seed: int, task: SyntheticTask = SHIFTED_TASK, base: ModelConfig = TOY_MODEL,
                  n_train: int = 1000, n_test: int = 500, epochs: int = 10, lr: float = 1e-3) -> dict:
    """Train one toy model; data and init both follow ``seed``.

    A diverging run is retried once at half the learning rate.
    """
    task = replace(task, data_seed=seed, image_size=base.image_size, patch_size=base.patch_size,
                   in_chans=base.in_chans, num_classes=base.num_classes)
    data = generate_dataset(task, n_train, n_test)
    cfg = replace(base, **VARIANTS[variant])
    for attempt, rate in enumerate((lr, lr / 2)):
        try:
            res = train(TrainRun(cfg, lr=rate, epochs=epochs, seed=seed), data)
            return {"acc": res.test_acc, "lr": rate, "retried": attempt > 0}
        except DivergenceError:
            log.warning("%s seed %d diverged at lr %g", variant, seed, rate)
    return {"acc": float("nan"), "lr": lr / 2, "retried": True, "diverged": True}


def train_variants(variants: Sequence[str], seeds: Sequence[int], **kw) -> dict[str, list[dict]]:
    return {v: [train_variant(v, s, **kw) for s in seeds] for v in variants}


def _mean_acc(runs: list[dict]) -> float:
    return float(np.mean([r["acc"] for r in runs]))


def fixed_peg_comparison(task: SyntheticTask = SHIFTED_TASK, seeds: Sequence[int] = (0, 1, 2),
                         results: dict[str, list[dict]] | None = None, **kw) -> ProbeReport:
    """No PE vs frozen random PEG vs trained PEG, all with average pooling."""
    if len(seeds) < 3:
        raise ContractError(f"need at least 3 seeds, got {len(seeds)}")
    needed = ("none_gap", "fixed_peg_gap", "peg_gap")
    results = dict(results or {})
    missing = [v for v in needed if v not in results]
    results.update(train_variants(missing, seeds, task=task, **kw))
    acc = {v: _mean_acc(results[v]) for v in needed}
    passed = acc["fixed_peg_gap"] > acc["none_gap"] and acc["peg_gap"] >= acc["fixed_peg_gap"] - TOL.fixed_peg_margin
    metrics = {f"acc_{v}": a for v, a in acc.items()}
    metrics["per_seed_fixed"] = [r["acc"] for r in results["fixed_peg_gap"]]
    metrics["seeds"] = list(seeds)
    return ProbeReport("fixed_peg", bool(passed), metrics, TOL.fixed_peg_margin, seeds[0])


def training_ordering(seeds: Sequence[int] = (0, 1, 2), results: dict[str, list[dict]] | None = None,
                      **kw) -> ProbeReport:
    """Shifted-test ordering: peg+gap >= learnable+cls and fixed PEG beats no PE by the margin."""
    needed = ("peg_gap", "learnable_cls", "fixed_peg_gap", "none_gap", "none_cls")
    results = dict(results or {})
    missing = [v for v in needed if v not in results]
    results.update(train_variants(missing, seeds, **kw))
    acc = {v: _mean_acc(results[v]) for v in needed}
    first = acc["peg_gap"] >= acc["learnable_cls"]
    second = acc["fixed_peg_gap"] - acc["none_gap"] >= TOL.fixed_peg_margin
    metrics = {f"acc_{v}": a for v, a in acc.items()}
    metrics["learnable_cls_ge_none_cls"] = acc["learnable_cls"] >= acc["none_cls"]
    metrics["seeds"] = list(seeds)
    return ProbeReport("training_ordering", bool(first and second), metrics, TOL.fixed_peg_margin, seeds[0])


# -- registry ---------------------------------------------------------------------------------

def _translation_suite(seed: int) -> ProbeReport:
    peg = init_peg(stream(seed, "probe/translation/peg"), 8, PEGSpec(layers=2), np.float64)
    worst_c = max(translation_probe(peg, (dr, dc), "circular", seed=seed).metrics["max_abs_dev"]
                  for dr in range(8) for dc in range(8))
    zero = [translation_probe(peg, s, "zero", seed=seed, grid=(10, 10)) for s in ((0, 0), (1, 0), (-1, 2), (2, -2))]
    worst_z = max(r.metrics["max_abs_dev"] for r in zero)
    passed = worst_c <= TOL.layer and all(r.passed for r in zero)
    return ProbeReport("translation", passed, {"circular_max_abs_dev": worst_c, "zero_margin_max_abs_dev": worst_z},
                       TOL.layer, seed)


def _permutation_suite(seed: int) -> ProbeReport:
    plain = permutation_probe(build_stack(seed), 20, seed)
    with_peg = permutation_probe(build_stack(seed, peg=PEGSpec(positions=(0,))), 20, seed)
    return ProbeReport("permutation", plain.passed and with_peg.passed,
                       {"plain_max_abs_dev": plain.metrics["max_abs_dev"],
                        "peg_max_abs_dev": with_peg.metrics["max_abs_dev"]}, None, seed)


PROBES: dict[str, Callable[[int], ProbeReport]] = {
    "conv_expansion": lambda seed: conv_expansion_probe(seed),
    "translation": _translation_suite,
    "permutation": _permutation_suite,
    "position_leakage": lambda seed: position_leakage_probe(seed),
    "fixed_peg": lambda seed: fixed_peg_comparison(seeds=(seed, seed + 1, seed + 2)),
}


def run_probe(name: str, seed: int = 0) -> ProbeReport:
    if name not in PROBES:
        raise ContractError(f"unknown probe {name!r}; choose from {sorted(PROBES)}")
    return PROBES[name](seed)
