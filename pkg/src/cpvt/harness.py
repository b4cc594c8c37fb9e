"""Synthetic classification task, toy training loop, evaluation and attention export.

The task places one class template on an empty canvas. Templates are built
from a shared set of patch-sized tiles; with ``bank="arrangement"`` every class
uses the same tiles in a different spatial arrangement, so a model that sees
patch tokens as an unordered set cannot beat chance.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import dump_flat
from .errors import ConfigError, ContractError, DivergenceError
from .model import CPVT, ModelConfig, attention_scores, build_model
from .nn import AdamWState, adamw_step
from .rng import stream
from .tensor import backward, cross_entropy, no_grad

log = logging.getLogger(__name__)

PLACEMENTS = ("uniform-random", "center-only")


@dataclass(frozen=True)
class SyntheticTask:
    image_size: int = 64
    patch_size: int = 8
    in_chans: int = 1
    num_classes: int = 4
    pattern_size: int = 16
    placement: str = "uniform-random"
    test_placement: str = ""  # empty: same as placement
    bank: str = "arrangement"
    noise_std: float = 0.1
    data_seed: int = 0

    def validate(self) -> None:
        S, P, H = self.patch_size, self.pattern_size, self.image_size
        if P > H:
            raise ConfigError("pattern_size", f"pattern {P} is larger than image {H}")
        if H - P < 2 * S:
            raise ConfigError("pattern_size", f"pattern {P} leaves less than 2*patch_size={2 * S} of slack in {H}")
        if P % S or H % S:
            raise ConfigError("pattern_size", f"pattern {P} and image {H} must be multiples of patch_size {S}")
        for name in ("placement", "test_placement"):
            value = getattr(self, name)
            if value and value not in PLACEMENTS:
                raise ConfigError(name, f"must be one of {PLACEMENTS}, got {value!r}")
        if self.bank not in ("arrangement", "random"):
            raise ConfigError("bank", f"must be 'arrangement' or 'random', got {self.bank!r}")
        tiles = (P // S) ** 2
        if self.bank == "arrangement" and self.num_classes > math.factorial(min(tiles, 10)):
            raise ConfigError("num_classes", f"{tiles} tiles admit fewer than {self.num_classes} arrangements")
        if self.num_classes < 1:
            raise ConfigError("num_classes", "must be >= 1")
        if self.noise_std < 0:
            raise ConfigError("noise_std", "must be >= 0")

    @property
    def eval_placement(self) -> str:
        return self.test_placement or self.placement

    def pattern_bank(self) -> np.ndarray:
        """``[num_classes, C, P, P]`` templates, identical for every image size."""
        S, P, C = self.patch_size, self.pattern_size, self.in_chans
        t = P // S
        if self.bank == "random":
            gen = stream(self.data_seed, "task/bank")
            return gen.choice([-1.0, 1.0], size=(self.num_classes, C, P, P))
        tiles = stream(self.data_seed, "task/tiles").choice([-1.0, 1.0], size=(t * t, C, S, S))
        gen = stream(self.data_seed, "task/arrangements")
        if t * t <= 8:
            perms = list(itertools.permutations(range(t * t)))
            chosen = [perms[i] for i in gen.choice(len(perms), size=self.num_classes, replace=False)]
        else:
            seen: dict[tuple, None] = {}
            while len(seen) < self.num_classes:
                seen.setdefault(tuple(gen.permutation(t * t)), None)
            chosen = list(seen)
        bank = np.zeros((self.num_classes, C, P, P))
        for k, perm in enumerate(chosen):
            for slot, tile in enumerate(perm):
                r, c = divmod(slot, t)
                bank[k, :, r * S:(r + 1) * S, c * S:(c + 1) * S] = tiles[tile]
        return bank

    def offsets(self, policy: str) -> list[int]:
        """Top-left pixel offsets allowed along one axis."""
        S, P, H = self.patch_size, self.pattern_size, self.image_size
        center = (H - P) // 2
        if policy == "center-only":
            return [center]
        lattice = list(range(S, H - P - S + 1, S))
        return lattice or [center]

    def sample(self, n: int, split: str, policy: str | None = None, image_size: int | None = None):
        task = self if image_size is None else replace(self, image_size=image_size)
        policy = policy or (self.placement if split == "train" else self.eval_placement)
        bank = self.pattern_bank()
        gen = stream(self.data_seed, f"task/{split}")
        labels = gen.integers(0, self.num_classes, size=n)
        offs = task.offsets(policy)
        rows = gen.choice(offs, size=n)
        cols = gen.choice(offs, size=n)
        H, P = task.image_size, self.pattern_size
        images = np.zeros((n, self.in_chans, H, H))
        for i in range(n):
            images[i, :, rows[i]:rows[i] + P, cols[i]:cols[i] + P] = bank[labels[i]]
        if self.noise_std > 0:
            images += self.noise_std * gen.standard_normal(images.shape)
        return images.astype(np.float32), labels.astype(np.int64)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {f.name: type(f.default) for f in fields(cls)}


@dataclass
class Dataset:
    task: SyntheticTask
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(fh, train_x=self.train_x, train_y=self.train_y, test_x=self.test_x, test_y=self.test_y,
                     task=np.array(dump_flat(asdict(self.task))))
        return path

    @classmethod
    def load(cls, path) -> "Dataset":
        from .config import parse_flat

        with np.load(path) as z:
            task = SyntheticTask(**parse_flat(str(z["task"]), SyntheticTask.field_types()))
            return cls(task, z["train_x"], z["train_y"], z["test_x"], z["test_y"])


def generate_dataset(task: SyntheticTask, n_train: int, n_test: int) -> Dataset:
    task.validate()
    train_x, train_y = task.sample(n_train, "train")
    test_x, test_y = task.sample(n_test, "test")
    return Dataset(task, train_x, train_y, test_x, test_y)


def pad_canvas(images: np.ndarray, size: int, patch: int) -> np.ndarray:
    """Embed images in a larger empty canvas, keeping the patch lattice aligned."""
    H = images.shape[-1]
    if size < H or size % patch:
        raise ContractError(f"cannot pad {H} to {size} with patch size {patch}")
    lo = ((size - H) // 2 // patch) * patch
    out = np.zeros(images.shape[:-2] + (size, size), dtype=images.dtype)
    out[..., lo:lo + H, lo:lo + H] = images
    return out


# -- training -------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainRun:
    model: ModelConfig = field(default_factory=ModelConfig)
    lr: float = 1e-3
    min_lr: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    warmup_steps: int = 20
    epochs: int = 10
    batch_size: int = 50
    seed: int = 0
    label_smoothing: float = 0.0
    out_dir: str = ""

    HYPER = ("lr", "min_lr", "weight_decay", "beta1", "beta2", "warmup_steps", "epochs", "batch_size", "seed",
             "label_smoothing")

    def to_text(self) -> str:
        values = {k: getattr(self, k) for k in self.HYPER}
        return self.model.to_text() + dump_flat(values)

    @classmethod
    def field_types(cls) -> dict[str, type]:
        return {k: type(getattr(cls, k)) for k in cls.HYPER}


def lr_at(run: TrainRun, step: int, total: int) -> float:
    """Linear warmup to ``lr`` then cosine decay to ``min_lr``."""
    if run.warmup_steps and step < run.warmup_steps:
        return run.lr * (step + 1) / run.warmup_steps
    span = max(1, total - run.warmup_steps)
    progress = min(1.0, (step - run.warmup_steps) / span)
    floor = min(run.min_lr, run.lr)
    return floor + 0.5 * (run.lr - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    model: CPVT
    metrics: list[str]
    test_acc: float


def train(run: TrainRun, data: Dataset, model: CPVT | None = None) -> TrainResult:
    """Train with AdamW on ``data``; one metrics line per epoch.

    When ``run.out_dir`` is set the run config, metrics log and a checkpoint
    (rewritten after every finished epoch) are stored there. A non-finite loss
    raises :class:`DivergenceError` and leaves the last good checkpoint.
    """
    if len(data.train_y) == 0:
        raise ContractError("training set is empty")
    model = model or build_model(run.model, seed=run.seed)
    params = model.trainable_parameters()
    state = AdamWState.for_params(params)
    n = len(data.train_y)
    steps_per_epoch = math.ceil(n / run.batch_size)
    total = steps_per_epoch * run.epochs
    out = Path(run.out_dir) if run.out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "run.cfg").write_text(run.to_text())
        (out / "metrics.log").write_text("")
    metrics: list[str] = []
    acc = float("nan")
    step = 0
    for epoch in range(run.epochs):
        order = stream(run.seed, f"train/shuffle/{epoch}").permutation(n)
        total_loss = 0.0
        for b in range(steps_per_epoch):
            idx = order[b * run.batch_size:(b + 1) * run.batch_size]
            for p in params:
                p.grad = None
            loss = cross_entropy(model(data.train_x[idx]), data.train_y[idx], run.label_smoothing)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
            total_loss += value * len(idx)
            lr = lr_at(run, step, total)
            if lr > 0:
                backward(loss)
                adamw_step(params, [p.grad for p in params], state, lr, run.weight_decay, (run.beta1, run.beta2))
            step += 1
        acc = evaluate(model, data.test_x, data.test_y)
        line = f"epoch={epoch} loss={total_loss / n:.6f} test_acc={acc:.6f}"
        metrics.append(line)
        log.info(line)
        if out is not None:
            with open(out / "metrics.log", "a") as fh:
                fh.write(line + "\n")
            save_checkpoint(model, out / "checkpoint.cpvt")
    return TrainResult(model, metrics, acc)


def predict(model: CPVT, images: np.ndarray, batch_size: int = 200, resize_pe: bool = False) -> np.ndarray:
    preds = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits = model.forward(images[i:i + batch_size], resize_pe=resize_pe)
            preds.append(np.argmax(logits.data, axis=1))
    return np.concatenate(preds)


def evaluate(model, images: np.ndarray, labels: np.ndarray, resolution: int | None = None,
             resize_pe: bool = False) -> float:
    """Top-1 accuracy. ``resolution`` embeds the images in a larger empty canvas first."""
    if isinstance(model, (str, Path)):
        model = load_checkpoint(model)
    if len(labels) == 0:
        raise ContractError("cannot evaluate on an empty dataset")
    if resolution is not None and resolution != images.shape[-1]:
        images = pad_canvas(images, resolution, model.cfg.patch_size)
    return float(np.mean(predict(model, images, resize_pe=resize_pe) == labels))


# -- attention export -------------------------------------------------------------------

def export_attention(model: CPVT, image: np.ndarray, layer: int, out_dir, fmt: str = "csv") -> dict:
    """Write one ``attn_L{layer}_H{head}.{fmt}`` file per head for a single image.

    Returns the written paths and, per head, the fraction of rows whose largest
    entry is below ``4 / N`` (near-uniform attention).
    """
    if fmt not in ("csv", "pgm"):
        raise ConfigError("format", f"must be 'csv' or 'pgm', got {fmt!r}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc}") from exc
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    records = [r for r in attention_scores(model, image, layer) if r.sample == 0]
    paths, uniform = [], []
    for rec in records:
        s = rec.scores
        n = s.shape[0]
        path = out / f"attn_L{layer}_H{rec.head}.{fmt}"
        if fmt == "csv":
            np.savetxt(path, s, delimiter=",", fmt="%.17g")
        else:
            scaled = np.rint(255.0 * s / s.max(axis=1, keepdims=True)).astype(np.uint8)
            path.write_bytes(f"P5\n{n} {n}\n255\n".encode("ascii") + scaled.tobytes())
        paths.append(path)
        uniform.append(float(np.mean(s.max(axis=1) < 4.0 / n)))
    return {"paths": paths, "near_uniform_rows": uniform}


def read_pgm(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != b"P5":
        raise ContractError(f"{path} is not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    data = np.frombuffer(blob[pos + 1:], dtype=np.uint8)
    if maxval != 255 or data.size != w * h:
        raise ContractError(f"{path}: malformed PGM payload")
    return data.reshape(h, w)
