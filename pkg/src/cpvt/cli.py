"""``cpvt`` command line: gen, train, eval, probe, attn, count.

Every option is also a config-file key (``--peg-kernel`` <-> ``peg_kernel``);
flags given on the command line override the ``--config`` file.
Exit status: 0 success, 1 probe failure or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import load_config_file, parse_value
from .errors import CPVTError, ConfigError
from .harness import Dataset, SyntheticTask, TrainRun, evaluate, export_attention, generate_dataset, train
from .model import ModelConfig, build_model, count_params_flops

log = logging.getLogger("cpvt")

# keys that only the CLI knows about
_RUN_KEYS: dict[str, type] = {
    "n_train": int,
    "n_test": int,
    "data": str,
    "out": str,
    "out_dir": str,
    "checkpoint": str,
    "resolution": int,
    "resize_pe": bool,
    "name": str,
    "layer": int,
    "index": int,
    "format": str,
    "preset": str,
}

_DEFAULTS = {"n_train": 1000, "n_test": 500, "layer": 1, "index": 0, "format": "csv", "resize_pe": False}

SUBCOMMANDS = ("gen", "train", "eval", "probe", "attn", "count")


def all_keys() -> dict[str, type]:
    keys: dict[str, type] = {}
    keys.update(ModelConfig.field_types())
    keys.update(SyntheticTask.field_types())
    keys.update(TrainRun.field_types())
    keys.update(_RUN_KEYS)
    return keys


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(2, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cpvt", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}")
    keys = all_keys()
    for cmd in SUBCOMMANDS:
        p = sub.add_parser(cmd)
        p.add_argument("--config", help="flat key=value file")
        for key, typ in sorted(keys.items()):
            # values are parsed later so file and flag share one parser
            p.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar=typ.__name__.upper())
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, config file and explicit flags into one typed dict."""
    keys = all_keys()
    values = dict(_DEFAULTS)
    if args.config:
        values.update(load_config_file(args.config, keys))
    for key, typ in keys.items():
        raw = getattr(args, key, None)
        if raw is not None:
            values[key] = parse_value(key, raw, typ)
    return values


def _pick(cls, values: dict, base=None):
    names = {f.name for f in dataclasses.fields(cls)}
    chosen = {k: v for k, v in values.items() if k in names}
    return dataclasses.replace(base, **chosen) if base is not None else cls(**chosen)


def model_config(values: dict) -> ModelConfig:
    base = ModelConfig.preset(values["preset"]) if values.get("preset") else ModelConfig()
    cfg = _pick(ModelConfig, values, base)
    cfg.validate()
    return cfg


def task_config(values: dict) -> SyntheticTask:
    task = _pick(SyntheticTask, values)
    task.validate()
    return task


def _need(values: dict, key: str):
    if not values.get(key):
        raise ConfigError(key, "is required for this command")
    return values[key]


def _dataset(values: dict) -> Dataset:
    if values.get("data"):
        return Dataset.load(values["data"])
    return generate_dataset(task_config(values), values["n_train"], values["n_test"])


def cmd_gen(values: dict) -> int:
    data = generate_dataset(task_config(values), values["n_train"], values["n_test"])
    out = Path(_need(values, "out"))
    data.save(out)
    print(f"wrote {out} train={len(data.train_y)} test={len(data.test_y)}")
    return 0


_SHARED = ("image_size", "patch_size", "in_chans", "num_classes")


def cmd_train(values: dict) -> int:
    data = _dataset(values)
    # geometry not given explicitly follows the dataset
    merged = {k: getattr(data.task, k) for k in _SHARED}
    merged.update(values)
    cfg = model_config(merged)
    hyper = {k: values[k] for k in TrainRun.HYPER if k in values}
    run = TrainRun(cfg, out_dir=values.get("out_dir") or "", **hyper)
    result = train(run, data)
    for line in result.metrics:
        print(line)
    if values.get("checkpoint"):
        save_checkpoint(result.model, values["checkpoint"])
    return 0


def cmd_eval(values: dict) -> int:
    model = load_checkpoint(_need(values, "checkpoint"))
    data = _dataset(values)
    acc = evaluate(model, data.test_x, data.test_y, values.get("resolution"), values["resize_pe"])
    print(f"test_acc={acc:.6f}")
    return 0


def cmd_probe(values: dict) -> int:
    from .verify import PROBES, run_probe

    name = _need(values, "name")
    if name not in PROBES:
        raise ConfigError("name", f"unknown probe {name!r}; choose from {sorted(PROBES)}")
    report = run_probe(name, values.get("seed", 0))
    print(report.to_line())
    return 0 if report.passed else 1


def cmd_attn(values: dict) -> int:
    model = load_checkpoint(_need(values, "checkpoint"))
    data = _dataset(values)
    image = data.test_x[values["index"]]
    out = export_attention(model, image, values["layer"], _need(values, "out_dir"), values["format"])
    for path, frac in zip(out["paths"], out["near_uniform_rows"]):
        print(f"{path} near_uniform_rows={frac:.6f}")
    return 0


def cmd_count(values: dict) -> int:
    if values.get("checkpoint"):
        model = load_checkpoint(values["checkpoint"])
    else:
        model = build_model(model_config(values))
    stats = count_params_flops(model, values.get("image_size"))
    print(f"params={stats['params']}")
    print(f"flops_per_forward={stats['flops_per_forward']}")
    for group, n in stats["params_by_group"].items():
        print(f"params.{group}={n}")
    for group, n in stats["flops_by_group"].items():
        print(f"flops.{group}={n}")
    groups = stats["params_by_group"]
    if "peg" in groups:
        print(f"PEG={groups['peg']}")
    if "pos_embed" in groups:
        print(f"PE={groups['pos_embed']}")
    return 0


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe, "attn": cmd_attn,
            "count": cmd_count}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        values = resolve(args)
        return COMMANDS[args.command](values)
    except ConfigError as exc:
        print(f"cpvt {args.command}: config error: {exc}", file=sys.stderr)
        return 2
    except (CPVTError, OSError) as exc:
        print(f"cpvt {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
