"""Command-line entry point: ``oadn {gen-data,train,eval,ablate,gradcheck}``.

Every option can also come from a ``key = value`` file given with
``--config``; flags on the command line win over the file, and the file wins
over built-in defaults.  Outputs land under ``--out`` or, when that is
absent, under the output root (``--out-root``, else ``$OADN_OUT_ROOT``,
else ``./runs``).  Each command writes the fully resolved configuration
next to its outputs as ``<command>.config.txt``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import __version__
from .kv import KVError, read_kv, write_kv
from .model import BackboneConfig, ConfigError, ModelConfig, load_checkpoint
from .synth import NUM_CLASSES, DatasetConfig, DatasetIOError, generate_dataset, load_dataset, write_dataset
from .train import (
    AXES,
    BRANCHES,
    TrainConfig,
    TrainingDiverged,
    ablate,
    ablation_csv,
    evaluate,
    prepare_split,
    summary_text,
    train,
)

OUT_ROOT_ENV = "OADN_OUT_ROOT"
DEFAULT_OUT_ROOT = "runs"

log = logging.getLogger("oadn")


class UsageError(Exception):
    pass


# -- typed options --------------------------------------------------------------


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text: str) -> float | None:
    return None if str(text).strip().lower() in ("", "none", "auto") else float(text)


def _float_list(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


@dataclass(frozen=True)
class Option:
    name: str
    type: Callable
    default: object
    help: str = ""
    choices: tuple | None = None


DATA_OPTIONS = (
    Option("classes", int, NUM_CLASSES, "number of expression classes"),
    Option("per_class", int, 200, "training records per class"),
    Option("val_per_class", int, None, "validation records per class (default per_class // 10, at least 1)"),
    Option("test_per_class", int, None, "test records per class (default per_class // 4, at least 1)"),
    Option("occlude_train", float, 0.0, "occlusion probability for the training split"),
    Option("occlude_val", float, 1.0, "occlusion probability for the validation split"),
    Option("occlude_test", float, 1.0, "occlusion probability for the test split"),
    Option("image_size", int, 64, "square image side in pixels"),
)

TRAIN_OPTIONS = (
    Option("batch_size", int, TrainConfig.batch_size),
    Option("lr0", float, TrainConfig.lr0, "initial learning rate"),
    Option("momentum", float, TrainConfig.momentum),
    Option("weight_decay", float, TrainConfig.weight_decay),
    Option("lr_decay_factor", float, TrainConfig.lr_decay_factor),
    Option("decay_every_epochs", int, TrainConfig.decay_every_epochs),
    Option("epochs", int, TrainConfig.total_epochs, "total training epochs"),
    Option("lam", float, TrainConfig.lam, "loss weight of the attention branch"),
    Option("T", float, TrainConfig.T, "landmark confidence threshold"),
    Option("m", int, TrainConfig.m, "region block height on the feature map"),
    Option("n", int, TrainConfig.n, "region block width on the feature map"),
    Option("sigma", _opt_float, TrainConfig.sigma, "Gaussian width in image pixels (none = matched to the feature stride)"),
    Option("flip", _bool, TrainConfig.flip, "random horizontal flips"),
    Option("dtype", str, TrainConfig.dtype, "training precision", ("float32", "float64")),
)

SEED = Option("seed", int, 0, "master seed")

COMMAND_OPTIONS: dict[str, tuple[Option, ...]] = {
    "gen-data": DATA_OPTIONS + (SEED,),
    "train": TRAIN_OPTIONS + (SEED, Option("data", str, None, "dataset directory (default <out-root>/data)")),
    "eval": (
        Option("checkpoint", str, None, "checkpoint directory (required)"),
        Option("data", str, None, "dataset directory (default <out-root>/data)"),
        Option("split", str, "test", "dataset split to score"),
        Option("branch", str, "fused", "which prediction to score", BRANCHES),
        Option("T", _opt_float, None, "override the checkpoint's threshold"),
        Option("sigma", _opt_float, None, "override the checkpoint's Gaussian width"),
    ),
    "ablate": (
        Option("axis", str, None, "swept hyper-parameter (required)", AXES),
        Option("grid", _float_list, None, "comma-separated grid values (required)"),
        Option("seeds", int, 3, "number of seeds, run as 0..seeds-1"),
    )
    + DATA_OPTIONS
    + TRAIN_OPTIONS,
    "gradcheck": (
        Option("eps", float, 1e-5, "central-difference step"),
        Option("dtype", int, 64, "floating-point width in bits", (64,)),
        Option("tol", float, 1e-4, "maximum allowed relative error"),
        Option("seeds", int, 20, "random draws per op"),
        Option("e2e_seeds", int, 3, "random draws of the end-to-end tiny model"),
        Option("inject_fault", str, None, "negative control: perturb the named op's backward"),
    ),
}


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oadn", description="Occlusion-adaptive two-branch expression classifier.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for cmd, options in COMMAND_OPTIONS.items():
        p = sub.add_parser(cmd, help=(COMMANDS[cmd].__doc__ or "").strip().splitlines()[0])
        p.add_argument("--config", help="key = value file; flags override its entries")
        p.add_argument("--out", help="output location (default under the output root)")
        p.add_argument("--out-root", help=f"output root (default ${OUT_ROOT_ENV} or ./{DEFAULT_OUT_ROOT})")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        for opt in options:
            help_text = opt.help + (f" [default: {opt.default}]" if opt.default is not None else "")
            p.add_argument(_flag(opt.name), dest=opt.name, default=None, metavar=opt.name.upper(), help=help_text)
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, the config file and flags into typed values."""
    options = {o.name: o for o in COMMAND_OPTIONS[command]}
    raw: dict[str, object] = {}
    if args.config:
        try:
            file_values = read_kv(args.config)
        except KVError as exc:
            raise UsageError(str(exc)) from exc
        for key, value in file_values.items():
            key = key.replace("-", "_")
            if key not in options:
                raise UsageError(f"{args.config}: unknown key {key!r} for {command}")
            raw[key] = value
    for name in options:
        value = getattr(args, name, None)
        if value is not None:
            raw[name] = value
    out = {}
    for name, opt in options.items():
        if name not in raw:
            out[name] = opt.default
            continue
        try:
            value = opt.type(raw[name])
        except (TypeError, ValueError) as exc:
            raise UsageError(f"{_flag(name)}: {exc}") from exc
        if opt.choices is not None and value not in opt.choices:
            raise UsageError(f"{_flag(name)}: {value!r} is not one of {', '.join(map(str, opt.choices))}")
        out[name] = value
    root = args.out_root or os.environ.get(OUT_ROOT_ENV) or DEFAULT_OUT_ROOT
    out["out_root"] = root
    out["out"] = args.out
    return out


def _audit(path: Path, command: str, values: dict) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return write_kv(path, {"command": command, "version": __version__, **values})


# -- config builders -------------------------------------------------------------


def dataset_config(v: dict, seed: int) -> DatasetConfig:
    per = v["per_class"]
    if per < 1:
        raise UsageError("--per-class must be at least 1")
    if not 1 <= v["classes"] <= NUM_CLASSES:
        raise UsageError(f"--classes must lie in 1..{NUM_CLASSES}")
    if v["image_size"] < 8:
        raise UsageError("--image-size must be at least 8")
    val = v["val_per_class"] if v["val_per_class"] is not None else max(1, per // 10)
    test = v["test_per_class"] if v["test_per_class"] is not None else max(1, per // 4)
    if val < 1 or test < 1:
        raise UsageError("per-class counts must be at least 1")
    for key in ("occlude_train", "occlude_val", "occlude_test"):
        if not 0.0 <= v[key] <= 1.0:
            raise UsageError(f"{_flag(key)} must lie in [0, 1]")
    return DatasetConfig(
        per_class={"train": per, "val": val, "test": test},
        occlusion={"train": v["occlude_train"], "val": v["occlude_val"], "test": v["occlude_test"]},
        num_classes=v["classes"],
        image_size=(v["image_size"], v["image_size"]),
        seed=seed,
    )


def train_config(v: dict, seed: int) -> TrainConfig:
    cfg = TrainConfig(
        batch_size=v["batch_size"],
        lr0=v["lr0"],
        momentum=v["momentum"],
        weight_decay=v["weight_decay"],
        lr_decay_factor=v["lr_decay_factor"],
        decay_every_epochs=v["decay_every_epochs"],
        total_epochs=v["epochs"],
        lam=v["lam"],
        T=v["T"],
        m=v["m"],
        n=v["n"],
        sigma=v["sigma"],
        seed=seed,
        flip=v["flip"],
        dtype=v["dtype"],
    )
    cfg.validate()
    return cfg


def model_config(image_size: Sequence[int], num_classes: int, cfg: TrainConfig) -> ModelConfig:
    mc = ModelConfig(backbone=BackboneConfig(input_size=tuple(image_size)), num_classes=num_classes, region=cfg.region)
    mc.validate()
    return mc


# -- commands ----------------------------------------------------------------------


def cmd_gen_data(v: dict) -> int:
    """Generate a synthetic dataset (train / val / test splits)."""
    cfg = dataset_config(v, v["seed"])
    out = Path(v["out"] or Path(v["out_root"]) / "data")
    splits = write_dataset(out, cfg)
    _audit(out / "gen-data.config.txt", "gen-data", v)
    digest = hashlib.sha256((out / "manifest.txt").read_bytes()).hexdigest()
    for name, split in splits.items():
        occluded = sum(o is not None for o in split.occluders)
        print(f"{name}: {len(split)} records ({occluded} occluded)")
    print(f"manifest: {out / 'manifest.txt'} sha256={digest}")
    return 0


def _load(data_dir: Path, wanted: Sequence[str]) -> dict:
    splits = load_dataset(data_dir)
    missing = [s for s in wanted if s not in splits]
    if missing:
        raise DatasetIOError(f"{data_dir}: dataset has no split(s) {', '.join(missing)}")
    return splits


def cmd_train(v: dict) -> int:
    """Train a model on a generated dataset."""
    cfg = train_config(v, v["seed"])
    data_dir = Path(v["data"] or Path(v["out_root"]) / "data")
    out = Path(v["out"] or Path(v["out_root"]) / f"train-seed{v['seed']}")
    splits = _load(data_dir, ["train"])
    tr = splits["train"]
    num_classes = int(tr.labels.max()) + 1
    mc = model_config(tr.images.shape[1:], num_classes, cfg)
    _audit(out / "train.config.txt", "train", {**v, "data": str(data_dir)})
    fs = mc.backbone.feat_size
    prep_train = prepare_split(tr, fs, cfg.T, cfg.sigma)
    prep_val = prepare_split(splits["val"], fs, cfg.T, cfg.sigma, with_flipped=False) if "val" in splits else None
    result = train(mc, prep_train, cfg, prep_val, out)
    last = result.log[-1]
    print(f"trained {cfg.total_epochs} epochs, {result.steps} steps; final loss {last.loss:.4f} train_acc {last.train_acc:.4f}")
    if prep_val is not None:
        print(f"best val_acc {result.best_val_acc:.4f} at epoch {result.best_epoch}")
    print(f"checkpoints: {out / 'final'} {out / 'best'}")
    return 0


def cmd_eval(v: dict) -> int:
    """Score a checkpoint on one dataset split."""
    if not v["checkpoint"]:
        raise UsageError("--checkpoint is required")
    ckpt = Path(v["checkpoint"])
    if not (ckpt / "manifest.json").is_file():
        raise FileNotFoundError(f"{ckpt}: not a checkpoint directory")
    params, mc, meta = load_checkpoint(ckpt)
    trained = meta.get("train", {})
    T = v["T"] if v["T"] is not None else trained.get("T", TrainConfig.T)
    sigma = v["sigma"] if v["sigma"] is not None else trained.get("sigma")
    data_dir = Path(v["data"] or Path(v["out_root"]) / "data")
    split = _load(data_dir, [v["split"]])[v["split"]]
    if tuple(split.images.shape[1:]) != tuple(mc.backbone.input_size):
        raise UsageError(
            f"checkpoint expects {mc.backbone.input_size} images, dataset has {tuple(split.images.shape[1:])}"
        )
    prep = prepare_split(split, mc.backbone.feat_size, T, sigma, with_flipped=False)
    report = evaluate(params, mc, prep, v["branch"])
    out = Path(v["out"] or ckpt.parent / f"eval_{v['split']}_{v['branch']}.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_text())
    _audit(out.with_suffix(".config.txt"), "eval", {**v, "data": str(data_dir), "T": T, "sigma": sigma})
    sys.stdout.write(report.to_text())
    print(f"report: {out}")
    return 0


def cmd_ablate(v: dict) -> int:
    """Sweep T, K or lambda over several seeds (clean train, occluded test)."""
    if v["axis"] is None or not v["grid"]:
        raise UsageError("--axis and --grid are required")
    if v["seeds"] < 1:
        raise UsageError("--seeds must be at least 1")
    base = train_config(v, 0)
    dataset_config(v, 0)  # validate before any work
    out = Path(v["out"] or Path(v["out_root"]) / f"ablate-{v['axis']}")
    mc = model_config((v["image_size"],) * 2, v["classes"], base)
    _audit(out / "ablate.config.txt", "ablate", v)

    def data_for_seed(seed):
        return generate_dataset(dataset_config(v, seed))

    try:
        rows = ablate(v["axis"], v["grid"], base, range(v["seeds"]), data_for_seed, mc, out)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    table = ablation_csv(rows)
    (out / f"ablation_{v['axis']}.csv").write_text(table)
    summary = summary_text(v["axis"], rows)
    (out / f"ablation_{v['axis']}_summary.txt").write_text(summary)
    sys.stdout.write(table)
    sys.stdout.write(summary)
    return 0


def cmd_gradcheck(v: dict) -> int:
    """Finite-difference check of every op and the end-to-end loss."""
    from .gradcheck import faulty, format_report, op_checks, timed_suite

    checks = op_checks(v["eps"])
    if v["inject_fault"]:
        names = [c.name for c in checks]
        if v["inject_fault"] not in names:
            raise UsageError(f"--inject-fault: unknown op {v['inject_fault']!r}; choose from {', '.join(names)}")
        checks = [faulty(c) if c.name == v["inject_fault"] else c for c in checks]
    results, elapsed = timed_suite(
        seeds=v["seeds"], eps=v["eps"], tol=v["tol"], checks=checks, end_to_end_seeds=v["e2e_seeds"]
    )
    report = format_report(results, v["eps"], v["tol"], v["dtype"], elapsed)
    sys.stdout.write(report)
    if v["out"]:
        out = Path(v["out"])
    else:
        out = Path(v["out_root"]) / "gradcheck" / "gradcheck.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report)
    _audit(out.with_suffix(".config.txt"), "gradcheck", v)
    failed = [r for r in results if not r.passed]
    for r in failed:
        print(f"error: gradient check failed for {r.name} (max relative error {r.max_rel_error:.3e})", file=sys.stderr)
    return 1 if failed else 0


COMMANDS: dict[str, Callable[[dict], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 0 for --help/--version, 2 for bad usage
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s", stream=sys.stderr
    )
    try:
        values = resolve(args.command, args)
        return COMMANDS[args.command](values)
    except (UsageError, ConfigError) as exc:
        print(f"oadn {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except (TrainingDiverged, DatasetIOError, OSError, KVError, ValueError, RuntimeError) as exc:
        print(f"oadn {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
