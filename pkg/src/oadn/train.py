"""SGD training, evaluation metrics and the threshold / region / loss-weight sweeps."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .autodiff import Tape, Tensor, backward
from .landmarks import (
    DEFAULT_THRESHOLD,
    LandmarkSet,
    PointMappingSpec,
    compute_interest_points,
    default_mapping,
    flip_interest_points,
    build_attention_stack,
    threshold_points,
)
from .model import (
    ConfigError,
    ModelConfig,
    RegionConfig,
    combined_loss,
    forward,
    fuse,
    init_params,
    predict,
    save_checkpoint,
)
from .synth import Split, derive_seed

log = logging.getLogger(__name__)

BRANCHES = ("fused", "lab-only", "frb-only")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0005
    lr_decay_factor: float = 10.0
    decay_every_epochs: int = 20
    total_epochs: int = 30
    lam: float = 0.5
    T: float = DEFAULT_THRESHOLD
    m: int = 4
    n: int = 4
    sigma: float | None = None
    seed: int = 0
    flip: bool = True
    dtype: str = "float32"

    def validate(self) -> None:
        for name in ("batch_size", "lr0", "lr_decay_factor", "decay_every_epochs", "total_epochs", "m", "n"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.momentum < 0 or self.weight_decay < 0:
            raise ConfigError("momentum and weight_decay must be non-negative")
        if not 0.0 <= self.lam <= 1.0 or not 0.0 <= self.T <= 1.0:
            raise ConfigError("lam and T must lie in [0, 1]")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def region(self) -> RegionConfig:
        return RegionConfig(self.m, self.n)

    def to_dict(self) -> dict:
        return asdict(self)


# -- optimiser ----------------------------------------------------------------


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Step decay: ``lr0 / factor ** (epoch // decay_every)``."""
    try:
        return cfg.lr0 / cfg.lr_decay_factor ** (epoch // cfg.decay_every_epochs)
    except OverflowError:
        return 0.0


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    weight_decay: float,
) -> None:
    """In-place momentum SGD with L2 weight decay folded into the velocity:

    ``v <- momentum * v + grad + weight_decay * w``;  ``w <- w - lr * v``.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise TrainingDiverged(f"non-finite gradient for {name} ({bad} entries)")
    for name, w in params.items():
        g = grads[name]
        v = velocity.get(name)
        if v is None:
            v = velocity[name] = np.zeros_like(w)
        v *= momentum
        v += g
        if weight_decay:
            v += weight_decay * w
        w -= lr * v


# -- data preparation ---------------------------------------------------------


@dataclass
class PreparedSplit:
    """Images plus precomputed attention stacks (plain and mirrored)."""

    images: np.ndarray  # (N, 1, H, W)
    labels: np.ndarray
    stacks: np.ndarray  # (N, M, h_f, w_f)
    stacks_flipped: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


def prepare_split(
    split: Split,
    feat_size: Sequence[int],
    T: float = DEFAULT_THRESHOLD,
    sigma: float | None = None,
    mapping: PointMappingSpec | None = None,
    with_flipped: bool = True,
) -> PreparedSplit:
    mapping = mapping or default_mapping()
    size = split.images.shape[1:]
    n, m = len(split), len(mapping.rows)
    stacks = np.zeros((n, m) + tuple(feat_size))
    flipped = np.zeros_like(stacks) if with_flipped else stacks
    for i in range(n):
        pts = threshold_points(compute_interest_points(LandmarkSet(split.landmarks[i], size), mapping), T)
        stacks[i] = build_attention_stack(pts, size, feat_size, sigma).maps
        if with_flipped:
            fp = flip_interest_points(pts, size[1], mapping)
            flipped[i] = build_attention_stack(fp, size, feat_size, sigma).maps
    return PreparedSplit(normalize_images(split.images), split.labels.copy(), stacks, flipped)


INPUT_MEAN = 0.5
INPUT_SCALE = 0.25


def normalize_images(images: np.ndarray) -> np.ndarray:
    """(N, H, W) pixels in [0, 1] -> (N, 1, H, W), roughly zero-mean unit-scale."""
    return ((np.asarray(images, dtype=np.float64) - INPUT_MEAN) / INPUT_SCALE)[:, None]


# -- metrics ------------------------------------------------------------------


def confusion_matrix(y_true: Iterable[int], y_pred: Iterable[int], num_classes: int) -> np.ndarray:
    """Counts with rows = ground truth, columns = prediction."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=int), np.asarray(y_pred, dtype=int)), 1)
    return cm


@dataclass
class EvalReport:
    confusion: np.ndarray
    branch: str = "fused"

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def total_accuracy(self) -> float:
        return float(np.trace(self.confusion) / self.confusion.sum())

    @property
    def per_class_accuracy(self) -> np.ndarray:
        """Recall per class; NaN for classes absent from the test set."""
        rows = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.confusion) / rows, np.nan)

    @property
    def avg_class_accuracy(self) -> float:
        """Mean of the row-normalised diagonal, skipping absent classes."""
        acc = self.per_class_accuracy
        return float(np.mean(acc[~np.isnan(acc)]))

    def to_text(self) -> str:
        lines = [
            f"branch = {self.branch}",
            f"total = {self.total}",
            f"total_accuracy = {self.total_accuracy:.6f}",
            f"avg_class_accuracy = {self.avg_class_accuracy:.6f}",
            "per_class_accuracy = " + ",".join("nan" if math.isnan(a) else f"{a:.6f}" for a in self.per_class_accuracy),
            "confusion =",
        ]
        lines += [",".join(str(int(v)) for v in row) for row in self.confusion]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        lines = text.strip().splitlines()
        branch = lines[0].split("=", 1)[1].strip()
        start = lines.index("confusion =") + 1
        cm = np.array([[int(v) for v in row.split(",")] for row in lines[start:]], dtype=np.int64)
        return cls(cm, branch)


def branch_probs(outputs, branch: str) -> np.ndarray:
    if branch == "fused":
        return outputs.fused_probs
    if branch == "lab-only":
        return outputs.lab_probs
    if branch == "frb-only":
        return outputs.frb_probs.mean(axis=1)
    raise ValueError(f"unknown branch {branch!r}; expected one of {BRANCHES}")


def evaluate(params: dict, cfg: ModelConfig, data: PreparedSplit, branch: str = "fused") -> EvalReport:
    outputs = predict(data.images, data.stacks, params, cfg)
    pred = np.argmax(branch_probs(outputs, branch), axis=1)
    return EvalReport(confusion_matrix(data.labels, pred, cfg.num_classes), branch)


# -- training loop ------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss: float
    train_acc: float
    val_acc: float

    def line(self) -> str:
        return f"{self.epoch} {self.lr:.6g} {self.loss:.6f} {self.train_acc:.6f} {self.val_acc:.6f}"


@dataclass
class TrainResult:
    params: dict
    best_params: dict
    model_config: ModelConfig
    config: TrainConfig
    log: list[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0
    steps: int = 0

    def log_text(self) -> str:
        return "".join(e.line() + "\n" for e in self.log)


def default_branch(lam: float) -> str:
    """Branch to score a run trained with weight ``lam``; a single-branch run leaves the other head untrained."""
    if lam == 1.0:
        return "lab-only"
    if lam == 0.0:
        return "frb-only"
    return "fused"


def loss_and_grads(params: dict, x: np.ndarray, stack: np.ndarray, labels, model_cfg: ModelConfig, lam: float):
    """One forward/backward pass; leaves gradients in ``params[k].grad``.

    Returns (loss value, lab probs, list of region probs).
    """
    with Tape():
        lab_p, frb_p = forward(Tensor(x), stack, params, model_cfg)
        loss = combined_loss(lab_p, frb_p, labels, lam)
        backward(loss)
    return float(loss.data), lab_p, frb_p


def train(
    model_cfg: ModelConfig,
    train_data: PreparedSplit,
    cfg: TrainConfig,
    val_data: PreparedSplit | None = None,
    out_dir: str | Path | None = None,
) -> TrainResult:
    """Train from scratch; deterministic in ``cfg.seed``.

    With ``out_dir`` set, appends one log line per epoch to ``train.log`` and
    writes ``final`` (after every epoch) and ``best`` checkpoints.
    """
    cfg.validate()
    model_cfg = replace(model_cfg, region=cfg.region)
    model_cfg.validate()
    dtype = np.dtype(cfg.dtype)
    params = init_params(model_cfg, derive_seed(cfg.seed, "init"), dtype=dtype)
    arrays = {k: t.data for k, t in params.items()}
    velocity: dict[str, np.ndarray] = {}
    result = TrainResult(params, {k: v.copy() for k, v in arrays.items()}, model_cfg, cfg)
    branch = default_branch(cfg.lam)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train.log").write_text("")

    images = train_data.images.astype(dtype)
    n = len(train_data)
    for epoch in range(cfg.total_epochs):
        lr = lr_schedule(epoch, cfg)
        rng = np.random.default_rng(derive_seed(cfg.seed, f"epoch:{epoch}"))
        order = rng.permutation(n)
        flips = rng.random(n) < 0.5 if cfg.flip else np.zeros(n, dtype=bool)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            fl = flips[idx]
            x = images[idx]
            x = np.where(fl[:, None, None, None], x[..., ::-1], x)
            stack = np.where(fl[:, None, None, None], train_data.stacks_flipped[idx], train_data.stacks[idx]).astype(dtype)
            y = train_data.labels[idx]
            value, lab_p, frb_p = loss_and_grads(params, x, stack, y, model_cfg, cfg.lam)
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, step {result.steps}")
            sgd_step(arrays, {k: t.grad for k, t in params.items()}, velocity, lr, cfg.momentum, cfg.weight_decay)
            for t in params.values():
                t.grad = None
            result.steps += 1
            loss_sum += value * len(idx)
            frb_stack = np.stack([p.data for p in frb_p], axis=1)
            probs = branch_probs_from(lab_p.data, frb_stack, branch)
            correct += int((np.argmax(probs, axis=1) == y).sum())

        val_acc = float("nan")
        if val_data is not None:
            val_acc = evaluate(params, model_cfg, val_data, branch).total_accuracy
        entry = EpochLog(epoch, lr, loss_sum / n, correct / n, val_acc)
        result.log.append(entry)
        log.info(entry.line())
        improved = val_data is not None and val_acc > result.best_val_acc
        if improved or (val_data is None and epoch == cfg.total_epochs - 1):
            result.best_epoch, result.best_val_acc = epoch, val_acc
            result.best_params = {k: v.copy() for k, v in arrays.items()}
        if out is not None:
            with open(out / "train.log", "a") as fh:
                fh.write(entry.line() + "\n")
            manifest = {"epoch": epoch, "val_acc": val_acc, "train": cfg.to_dict()}
            save_checkpoint(out / "final", params, model_cfg, manifest)
            if improved:
                save_checkpoint(out / "best", params, model_cfg, manifest)
    if out is not None and val_data is None:
        save_checkpoint(out / "best", params, model_cfg, {"epoch": cfg.total_epochs - 1, "train": cfg.to_dict()})
    return result


def branch_probs_from(lab_probs: np.ndarray, frb_probs: np.ndarray, branch: str) -> np.ndarray:
    if branch == "lab-only":
        return lab_probs
    if branch == "frb-only":
        return frb_probs.mean(axis=1)
    return fuse(lab_probs, frb_probs)


def params_from_arrays(arrays: dict[str, np.ndarray]) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}


# -- sweeps -------------------------------------------------------------------

AXES = ("T", "K", "lambda")


def region_for_k(k: int, feat_size: Sequence[int]) -> tuple[int, int]:
    """Block size ``(m, n)`` giving exactly ``k`` regions.

    Prefers blocks that tile the map evenly, then square blocks, then small ones.
    """
    h, w = feat_size
    fits = [(m, n) for m in range(1, h + 1) for n in range(1, w + 1) if math.ceil(h / m) * math.ceil(w / n) == k]
    if not fits:
        raise ConfigError(f"no block size gives K={k} regions on a {h}x{w} map")
    return min(fits, key=lambda mn: (h % mn[0] != 0 or w % mn[1] != 0, abs(mn[0] - mn[1]), mn))


def apply_axis(cfg: TrainConfig, axis: str, value: float, feat_size: Sequence[int]) -> TrainConfig:
    if axis == "T":
        return replace(cfg, T=float(value))
    if axis == "lambda":
        return replace(cfg, lam=float(value))
    if axis == "K":
        if float(value) != int(value):
            raise ConfigError(f"K must be an integer, got {value}")
        m, n = region_for_k(int(value), feat_size)
        return replace(cfg, m=m, n=n)
    raise ConfigError(f"unknown axis {axis!r}; expected one of {AXES}")


@dataclass(frozen=True)
class AblationRow:
    value: float
    seed: int
    total_acc: float
    avg_class_acc: float

    def line(self) -> str:
        return f"{self.value:g},{self.seed},{self.total_acc:.6f},{self.avg_class_acc:.6f}"


ABLATION_HEADER = "axis_value,seed,total_acc,avg_class_acc"


def ablation_csv(rows: Sequence[AblationRow]) -> str:
    return ABLATION_HEADER + "\n" + "".join(r.line() + "\n" for r in rows)


def parse_ablation_csv(text: str) -> list[AblationRow]:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0] != ABLATION_HEADER:
        raise ValueError("missing ablation table header")
    rows = []
    for ln in lines[1:]:
        v, s, t, a = ln.split(",")
        rows.append(AblationRow(float(v), int(s), float(t), float(a)))
    return rows


def summarize(rows: Sequence[AblationRow]) -> dict[float, tuple[float, float, int]]:
    """Per grid value: (mean total accuracy, population std, number of seeds)."""
    out = {}
    for v in dict.fromkeys(r.value for r in rows):
        acc = np.array([r.total_acc for r in rows if r.value == v])
        out[v] = (float(acc.mean()), float(acc.std()), len(acc))
    return out


def summary_text(axis: str, rows: Sequence[AblationRow]) -> str:
    lines = [f"{axis} mean_total_acc std n"]
    lines += [f"{v:g} {m:.4f} {s:.4f} {n}" for v, (m, s, n) in summarize(rows).items()]
    return "\n".join(lines) + "\n"


def run_experiment(
    model_cfg: ModelConfig,
    splits: dict[str, Split],
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    eval_split: str = "test",
) -> tuple[TrainResult, EvalReport]:
    """Train on ``splits['train']`` and score the final weights on ``eval_split``.

    The validation split, when present, only drives the ``best`` checkpoint.
    """
    fs = model_cfg.backbone.feat_size
    prep = {k: prepare_split(v, fs, cfg.T, cfg.sigma) for k, v in splits.items()}
    result = train(model_cfg, prep["train"], cfg, prep.get("val"), out_dir)
    report = evaluate(result.params, result.model_config, prep[eval_split], default_branch(cfg.lam))
    return result, report


def ablate(
    axis: str,
    grid: Sequence[float],
    base: TrainConfig,
    seeds: Sequence[int],
    data_for_seed,
    model_cfg: ModelConfig | None = None,
    out_dir: str | Path | None = None,
) -> list[AblationRow]:
    """Full train + evaluate for every (grid value, seed).

    ``data_for_seed(seed)`` returns the splits for that seed (train/test and
    optionally val).  Both data and training are seeded with the same value.
    """
    model_cfg = model_cfg or ModelConfig()
    fs = model_cfg.backbone.feat_size
    cfgs = [apply_axis(base, axis, v, fs) for v in grid]
    for c in cfgs:
        c.validate()
    rows = []
    for seed in seeds:
        splits = data_for_seed(seed)
        for value, cfg in zip(grid, cfgs):
            cfg = replace(cfg, seed=int(seed))
            run_dir = Path(out_dir) / f"{axis}={value:g}" / f"seed={seed}" if out_dir is not None else None
            _, report = run_experiment(model_cfg, splits, cfg, run_dir)
            row = AblationRow(float(value), int(seed), report.total_accuracy, report.avg_class_accuracy)
            log.info("%s=%g seed=%d total_acc=%.4f", axis, value, seed, row.total_acc)
            rows.append(row)
    return rows
