"""Two-branch occlusion-adaptive classifier.

A small conv backbone produces a feature map ``F`` (channel-first).  The
attention branch gates ``F`` with one landmark attention map per interest
point, average-pools each gated map, max-fuses the pooled vectors and
classifies.  The region branch cuts ``F`` into ``m x n`` blocks and gives
every block its own classifier.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import (
    Tensor,
    add,
    conv2d,
    cross_entropy,
    global_avg_pool,
    linear,
    max_reduce_set,
    relu,
    scale,
    slice_,
    softmax,
)
from .autodiff.ops import conv_output_size
from .autodiff.tensor import ShapeError
from .autodiff.serialize import read_named_tensors, write_named_tensors
from .landmarks import NUM_POINTS, AttentionStack, modulate


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ConvSpec:
    channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


DEFAULT_LAYERS = (ConvSpec(8, 3, 2, 1), ConvSpec(16, 3, 2, 1), ConvSpec(32, 3, 2, 1), ConvSpec(32, 3, 1, 1))


@dataclass(frozen=True)
class BackboneConfig:
    layers: tuple[ConvSpec, ...] = DEFAULT_LAYERS
    input_size: tuple[int, int] = (64, 64)
    in_channels: int = 1

    @property
    def feat_size(self) -> tuple[int, int]:
        h, w = self.input_size
        for layer in self.layers:
            h = conv_output_size(h, layer.kernel, layer.stride, layer.padding)
            w = conv_output_size(w, layer.kernel, layer.stride, layer.padding)
            if h < 1 or w < 1:
                raise ConfigError(f"backbone collapses the input {self.input_size} to nothing")
        return h, w

    @property
    def feat_channels(self) -> int:
        return self.layers[-1].channels


@dataclass(frozen=True)
class RegionConfig:
    m: int
    n: int

    def validate(self, feat_size: Sequence[int]) -> None:
        h, w = feat_size
        if not (1 <= self.m <= h and 1 <= self.n <= w):
            raise ConfigError(f"block {self.m}x{self.n} does not fit a {h}x{w} feature map")

    def num_regions(self, feat_size: Sequence[int]) -> int:
        h, w = feat_size
        return math.ceil(h / self.m) * math.ceil(w / self.n)


@dataclass(frozen=True)
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    region: RegionConfig = RegionConfig(4, 4)
    num_classes: int = 7
    reduced_dim: int = 32
    num_points: int = NUM_POINTS

    @property
    def num_regions(self) -> int:
        return self.region.num_regions(self.backbone.feat_size)

    def validate(self) -> None:
        self.region.validate(self.backbone.feat_size)
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        bb = d["backbone"]
        backbone = BackboneConfig(
            layers=tuple(ConvSpec(**layer) for layer in bb["layers"]),
            input_size=tuple(bb["input_size"]),
            in_channels=bb["in_channels"],
        )
        return cls(
            backbone=backbone,
            region=RegionConfig(**d["region"]),
            num_classes=d["num_classes"],
            reduced_dim=d["reduced_dim"],
            num_points=d["num_points"],
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# -- parameters ---------------------------------------------------------------


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """He-normal weights, zero biases.  Insertion order is the checkpoint order."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}

    def add_param(name, arr):
        params[name] = Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

    cin = cfg.backbone.in_channels
    for i, layer in enumerate(cfg.backbone.layers):
        fan_in = cin * layer.kernel**2
        add_param(f"backbone.{i}.weight", rng.normal(0, math.sqrt(2 / fan_in), (layer.channels, cin, layer.kernel, layer.kernel)))
        add_param(f"backbone.{i}.bias", np.zeros(layer.channels))
        cin = layer.channels

    c, d, k = cfg.backbone.feat_channels, cfg.reduced_dim, cfg.num_classes

    def head(prefix):
        add_param(f"{prefix}.reduce.weight", rng.normal(0, math.sqrt(2 / c), (c, d)))
        add_param(f"{prefix}.reduce.bias", np.zeros(d))
        add_param(f"{prefix}.cls.weight", rng.normal(0, math.sqrt(1 / d), (d, k)))
        add_param(f"{prefix}.cls.bias", np.zeros(k))

    head("lab")
    for r in range(cfg.num_regions):
        head(f"frb.{r}")
    return params


# -- forward ------------------------------------------------------------------


def backbone_forward(images: Tensor, params: dict, cfg: ModelConfig) -> Tensor:
    """(N, C, H, W) images -> (N, c, h_f, w_f) feature map."""
    bb = cfg.backbone
    expected = (bb.in_channels,) + tuple(bb.input_size)
    if images.ndim != 4 or images.shape[1:] != expected:
        raise ShapeError(f"backbone expects (N, {expected}), got {images.shape}")
    h = images
    for i, layer in enumerate(bb.layers):
        h = relu(conv2d(h, params[f"backbone.{i}.weight"], params[f"backbone.{i}.bias"], layer.stride, layer.padding))
    return h


def _head(x: Tensor, params: dict, prefix: str) -> Tensor:
    hidden = relu(linear(x, params[f"{prefix}.reduce.weight"], params[f"{prefix}.reduce.bias"]))
    return linear(hidden, params[f"{prefix}.cls.weight"], params[f"{prefix}.cls.bias"])


def lab_forward(F: Tensor, stack: AttentionStack | np.ndarray, params: dict) -> tuple[Tensor, Tensor]:
    """Attention branch: returns (probs, logits).

    When every map is zero the pooled vectors are all zero, so the fused
    vector is the zero vector and the logits reduce to the head's biases
    propagated through the reduction layer.
    """
    pooled = [global_avg_pool(g) for g in modulate(F, stack)]
    fused = max_reduce_set(pooled)
    logits = _head(fused, params, "lab")
    return softmax(logits), logits


def region_bounds(feat_size: Sequence[int], region: RegionConfig) -> list[tuple[int, int, int, int]]:
    """Row-major ``(r0, r1, c0, c1)`` block bounds; edge blocks may be smaller."""
    h, w = feat_size
    region.validate(feat_size)
    return [
        (r0, min(r0 + region.m, h), c0, min(c0 + region.n, w))
        for r0 in range(0, h, region.m)
        for c0 in range(0, w, region.n)
    ]


def frb_partition(F: Tensor, region: RegionConfig) -> list[Tensor]:
    bounds = region_bounds(F.shape[-2:], region)
    lead = (slice(None),) * (F.ndim - 2)
    return [slice_(F, lead + (slice(r0, r1), slice(c0, c1))) for r0, r1, c0, c1 in bounds]


def frb_forward(F: Tensor, region: RegionConfig, params: dict) -> tuple[list[Tensor], list[Tensor]]:
    """Region branch: per-block (probs, logits) lists, one entry per region."""
    probs, logits = [], []
    for r, block in enumerate(frb_partition(F, region)):
        z = _head(global_avg_pool(block), params, f"frb.{r}")
        logits.append(z)
        probs.append(softmax(z))
    return probs, logits


def lab_loss(lab_probs: Tensor, labels) -> Tensor:
    return cross_entropy(lab_probs, labels)


def frb_loss(frb_probs: Sequence[Tensor], labels) -> Tensor:
    """Sum (not mean) of the per-region cross-entropies."""
    total = cross_entropy(frb_probs[0], labels)
    for p in frb_probs[1:]:
        total = add(total, cross_entropy(p, labels))
    return total


def combined_loss(lab_probs: Tensor, frb_probs: Sequence[Tensor], labels, lam: float) -> Tensor:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"loss weight must be in [0, 1], got {lam}")
    l_lab = lab_loss(lab_probs, labels)
    l_frb = frb_loss(frb_probs, labels)
    if lam == 1.0:
        return scale(l_lab, 1.0)
    if lam == 0.0:
        return scale(l_frb, 1.0)
    return add(scale(l_lab, lam), scale(l_frb, 1.0 - lam))


@dataclass
class BranchOutputs:
    lab_probs: np.ndarray  # (N, C)
    frb_probs: np.ndarray  # (N, K, C)
    fused_probs: np.ndarray  # (N, C)

    @property
    def predicted(self) -> np.ndarray:
        # argmax returns the first maximum, i.e. ties go to the lowest class
        return np.argmax(self.fused_probs, axis=-1)


def fuse(lab_probs: np.ndarray, frb_probs: np.ndarray) -> np.ndarray:
    """Average of the attention-branch distribution and the mean region distribution."""
    return 0.5 * lab_probs + 0.5 * frb_probs.mean(axis=-2)


def forward(images: Tensor, stack: np.ndarray, params: dict, cfg: ModelConfig):
    """Full forward pass: (lab_probs, frb_probs list)."""
    F = backbone_forward(images, params, cfg)
    lab_probs, _ = lab_forward(F, stack, params)
    frb_probs, _ = frb_forward(F, cfg.region, params)
    return lab_probs, frb_probs


def predict(images: np.ndarray, stacks: np.ndarray, params: dict, cfg: ModelConfig, batch_size: int = 256) -> BranchOutputs:
    """Batched inference.  ``images`` is (N, H, W) or (N, C, H, W); ``stacks`` is (N, M, h_f, w_f)."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    dtype = next(iter(params.values())).dtype
    lab, frb = [], []
    for s in range(0, len(images), batch_size):
        x = Tensor(images[s : s + batch_size].astype(dtype, copy=False))
        lp, fp = forward(x, stacks[s : s + batch_size], params, cfg)
        lab.append(lp.data)
        frb.append(np.stack([p.data for p in fp], axis=1))
    lab_probs = np.concatenate(lab).astype(np.float64)
    frb_probs = np.concatenate(frb).astype(np.float64)
    return BranchOutputs(lab_probs, frb_probs, fuse(lab_probs, frb_probs))


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path: str | Path, params: dict, cfg: ModelConfig, manifest: dict | None = None) -> Path:
    """Write ``params.bin`` and ``manifest.json`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    arrays = {name: np.asarray(t.data, dtype=np.float64) for name, t in params.items()}
    with open(path / "params.bin", "wb") as fh:
        write_named_tensors(fh, arrays)
    meta = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "config_hash": cfg.digest(),
    }
    meta.update(manifest or {})
    (path / "manifest.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path, dtype=np.float64) -> tuple[dict, ModelConfig, dict]:
    path = Path(path)
    meta = json.loads((path / "manifest.json").read_text())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    cfg = ModelConfig.from_dict(meta["config"])
    with open(path / "params.bin", "rb") as fh:
        arrays = read_named_tensors(fh)
    params = {name: Tensor(arr.astype(dtype), requires_grad=True, name=name) for name, arr in arrays.items()}
    return params, cfg, meta
