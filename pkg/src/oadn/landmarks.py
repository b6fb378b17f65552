"""Interest points, confidence thresholding and Gaussian attention maps.

Pixel convention: pixel ``(r, c)`` has its center at ``x = c, y = r``.
A horizontal flip therefore maps ``x`` to ``W - 1 - x``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, elementwise_mul
from .autodiff.tensor import ShapeError

NUM_LANDMARKS = 68
NUM_POINTS = 24
DEFAULT_THRESHOLD = 0.6
REFERENCE_SIZE = 224
REFERENCE_SIGMA = 7.0
REFERENCE_STRIDE = 16  # 224 -> 14 feature map


class MappingError(ValueError):
    pass


@dataclass(frozen=True)
class LandmarkSet:
    """68 detected points as rows of ``(x, y, conf)`` on an ``(H, W)`` image."""

    points: np.ndarray
    image_size: tuple[int, int]

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.shape != (NUM_LANDMARKS, 3):
            raise ValueError(f"expected {NUM_LANDMARKS}x3 landmark array, got {pts.shape}")
        conf = pts[:, 2]
        if np.any(conf < 0) or np.any(conf > 1):
            raise ValueError("landmark confidences must lie in [0, 1]")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))

    @property
    def xy(self) -> np.ndarray:
        return self.points[:, :2]

    @property
    def conf(self) -> np.ndarray:
        return self.points[:, 2]


@dataclass(frozen=True)
class InterestPointSet:
    points: np.ndarray  # (24, 3): x, y, conf
    visible: np.ndarray  # (24,) bool
    threshold: float | None = None

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class AttentionStack:
    maps: np.ndarray  # (M, h_f, w_f)
    sigma: float

    def __len__(self) -> int:
        return len(self.maps)


@dataclass(frozen=True)
class PointMappingSpec:
    """Which landmarks make up each interest point.

    ``rows[i]`` is ``("select", (j,))`` or ``("recompute", (j1, j2, ...))``.
    ``flip[i]`` is the row index of the mirror-image partner of point ``i``.
    """

    rows: tuple[tuple[str, tuple[int, ...]], ...]
    flip: tuple[int, ...] = field(default=())

    def __post_init__(self):
        for kind, idx in self.rows:
            if kind not in ("select", "recompute"):
                raise MappingError(f"unknown interest point kind {kind!r}")
            if not idx or (kind == "select" and len(idx) != 1):
                raise MappingError(f"bad constituent list {idx} for kind {kind}")
            if any(j < 0 or j >= NUM_LANDMARKS for j in idx):
                raise MappingError(f"landmark index out of range in {idx}")
        if self.flip:
            if sorted(self.flip) != list(range(len(self.rows))):
                raise MappingError("flip table must be a permutation of the rows")


def _data_lines(text: str):
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            yield line.split()


def parse_point_mapping(text: str, flip_text: str | None = None) -> PointMappingSpec:
    rows = []
    for parts in _data_lines(text):
        rows.append((parts[0], tuple(int(p) for p in parts[1:])))
    flip: tuple[int, ...] = ()
    if flip_text is not None:
        table = {int(a): int(b) for a, b in _data_lines(flip_text)}
        flip = tuple(table[i] for i in range(len(rows)))
    return PointMappingSpec(tuple(rows), flip)


def load_point_mapping(path: str | Path | None = None, flip_path: str | Path | None = None) -> PointMappingSpec:
    """Read a mapping table; with no arguments, the packaged 16 + 8 layout."""
    if path is None:
        pkg = resources.files("oadn") / "data"
        text = (pkg / "interest_points.txt").read_text()
        flip_text = (pkg / "interest_points_flip.txt").read_text()
    else:
        text = Path(path).read_text()
        flip_text = Path(flip_path).read_text() if flip_path else None
    return parse_point_mapping(text, flip_text)


def format_landmarks(records: Sequence[np.ndarray]) -> str:
    """One block of 68 ``x y conf`` rows per record, blocks separated by a blank line.

    Values use ``repr`` formatting so a round trip is exact.
    """
    blocks = []
    for pts in records:
        pts = np.asarray(pts, dtype=np.float64)
        if pts.shape != (NUM_LANDMARKS, 3):
            raise ValueError(f"expected {NUM_LANDMARKS}x3 landmark array, got {pts.shape}")
        blocks.append("\n".join(" ".join(repr(float(v)) for v in row) for row in pts))
    return "\n\n".join(blocks) + "\n" if blocks else ""


def parse_landmarks(text: str) -> np.ndarray:
    rows = [[float(v) for v in parts] for parts in _data_lines(text)]
    arr = np.array(rows, dtype=np.float64).reshape(-1, 3) if rows else np.zeros((0, 3))
    if len(arr) % NUM_LANDMARKS:
        raise ValueError(f"landmark file holds {len(arr)} rows, not a multiple of {NUM_LANDMARKS}")
    return arr.reshape(-1, NUM_LANDMARKS, 3)


_DEFAULT_MAPPING: PointMappingSpec | None = None


def default_mapping() -> PointMappingSpec:
    global _DEFAULT_MAPPING
    if _DEFAULT_MAPPING is None:
        _DEFAULT_MAPPING = load_point_mapping()
    return _DEFAULT_MAPPING


def compute_interest_points(lms: LandmarkSet, mapping: PointMappingSpec | None = None) -> InterestPointSet:
    """Selected points copy their landmark; recomputed points take the mean
    position and the minimum confidence of their constituents."""
    mapping = mapping or default_mapping()
    out = np.empty((len(mapping.rows), 3))
    for i, (_kind, idx) in enumerate(mapping.rows):
        src = lms.points[list(idx)]
        out[i, :2] = src[:, :2].mean(axis=0)
        out[i, 2] = src[:, 2].min()
    return InterestPointSet(out, np.ones(len(out), dtype=bool), None)


def threshold_points(pts: InterestPointSet, T: float = DEFAULT_THRESHOLD) -> InterestPointSet:
    if not 0.0 <= T <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {T}")
    return replace(pts, visible=pts.points[:, 2] >= T, threshold=float(T))


def flip_interest_points(pts: InterestPointSet, width: int, mapping: PointMappingSpec | None = None) -> InterestPointSet:
    """Mirror horizontally and swap left/right partners."""
    mapping = mapping or default_mapping()
    if not mapping.flip:
        raise MappingError("mapping has no flip table")
    order = list(mapping.flip)
    flipped = pts.points[order].copy()
    flipped[:, 0] = (width - 1) - flipped[:, 0]
    return InterestPointSet(flipped, pts.visible[order].copy(), pts.threshold)


def default_sigma(image_size: Sequence[int], feat_size: Sequence[int] | None = None) -> float:
    """Gaussian width in image pixels.

    Without ``feat_size``: 7 px at 224x224, scaled with the image height.
    With it, the width is tied to the feature-map stride instead, so a map
    covers the same fraction of a feature cell as 7 px does on a 224 -> 14
    backbone.  Both rules agree at 224 -> 14.
    """
    if feat_size is None:
        return REFERENCE_SIGMA * image_size[0] / REFERENCE_SIZE
    stride = image_size[0] / feat_size[0]
    return REFERENCE_SIGMA * stride / REFERENCE_STRIDE


def render_heatmap(point: Sequence[float], image_size: Sequence[int], sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    h, w = image_size
    x, y = float(point[0]), float(point[1])
    gx = np.exp(-((np.arange(w) - x) ** 2) / (2 * sigma**2))
    gy = np.exp(-((np.arange(h) - y) ** 2) / (2 * sigma**2))
    # the 2D Gaussian is separable
    return np.outer(gy, gx)


def _bilinear_weights(src_len: int, dst_len: int) -> np.ndarray:
    """(dst_len, src_len) interpolation matrix, half-pixel (align-corners-false) centers."""
    scale = src_len / dst_len
    pos = (np.arange(dst_len) + 0.5) * scale - 0.5
    pos = np.clip(pos, 0, src_len - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, src_len - 1)
    frac = pos - lo
    mat = np.zeros((dst_len, src_len))
    rows = np.arange(dst_len)
    np.add.at(mat, (rows, lo), 1 - frac)
    np.add.at(mat, (rows, hi), frac)
    return mat


def downsample_map(amap: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Bilinear resize of the trailing two axes to ``target``."""
    th, tw = int(target[0]), int(target[1])
    if th < 1 or tw < 1:
        raise ShapeError(f"downsample target must be positive, got {target}")
    h, w = amap.shape[-2:]
    wy = _bilinear_weights(h, th)
    wx = _bilinear_weights(w, tw)
    return wy @ amap @ wx.T


def build_attention_stack(
    pts: InterestPointSet,
    image_size: Sequence[int],
    feat_size: Sequence[int],
    sigma: float | None = None,
) -> AttentionStack:
    sigma = default_sigma(image_size, feat_size) if sigma is None else float(sigma)
    maps = np.zeros((len(pts), int(feat_size[0]), int(feat_size[1])))
    for i, (p, vis) in enumerate(zip(pts.points, pts.visible)):
        if vis:
            maps[i] = downsample_map(render_heatmap(p[:2], image_size, sigma), feat_size)
    return AttentionStack(maps, sigma)


def attention_for(
    lms: LandmarkSet,
    feat_size: Sequence[int],
    T: float = DEFAULT_THRESHOLD,
    sigma: float | None = None,
    mapping: PointMappingSpec | None = None,
    flip: bool = False,
) -> AttentionStack:
    """Landmarks to attention stack in one call; ``flip`` mirrors the points first."""
    pts = threshold_points(compute_interest_points(lms, mapping), T)
    if flip:
        pts = flip_interest_points(pts, lms.image_size[1], mapping)
    return build_attention_stack(pts, lms.image_size, feat_size, sigma)


def modulate(F: Tensor, stack: AttentionStack | np.ndarray) -> list[Tensor]:
    """Gate ``F`` with each attention map.

    ``F`` is ``(c, h, w)`` with maps ``(M, h, w)``, or ``(N, c, h, w)`` with
    maps ``(N, M, h, w)``.
    """
    maps = stack.maps if isinstance(stack, AttentionStack) else np.asarray(stack)
    if maps.ndim != F.ndim or maps.shape[-2:] != F.shape[-2:] or maps.shape[:-3] != F.shape[:-3]:
        raise ShapeError(f"attention maps {maps.shape} do not match features {F.shape}")
    maps = maps.astype(F.dtype, copy=False)
    out = []
    for i in range(maps.shape[-3]):
        gate = Tensor(maps[..., i : i + 1, :, :])
        out.append(elementwise_mul(F, gate))
    return out
