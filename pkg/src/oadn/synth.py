"""Procedural "glyph faces" with 68 ground-truth landmarks, plus occluders.

Each expression class fixes a box of four geometry parameters; a face is a
canonical template deformed by parameters drawn from its class box and
placed with small position/scale/contrast jitter.  Occluders paint over
pixels and push the confidence of every landmark inside their bounding box
below 0.3, while untouched landmarks keep confidences of at least 0.7.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff.serialize import read_tensor, write_tensor
from .kv import parse_kv, write_kv
from .landmarks import NUM_LANDMARKS, LandmarkSet, format_landmarks, parse_landmarks

NUM_CLASSES = 7
CLASS_NAMES = ("surprise", "fear", "disgust", "happy", "sad", "anger", "neutral")
PARAM_NAMES = ("mouth_curve", "mouth_open", "eye_open", "brow_tilt")

# Centre of each class box, in PARAM_NAMES order.  mouth_curve > 0 lifts the
# mouth corners, brow_tilt > 0 lifts the inner brow ends.
CLASS_CENTERS = np.array(
    [
        [0.00, 0.90, 0.95, 0.80],  # surprise
        [-0.40, 0.55, 0.80, 0.40],  # fear
        [-0.50, 0.10, 0.35, -0.40],  # disgust
        [0.90, 0.40, 0.45, 0.00],  # happy
        [-0.90, 0.05, 0.40, 0.55],  # sad
        [-0.20, 0.20, 0.60, -0.90],  # anger
        [0.00, 0.00, 0.65, 0.00],  # neutral
    ]
)
# Half-width of each class box per parameter.
CLASS_HALF_WIDTH = np.array([0.25, 0.12, 0.12, 0.25])
PARAM_LIMITS = np.array([[-1.0, 1.0], [0.0, 1.0], [0.0, 1.0], [-1.0, 1.0]])

CONF_VISIBLE = (0.7, 1.0)
CONF_OCCLUDED = (0.0, 0.3)

FLIP_PERMUTATION = np.array(
    list(range(16, -1, -1))
    + list(range(26, 21, -1))
    + list(range(21, 16, -1))
    + [27, 28, 29, 30, 35, 34, 33, 32, 31]
    + [45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40]
    + [54, 53, 52, 51, 50, 49, 48, 59, 58, 57, 56, 55]
    + [64, 63, 62, 61, 60, 67, 66, 65]
)


def derive_seed(seed: int, purpose: str) -> int:
    """Sub-seed from a user seed and a purpose string (first 8 bytes of SHA-256)."""
    digest = hashlib.sha256(f"{int(seed)}:{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class FaceSpec:
    class_id: int
    params: tuple[float, float, float, float]
    seed: int


def sample_face_spec(class_id: int, seed: int) -> FaceSpec:
    if not 0 <= class_id < NUM_CLASSES:
        raise ValueError(f"class_id must be in [0, {NUM_CLASSES}), got {class_id}")
    rng = np.random.default_rng(derive_seed(seed, "params"))
    lo = CLASS_CENTERS[class_id] - CLASS_HALF_WIDTH
    hi = CLASS_CENTERS[class_id] + CLASS_HALF_WIDTH
    vals = np.clip(rng.uniform(lo, hi), PARAM_LIMITS[:, 0], PARAM_LIMITS[:, 1])
    return FaceSpec(class_id, tuple(float(v) for v in vals), seed)


# -- template -----------------------------------------------------------------

FACE_HALF_WIDTH = 0.8
FACE_HALF_HEIGHT = 1.0


def template_landmarks(params: Sequence[float]) -> np.ndarray:
    """68 landmark positions in face units (origin at face centre, y down)."""
    curve, mouth_open, eye_open, brow = params
    pts = np.zeros((NUM_LANDMARKS, 2))

    theta = np.deg2rad(190.0 - np.arange(17) * 200.0 / 16)
    pts[0:17, 0] = FACE_HALF_WIDTH * np.cos(theta)
    pts[0:17, 1] = FACE_HALF_HEIGHT * np.sin(theta)

    # brows: outer -> inner on the right (image-left) side
    t = np.linspace(0.0, 1.0, 5)
    inner_lift = 0.14 * brow * t + 0.04 * max(brow, 0.0)
    arch = 0.04 * np.sin(np.pi * t)
    right_x = -0.62 + 0.44 * t
    brow_y = -0.48 - arch - inner_lift
    pts[17:22] = np.column_stack([right_x, brow_y])
    pts[22:27] = np.column_stack([-right_x[::-1], brow_y[::-1]])

    pts[27:31] = np.column_stack([np.zeros(4), np.linspace(-0.30, 0.10, 4)])
    pts[31:36] = np.column_stack([[-0.16, -0.08, 0.0, 0.08, 0.16], [0.20, 0.23, 0.25, 0.23, 0.20]])

    half_open = 0.02 + 0.11 * eye_open
    for base, cx, sign in ((36, -0.38, -1), (42, 0.38, 1)):
        # 68-point order: corner, two top points, corner, two bottom points
        xs = np.array([cx + sign * 0.16, cx + sign * 0.06, cx - sign * 0.06, cx - sign * 0.16])
        if sign > 0:
            xs = xs[::-1]
        ey = -0.22
        pts[base + 0] = (xs[0], ey)
        pts[base + 1] = (xs[1], ey - half_open)
        pts[base + 2] = (xs[2], ey - half_open)
        pts[base + 3] = (xs[3], ey)
        pts[base + 4] = (xs[2], ey + half_open)
        pts[base + 5] = (xs[1], ey + half_open)

    mouth = _mouth_curves(curve, mouth_open)
    pts[48:60] = mouth["outer"]
    pts[60:68] = mouth["inner"]
    return pts


MOUTH_Y = 0.52
MOUTH_HALF_WIDTH = 0.32


def _mouth_y(t, curve):
    return MOUTH_Y - 0.14 * curve * t**2


def _mouth_curves(curve: float, mouth_open: float) -> dict:
    def upper(t):
        return _mouth_y(t, curve) - 0.05 * (1 - t**2)

    def lower(t):
        return _mouth_y(t, curve) + (0.05 + 0.22 * mouth_open) * (1 - t**2)

    def inner_upper(t):
        return _mouth_y(t, curve) - 0.01 * (1 - t**2)

    def inner_lower(t):
        return _mouth_y(t, curve) + 0.18 * mouth_open * (1 - t**2)

    # outer: 48 right corner, 49-53 upper lip, 54 left corner, 55-59 lower lip
    tu = np.array([-1.0, -0.66, -0.33, 0.0, 0.33, 0.66, 1.0])
    tl = np.array([0.66, 0.33, 0.0, -0.33, -0.66])
    outer = np.vstack(
        [
            np.column_stack([tu * MOUTH_HALF_WIDTH, upper(tu)]),
            np.column_stack([tl * MOUTH_HALF_WIDTH, lower(tl)]),
        ]
    )
    ti_u = np.array([-0.8, -0.4, 0.0, 0.4, 0.8])
    ti_l = np.array([0.4, 0.0, -0.4])
    inner = np.vstack(
        [
            np.column_stack([ti_u * MOUTH_HALF_WIDTH, inner_upper(ti_u)]),
            np.column_stack([ti_l * MOUTH_HALF_WIDTH, inner_lower(ti_l)]),
        ]
    )
    return {"outer": outer, "inner": inner, "upper": upper, "lower": lower,
            "inner_upper": inner_upper, "inner_lower": inner_lower}


# -- rasteriser ---------------------------------------------------------------


def _segment_distance(px, py, a, b):
    """Distance from each pixel to segment ab."""
    d = b - a
    denom = float(d @ d) or 1e-12
    t = np.clip(((px - a[0]) * d[0] + (py - a[1]) * d[1]) / denom, 0.0, 1.0)
    return np.hypot(px - (a[0] + t * d[0]), py - (a[1] + t * d[1]))


def _polyline_alpha(px, py, pts, width, closed=False):
    pts = np.asarray(pts, dtype=float)
    segs = list(zip(pts[:-1], pts[1:]))
    if closed:
        segs.append((pts[-1], pts[0]))
    dist = np.full(px.shape, np.inf)
    for a, b in segs:
        dist = np.minimum(dist, _segment_distance(px, py, a, b))
    return np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)


def _blend(img, alpha, value):
    img *= 1.0 - alpha
    img += alpha * value


@dataclass
class _Placement:
    cx: float
    cy: float
    scale: float

    def to_image(self, pts):
        return np.column_stack([self.cx + self.scale * pts[:, 0], self.cy + self.scale * pts[:, 1]])


def _placement(size, rng) -> _Placement:
    h, w = size
    scale = 0.36 * min(h, w) * rng.uniform(0.93, 1.07)
    return _Placement(
        cx=(w - 1) / 2 + rng.uniform(-0.04, 0.04) * w,
        cy=(h - 1) / 2 + rng.uniform(-0.04, 0.04) * h,
        scale=scale,
    )


def generate_face(spec: FaceSpec, size: tuple[int, int] = (64, 64)) -> tuple[np.ndarray, LandmarkSet]:
    """Render one clean face.  Deterministic in ``spec`` (including its seed)."""
    h, w = size
    rng = np.random.default_rng(derive_seed(spec.seed, "render"))
    place = _placement(size, rng)
    face_pts = template_landmarks(spec.params)
    lm_xy = place.to_image(face_pts)

    py, px = np.mgrid[0:h, 0:w].astype(float)
    bg = rng.uniform(0.15, 0.35)
    skin = rng.uniform(0.6, 0.8)
    ink = rng.uniform(0.0, 0.12)
    img = np.full(size, bg)

    # face disc (anti-aliased ellipse)
    ex = (px - place.cx) / (FACE_HALF_WIDTH * place.scale)
    ey = (py - place.cy) / (FACE_HALF_HEIGHT * 1.1 * place.scale)
    rad = np.hypot(ex, ey)
    edge = (1.0 - rad) * FACE_HALF_WIDTH * place.scale
    _blend(img, np.clip(edge + 0.5, 0.0, 1.0), skin)

    lw = max(1.0, place.scale * 0.07)
    _blend(img, _polyline_alpha(px, py, lm_xy[0:17], lw * 0.8), ink)
    _blend(img, _polyline_alpha(px, py, lm_xy[17:22], lw * 1.3), ink)
    _blend(img, _polyline_alpha(px, py, lm_xy[22:27], lw * 1.3), ink)
    _blend(img, _polyline_alpha(px, py, lm_xy[27:31], lw * 0.8), ink)
    _blend(img, _polyline_alpha(px, py, lm_xy[31:36], lw * 0.8), ink)

    eye_open = spec.params[2]
    for base in (36, 42):
        ring = lm_xy[base : base + 6]
        _blend(img, _polyline_alpha(px, py, ring, lw * 0.8, closed=True), ink)
        centre = ring.mean(axis=0)
        pupil_r = place.scale * (0.015 + 0.07 * eye_open)
        d = np.hypot(px - centre[0], py - centre[1])
        _blend(img, np.clip(pupil_r + 0.5 - d, 0.0, 1.0), ink)

    _draw_mouth(img, px, py, spec.params, place, lw, ink)

    img += rng.normal(0.0, 0.02, size)
    np.clip(img, 0.0, 1.0, out=img)

    conf = rng.uniform(*CONF_VISIBLE, size=NUM_LANDMARKS)
    points = np.column_stack([lm_xy, conf])
    return img, LandmarkSet(points, (h, w))


def _draw_mouth(img, px, py, params, place, lw, ink):
    curve, mouth_open = params[0], params[1]
    m = _mouth_curves(curve, mouth_open)
    # interior between the inner lip curves, in face units
    fx = (px - place.cx) / place.scale
    fy = (py - place.cy) / place.scale
    t = fx / MOUTH_HALF_WIDTH
    inside = np.abs(t) < 1.0
    tc = np.clip(t, -1.0, 1.0)
    top = m["inner_upper"](tc)
    bot = m["inner_lower"](tc)
    depth = np.minimum(fy - top, bot - fy) * place.scale
    _blend(img, np.where(inside, np.clip(depth + 0.5, 0.0, 1.0), 0.0), ink * 0.5)

    ts = np.linspace(-1.0, 1.0, 15)
    up = place.to_image(np.column_stack([ts * MOUTH_HALF_WIDTH, m["upper"](ts)]))
    lo = place.to_image(np.column_stack([ts * MOUTH_HALF_WIDTH, m["lower"](ts)]))
    _blend(img, _polyline_alpha(px, py, up, lw), ink)
    _blend(img, _polyline_alpha(px, py, lo, lw), ink)


# -- occluders ----------------------------------------------------------------

SHAPES = ("rectangle", "ellipse", "band")
FILLS = ("solid", "noise", "striped")
ANCHOR_GROUPS = {
    "eyes": list(range(36, 48)),
    "brows": list(range(17, 27)),
    "mouth": list(range(48, 68)),
    "nose": list(range(27, 36)),
    "cheek": [2, 3, 4, 12, 13, 14],
}


@dataclass(frozen=True)
class OccluderSpec:
    """Distribution over occluders.

    ``size_range`` is a fraction of the face's width/height.  Occluders are
    centred on a random landmark of a random facial part (``anchors``), with
    jitter, so the bounding box always intersects the face.
    """

    shapes: tuple[str, ...] = SHAPES
    fills: tuple[str, ...] = FILLS
    size_range: tuple[float, float] = (0.15, 0.45)
    probability: float = 1.0
    anchors: tuple[str, ...] = ("eyes", "brows", "mouth", "nose", "cheek")


@dataclass(frozen=True)
class Occluder:
    shape: str
    fill: str
    bbox: tuple[float, float, float, float]  # x0, y0, x1, y1 (inclusive pixel coords)


@dataclass
class SampleRecord:
    image: np.ndarray
    label: int
    landmarks: LandmarkSet
    occluder: Occluder | None = None


def _face_box(lms: LandmarkSet) -> tuple[float, float, float, float]:
    xy = lms.xy[:17]
    x0, x1 = xy[:, 0].min(), xy[:, 0].max()
    cy = xy[0, 1]
    half_h = (xy[:, 1].max() - cy)
    return x0, cy - 0.9 * half_h, x1, xy[:, 1].max()


def sample_occluder(lms: LandmarkSet, occ: OccluderSpec, rng: np.random.Generator) -> Occluder:
    fx0, fy0, fx1, fy1 = _face_box(lms)
    fw, fh = fx1 - fx0, fy1 - fy0
    shape = occ.shapes[rng.integers(len(occ.shapes))]
    fill = occ.fills[rng.integers(len(occ.fills))]
    group = ANCHOR_GROUPS[occ.anchors[rng.integers(len(occ.anchors))]]
    anchor = lms.xy[group[rng.integers(len(group))]]
    lo, hi = occ.size_range
    bh = rng.uniform(lo, hi) * fh
    if shape == "band":
        bw = 1.1 * fw
        cx = (fx0 + fx1) / 2
    else:
        bw = rng.uniform(lo, hi) * fw
        cx = anchor[0] + rng.uniform(-0.25, 0.25) * bw
    cy = anchor[1] + rng.uniform(-0.25, 0.25) * bh
    return Occluder(shape, fill, (cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2))


def _occluder_mask(occ: Occluder, size) -> np.ndarray:
    h, w = size
    py, px = np.mgrid[0:h, 0:w].astype(float)
    x0, y0, x1, y1 = occ.bbox
    if occ.shape == "ellipse":
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        rx, ry = max((x1 - x0) / 2, 0.5), max((y1 - y0) / 2, 0.5)
        return ((px - cx) / rx) ** 2 + ((py - cy) / ry) ** 2 <= 1.0
    return (px >= x0) & (px <= x1) & (py >= y0) & (py <= y1)


def _fill_pixels(occ: Occluder, size, rng) -> np.ndarray:
    h, w = size
    if occ.fill == "solid":
        return np.full(size, rng.uniform(0.2, 0.9))
    if occ.fill == "noise":
        return rng.uniform(0.0, 1.0, size)
    period = int(rng.integers(3, 7))
    py, px = np.mgrid[0:h, 0:w]
    coord = px if rng.random() < 0.5 else py
    lo, hi = sorted(rng.uniform(0.0, 1.0, 2))
    return np.where((coord // period) % 2 == 0, lo, hi)


def landmarks_in_box(lms: LandmarkSet, bbox) -> np.ndarray:
    x0, y0, x1, y1 = bbox
    x, y = lms.xy[:, 0], lms.xy[:, 1]
    return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)


def apply_occlusion(record: SampleRecord, occ: OccluderSpec, seed: int) -> SampleRecord:
    """Paint an occluder sampled from ``occ`` onto a clean record."""
    rng = np.random.default_rng(derive_seed(seed, "occlude"))
    if rng.random() >= occ.probability:
        return record
    return paint_occluder(record, sample_occluder(record.landmarks, occ, rng), rng)


def paint_occluder(record: SampleRecord, occluder: Occluder, rng: np.random.Generator) -> SampleRecord:
    """Apply one concrete occluder: fill its pixels and demote covered landmarks."""
    size = record.image.shape
    mask = _occluder_mask(occluder, size)
    image = np.where(mask, _fill_pixels(occluder, size, rng), record.image)

    covered = landmarks_in_box(record.landmarks, occluder.bbox)
    points = record.landmarks.points.copy()
    points[covered, 2] = rng.uniform(*CONF_OCCLUDED, size=int(covered.sum()))
    lms = LandmarkSet(points, record.landmarks.image_size)
    return replace(record, image=image, landmarks=lms, occluder=occluder)


def make_record(class_id: int, seed: int, size=(64, 64), occ: OccluderSpec | None = None) -> SampleRecord:
    spec = sample_face_spec(class_id, seed)
    image, lms = generate_face(spec, size)
    rec = SampleRecord(image, class_id, lms)
    if occ is not None and occ.probability > 0:
        rec = apply_occlusion(rec, occ, seed)
    return rec


# -- datasets -----------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    per_class: dict = field(default_factory=lambda: {"train": 200, "val": 20, "test": 50})
    occlusion: dict = field(default_factory=lambda: {"train": 0.0, "val": 1.0, "test": 1.0})
    num_classes: int = NUM_CLASSES
    image_size: tuple[int, int] = (64, 64)
    seed: int = 0


@dataclass
class Split:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int
    landmarks: np.ndarray  # (N, 68, 3)
    occluders: list  # Occluder | None per record

    def __len__(self) -> int:
        return len(self.labels)

    def landmark_set(self, i: int) -> LandmarkSet:
        return LandmarkSet(self.landmarks[i], self.images.shape[1:])


def generate_split(cfg: DatasetConfig, split: str) -> Split:
    if cfg.num_classes > NUM_CLASSES:
        raise ValueError(f"at most {NUM_CLASSES} classes are defined")
    count = int(cfg.per_class[split])
    if count < 1:
        raise ValueError(f"per-class count for {split!r} must be >= 1")
    occ = OccluderSpec(probability=float(cfg.occlusion.get(split, 0.0)))
    images, labels, lms, occluders = [], [], [], []
    idx = 0
    for k in range(count):
        for c in range(cfg.num_classes):
            rec = make_record(c, derive_seed(cfg.seed, f"{split}:{idx}"), cfg.image_size, occ)
            images.append(rec.image.astype(np.float32))
            labels.append(rec.label)
            lms.append(rec.landmarks.points)
            occluders.append(rec.occluder)
            idx += 1
    return Split(np.stack(images), np.array(labels, dtype=np.int64), np.stack(lms), occluders)


def generate_dataset(cfg: DatasetConfig) -> dict[str, Split]:
    return {name: generate_split(cfg, name) for name in cfg.per_class}


# -- on-disk container ----------------------------------------------------------
#
#   manifest.txt             key=value generation config
#   {split}_images.bin       one tensor record, (N, H, W)
#   {split}_landmarks.txt    68 rows of "x y conf" per record
#   {split}_labels.txt       one class index per line
#   {split}_occluders.txt    "none" or "shape fill x0 y0 x1 y1" per line

DATASET_FORMAT = 1


class DatasetIOError(OSError):
    pass


def manifest_for(cfg: DatasetConfig, splits: dict[str, Split]) -> dict:
    out: dict = {"format": DATASET_FORMAT, "seed": cfg.seed, "num_classes": cfg.num_classes,
                 "image_size": tuple(cfg.image_size), "splits": tuple(splits)}
    for name, split in splits.items():
        out[f"{name}.per_class"] = int(cfg.per_class[name])
        out[f"{name}.occlusion"] = float(cfg.occlusion.get(name, 0.0))
        out[f"{name}.records"] = len(split)
    return out


def _occluder_line(o: Occluder | None) -> str:
    if o is None:
        return "none"
    return " ".join([o.shape, o.fill] + [repr(float(v)) for v in o.bbox])


def _parse_occluder(line: str) -> Occluder | None:
    parts = line.split()
    if parts == ["none"]:
        return None
    if len(parts) != 6:
        raise ValueError(f"bad occluder line {line!r}")
    return Occluder(parts[0], parts[1], tuple(float(v) for v in parts[2:]))


def _write(path: Path, writer) -> None:
    try:
        writer(path)
    except OSError as exc:
        raise DatasetIOError(f"{path}: write failed ({exc.strerror or exc})") from exc


def save_dataset(root, cfg: DatasetConfig, splits: dict[str, Split]) -> Path:
    root = Path(root)
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetIOError(f"{root}: cannot create directory ({exc.strerror or exc})") from exc
    for name, split in splits.items():
        def images(p, s=split):
            with open(p, "wb") as fh:
                write_tensor(fh, s.images)

        _write(root / f"{name}_images.bin", images)
        _write(root / f"{name}_landmarks.txt", lambda p, s=split: p.write_text(format_landmarks(s.landmarks)))
        _write(root / f"{name}_labels.txt", lambda p, s=split: p.write_text("".join(f"{int(v)}\n" for v in s.labels)))
        _write(root / f"{name}_occluders.txt",
               lambda p, s=split: p.write_text("".join(_occluder_line(o) + "\n" for o in s.occluders)))
    _write(root / "manifest.txt", lambda p: write_kv(p, manifest_for(cfg, splits)))
    return root


def write_dataset(root, cfg: DatasetConfig) -> dict[str, Split]:
    splits = generate_dataset(cfg)
    save_dataset(root, cfg, splits)
    return splits


def _read(path: Path, reader):
    try:
        return reader(path)
    except FileNotFoundError as exc:
        raise DatasetIOError(f"{path}: missing dataset file") from exc
    except OSError as exc:
        raise DatasetIOError(f"{path}: read failed ({exc.strerror or exc})") from exc
    except (ValueError, EOFError) as exc:
        raise DatasetIOError(f"{path}: malformed ({exc})") from exc


def read_manifest(root) -> dict[str, str]:
    path = Path(root) / "manifest.txt"
    return _read(path, lambda p: parse_kv(p.read_text(), str(p)))


def load_split(root, name: str) -> Split:
    root = Path(root)

    def images(p):
        with open(p, "rb") as fh:
            return read_tensor(fh).astype(np.float32)

    imgs = _read(root / f"{name}_images.bin", images)
    lms = _read(root / f"{name}_landmarks.txt", lambda p: parse_landmarks(p.read_text()))
    labels = _read(root / f"{name}_labels.txt",
                   lambda p: np.array([int(v) for v in p.read_text().split()], dtype=np.int64))
    occ = _read(root / f"{name}_occluders.txt",
                lambda p: [_parse_occluder(line) for line in p.read_text().splitlines() if line.strip()])
    if not (len(imgs) == len(lms) == len(labels) == len(occ)):
        raise DatasetIOError(
            f"{root}: split {name!r} has inconsistent record counts "
            f"(images {len(imgs)}, landmarks {len(lms)}, labels {len(labels)}, occluders {len(occ)})"
        )
    return Split(imgs, labels, lms, occ)


def load_dataset(root, splits: Sequence[str] | None = None) -> dict[str, Split]:
    manifest = read_manifest(root)
    names = splits if splits is not None else manifest.get("splits", "").split(",")
    return {n: load_split(root, n) for n in names if n}
