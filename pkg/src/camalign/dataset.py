"""Synthetic localization dataset: large bodies carrying a small
class-identifying marker glyph.

The geometry is chosen so the classification cue (a 6x6 colored glyph,
<1% of the image) is much smaller than the localization target (the body,
20-60% of the image).  A classifier can ace the task from the marker alone,
which is exactly the discriminative-part shortcut the alignment losses are
meant to fix — so the part-vs-whole gap is measurable at desk scale.

Bodies are informative but never decisive: each body kind (ellipse,
rectangle, triangle) has a characteristic base color, and several classes
share each kind, so the body narrows the label to a group while only the
marker decides it.  A body-only classifier tops out at the group prior
(0.375 for the default 8-class layout) versus >0.9 from marker crops.

Everything is derived from per-sample RNG substreams keyed by
(seed, split, class, index): regenerating any split is bitwise
deterministic and independent of the other splits' sizes.

On disk: ``index.json`` + PPM images + PGM masks.  Images are quantized to
the 8-bit grid before use so that save/load is an exact round trip.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .formats import read_pgm, read_ppm, write_pgm, write_ppm

BODY_KINDS = ("ellipse", "rectangle", "triangle")

# Per-kind target area fraction of the image (single object).  Upper ends
# keep the tight body box below ~half the image so a degenerate full-image
# prediction can never reach IoU 0.5 against the ground truth.
_AREA_RANGES = {
    "ellipse": (0.25, 0.34),
    "rectangle": (0.26, 0.42),
    "triangle": (0.20, 0.22),
}

_PLACEMENT_TRIES = 200
_EDGE_MARGIN = 2

# In-body texture: per-pixel noise modulating the body color.  Without it
# the body interior is a constant patch, convolutional features stay at
# exactly zero across most of the object, and any feature-map diagnostic of
# "where the object is" degenerates to edges and the marker.  The noise is
# independent per pixel so its local energy is uniform across the body —
# feature norms then form a plateau over the whole object instead of a
# smooth blob whose interior dips below partition thresholds.  It is drawn
# independently of the class, so it carries no label information.
_BODY_TEXTURE = 0.2

# Base body color per body kind, jittered per sample.  Classes sharing a
# kind share a palette, so body appearance narrows the class to its group
# without deciding it.  The bases are chosen far from the background tint
# cube ([0.25, 0.55]^3) and from the marker colors of the classes that use
# each kind, so neither the object nor its glyph ever blends in.
_BODY_BASE_COLORS = {
    "ellipse": (0.15, 0.80, 0.80),      # teal
    "rectangle": (0.95, 0.55, 0.15),    # orange
    "triangle": (0.95, 0.45, 0.65),     # rose
}
_BODY_COLOR_JITTER = 0.05

# Ordered so the default round-robin hands each body-kind group glyphs of
# similar stencil coverage: a glyph's pooled color signal scales with its
# coverage, and a sparse glyph grouped with a dense one is drowned out.
GLYPH_NAMES = ("ring", "hbars", "cross", "checker", "vbars", "wedge",
               "saltire", "square")

_GLYPH_ROWS = {
    "square": ("111111", "111111", "111111", "111111", "111111", "111111"),
    "ring": ("111111", "100001", "100001", "100001", "100001", "111111"),
    "cross": ("001100", "001100", "111111", "111111", "001100", "001100"),
    "saltire": ("110011", "011110", "001100", "001100", "011110", "110011"),
    "hbars": ("111111", "111111", "000000", "000000", "111111", "111111"),
    "vbars": ("110011", "110011", "110011", "110011", "110011", "110011"),
    "wedge": ("100000", "110000", "111000", "111100", "111110", "111111"),
    "checker": ("110011", "110011", "001100", "001100", "110011", "110011"),
}

# Chosen and ordered so that classes sharing a body kind (class % 3 under
# the default round-robin) get markers whose deltas against that body color
# stay far apart in at least two channels after local color mixing: a
# downsampled glyph is a body/marker blend, and within-kind pairs separated
# along a single channel (e.g. blue vs black on a warm body) become metamers.
MARKER_COLORS = (
    (0.90, 0.10, 0.10),
    (0.10, 0.85, 0.15),
    (0.15, 0.25, 0.95),
    (0.95, 0.90, 0.10),
    (0.90, 0.15, 0.90),
    (0.55, 0.95, 0.10),
    (0.98, 0.98, 0.98),
    (0.10, 0.90, 0.90),
)

_SPLIT_IDS = {"train": 0, "val": 1, "test": 2}


def _glyph_stencil(name: str, size: int) -> np.ndarray:
    rows = _GLYPH_ROWS[name]
    base = np.array([[ch == "1" for ch in row] for row in rows])
    if size == 6:
        return base
    idx = (np.arange(size) * 6) // size
    return base[np.ix_(idx, idx)]


def marker_color_index(class_idx: int) -> int:
    n = len(MARKER_COLORS)
    return (class_idx + class_idx // n) % n


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 8
    images_per_class: dict = field(
        default_factory=lambda: {"train": 400, "val": 80, "test": 120})
    image_size: int = 64
    body_shapes: tuple = ()     # per-class body kind; defaults to round-robin
    markers: tuple = ()         # per-class glyph name; defaults derived
    noise_level: float = 0.06
    seed: int = 7
    marker_size: int = 6
    max_objects: int = 1

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(GLYPH_NAMES) * len(MARKER_COLORS):
            raise ConfigError(
                f"num_classes must be in 1..{len(GLYPH_NAMES) * len(MARKER_COLORS)}, "
                f"got {self.num_classes}")
        ipc = dict(self.images_per_class)
        if set(ipc) != set(_SPLIT_IDS) or any(int(v) != v or v < 1 for v in ipc.values()):
            raise ConfigError(
                f"images_per_class needs positive ints for train/val/test, got {ipc}")
        object.__setattr__(self, "images_per_class", {k: int(ipc[k]) for k in _SPLIT_IDS})
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        body = tuple(self.body_shapes) or tuple(
            BODY_KINDS[i % len(BODY_KINDS)] for i in range(self.num_classes))
        if len(body) != self.num_classes or any(b not in BODY_KINDS for b in body):
            raise ConfigError(f"body_shapes must name {self.num_classes} of {BODY_KINDS}")
        object.__setattr__(self, "body_shapes", body)
        marks = tuple(self.markers) or tuple(
            GLYPH_NAMES[i % len(GLYPH_NAMES)] for i in range(self.num_classes))
        if len(marks) != self.num_classes or any(m not in GLYPH_NAMES for m in marks):
            raise ConfigError(f"markers must name {self.num_classes} of {GLYPH_NAMES}")
        object.__setattr__(self, "markers", marks)
        if not 0.0 <= self.noise_level <= 0.3:
            raise ConfigError(f"noise_level must be in [0, 0.3], got {self.noise_level}")
        if not 4 <= self.marker_size <= self.image_size // 8:
            raise ConfigError(
                f"marker_size must be in 4..{self.image_size // 8}, got {self.marker_size}")
        if not 1 <= self.max_objects <= 2:
            raise ConfigError(f"max_objects must be 1 or 2, got {self.max_objects}")

    def to_dict(self):
        return {
            "num_classes": self.num_classes,
            "images_per_class": dict(self.images_per_class),
            "image_size": self.image_size,
            "body_shapes": list(self.body_shapes),
            "markers": list(self.markers),
            "noise_level": self.noise_level,
            "seed": self.seed,
            "marker_size": self.marker_size,
            "max_objects": self.max_objects,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        for key in ("body_shapes", "markers"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class LocalizationSample:
    image: np.ndarray          # (H,W,3) float64 in [0,1], on the u8 grid
    label: int
    gt_boxes: list             # [(x0,y0,x1,y1)] half-open pixel boxes
    gt_mask: np.ndarray        # (H,W) bool
    marker_boxes: list = field(default_factory=list)


@dataclass
class LocalizationDataset:
    spec: DatasetSpec
    splits: dict               # split name -> list[LocalizationSample]


def _body_mask(kind, cx, cy, pa, pb, flip, size):
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "ellipse":
        return ((xx - cx) / pa) ** 2 + ((yy - cy) / pb) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(xx - cx) <= pa) & (np.abs(yy - cy) <= pb)
    # isoceles triangle: pa = half base, pb = height, flip = apex down
    top, bot = cy - pb / 2.0, cy + pb / 2.0
    inside_y = (yy >= top) & (yy <= bot)
    frac = ((bot - yy) if flip else (yy - top)) / pb
    return inside_y & (np.abs(xx - cx) <= pa * (1.0 - frac))


def _sample_body(rng, kind, size, area_scale):
    lo, hi = _AREA_RANGES[kind]
    frac = rng.uniform(lo, hi) * area_scale
    area = frac * size * size
    if kind == "ellipse":
        r = rng.uniform(0.75, 1.33)
        pa = float(np.sqrt(area * r / np.pi))
        pb = area / (np.pi * pa)
        flip = False
    elif kind == "rectangle":
        r = rng.uniform(0.75, 1.33)
        pa = float(np.sqrt(area * r) / 2.0)
        pb = area / (4.0 * pa)
        flip = False
    else:
        r = rng.uniform(0.8, 1.25)
        pb = float(np.sqrt(2.0 * area * r))     # height
        pa = pb / (2.0 * r)                     # half base
        flip = bool(rng.integers(0, 2))
    half_w = pa
    half_h = pb / 2.0 if kind == "triangle" else pb
    m = _EDGE_MARGIN
    if half_w + m >= size / 2.0 or half_h + m >= size / 2.0:
        return None
    cx = rng.uniform(half_w + m, size - m - half_w)
    cy = rng.uniform(half_h + m, size - m - half_h)
    return kind, cx, cy, pa, pb, flip


def _tight_box(mask):
    ys, xs = np.nonzero(mask)
    return (int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1)


def _boxes_disjoint(a, b, gap):
    return (a[2] + gap <= b[0] or b[2] + gap <= a[0]
            or a[3] + gap <= b[1] or b[3] + gap <= a[1])


def _marker_windows(mask, msize):
    """Top-left corners (y,x) of every all-inside msize x msize window."""
    ii = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
    ii[1:, 1:] = np.cumsum(np.cumsum(mask.astype(np.int64), axis=0), axis=1)
    h, w = mask.shape
    sums = (ii[msize:h + 1, msize:w + 1] - ii[msize:h + 1, :w - msize + 1]
            - ii[:h - msize + 1, msize:w + 1] + ii[:h - msize + 1, :w - msize + 1])
    ys, xs = np.nonzero(sums == msize * msize)
    return list(zip(ys.tolist(), xs.tolist()))


def _body_and_tint(rng, kind, marker_color):
    """Jittered kind color plus a background tint that stays clear of it."""
    base = np.asarray(_BODY_BASE_COLORS[kind])
    for _ in range(100):
        body = np.clip(base + rng.uniform(-_BODY_COLOR_JITTER,
                                          _BODY_COLOR_JITTER, size=3), 0.0, 1.0)
        tint = rng.uniform(0.25, 0.55, size=3)
        if (np.linalg.norm(body - tint) >= 0.30
                and np.linalg.norm(body - marker_color) >= 0.25):
            return body, tint
    raise DataError("could not sample a body color distinct from background/marker")


def _smooth_noise(rng, size, grid=8):
    coarse = rng.normal(0.0, 1.0, size=(grid, grid, 3))
    return ndimage.zoom(coarse, (size / grid, size / grid, 1.0), order=1,
                        mode="nearest", grid_mode=True)


def generate_sample(spec: DatasetSpec, split: str, class_idx: int,
                    index: int) -> LocalizationSample:
    """Render one sample from its own RNG substream."""
    key = (int(spec.seed), _SPLIT_IDS[split], int(class_idx), int(index))
    rng = np.random.default_rng(np.random.SeedSequence(key))
    size = spec.image_size
    msize = spec.marker_size
    stencil = _glyph_stencil(spec.markers[class_idx], msize)
    marker_color = np.asarray(MARKER_COLORS[marker_color_index(class_idx)])
    kind = spec.body_shapes[class_idx]

    # Object count cycles with the sample index when multi-object generation
    # is enabled, so both single- and multi-box samples are guaranteed to
    # appear; if a crowded layout cannot be placed the sample falls back to
    # a single object rather than failing.
    n_goal = 1 + index % spec.max_objects
    plan = [n_goal] if n_goal == 1 else [n_goal, 1]
    attempts = [(n, t) for n in plan for t in range(_PLACEMENT_TRIES)]
    for n_obj, _attempt in attempts:
        area_scale = 1.0 / n_obj
        geoms = []
        for _ in range(n_obj):
            g = _sample_body(rng, kind, size, area_scale)
            if g is None:
                break
            geoms.append(g)
        if len(geoms) < n_obj:
            continue
        masks = [_body_mask(*g, size) for g in geoms]
        if any(not m.any() for m in masks):
            continue
        boxes = [_tight_box(m) for m in masks]
        ok = all(
            _boxes_disjoint(boxes[i], boxes[j], gap=2)
            for i in range(n_obj) for j in range(i + 1, n_obj))
        # degenerate-prediction guard: no single tight box may cover most
        # of the image
        ok = ok and all(
            (b[2] - b[0]) * (b[3] - b[1]) <= 0.48 * size * size for b in boxes)
        union = np.zeros((size, size), dtype=bool)
        for m in masks:
            union |= m
        frac = union.mean()
        ok = ok and 0.20 <= frac <= 0.60
        windows = [_marker_windows(m, msize) for m in masks]
        ok = ok and all(windows)
        if not ok:
            continue

        body_color, tint = _body_and_tint(rng, kind, marker_color)
        img = np.clip(tint[None, None, :]
                      + spec.noise_level * _smooth_noise(rng, size), 0.0, 1.0)
        texture = rng.uniform(-1.0, 1.0, size=(size, size, 3))
        marker_boxes = []
        for m, wins in zip(masks, windows):
            img[m] = np.clip(body_color + _BODY_TEXTURE * texture[m], 0.0, 1.0)
            wy, wx = wins[int(rng.integers(len(wins)))]
            patch = img[wy:wy + msize, wx:wx + msize]
            patch[stencil] = marker_color
            marker_boxes.append((wx, wy, wx + msize, wy + msize))
        img = np.round(img * 255.0) / 255.0

        order = sorted(range(n_obj), key=lambda i: (boxes[i][1], boxes[i][0]))
        return LocalizationSample(
            image=img,
            label=int(class_idx),
            gt_boxes=[boxes[i] for i in order],
            gt_mask=union,
            marker_boxes=[marker_boxes[i] for i in order],
        )
    raise DataError(
        f"placement infeasible after {_PLACEMENT_TRIES} attempts "
        f"(image_size={size}, max_objects={spec.max_objects}, body={kind})")


def generate(spec: DatasetSpec) -> LocalizationDataset:
    """All splits; bitwise deterministic for a given spec."""
    splits = {}
    for split in _SPLIT_IDS:
        samples = []
        for class_idx in range(spec.num_classes):
            for index in range(spec.images_per_class[split]):
                samples.append(generate_sample(spec, split, class_idx, index))
        splits[split] = samples
    return LocalizationDataset(spec=spec, splits=splits)


# ---------------------------------------------------------------------------
# persistence


def _sample_name(split, label, i):
    return f"{split}_{label:02d}_{i:04d}"


def save(dataset: LocalizationDataset, directory) -> None:
    os.makedirs(os.path.join(directory, "images"), exist_ok=True)
    os.makedirs(os.path.join(directory, "masks"), exist_ok=True)
    records = []
    for split, samples in dataset.splits.items():
        counters = {}
        for s in samples:
            i = counters.get(s.label, 0)
            counters[s.label] = i + 1
            name = _sample_name(split, s.label, i)
            img_rel = f"images/{name}.ppm"
            mask_rel = f"masks/{name}.pgm"
            write_ppm(os.path.join(directory, img_rel),
                      np.round(s.image * 255.0).astype(np.uint8))
            write_pgm(os.path.join(directory, mask_rel),
                      np.where(s.gt_mask, 255, 0).astype(np.uint8))
            records.append({
                "file": img_rel,
                "mask_file": mask_rel,
                "label": int(s.label),
                "split": split,
                "boxes": [list(b) for b in s.gt_boxes],
                "marker_boxes": [list(b) for b in s.marker_boxes],
            })
    index = {"spec": dataset.spec.to_dict(), "samples": records}
    with open(os.path.join(directory, "index.json"), "w") as fh:
        json.dump(index, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load(directory) -> LocalizationDataset:
    index_path = os.path.join(directory, "index.json")
    if not os.path.isfile(index_path):
        raise DataError(f"missing dataset index: {index_path}")
    try:
        with open(index_path) as fh:
            index = json.load(fh)
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt dataset index {index_path}: {exc}") from None
    try:
        spec = DatasetSpec.from_dict(index["spec"])
        records = index["samples"]
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed dataset index {index_path}: {exc}") from None

    splits = {split: [] for split in _SPLIT_IDS}
    for rec in records:
        split = rec.get("split")
        if split not in splits:
            raise DataError(f"bad split {split!r} in {index_path}")
        rgb = read_ppm(os.path.join(directory, rec["file"]))
        mask = read_pgm(os.path.join(directory, rec["mask_file"]))
        if rgb.shape[:2] != (spec.image_size, spec.image_size) \
                or mask.shape != rgb.shape[:2]:
            raise DataError(
                f"image/mask dims {rgb.shape} vs {mask.shape} do not match "
                f"spec size {spec.image_size}: {rec['file']}")
        splits[split].append(LocalizationSample(
            image=rgb.astype(np.float64) / 255.0,
            label=int(rec["label"]),
            gt_boxes=[tuple(b) for b in rec["boxes"]],
            gt_mask=mask > 127,
            marker_boxes=[tuple(b) for b in rec.get("marker_boxes", [])],
        ))
    for split, samples in splits.items():
        want = spec.images_per_class[split] * spec.num_classes
        if len(samples) != want:
            raise DataError(
                f"index/image count mismatch for split {split!r}: "
                f"{len(samples)} records, spec says {want}: {index_path}")
    return LocalizationDataset(spec=spec, splits=splits)
