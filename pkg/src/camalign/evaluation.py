"""Localization metrics: box extraction from score maps, IoU accuracies,
threshold sweeps (MaxBoxAccV2), pixel-level average precision, and the
diagnostic in-box histograms.

Score maps arrive at image resolution (callers upsample feature-resolution
maps first).  Normalization happens inside box extraction because it is
part of the protocol: min-max for CAM/norm maps, max-normalization for
similarity maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

_STRUCTURES = {
    4: np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool),
    8: np.ones((3, 3), dtype=bool),
}

DEFAULT_DELTAS = (0.3, 0.5, 0.7)


@dataclass(frozen=True)
class Box:
    """Half-open pixel box: covers x in [x0,x1), y in [y0,y1)."""

    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (self.x0 < self.x1 and self.y0 < self.y1):
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def astuple(self):
        return (self.x0, self.y0, self.x1, self.y1)


def _as_box(b):
    return b if isinstance(b, Box) else Box(*b)


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    a, b = _as_box(a), _as_box(b)
    ix = min(a.x1, b.x1) - max(a.x0, b.x0)
    iy = min(a.y1, b.y1) - max(a.y0, b.y0)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def _interp_matrix(src: int, dst: int) -> np.ndarray:
    """Align-corners linear interpolation weights, (dst, src)."""
    r = np.zeros((dst, src))
    if src == 1:
        r[:, 0] = 1.0
        return r
    pos = np.arange(dst) * (src - 1) / (dst - 1)
    i0 = np.minimum(pos.astype(np.int64), src - 2)
    frac = pos - i0
    rows = np.arange(dst)
    r[rows, i0] = 1.0 - frac
    r[rows, i0 + 1] = frac
    return r


def upsample_bilinear(score_map, target) -> np.ndarray:
    """Align-corners bilinear resize of a 2-d map to (H_img, W_img).

    Output values are convex combinations of input values, so the result
    stays within [min, max] of the input.
    """
    m = np.asarray(score_map, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"upsample_bilinear: need a 2-d map, got shape {m.shape}")
    th, tw = int(target[0]), int(target[1])
    sh, sw = m.shape
    if th < sh or tw < sw:
        raise ValueError(f"upsample_bilinear: target {(th, tw)} smaller than source {m.shape}")
    return _interp_matrix(sh, th) @ m @ _interp_matrix(sw, tw).T


def normalize_map(score_map, mode: str) -> np.ndarray:
    """``minmax``: affine to [0,1] (constant maps -> zeros).
    ``max``: divide by the positive max, keeping negative values negative;
    a map with no positive values becomes zeros (nothing can clear a
    threshold in [0,1] anyway)."""
    m = np.asarray(score_map, dtype=np.float64)
    if mode == "minmax":
        lo, hi = float(m.min()), float(m.max())
        if hi == lo:
            return np.zeros_like(m)
        return (m - lo) / (hi - lo)
    if mode == "max":
        hi = float(m.max())
        if hi <= 0.0:
            return np.zeros_like(m)
        return m / hi
    raise ValueError(f"normalize_map: unknown mode {mode!r}")


def extract_boxes(score_map, tau: float, normalization: str = "minmax",
                  connectivity: int = 8) -> list:
    """Threshold a score map and box its connected components.

    The map is normalized per ``normalization``, binarized at value > tau
    (strict), and components are found at the given connectivity (8 by
    default; 4 splits diagonal contacts).  Boxes come back sorted by
    component area descending.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"extract_boxes: tau must be in [0,1], got {tau}")
    if connectivity not in _STRUCTURES:
        raise ValueError(f"extract_boxes: connectivity must be 4 or 8, got {connectivity}")
    norm = normalize_map(score_map, normalization)
    return _component_boxes(norm > tau, connectivity, by_area=True)


def _component_boxes(binary, connectivity, by_area=False):
    if not binary.any():
        return []
    labels, _n = ndimage.label(binary, structure=_STRUCTURES[connectivity])
    slices = ndimage.find_objects(labels)
    boxes = [Box(x0=sl[1].start, y0=sl[0].start, x1=sl[1].stop, y1=sl[0].stop)
             for sl in slices]
    if by_area:
        areas = [int(np.count_nonzero(labels[sl] == i + 1))
                 for i, sl in enumerate(slices)]
        boxes = [b for _a, b in sorted(zip(areas, boxes),
                                       key=lambda t: -t[0])]
    return boxes


def _best_iou_multi(boxes, gt_boxes) -> float:
    return max((iou(b, g) for b in boxes for g in gt_boxes), default=0.0)


def _best_iou_single(boxes, gt_boxes) -> float:
    if not boxes:
        return 0.0
    return max((iou(boxes[0], g) for g in gt_boxes), default=0.0)


def box_accuracy(samples, score_maps, tau: float, delta: float, multi: bool,
                 normalization: str = "minmax", connectivity: int = 8) -> float:
    """Fraction of images whose prediction at threshold tau hits a gt box.

    multi=False: classic single-box protocol — only the largest component
    counts.  multi=True: any extracted box vs any gt box (MaxBoxAccV2).
    """
    if len(samples) != len(score_maps):
        raise ValueError(
            f"box_accuracy: {len(samples)} samples but {len(score_maps)} score maps")
    if not samples:
        raise ValueError("box_accuracy: empty sample list")
    best = _best_iou_single if not multi else _best_iou_multi
    hits = 0
    for sample, sm in zip(samples, score_maps):
        boxes = extract_boxes(sm, tau, normalization, connectivity)
        if best(boxes, sample.gt_boxes) >= delta:
            hits += 1
    return hits / len(samples)


@dataclass
class SweepCurve:
    thresholds: list                 # ascending taus
    accuracy_per_iou: dict           # delta -> [accuracy per tau]

    def rows(self):
        for i, tau in enumerate(self.thresholds):
            yield (tau, *(self.accuracy_per_iou[d][i] for d in sorted(self.accuracy_per_iou)))


def default_tau_grid(n: int = 101) -> np.ndarray:
    if n < 1:
        raise ValueError(f"tau grid size must be >= 1, got {n}")
    if n == 1:
        return np.array([0.0])
    return np.linspace(0.0, 1.0, n)


def maxboxaccv2(samples, score_maps, deltas=DEFAULT_DELTAS, tau_grid=None,
                normalization: str = "minmax", connectivity: int = 8):
    """Box accuracy maximized over the binarization threshold sweep.

    Returns (per-delta scores, their mean, SweepCurve).  The curve retains
    the full accuracy-vs-tau table; its max at each delta IS the score.
    """
    if len(samples) != len(score_maps):
        raise ValueError(
            f"maxboxaccv2: {len(samples)} samples but {len(score_maps)} score maps")
    if tau_grid is None:
        tau_grid = default_tau_grid()
    taus = [float(t) for t in np.asarray(tau_grid).ravel()]
    if not taus or any(b <= a for a, b in zip(taus, taus[1:])):
        raise ValueError("maxboxaccv2: tau_grid must be nonempty and ascending")
    deltas = tuple(float(d) for d in deltas)
    # best multi-box IoU per (image, tau); accuracies are counts over it.
    # Normalizing once per image keeps the 101-threshold sweep cheap.
    best = np.zeros((len(samples), len(taus)))
    for i, (sample, sm) in enumerate(zip(samples, score_maps)):
        norm = normalize_map(sm, normalization)
        for j, tau in enumerate(taus):
            cand = _component_boxes(norm > tau, connectivity)
            best[i, j] = _best_iou_multi(cand, sample.gt_boxes)
    curve = SweepCurve(
        thresholds=taus,
        accuracy_per_iou={d: [float(np.mean(best[:, j] >= d)) for j in range(len(taus))]
                          for d in deltas},
    )
    per_delta = {d: max(curve.accuracy_per_iou[d]) for d in deltas}
    mean = sum(per_delta.values()) / len(deltas)
    return per_delta, mean, curve


def top_k_gt_loc(samples, score_maps, logits_per_sample, k: int, delta: float,
                 tau: float, normalization: str = "minmax",
                 connectivity: int = 8):
    """(top-k Loc, GT Loc) under the classic single-box protocol.

    Box correctness: the largest extracted box reaches IoU >= delta with
    some gt box.  Top-k Loc additionally requires the true label among the
    k largest logits; GT Loc ignores classification entirely.
    """
    if not len(samples) == len(score_maps) == len(logits_per_sample):
        raise ValueError(
            f"top_k_gt_loc: mismatched lengths {len(samples)}, {len(score_maps)}, "
            f"{len(logits_per_sample)}")
    if not samples:
        raise ValueError("top_k_gt_loc: empty sample list")
    loc_hits = 0
    topk_hits = 0
    for sample, sm, logits in zip(samples, score_maps, logits_per_sample):
        logits = np.asarray(logits, dtype=np.float64)
        if k > logits.shape[0]:
            raise ValueError(f"top_k_gt_loc: k={k} exceeds {logits.shape[0]} classes")
        boxes = extract_boxes(sm, tau, normalization, connectivity)
        correct_box = _best_iou_single(boxes, sample.gt_boxes) >= delta
        loc_hits += correct_box
        in_topk = sample.label in np.argsort(-logits, kind="stable")[:k]
        topk_hits += correct_box and in_topk
    n = len(samples)
    return topk_hits / n, loc_hits / n


def pxap(score_maps, gt_masks) -> float:
    """Pixel-wise average precision: pool every (score, is_fg) pixel,
    sweep all distinct thresholds descending, integrate P dR.

    Invariant under strictly monotone transforms of the scores.
    """
    if len(score_maps) != len(gt_masks):
        raise ValueError(f"pxap: {len(score_maps)} maps but {len(gt_masks)} masks")
    if not score_maps:
        raise ValueError("pxap: empty input")
    flat_scores = []
    flat_fg = []
    for sm, mask in zip(score_maps, gt_masks):
        sm = np.asarray(sm, dtype=np.float64)
        mask = np.asarray(mask, dtype=bool)
        if sm.shape != mask.shape:
            raise ValueError(f"pxap: map shape {sm.shape} vs mask shape {mask.shape}")
        flat_scores.append(sm.ravel())
        flat_fg.append(mask.ravel())
    scores = np.concatenate(flat_scores)
    fg = np.concatenate(flat_fg)
    total_fg = int(fg.sum())
    if total_fg == 0:
        raise ValueError("pxap: no foreground pixels in any mask")
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    tp = np.cumsum(fg[order])
    # last index of each equal-score run = one PR point per distinct threshold
    cuts = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    ap = 0.0
    r_prev = 0.0
    for i in cuts:
        p = tp[i] / (i + 1)
        r = tp[i] / total_fg
        ap += (r - r_prev) * p
        r_prev = r
    return float(ap)


@dataclass
class RegionHistograms:
    sim_counts: np.ndarray
    sim_edges: np.ndarray
    norm_counts: np.ndarray
    norm_edges: np.ndarray
    n_locations: int


def scale_box_to_grid(box, image_hw, grid_hw):
    """Cover an image-resolution box with feature-grid cells (never empty)."""
    x0, y0, x1, y1 = _as_box(box).astuple()
    ih, iw = image_hw
    gh, gw = grid_hw
    fx0 = int(np.floor(x0 * gw / iw))
    fy0 = int(np.floor(y0 * gh / ih))
    fx1 = min(gw, max(fx0 + 1, int(np.ceil(x1 * gw / iw))))
    fy1 = min(gh, max(fy0 + 1, int(np.ceil(y1 * gh / ih))))
    return Box(x0=fx0, y0=fy0, x1=fx1, y1=fy1)


def region_histograms(decomp, sample, bins: int = 20) -> RegionHistograms:
    """Histograms of similarity and normalized-norm values at feature
    locations inside the gt boxes (boxes scaled down to the feature grid).

    Bin counts sum to the number of in-box locations; ranges are fixed to
    [-1,1] for similarity and [0,1] for the normalized norm.
    """
    sim = decomp.sim_map.data
    norm_hat = decomp.norm_hat.data
    gh, gw = sim.shape
    ih, iw = sample.gt_mask.shape
    inbox = np.zeros((gh, gw), dtype=bool)
    for b in sample.gt_boxes:
        fb = scale_box_to_grid(b, (ih, iw), (gh, gw))
        inbox[fb.y0:fb.y1, fb.x0:fb.x1] = True
    sim_vals = sim[inbox]
    norm_vals = norm_hat[inbox]
    sim_counts, sim_edges = np.histogram(sim_vals, bins=bins, range=(-1.0, 1.0))
    norm_counts, norm_edges = np.histogram(norm_vals, bins=bins, range=(0.0, 1.0))
    return RegionHistograms(
        sim_counts=sim_counts, sim_edges=sim_edges,
        norm_counts=norm_counts, norm_edges=norm_edges,
        n_locations=int(inbox.sum()),
    )


@dataclass
class EvalReport:
    gt_loc: float
    top1_loc: float
    top5_loc: float | None
    maxboxaccv2_per_delta: dict
    maxboxaccv2_mean: float
    pxap: float | None

    def to_dict(self):
        return {
            "gt_loc": self.gt_loc,
            "top1_loc": self.top1_loc,
            "top5_loc": self.top5_loc,
            "maxboxaccv2_per_delta": {f"{d:g}": v
                                      for d, v in sorted(self.maxboxaccv2_per_delta.items())},
            "maxboxaccv2_mean": self.maxboxaccv2_mean,
            "pxap": self.pxap,
        }
