"""Decomposition of a class activation map into norm and similarity factors.

For feature map F (D channels over an HxW grid) and classifier row w_c:

    cam_u      = w_c . F_u
    norm_map_u = ||F_u||
    sim_map_u  = cos(w_c, F_u)          (0 where ||F_u|| = 0)
    cam_u      = ||w_c|| * norm_map_u * sim_map_u   (exact identity)

``norm_hat`` is the min-max normalized norm map used for thresholding.
All four maps are differentiable tape citizens so they can sit inside
losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def norm_map(f_map: Tensor) -> Tensor:
    """Per-location L2 norm over channels: (D,H,W) -> (H,W).

    Subgradient at an all-zero feature vector is 0.
    """
    f_map = _as_tensor(f_map)
    if f_map.data.ndim != 3:
        raise ValueError(f"norm_map: need (D,H,W), got shape {f_map.data.shape}")
    fd = f_map.data
    n = np.sqrt(np.sum(fd * fd, axis=0))

    def bwd(g):
        safe = np.where(n > 0.0, n, 1.0)
        return ((g / safe) * np.where(n > 0.0, fd, 0.0),)

    return ad.custom_op(n, (f_map,), bwd, name="norm_map")


def similarity_map(f_map: Tensor, w_c: Tensor) -> Tensor:
    """Cosine similarity between w_c and each feature vector: (D,H,W) -> (H,W).

    Defined as 0 at locations where the feature vector is exactly zero (the
    location then belongs to neither similarity region); gradients are also
    zero there.  Elsewhere differentiable w.r.t. both arguments, including
    through the norm in the denominator.
    """
    f_map = _as_tensor(f_map)
    w_c = _as_tensor(w_c)
    if f_map.data.ndim != 3 or w_c.data.ndim != 1:
        raise ValueError(
            f"similarity_map: need (D,H,W) and (D,), got {f_map.data.shape} and {w_c.data.shape}")
    if f_map.data.shape[0] != w_c.data.shape[0]:
        raise ValueError(
            f"similarity_map: channel mismatch {f_map.data.shape} vs {w_c.data.shape}")
    fd, wd = f_map.data, w_c.data
    wnorm = float(np.linalg.norm(wd))
    if wnorm == 0.0:
        raise ValueError("similarity_map: zero weight vector")
    n = np.sqrt(np.sum(fd * fd, axis=0))
    dot = np.tensordot(wd, fd, axes=(0, 0))
    nonzero = n > 0.0
    safe_n = np.where(nonzero, n, 1.0)
    sim = np.where(nonzero, dot / (wnorm * safe_n), 0.0)

    def bwd(g):
        gf = gw = None
        gn = np.where(nonzero, g, 0.0)
        if f_map.requires_grad:
            # d sim/d F_du = (w_d/||w|| - sim * F_du/n) / n
            gf = (gn / safe_n) * (wd[:, None, None] / wnorm - sim * fd / safe_n)
        if w_c.requires_grad:
            # d sim/d w_d = (F_du/n - sim * w_d/||w||) / ||w||
            per_loc = gn / safe_n
            gw = (np.tensordot(fd, per_loc, axes=([1, 2], [0, 1]))
                  - float(np.sum(gn * sim)) * wd / wnorm) / wnorm
        return (gf, gw)

    return ad.custom_op(sim, (f_map, w_c), bwd, name="similarity_map")


def minmax_normalize(m: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """(v - min)/(max - min), with the extrema treated as constants.

    The min/max are detached from the tape: the gradient of every output is
    1/(max - min) w.r.t. its own input, nothing else.  A constant map (or
    explicit lo == hi) normalizes to all zeros instead of dividing by zero.
    ``lo``/``hi`` override the data-derived extrema — gradient checks use
    this to keep finite-difference probes consistent with the tape.
    """
    m = _as_tensor(m)
    lo = float(m.data.min()) if lo is None else float(lo)
    hi = float(m.data.max()) if hi is None else float(hi)
    span = hi - lo
    if span == 0.0:
        out = np.zeros_like(m.data)
        return ad.custom_op(out, (m,), lambda g: (np.zeros_like(g),),
                            name="minmax_normalize")
    inv = 1.0 / span
    out = (m.data - lo) * inv
    return ad.custom_op(out, (m,), lambda g: (g * inv,), name="minmax_normalize")


def compute_cam(f_map: Tensor, w_c: Tensor) -> Tensor:
    """cam_u = w_c . F_u  : (D,H,W) x (D,) -> (H,W)."""
    f_map = _as_tensor(f_map)
    w_c = _as_tensor(w_c)
    if f_map.data.ndim != 3 or w_c.data.ndim != 1 \
            or f_map.data.shape[0] != w_c.data.shape[0]:
        raise ValueError(
            f"compute_cam: need (D,H,W) and matching (D,), got "
            f"{f_map.data.shape} and {w_c.data.shape}")
    fd, wd = f_map.data, w_c.data
    cam = np.tensordot(wd, fd, axes=(0, 0))

    def bwd(g):
        gf = g[None] * wd[:, None, None] if f_map.requires_grad else None
        gw = np.tensordot(fd, g, axes=([1, 2], [0, 1])) if w_c.requires_grad else None
        return (gf, gw)

    return ad.custom_op(cam, (f_map, w_c), bwd, name="compute_cam")


@dataclass
class DecompositionMaps:
    norm_map: Tensor   # ||F_u||, >= 0
    sim_map: Tensor    # cos(w_c, F_u), in [-1, 1]
    norm_hat: Tensor   # min-max normalized norm map, in [0, 1]
    cam: Tensor
    class_index: int
    weight_norm: float


def decompose(f_map: Tensor, w_c: Tensor, class_index: int) -> DecompositionMaps:
    """All four maps for one class; cam == ||w_c|| * norm * sim within 1e-9."""
    f_map = _as_tensor(f_map)
    w_c = _as_tensor(w_c)
    nm = norm_map(f_map)
    return DecompositionMaps(
        norm_map=nm,
        sim_map=similarity_map(f_map, w_c),
        norm_hat=minmax_normalize(nm),
        cam=compute_cam(f_map, w_c),
        class_index=int(class_index),
        weight_norm=float(np.linalg.norm(w_c.data)),
    )


def all_class_similarities(f_map, weights) -> np.ndarray:
    """Similarity maps for every classifier row, as plain (C,H,W) values.

    Used to build the fine-grained background region; no gradients, so this
    is straight numpy.  Zero-feature locations get similarity 0; a zero
    weight row is rejected like in similarity_map.
    """
    fd = f_map.data if isinstance(f_map, Tensor) else np.asarray(f_map, dtype=np.float64)
    wd = weights.data if isinstance(weights, Tensor) else np.asarray(weights, dtype=np.float64)
    if fd.ndim != 3 or wd.ndim != 2 or wd.shape[1] != fd.shape[0]:
        raise ValueError(
            f"all_class_similarities: need (D,H,W) and (C,D), got {fd.shape} and {wd.shape}")
    wnorm = np.linalg.norm(wd, axis=1)
    if np.any(wnorm == 0.0):
        raise ValueError("all_class_similarities: zero weight vector")
    n = np.sqrt(np.sum(fd * fd, axis=0))
    dots = np.tensordot(wd, fd, axes=(1, 0))  # (C,H,W)
    safe_n = np.where(n > 0.0, n, 1.0)
    sims = dots / (wnorm[:, None, None] * safe_n)
    sims[:, n == 0.0] = 0.0
    return sims
