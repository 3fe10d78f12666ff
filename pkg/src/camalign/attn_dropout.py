"""Attentive dropout: stochastically zero the most activated spatial
locations of an intermediate feature map.

The attentive set is everything whose channel-mean activation exceeds
``gamma * max``; each such location is independently dropped with
probability ``p``.  Dropping is spatial — all channels at a dropped
location go to zero — and the mask itself is a constant on the tape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def channel_mean(f_prime: Tensor) -> Tensor:
    """A_u = mean over channels of F'[:, u] : (D,H,W) -> (H,W)."""
    f_prime = f_prime if isinstance(f_prime, Tensor) else Tensor(f_prime)
    if f_prime.data.ndim != 3:
        raise ValueError(f"channel_mean: need (D,H,W), got shape {f_prime.data.shape}")
    d = f_prime.data.shape[0]
    out = f_prime.data.mean(axis=0)

    def bwd(g):
        return (np.broadcast_to(g / d, f_prime.data.shape).copy(),)

    return ad.custom_op(out, (f_prime,), bwd, name="channel_mean")


@dataclass
class DropMask:
    keep: np.ndarray          # (H',W') bool, True = keep
    gamma: float
    p: float
    seed_state: dict | None   # RNG state captured before drawing


def make_mask(attn, gamma: float, p: float, rng: np.random.Generator) -> DropMask:
    """Draw a drop mask over an attention map.

    Attentive set = {u : A_u > gamma * max(A)} (strict: ties at the
    threshold stay non-attentive; an all-zero map has an empty attentive
    set).  One uniform draw is consumed per grid location regardless of the
    attentive set, so the RNG stream position depends only on the grid
    shape — but non-attentive locations are never dropped.
    """
    a = attn.data if isinstance(attn, Tensor) else np.asarray(attn, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"make_mask: attention map must be 2-d, got shape {a.shape}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"make_mask: gamma must be in (0, 1], got {gamma}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"make_mask: p must be in [0, 1], got {p}")
    state = rng.bit_generator.state
    attentive = a > gamma * float(a.max())
    draws = rng.random(a.shape)
    keep = ~(attentive & (draws < p))
    return DropMask(keep=keep, gamma=float(gamma), p=float(p), seed_state=state)


def apply_mask(f_prime: Tensor, mask: DropMask) -> Tensor:
    """F'_drop[d,u] = F'[d,u] if keep[u] else 0; the mask carries no gradient."""
    f_prime = f_prime if isinstance(f_prime, Tensor) else Tensor(f_prime)
    keep = mask.keep
    if f_prime.data.ndim != 3 or keep.shape != f_prime.data.shape[1:]:
        raise ValueError(
            f"apply_mask: mask shape {keep.shape} does not match feature map "
            f"{f_prime.data.shape}")
    kf = keep.astype(np.float64)
    out = f_prime.data * kf

    def bwd(g):
        return (g * kf,)

    return ad.custom_op(out, (f_prime,), bwd, name="apply_mask")


def apply_mask_batch(f_prime: Tensor, keeps: np.ndarray) -> Tensor:
    """Batched apply_mask: (N,D,H,W) features, (N,H,W) boolean keeps."""
    if f_prime.data.ndim != 4 or keeps.shape != (
            f_prime.data.shape[0], *f_prime.data.shape[2:]):
        raise ValueError(
            f"apply_mask_batch: keeps shape {keeps.shape} does not match features "
            f"{f_prime.data.shape}")
    kf = keeps.astype(np.float64)[:, None]
    out = f_prime.data * kf

    def bwd(g):
        return (g * kf,)

    return ad.custom_op(out, (f_prime,), bwd, name="apply_mask_batch")
