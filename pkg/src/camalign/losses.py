"""Region partitions and the alignment/consistency losses.

Partitions are frozen index sets: they are computed from current map
*values* and carry no gradient, so within one step the regions are
constants and gradients flow only through the map entries themselves.
Region means with +-1/|region| weights make each loss a single fused node;
an empty region simply contributes 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError

SOURCE_NORM = "norm-based"
SOURCE_SIM = "similarity-based"
SOURCE_SIM_FINE = "similarity-finegrained"


@dataclass
class RegionPartition:
    fg: np.ndarray        # flat location indices, int64
    bg: np.ndarray
    source: str
    shape: tuple          # spatial grid the indices refer to


@dataclass(frozen=True)
class LossWeights:
    lambda_sim: float = 0.5
    lambda_norm: float = 0.15
    lambda_drop: float = 3.0
    tau_fg: float = 0.6
    tau_bg: float = 0.1
    gamma: float = 0.8
    p: float = 0.5
    # Alignment switches on only after cross-entropy has left its plateau:
    # partitions taken from a net that cannot yet separate classes aim the
    # losses at noise, and the similarity drag then freezes the plateau
    # itself.  15 epochs clears the escape on the default corpus.
    warm_epochs: int = 15
    finegrained: bool = False

    def __post_init__(self):
        if not self.tau_bg < self.tau_fg:
            raise ConfigError(
                f"tau_bg ({self.tau_bg}) must be < tau_fg ({self.tau_fg})")
        for name in ("lambda_sim", "lambda_norm", "lambda_drop"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must be in (0, 1], got {self.gamma}")
        if not 0.0 <= self.p <= 1.0:
            raise ConfigError(f"p must be in [0, 1], got {self.p}")
        if self.warm_epochs < 0:
            raise ConfigError(f"warm_epochs must be >= 0, got {self.warm_epochs}")

    def to_dict(self):
        return {
            "lambda_sim": self.lambda_sim,
            "lambda_norm": self.lambda_norm,
            "lambda_drop": self.lambda_drop,
            "tau_fg": self.tau_fg,
            "tau_bg": self.tau_bg,
            "gamma": self.gamma,
            "p": self.p,
            "warm_epochs": self.warm_epochs,
            "finegrained": self.finegrained,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown loss config keys: {sorted(unknown)}")
        return cls(**d)


def _values(m):
    return m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)


def partition_by_norm(norm_hat, tau_fg: float, tau_bg: float) -> RegionPartition:
    """fg = {u : v > tau_fg}, bg = {u : v < tau_bg}; the band between is
    unknown and belongs to neither (strict inequalities on both sides)."""
    if not 0.0 <= tau_bg < tau_fg <= 1.0:
        raise ValueError(f"need 0 <= tau_bg < tau_fg <= 1, got {tau_bg}, {tau_fg}")
    v = _values(norm_hat).reshape(-1)
    return RegionPartition(
        fg=np.flatnonzero(v > tau_fg),
        bg=np.flatnonzero(v < tau_bg),
        source=SOURCE_NORM,
        shape=_values(norm_hat).shape,
    )


def partition_by_similarity(sim_map) -> RegionPartition:
    """fg = {u : s > 0}, bg = {u : s < 0}; exact zeros in neither."""
    v = _values(sim_map).reshape(-1)
    return RegionPartition(
        fg=np.flatnonzero(v > 0.0),
        bg=np.flatnonzero(v < 0.0),
        source=SOURCE_SIM,
        shape=_values(sim_map).shape,
    )


def partition_by_similarity_finegrained(sim_all) -> RegionPartition:
    """bg = {u : max over classes of sim <= 0}, fg = everything else.

    Unlike the plain similarity partition there is no unknown band: every
    location lands in exactly one set.
    """
    v = _values(sim_all)
    if v.ndim != 3:
        raise ValueError(f"need (C,H,W) similarities, got shape {v.shape}")
    best = v.max(axis=0).reshape(-1)
    return RegionPartition(
        fg=np.flatnonzero(best > 0.0),
        bg=np.flatnonzero(best <= 0.0),
        source=SOURCE_SIM_FINE,
        shape=v.shape[1:],
    )


def _region_mean_weights(part: RegionPartition):
    """Constant weight grid computing -mean(fg) + mean(bg) as one dot product."""
    w = np.zeros(int(np.prod(part.shape)))
    if part.fg.size:
        w[part.fg] = -1.0 / part.fg.size
    if part.bg.size:
        w[part.bg] = 1.0 / part.bg.size
    return w.reshape(part.shape)


def _check_grid(m: Tensor, part: RegionPartition, opname):
    if m.data.shape != part.shape:
        raise ValueError(
            f"{opname}: map shape {m.data.shape} does not match partition grid {part.shape}")


def loss_sim(sim_map: Tensor, part: RegionPartition) -> Tensor:
    """-mean(sim over fg) + mean(sim over bg): pull foreground similarities
    up and push background ones down.  Empty regions contribute 0."""
    _check_grid(sim_map, part, "loss_sim")
    return ad.weighted_sum(sim_map, _region_mean_weights(part))


def loss_norm(norm_hat: Tensor, part: RegionPartition) -> Tensor:
    """-mean(norm_hat over sim-fg) + mean(norm_hat over sim-bg).

    The partition must come from a similarity map (plain or fine-grained) —
    this is the cross-alignment direction, norms following similarities.
    """
    if part.source not in (SOURCE_SIM, SOURCE_SIM_FINE):
        raise ValueError(f"loss_norm needs a similarity-based partition, got {part.source!r}")
    _check_grid(norm_hat, part, "loss_norm")
    return ad.weighted_sum(norm_hat, _region_mean_weights(part))


def loss_drop(f_map: Tensor, f_drop: Tensor, reduction: str = "mean") -> Tensor:
    """Consistency between the clean and dropped feature maps.

    ``mean`` (default) is the mean absolute difference; ``sum`` is the raw
    L1 norm.  Gradients flow through both branches.
    """
    if f_map.data.shape != f_drop.data.shape:
        raise ValueError(
            f"loss_drop: shape mismatch {f_map.data.shape} vs {f_drop.data.shape}")
    diff = ad.tabs(ad.sub(f_map, f_drop))
    if reduction == "mean":
        return ad.tmean(diff)
    if reduction == "sum":
        return ad.tsum(diff)
    raise ValueError(f"loss_drop: unknown reduction {reduction!r}")


def total_loss(ce: Tensor, l_drop: Tensor, l_sim: Tensor, l_norm: Tensor,
               w: LossWeights) -> Tensor:
    return ce + w.lambda_drop * _scalar(l_drop) + w.lambda_sim * _scalar(l_sim) \
        + w.lambda_norm * _scalar(l_norm)


def warm_loss(ce: Tensor, l_drop: Tensor, w: LossWeights) -> Tensor:
    return ce + w.lambda_drop * _scalar(l_drop)


def is_warm_epoch(epoch: int, w: LossWeights) -> bool:
    """0-based epoch index; the first ``warm_epochs`` epochs skip the
    alignment terms."""
    return epoch < w.warm_epochs


def _scalar(x):
    return x if isinstance(x, Tensor) else Tensor(np.float64(x))
