"""Finite-difference verification suite over a tiny end-to-end model.

Builds a 2-block model with a 4x4 feature map, freezes every stochastic or
thresholded ingredient (drop mask, region partitions, normalization
extrema), and runs grad_check for each loss and for the combined objective
against every parameter.  This is both a CLI self-test and the gradient
acceptance gate.
"""

from __future__ import annotations

import numpy as np

from .attn_dropout import apply_mask, channel_mean, make_mask
from .autodiff import Tensor, grad_check, select0
from .decomposition import minmax_normalize, norm_map, similarity_map
from .losses import (LossWeights, loss_drop, loss_norm, loss_sim,
                     partition_by_norm, partition_by_similarity, total_loss)
from .model import (ModelConfig, build_model, cross_entropy, forward,
                    forward_tail)

TINY_CONFIG = ModelConfig(
    input_channels=2,
    input_size=8,
    conv_blocks=((4, 3, 2), (6, 3, 1)),
    drop_layer_index=0,
    num_classes=3,
)


def gradcheck_suite(seed: int = 0, eps: float = 1e-5, tol: float = 1e-6,
                    corrupt_scale: float | None = None) -> dict:
    """Name -> GradCheckReport for L_CE, L_sim, L_norm, L_drop, and the
    weighted composite.  ``corrupt_scale`` deliberately scales the analytic
    gradients so a working checker must fail (negative control)."""
    model = build_model(TINY_CONFIG, seed)
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 5)))
    image = Tensor(rng.uniform(0.0, 1.0, size=(2, 8, 8)))
    label = 1
    weights = LossWeights()

    # Freeze everything data-dependent at the initial parameter values so
    # the finite-difference probes see the same constants as the tape.
    init = forward(model, image)
    attn0 = channel_mean(Tensor(init.f_prime.data))
    mask = make_mask(attn0, weights.gamma, weights.p,
                     np.random.default_rng(np.random.SeedSequence((int(seed), 6))))
    nm0 = norm_map(Tensor(init.f_map.data)).data
    lo, hi = float(nm0.min()), float(nm0.max())
    part_norm = partition_by_norm((nm0 - lo) / (hi - lo),
                                  weights.tau_fg, weights.tau_bg)
    sim0 = similarity_map(Tensor(init.f_map.data),
                          Tensor(model.head.data[label])).data
    part_sim = partition_by_similarity(sim0)

    def ce_fn():
        return cross_entropy(forward(model, image).logits, label)

    def sim_fn():
        bundle = forward(model, image)
        return loss_sim(similarity_map(bundle.f_map, select0(model.head, label)),
                        part_norm)

    def norm_fn():
        bundle = forward(model, image)
        return loss_norm(minmax_normalize(norm_map(bundle.f_map), lo, hi),
                         part_sim)

    def drop_fn():
        bundle = forward(model, image)
        f_drop = forward_tail(model, apply_mask(bundle.f_prime, mask))
        return loss_drop(bundle.f_map, f_drop)

    def composite_fn():
        bundle = forward(model, image)
        ce = cross_entropy(bundle.logits, label)
        f_drop = forward_tail(model, apply_mask(bundle.f_prime, mask))
        l_drop = loss_drop(bundle.f_map, f_drop)
        l_sim = loss_sim(similarity_map(bundle.f_map, select0(model.head, label)),
                         part_norm)
        l_norm = loss_norm(minmax_normalize(norm_map(bundle.f_map), lo, hi),
                           part_sim)
        return total_loss(ce, l_drop, l_sim, l_norm, weights)

    checks = {
        "L_CE": ce_fn,
        "L_sim": sim_fn,
        "L_norm": norm_fn,
        "L_drop": drop_fn,
        "composite": composite_fn,
    }
    return {name: grad_check(fn, model.params, eps=eps, tol=tol,
                             corrupt_scale=corrupt_scale)
            for name, fn in checks.items()}


def suite_passed(reports: dict) -> bool:
    return all(r.passed for r in reports.values())
