"""Partition and loss-term tests.

Reference values come from writing out the region means by hand on small
fixed maps; gradient checks use the frozen-partition protocol (regions are
index sets computed once, then treated as constants).
"""

import numpy as np
import numpy.testing as npt
import pytest

from camalign import losses as L
from camalign.autodiff import Tape, Tensor
from camalign.errors import ConfigError


def test_weights_defaults_and_validation():
    w = L.LossWeights()
    assert (w.lambda_sim, w.lambda_norm, w.lambda_drop) == (0.5, 0.15, 3.0)
    assert (w.tau_fg, w.tau_bg, w.gamma, w.p) == (0.6, 0.1, 0.8, 0.5)
    with pytest.raises(ConfigError, match="tau_bg"):
        L.LossWeights(tau_fg=0.1, tau_bg=0.6)
    with pytest.raises(ConfigError, match="lambda_drop"):
        L.LossWeights(lambda_drop=-1.0)
    with pytest.raises(ConfigError, match="unknown"):
        L.LossWeights.from_dict({"lambda_simm": 0.5})
    assert L.LossWeights.from_dict(w.to_dict()) == w


def test_partition_by_norm_strict_thresholds():
    m = np.array([[0.0, 0.1, 0.3], [0.6, 0.7, 1.0]])
    part = L.partition_by_norm(m, tau_fg=0.6, tau_bg=0.1)
    npt.assert_array_equal(part.fg, [4, 5])   # strictly above 0.6
    npt.assert_array_equal(part.bg, [0])      # strictly below 0.1
    assert part.source == L.SOURCE_NORM
    with pytest.raises(ValueError):
        L.partition_by_norm(m, tau_fg=0.1, tau_bg=0.6)


def test_partition_by_similarity_zero_in_neither():
    s = np.array([[0.5, 0.0], [-0.2, 0.0]])
    part = L.partition_by_similarity(s)
    npt.assert_array_equal(part.fg, [0])
    npt.assert_array_equal(part.bg, [2])


def test_partition_finegrained_covers_grid():
    sims = np.array([
        [[0.5, -0.1], [-0.3, 0.0]],
        [[-0.2, -0.4], [0.1, -0.2]],
    ])  # max over classes: [[0.5,-0.1],[0.1,0.0]]
    part = L.partition_by_similarity_finegrained(sims)
    npt.assert_array_equal(part.fg, [0, 2])
    npt.assert_array_equal(part.bg, [1, 3])
    assert part.fg.size + part.bg.size == 4
    assert part.source == L.SOURCE_SIM_FINE


def test_loss_sim_hand_value():
    s = Tensor(np.array([[0.8, 0.4], [-0.2, -0.6]]))
    part = L.partition_by_similarity(s.data)
    # -mean(0.8, 0.4) + mean(-0.2, -0.6) = -0.6 + (-0.4) = -1.0
    npt.assert_allclose(L.loss_sim(s, part).item(), -1.0, atol=1e-15)


def test_loss_sim_empty_region_contributes_zero():
    s = Tensor(np.array([[0.5, 0.3]]))
    part = L.partition_by_similarity(s.data)
    assert part.bg.size == 0
    npt.assert_allclose(L.loss_sim(s, part).item(), -0.4, atol=1e-15)
    both_empty = L.partition_by_similarity(np.zeros((2, 2)))
    assert L.loss_sim(Tensor(np.zeros((2, 2))), both_empty).item() == 0.0


def test_loss_sim_gradient_is_region_weights():
    s = Tensor(np.array([[0.8, 0.4], [-0.2, -0.6]]), requires_grad=True)
    part = L.partition_by_similarity(s.data)
    with Tape() as tape:
        tape.backward(L.loss_sim(s, part))
    npt.assert_allclose(s.grad, [[-0.5, -0.5], [0.5, 0.5]])


def test_loss_norm_requires_similarity_partition():
    m = Tensor(np.array([[0.9, 0.05]]))
    norm_part = L.partition_by_norm(m.data, 0.6, 0.1)
    with pytest.raises(ValueError, match="similarity-based"):
        L.loss_norm(m, norm_part)


def test_loss_norm_hand_value():
    norm_hat = Tensor(np.array([[1.0, 0.4], [0.2, 0.0]]))
    sim = np.array([[0.5, 0.1], [-0.4, -0.2]])
    part = L.partition_by_similarity(sim)
    # -mean(1.0, 0.4) + mean(0.2, 0.0) = -0.7 + 0.1 = -0.6
    npt.assert_allclose(L.loss_norm(norm_hat, part).item(), -0.6, atol=1e-15)


def test_loss_grid_mismatch_rejected():
    part = L.partition_by_similarity(np.ones((2, 2)))
    with pytest.raises(ValueError, match="partition grid"):
        L.loss_sim(Tensor(np.ones((3, 2))), part)


def test_loss_drop_values_and_reductions():
    f = Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    fd = Tensor(np.array([[[1.0, 0.0], [3.0, 0.0]]]))
    npt.assert_allclose(L.loss_drop(f, fd).item(), 6.0 / 4.0)
    npt.assert_allclose(L.loss_drop(f, fd, reduction="sum").item(), 6.0)
    with pytest.raises(ValueError, match="reduction"):
        L.loss_drop(f, fd, reduction="median")
    with pytest.raises(ValueError, match="mismatch"):
        L.loss_drop(f, Tensor(np.zeros((1, 2, 3))))


def test_loss_drop_gradient_flows_to_both_branches():
    f = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    fd = Tensor(np.array([0.5, 0.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward(L.loss_drop(f, fd, reduction="sum"))
    npt.assert_array_equal(f.grad, [1.0, -1.0])   # sign(f - fd)
    npt.assert_array_equal(fd.grad, [-1.0, 1.0])


def test_total_and_warm_loss_weighting():
    w = L.LossWeights(lambda_sim=0.5, lambda_norm=0.15, lambda_drop=3.0)
    ce, ld, ls, ln = (Tensor(np.float64(v)) for v in (1.0, 0.2, -0.4, -0.1))
    total = L.total_loss(ce, ld, ls, ln, w)
    npt.assert_allclose(total.item(), 1.0 + 3.0 * 0.2 + 0.5 * -0.4 + 0.15 * -0.1)
    warm = L.warm_loss(ce, ld, w)
    npt.assert_allclose(warm.item(), 1.0 + 3.0 * 0.2)


def test_warm_epoch_boundary():
    w = L.LossWeights(warm_epochs=6)
    assert L.is_warm_epoch(5, w) and not L.is_warm_epoch(6, w)
    assert not L.is_warm_epoch(0, L.LossWeights(warm_epochs=0))


def test_losses_differentiable_through_live_maps():
    """End-to-end: build sim/norm maps from a feature tensor, freeze the
    partitions, and check the combined loss gradient against central
    differences."""
    from camalign import autodiff as ad
    from camalign.decomposition import minmax_normalize, norm_map, similarity_map

    rng = np.random.default_rng(8)
    f = Tensor(rng.normal(size=(4, 3, 3)), requires_grad=True)
    wvec = Tensor(rng.normal(size=4), requires_grad=True)

    sim0 = similarity_map(Tensor(f.data), Tensor(wvec.data)).data
    nm0 = norm_map(Tensor(f.data)).data
    lo, hi = float(nm0.min()), float(nm0.max())
    part_n = L.partition_by_norm((nm0 - lo) / (hi - lo), 0.6, 0.1)
    part_s = L.partition_by_similarity(sim0)

    def build():
        sim = similarity_map(f, wvec)
        nhat = minmax_normalize(norm_map(f), lo=lo, hi=hi)
        return ad.add(L.loss_sim(sim, part_n), L.loss_norm(nhat, part_s))

    report = ad.grad_check(build, {"f": f, "w": wvec})
    assert report.passed, report.summary()
