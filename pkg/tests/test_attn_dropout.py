"""Attentive-dropout tests: mask construction rules, RNG discipline, and
the statistical acceptance bound on the drop rate."""

import numpy as np
import numpy.testing as npt
import pytest

from camalign import attn_dropout as adp
from camalign.autodiff import Tape, Tensor


def test_channel_mean_value_and_gradient():
    f = Tensor(np.arange(12.0).reshape(3, 2, 2), requires_grad=True)
    with Tape() as tape:
        a = adp.channel_mean(f)
        npt.assert_array_equal(a.data, [[4.0, 5.0], [6.0, 7.0]])
        tape.backward(a.sum())
    npt.assert_allclose(f.grad, np.full((3, 2, 2), 1.0 / 3.0))


def test_attentive_set_is_strict_threshold():
    attn = np.array([[1.0, 0.8], [0.79, 0.0]])
    rng = np.random.default_rng(0)
    # p=1 forces every attentive location to drop, exposing the set exactly
    mask = adp.make_mask(attn, gamma=0.8, p=1.0, rng=rng)
    npt.assert_array_equal(mask.keep, [[False, True], [True, True]])


def test_all_zero_attention_keeps_everything():
    mask = adp.make_mask(np.zeros((4, 4)), gamma=0.8, p=1.0,
                         rng=np.random.default_rng(0))
    assert mask.keep.all()


def test_p_zero_never_drops():
    rng = np.random.default_rng(1)
    mask = adp.make_mask(np.ones((5, 5)), gamma=0.5, p=0.0, rng=rng)
    assert mask.keep.all()


def test_parameter_validation():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="gamma"):
        adp.make_mask(np.ones((2, 2)), gamma=0.0, p=0.5, rng=rng)
    with pytest.raises(ValueError, match="p must"):
        adp.make_mask(np.ones((2, 2)), gamma=0.5, p=1.5, rng=rng)


def test_stream_position_independent_of_attention_content():
    """The RNG advances per grid location, not per attentive location, so
    downstream draws do not depend on what the map looked like."""
    a = np.zeros((3, 3))
    b = np.ones((3, 3))
    r1 = np.random.default_rng(7)
    r2 = np.random.default_rng(7)
    adp.make_mask(a, gamma=0.8, p=0.5, rng=r1)
    adp.make_mask(b, gamma=0.8, p=0.5, rng=r2)
    assert r1.random() == r2.random()


def test_mask_reproducible_from_captured_state():
    rng = np.random.default_rng(3)
    rng.random(17)  # advance to an arbitrary position
    attn = np.random.default_rng(4).random((6, 6))
    mask = adp.make_mask(attn, gamma=0.5, p=0.5, rng=rng)
    replay = np.random.default_rng(0)
    replay.bit_generator.state = mask.seed_state
    again = adp.make_mask(attn, gamma=0.5, p=0.5, rng=replay)
    npt.assert_array_equal(mask.keep, again.keep)


def test_apply_mask_zeroes_all_channels_and_routes_gradient():
    f = Tensor(np.ones((3, 2, 2)), requires_grad=True)
    keep = np.array([[True, False], [True, True]])
    mask = adp.DropMask(keep=keep, gamma=0.8, p=0.5, seed_state=None)
    with Tape() as tape:
        out = adp.apply_mask(f, mask)
        npt.assert_array_equal(out.data[:, 0, 1], np.zeros(3))
        assert out.data.sum() == 9.0
        tape.backward(out.sum())
    npt.assert_array_equal(f.grad, np.broadcast_to(keep, (3, 2, 2)).astype(float))


def test_apply_mask_shape_mismatch():
    f = Tensor(np.ones((3, 2, 2)))
    mask = adp.DropMask(keep=np.ones((3, 3), dtype=bool), gamma=0.8, p=0.5,
                        seed_state=None)
    with pytest.raises(ValueError, match="mask shape"):
        adp.apply_mask(f, mask)


def test_apply_mask_batch_matches_per_sample():
    rng = np.random.default_rng(5)
    f = rng.normal(size=(4, 3, 2, 2))
    keeps = rng.random((4, 2, 2)) > 0.5
    batched = adp.apply_mask_batch(Tensor(f), keeps)
    for i in range(4):
        single = adp.apply_mask(
            Tensor(f[i]), adp.DropMask(keeps[i], 0.8, 0.5, None))
        npt.assert_array_equal(batched.data[i], single.data)


def test_drop_rate_statistics():
    """Pooled drop rate over 10,000 masks with 100 attentive locations at
    p=0.5 stays within 3 standard errors; non-attentive never drop."""
    rng = np.random.default_rng(11)
    attn = np.zeros((20, 10))
    attn[:10, :] = 1.0  # exactly 100 attentive locations
    n_masks = 10_000
    dropped = 0
    for _ in range(n_masks):
        mask = adp.make_mask(attn, gamma=0.8, p=0.5, rng=rng)
        assert mask.keep[10:, :].all()  # non-attentive untouched
        dropped += int(np.count_nonzero(~mask.keep[:10, :]))
    total = n_masks * 100
    rate = dropped / total
    se = np.sqrt(0.25 / total)
    assert abs(rate - 0.5) <= 3 * se
