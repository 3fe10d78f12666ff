"""Training-loop tests on a deliberately tiny model and dataset.

The heavyweight claims (accuracy targets, mode comparisons) live in the
acceptance suite; here the loop itself is checked: configuration handling,
the warm-to-full stage switch, bitwise determinism, the NaN abort, and the
artifact files a run leaves behind.
"""

import json
import os

import numpy as np
import numpy.testing as npt
import pytest

from camalign import dataset as ds
from camalign import training as tr
from camalign.errors import ConfigError, DataError, NumericError
from camalign.losses import LossWeights
from camalign.model import ModelConfig


TINY_MODEL = ModelConfig(input_size=32, conv_blocks=((4, 3, 2), (8, 3, 2)),
                         drop_layer_index=0, num_classes=4)


@pytest.fixture(scope="module")
def tiny_data():
    spec = ds.DatasetSpec(
        num_classes=4,
        images_per_class={"train": 6, "val": 3, "test": 3},
        image_size=32, marker_size=4, seed=5)
    return ds.generate(spec)


def tiny_config(**over):
    base = dict(model=TINY_MODEL,
                losses=LossWeights(warm_epochs=1),
                epochs=2, batch_size=8, seed=0, mode="full")
    base.update(over)
    return tr.RunConfig(**base)


# ----------------------------------------------------------- configuration


def test_run_config_validation():
    with pytest.raises(ConfigError):
        tiny_config(epochs=0)
    with pytest.raises(ConfigError):
        tiny_config(batch_size=0)
    with pytest.raises(ConfigError):
        tiny_config(mode="half")
    with pytest.raises(ConfigError):
        tiny_config(drop_loss_reduction="median")
    with pytest.raises(ConfigError):
        tiny_config(seed=-1)


def test_optim_config_validation():
    with pytest.raises(ConfigError):
        tr.OptimConfig(lr_former=0.0)
    with pytest.raises(ConfigError):
        tr.OptimConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        tr.OptimConfig(weight_decay=-1e-4)


def test_eval_config_validation():
    with pytest.raises(ConfigError):
        tr.EvalConfig(tau_grid_size=0)
    with pytest.raises(ConfigError):
        tr.EvalConfig(deltas=())
    with pytest.raises(ConfigError):
        tr.EvalConfig(deltas=(0.5, 1.5))
    with pytest.raises(ConfigError):
        tr.EvalConfig(connectivity=5)
    with pytest.raises(ConfigError):
        tr.EvalConfig(tau=-0.1)
    with pytest.raises(ConfigError):
        tr.EvalConfig(hist_bins=1)


def test_run_config_round_trip():
    cfg = tiny_config(dataset_dir="d", output_dir="o", epochs=3,
                      mode="vanilla", drop_loss_reduction="sum")
    again = tr.RunConfig.from_dict(cfg.to_dict())
    assert again.to_dict() == cfg.to_dict()
    assert again.model == cfg.model
    assert again.losses == cfg.losses


def test_vanilla_zeroes_loss_weights_but_keeps_shape_knobs():
    cfg = tiny_config(mode="vanilla",
                      losses=LossWeights(lambda_sim=0.9, lambda_norm=0.9,
                                         lambda_drop=9.0, tau_fg=0.7,
                                         tau_bg=0.2, warm_epochs=4))
    eff = cfg.effective_losses()
    assert (eff.lambda_sim, eff.lambda_norm, eff.lambda_drop) == (0.0, 0.0, 0.0)
    assert (eff.tau_fg, eff.tau_bg, eff.warm_epochs) == (0.7, 0.2, 4)
    full = tiny_config(mode="full")
    assert full.effective_losses() is full.losses


def test_map_normalization_per_source():
    assert tr.map_normalization("sim") == "max"
    assert tr.map_normalization("cam") == "minmax"
    assert tr.map_normalization("norm") == "minmax"


# ------------------------------------------------------------- the loop


def test_stage_switch_and_log_shape(tiny_data):
    cfg = tiny_config(losses=LossWeights(warm_epochs=2), epochs=4)
    res = tr.train(cfg, dataset=tiny_data)
    assert [r.stage for r in res.log.records] == ["warm", "warm", "total", "total"]
    for r in res.log.records:
        assert np.isfinite([r.l_ce, r.l_sim, r.l_norm, r.l_drop]).all()
        assert 0.0 <= r.train_acc <= 1.0
        assert 0.0 <= r.val_gt_loc <= 1.0
    # warm epochs never touch the alignment terms
    assert res.log.records[0].l_sim == 0.0 and res.log.records[0].l_norm == 0.0
    assert res.log.records[0].l_drop > 0.0
    assert res.log.warm_epochs == 2
    assert res.report is None and res.output_dir is None


def test_vanilla_log_has_no_extra_terms(tiny_data):
    res = tr.train(tiny_config(mode="vanilla"), dataset=tiny_data)
    for r in res.log.records:
        assert r.l_sim == 0.0 and r.l_norm == 0.0 and r.l_drop == 0.0
        assert r.l_ce > 0.0


def test_training_is_bitwise_deterministic(tiny_data):
    a = tr.train(tiny_config(), dataset=tiny_data)
    b = tr.train(tiny_config(), dataset=tiny_data)
    assert a.log.to_json() == b.log.to_json()
    for name in a.model.params:
        npt.assert_array_equal(a.model.params[name].data,
                               b.model.params[name].data)
    c = tr.train(tiny_config(seed=1), dataset=tiny_data)
    assert c.log.to_json() != a.log.to_json()


def test_nan_inputs_abort_with_context(tiny_data):
    poisoned = ds.LocalizationDataset(
        spec=tiny_data.spec,
        splits={k: [s for s in v] for k, v in tiny_data.splits.items()})
    bad = poisoned.splits["train"][0]
    poisoned.splits["train"][0] = ds.LocalizationSample(
        image=np.full_like(bad.image, np.nan), label=bad.label,
        gt_boxes=bad.gt_boxes, gt_mask=bad.gt_mask,
        marker_boxes=bad.marker_boxes)
    with pytest.raises(NumericError, match=r"training aborted at epoch 0"):
        tr.train(tiny_config(), dataset=poisoned)


def test_mismatched_dataset_rejected(tiny_data):
    with pytest.raises(DataError, match="classes"):
        tr.train(tiny_config(model=ModelConfig(
            input_size=32, conv_blocks=((4, 3, 2), (8, 3, 2)),
            drop_layer_index=0, num_classes=2)), dataset=tiny_data)
    with pytest.raises(DataError, match="image size"):
        tr.train(tiny_config(model=ModelConfig(
            input_size=64, conv_blocks=((4, 3, 2), (8, 3, 2)),
            drop_layer_index=0, num_classes=4)), dataset=tiny_data)


# ------------------------------------------------------------- artifacts


def test_artifacts_written(tiny_data, tmp_path):
    out = tmp_path / "run"
    cfg = tiny_config(output_dir=str(out), epochs=2)
    res = tr.train(cfg, dataset=tiny_data)
    for name in ("train_log.json", "eval_report.json", "sweep.csv",
                 "hist_sim.csv", "hist_norm.csv", "sweep.png",
                 "histograms.png"):
        assert (out / name).is_file(), name
    for ckpt in ("checkpoint_final", "checkpoint_best"):
        assert (out / ckpt / "manifest.json").is_file()
        assert (out / ckpt / "model.json").is_file()
    log = json.loads((out / "train_log.json").read_text())
    assert len(log["epochs"]) == 2 and log["mode"] == "full"
    payload = json.loads((out / "eval_report.json").read_text())
    assert payload["checkpoint"] == "final"
    assert payload["report"]["gt_loc"] == res.report.gt_loc
    assert payload["map_source"] == "cam"
    stats = payload["sim_stats"]
    assert sum(stats["hist_sim_counts"]) == sum(stats["hist_norm_counts"]) > 0
    for png in ("sweep.png", "histograms.png"):
        assert (out / png).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    with open(out / "sweep.csv") as fh:
        header = fh.readline().strip().split(",")
    assert header[0] == "tau" and len(header) == 1 + len(cfg.eval.deltas)


def test_evaluate_model_contract(tiny_data):
    cfg = tiny_config(epochs=1)
    res = tr.train(cfg, dataset=tiny_data)
    test_samples = tiny_data.splits["test"]
    report, curve, stats = tr.evaluate_model(res.model, test_samples,
                                             cfg.eval, map_source="sim")
    assert 0.0 <= report.gt_loc <= 1.0
    assert report.top1_loc <= report.gt_loc
    assert report.top5_loc is None          # only 4 classes here
    assert set(report.maxboxaccv2_per_delta) == set(cfg.eval.deltas)
    assert len(curve.thresholds) == cfg.eval.tau_grid_size
    assert 0.0 <= report.pxap <= 1.0
    assert -1.0 <= stats.mean_inmask_sim <= 1.0
    assert 0.0 <= stats.inbox_sim_mass_above_half <= 1.0
    with pytest.raises(ConfigError):
        tr.evaluate_model(res.model, test_samples, cfg.eval, map_source="heat")
    with pytest.raises(DataError):
        tr.evaluate_model(res.model, [], cfg.eval)


def test_best_checkpoint_tracks_val_peak(tiny_data, tmp_path):
    out = tmp_path / "run"
    cfg = tiny_config(output_dir=str(out), epochs=3)
    res = tr.train(cfg, dataset=tiny_data)
    from camalign.model import load_checkpoint
    best = load_checkpoint(str(out / "checkpoint_best"))
    for name, p in res.best_model.params.items():
        npt.assert_array_equal(best.params[name].data, p.data)
    # the stored best really is a snapshot, not the final weights, whenever
    # the peak precedes the last epoch
    peaks = [r.val_gt_loc for r in res.log.records]
    if peaks.index(max(peaks)) < len(peaks) - 1:
        assert any(
            not np.array_equal(res.best_model.params[n].data,
                               res.model.params[n].data)
            for n in res.model.params)
