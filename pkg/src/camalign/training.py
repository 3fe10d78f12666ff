"""Training loop (warm then total stage), run configuration, and the
model-evaluation pipeline producing EvalReports and sweep curves.

Determinism contract: everything that varies between runs flows from
``RunConfig.seed`` through named SeedSequence substreams — model init,
per-epoch batch order, per-epoch dropout draws.  The batch-order stream is
separate from the dropout stream, so vanilla and full runs at the same seed
see identical batches.  The TrainLog contains no paths or timestamps and
serializes byte-identically across reruns.
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import dataset as ds
from .attn_dropout import apply_mask_batch, make_mask
from .autodiff import Tape, Tensor, select0
from .decomposition import (all_class_similarities, decompose,
                            minmax_normalize, norm_map, similarity_map)
from .errors import ConfigError, DataError, NumericError
from .evaluation import (DEFAULT_DELTAS, EvalReport, default_tau_grid,
                         maxboxaccv2, normalize_map, pxap, region_histograms,
                         scale_box_to_grid, top_k_gt_loc, upsample_bilinear)
from .losses import (LossWeights, is_warm_epoch, loss_drop, loss_norm,
                     loss_sim, partition_by_norm, partition_by_similarity,
                     partition_by_similarity_finegrained, total_loss,
                     warm_loss)
from .model import (GROUP_FORMER, GROUP_LATTER, SGD, Model, ModelConfig,
                    build_model, cross_entropy_batch, forward, forward_tail,
                    image_to_input, load_checkpoint, save_checkpoint)

MODE_FULL = "full"
MODE_VANILLA = "vanilla"
MAP_SOURCES = ("cam", "norm", "sim")


@dataclass(frozen=True)
class OptimConfig:
    # Single constant rate for both parameter groups by default; no decay.
    # 0.02 sits inside the stability envelope: with momentum 0.9 the
    # effective step is ~10x the rate, and rates >= 0.03 intermittently
    # blow up at the steep part of the loss landscape (dead-ReLU collapse).
    lr_former: float = 0.02
    lr_latter: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 5e-4

    def __post_init__(self):
        for name in ("lr_former", "lr_latter"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0,1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def to_dict(self):
        return {"lr_former": self.lr_former, "lr_latter": self.lr_latter,
                "momentum": self.momentum, "weight_decay": self.weight_decay}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown optimizer config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EvalConfig:
    tau_grid_size: int = 101
    deltas: tuple = DEFAULT_DELTAS
    connectivity: int = 8
    tau: float = 0.2          # fixed binarization threshold for Top-k/GT Loc
    hist_bins: int = 20

    def __post_init__(self):
        if self.tau_grid_size < 1:
            raise ConfigError(f"tau_grid_size must be >= 1, got {self.tau_grid_size}")
        object.__setattr__(self, "deltas", tuple(float(d) for d in self.deltas))
        if not self.deltas or any(not 0 < d <= 1 for d in self.deltas):
            raise ConfigError(f"deltas must be in (0,1], got {self.deltas}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"connectivity must be 4 or 8, got {self.connectivity}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"eval tau must be in [0,1], got {self.tau}")
        if self.hist_bins < 2:
            raise ConfigError(f"hist_bins must be >= 2, got {self.hist_bins}")

    def to_dict(self):
        return {"tau_grid_size": self.tau_grid_size, "deltas": list(self.deltas),
                "connectivity": self.connectivity, "tau": self.tau,
                "hist_bins": self.hist_bins}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown eval config keys: {sorted(unknown)}")
        if "deltas" in d:
            d["deltas"] = tuple(d["deltas"])
        return cls(**d)


@dataclass(frozen=True)
class RunConfig:
    dataset_dir: str = ""
    output_dir: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    epochs: int = 60
    batch_size: int = 16
    seed: int = 0
    eval: EvalConfig = field(default_factory=EvalConfig)
    mode: str = MODE_FULL
    drop_loss_reduction: str = "mean"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.mode not in (MODE_FULL, MODE_VANILLA):
            raise ConfigError(f"mode must be 'full' or 'vanilla', got {self.mode!r}")
        if self.drop_loss_reduction not in ("mean", "sum"):
            raise ConfigError(
                f"drop_loss_reduction must be 'mean' or 'sum', got {self.drop_loss_reduction!r}")
        if self.seed < 0:
            raise ConfigError(f"seed must be >= 0, got {self.seed}")

    def effective_losses(self) -> LossWeights:
        """Vanilla mode is the pure cross-entropy baseline: all three extra
        terms forced to zero."""
        if self.mode == MODE_VANILLA:
            return LossWeights(
                lambda_sim=0.0, lambda_norm=0.0, lambda_drop=0.0,
                tau_fg=self.losses.tau_fg, tau_bg=self.losses.tau_bg,
                gamma=self.losses.gamma, p=self.losses.p,
                warm_epochs=self.losses.warm_epochs,
                finegrained=self.losses.finegrained)
        return self.losses

    def to_dict(self):
        return {
            "dataset_dir": self.dataset_dir,
            "output_dir": self.output_dir,
            "model": self.model.to_dict(),
            "losses": self.losses.to_dict(),
            "optimizer": self.optimizer.to_dict(),
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "eval": self.eval.to_dict(),
            "mode": self.mode,
            "drop_loss_reduction": self.drop_loss_reduction,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - set(cls().to_dict())
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "losses" in d:
            d["losses"] = LossWeights.from_dict(d["losses"])
        if "optimizer" in d:
            d["optimizer"] = OptimConfig.from_dict(d["optimizer"])
        if "eval" in d:
            d["eval"] = EvalConfig.from_dict(d["eval"])
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    stage: str                # "warm" or "total"
    l_ce: float
    l_sim: float
    l_norm: float
    l_drop: float
    train_acc: float
    val_gt_loc: float

    def to_dict(self):
        return {"epoch": self.epoch, "stage": self.stage, "l_ce": self.l_ce,
                "l_sim": self.l_sim, "l_norm": self.l_norm,
                "l_drop": self.l_drop, "train_acc": self.train_acc,
                "val_gt_loc": self.val_gt_loc}


@dataclass
class TrainLog:
    mode: str
    seed: int
    warm_epochs: int
    records: list = field(default_factory=list)

    def to_dict(self):
        return {"mode": self.mode, "seed": self.seed,
                "warm_epochs": self.warm_epochs,
                "epochs": [r.to_dict() for r in self.records]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass
class TrainResult:
    model: Model              # final-epoch weights
    best_model: Model         # best val GT Loc weights
    log: TrainLog
    report: EvalReport | None
    output_dir: str | None


def _batch_tensor(samples, idx):
    imgs = image_to_input(np.stack([samples[i].image for i in idx]))
    labels = np.array([samples[i].label for i in idx], dtype=np.int64)
    return Tensor(imgs), labels


def _snapshot(model: Model) -> Model:
    clone = Model(config=model.config)
    for name, p in model.params.items():
        clone.params[name] = Tensor(p.data.copy(), requires_grad=True)
        clone.groups[name] = model.groups[name]
    return clone


def train(config: RunConfig, dataset=None, quiet=True) -> TrainResult:
    """Run the full schedule; returns models, the log, and the test report.

    If ``config.output_dir`` is set, writes checkpoints (final, plus the
    best-validation one alongside it), ``train_log.json``, and the test-split
    evaluation artifacts of the final checkpoint there.
    """
    if dataset is None:
        dataset = ds.load(config.dataset_dir)
    train_samples = dataset.splits["train"]
    val_samples = dataset.splits["val"]
    labels_present = {s.label for s in train_samples}
    if max(labels_present) >= config.model.num_classes:
        raise DataError(
            f"dataset has labels up to {max(labels_present)} but model expects "
            f"{config.model.num_classes} classes")
    if dataset.spec.image_size != config.model.input_size:
        raise DataError(
            f"dataset image size {dataset.spec.image_size} does not match model "
            f"input size {config.model.input_size}")

    weights = config.effective_losses()
    vanilla = config.mode == MODE_VANILLA
    model = build_model(config.model, config.seed)
    opt = SGD(model,
              {GROUP_FORMER: config.optimizer.lr_former,
               GROUP_LATTER: config.optimizer.lr_latter},
              momentum=config.optimizer.momentum,
              weight_decay=config.optimizer.weight_decay)
    log = TrainLog(mode=config.mode, seed=config.seed,
                   warm_epochs=weights.warm_epochs)
    n = len(train_samples)
    best_val = -1.0
    best_model = _snapshot(model)

    for epoch in range(config.epochs):
        order_rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, 101, epoch)))
        drop_rng = np.random.default_rng(
            np.random.SeedSequence((config.seed, 202, epoch)))
        order = order_rng.permutation(n)
        warm = is_warm_epoch(epoch, weights)
        sums = {"l_ce": 0.0, "l_sim": 0.0, "l_norm": 0.0, "l_drop": 0.0}
        correct = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            step = start // config.batch_size
            try:
                correct += _train_step(model, opt, train_samples, idx, weights,
                                       vanilla, warm, config, drop_rng, sums)
            except NumericError as exc:
                raise NumericError(
                    f"training aborted at epoch {epoch} step {step}: {exc}") from None
        record = EpochRecord(
            epoch=epoch,
            stage="warm" if warm else "total",
            l_ce=sums["l_ce"] / n,
            l_sim=sums["l_sim"] / n,
            l_norm=sums["l_norm"] / n,
            l_drop=sums["l_drop"] / n,
            train_acc=correct / n,
            val_gt_loc=_val_gt_loc(model, val_samples, config.eval),
        )
        log.records.append(record)
        if not quiet:
            print(f"epoch {epoch:3d} [{record.stage}] ce={record.l_ce:.4f} "
                  f"sim={record.l_sim:+.4f} norm={record.l_norm:+.4f} "
                  f"drop={record.l_drop:.4f} acc={record.train_acc:.3f} "
                  f"val_gt_loc={record.val_gt_loc:.3f}")
        if record.val_gt_loc > best_val:
            best_val = record.val_gt_loc
            best_model = _snapshot(model)

    report = None
    if config.output_dir:
        os.makedirs(config.output_dir, exist_ok=True)
        save_checkpoint(model, os.path.join(config.output_dir, "checkpoint_final"))
        save_checkpoint(best_model, os.path.join(config.output_dir, "checkpoint_best"))
        with open(os.path.join(config.output_dir, "train_log.json"), "w") as fh:
            fh.write(log.to_json())
        report = write_eval_artifacts(
            model, dataset.splits["test"], config.eval, "cam",
            config.output_dir, checkpoint_label="final")
    return TrainResult(model=model, best_model=best_model, log=log,
                       report=report, output_dir=config.output_dir or None)


def _train_step(model, opt, samples, idx, weights, vanilla, warm, config,
                drop_rng, sums):
    imgs, labels = _batch_tensor(samples, idx)
    b = len(idx)
    with Tape() as tape:
        bundle = forward(model, imgs)
        ce = cross_entropy_batch(bundle.logits, labels)
        parts = {"l_ce": float(ce.data), "l_sim": 0.0, "l_norm": 0.0, "l_drop": 0.0}
        if vanilla:
            loss = ce
        else:
            attn = bundle.f_prime.data.mean(axis=1)
            keeps = np.stack([
                make_mask(attn[i], weights.gamma, weights.p, drop_rng).keep
                for i in range(b)])
            f_drop = forward_tail(model, apply_mask_batch(bundle.f_prime, keeps))
            l_drop = loss_drop(bundle.f_map, f_drop, config.drop_loss_reduction)
            parts["l_drop"] = float(l_drop.data)
            if warm:
                loss = warm_loss(ce, l_drop, weights)
            else:
                l_sim_acc = None
                l_norm_acc = None
                head = model.params["head"]
                for i in range(b):
                    f_n = select0(bundle.f_map, i)
                    w_row = select0(head, int(labels[i]))
                    sim = similarity_map(f_n, w_row)
                    nm_hat = minmax_normalize(norm_map(f_n))
                    part_norm = partition_by_norm(nm_hat.data, weights.tau_fg,
                                                  weights.tau_bg)
                    ls = loss_sim(sim, part_norm)
                    if weights.finegrained:
                        part_sim = partition_by_similarity_finegrained(
                            all_class_similarities(f_n.data, head.data))
                    else:
                        part_sim = partition_by_similarity(sim.data)
                    ln = loss_norm(nm_hat, part_sim)
                    l_sim_acc = ls if l_sim_acc is None else l_sim_acc + ls
                    l_norm_acc = ln if l_norm_acc is None else l_norm_acc + ln
                l_sim = l_sim_acc * (1.0 / b)
                l_norm = l_norm_acc * (1.0 / b)
                parts["l_sim"] = float(l_sim.data)
                parts["l_norm"] = float(l_norm.data)
                loss = total_loss(ce, l_drop, l_sim, l_norm, weights)
        if not np.isfinite(loss.data):
            raise NumericError(f"non-finite loss value {float(loss.data)!r}")
        tape.backward(loss)
    opt.step()
    for key in sums:
        sums[key] += parts[key] * b
    return int(np.sum(np.argmax(bundle.logits.data, axis=1) == labels))


# ---------------------------------------------------------------------------
# evaluation pipeline


def _forward_eval(model, samples, batch_size=64):
    """Feature maps and logits for a sample list, without recording a tape."""
    f_maps = []
    logits = []
    for start in range(0, len(samples), batch_size):
        idx = range(start, min(start + batch_size, len(samples)))
        imgs, _labels = _batch_tensor(samples, list(idx))
        bundle = forward(model, imgs)
        for i in range(bundle.f_map.data.shape[0]):
            f_maps.append(bundle.f_map.data[i])
            logits.append(bundle.logits.data[i])
    return f_maps, logits


def _score_map(decomp, source: str) -> np.ndarray:
    if source == "cam":
        return decomp.cam.data
    if source == "norm":
        return decomp.norm_map.data
    if source == "sim":
        return decomp.sim_map.data
    raise ConfigError(f"unknown map source {source!r}; pick one of {MAP_SOURCES}")


def map_normalization(source: str) -> str:
    """Similarity maps use max-normalization (§ protocol); others min-max."""
    return "max" if source == "sim" else "minmax"


@dataclass
class SimStats:
    """Side measurements used by the qualitative checks."""

    mean_inmask_sim: float           # mean upsampled similarity inside gt masks
    inbox_sim_mass_above_half: float  # fraction of in-box feature locations with sim > 0.5
    hist_sim_counts: list
    hist_sim_edges: list
    hist_norm_counts: list
    hist_norm_edges: list

    def to_dict(self):
        return {
            "mean_inmask_sim": self.mean_inmask_sim,
            "inbox_sim_mass_above_half": self.inbox_sim_mass_above_half,
            "hist_sim_counts": self.hist_sim_counts,
            "hist_sim_edges": self.hist_sim_edges,
            "hist_norm_counts": self.hist_norm_counts,
            "hist_norm_edges": self.hist_norm_edges,
        }


def evaluate_model(model: Model, samples, eval_cfg: EvalConfig,
                   map_source: str = "cam", with_pxap: bool = True):
    """Full metric suite on one sample list.

    Score maps are built from the ground-truth class (the GT Loc protocol;
    Top-k adds the classification condition on top), upsampled bilinearly
    to image resolution, then normalized per the map source.

    Returns (EvalReport, SweepCurve, SimStats).
    """
    if not samples:
        raise DataError("evaluate_model: no samples")
    if map_source not in MAP_SOURCES:
        raise ConfigError(f"unknown map source {map_source!r}; pick one of {MAP_SOURCES}")
    num_classes = model.config.num_classes
    if max(s.label for s in samples) >= num_classes:
        raise DataError(
            f"dataset labels exceed checkpoint class count {num_classes}")
    f_maps, logits = _forward_eval(model, samples)
    head = model.params["head"].data
    image_hw = samples[0].gt_mask.shape

    score_maps = []
    sim_upsampled = []
    hist_sim = None
    hist_norm = None
    inbox_above = 0
    inbox_total = 0
    mask_sim_sums = 0.0
    for sample, f_map in zip(samples, f_maps):
        decomp = decompose(Tensor(f_map), Tensor(head[sample.label]), sample.label)
        score_maps.append(upsample_bilinear(_score_map(decomp, map_source), image_hw))
        sim_up = upsample_bilinear(decomp.sim_map.data, image_hw)
        sim_upsampled.append(sim_up)
        mask_sim_sums += float(sim_up[sample.gt_mask].mean())
        hist = region_histograms(decomp, sample, bins=eval_cfg.hist_bins)
        if hist_sim is None:
            hist_sim = hist.sim_counts.astype(np.int64)
            hist_norm = hist.norm_counts.astype(np.int64)
            edges = (hist.sim_edges, hist.norm_edges)
        else:
            hist_sim += hist.sim_counts
            hist_norm += hist.norm_counts
        gh, gw = decomp.sim_map.data.shape
        inbox = np.zeros((gh, gw), dtype=bool)
        for b in sample.gt_boxes:
            fb = scale_box_to_grid(b, image_hw, (gh, gw))
            inbox[fb.y0:fb.y1, fb.x0:fb.x1] = True
        vals = decomp.sim_map.data[inbox]
        inbox_above += int((vals > 0.5).sum())
        inbox_total += int(vals.size)

    normalization = map_normalization(map_source)
    tau_grid = default_tau_grid(eval_cfg.tau_grid_size)
    top1, gt_loc = top_k_gt_loc(samples, score_maps, logits, k=1, delta=0.5,
                                tau=eval_cfg.tau, normalization=normalization,
                                connectivity=eval_cfg.connectivity)
    top5 = None
    if num_classes > 5:
        top5, _ = top_k_gt_loc(samples, score_maps, logits, k=5, delta=0.5,
                               tau=eval_cfg.tau, normalization=normalization,
                               connectivity=eval_cfg.connectivity)
    per_delta, mean_acc, curve = maxboxaccv2(
        samples, score_maps, deltas=eval_cfg.deltas, tau_grid=tau_grid,
        normalization=normalization, connectivity=eval_cfg.connectivity)
    px = None
    if with_pxap:
        px = pxap([normalize_map(m, normalization) for m in score_maps],
                  [s.gt_mask for s in samples])
    report = EvalReport(gt_loc=gt_loc, top1_loc=top1, top5_loc=top5,
                        maxboxaccv2_per_delta=per_delta,
                        maxboxaccv2_mean=mean_acc, pxap=px)
    stats = SimStats(
        mean_inmask_sim=mask_sim_sums / len(samples),
        inbox_sim_mass_above_half=inbox_above / max(inbox_total, 1),
        hist_sim_counts=[int(v) for v in hist_sim],
        hist_sim_edges=[float(v) for v in edges[0]],
        hist_norm_counts=[int(v) for v in hist_norm],
        hist_norm_edges=[float(v) for v in edges[1]],
    )
    return report, curve, stats


def _val_gt_loc(model, val_samples, eval_cfg: EvalConfig) -> float:
    """Fast per-epoch GT Loc at delta=0.5 from CAM maps."""
    f_maps, logits = _forward_eval(model, val_samples)
    head = model.params["head"].data
    image_hw = val_samples[0].gt_mask.shape
    maps = []
    for sample, f_map in zip(val_samples, f_maps):
        cam = np.tensordot(head[sample.label], f_map, axes=(0, 0))
        maps.append(upsample_bilinear(cam, image_hw))
    _top1, gt_loc = top_k_gt_loc(val_samples, maps, logits, k=1, delta=0.5,
                                 tau=eval_cfg.tau, normalization="minmax",
                                 connectivity=eval_cfg.connectivity)
    return gt_loc


def write_eval_artifacts(model, samples, eval_cfg, map_source, output_dir,
                         checkpoint_label=None) -> EvalReport:
    """Evaluate and write eval_report.json, sweep.csv, histogram CSVs, and
    the rendered figures."""
    from .reporting import (write_histogram_csv, write_sweep_csv,
                            render_histograms, render_sweep)

    report, curve, stats = evaluate_model(model, samples, eval_cfg, map_source)
    os.makedirs(output_dir, exist_ok=True)
    payload = {
        "map_source": map_source,
        "report": report.to_dict(),
        "sim_stats": stats.to_dict(),
    }
    if checkpoint_label is not None:
        payload["checkpoint"] = checkpoint_label
    with open(os.path.join(output_dir, "eval_report.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_sweep_csv(os.path.join(output_dir, "sweep.csv"), curve)
    write_histogram_csv(os.path.join(output_dir, "hist_sim.csv"),
                        stats.hist_sim_edges, stats.hist_sim_counts)
    write_histogram_csv(os.path.join(output_dir, "hist_norm.csv"),
                        stats.hist_norm_edges, stats.hist_norm_counts)
    render_sweep(os.path.join(output_dir, "sweep.png"), curve)
    render_histograms(os.path.join(output_dir, "histograms.png"), stats)
    return report
