"""Toy convolutional classifier: conv/ReLU blocks, GAP, bias-free linear head.

The head has no bias on purpose — the whole point of the downstream
decomposition is that a logit factors exactly into ``||w_c||·||f||·cos``,
and a bias term would break that identity.

Parameters are split into two groups, "former" (conv kernels) and "latter"
(the head), each with its own learning rate.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError
from .formats import read_ften, write_ften

GROUP_FORMER = "former"
GROUP_LATTER = "latter"

# final feature map 8x8x64 on 64x64 RGB input
DEFAULT_CONV_BLOCKS = ((8, 3, 2), (16, 3, 2), (32, 3, 2), (64, 3, 1))


def image_to_input(image: np.ndarray) -> np.ndarray:
    """Convert stored images to the model's input convention.

    Takes (H,W,3) or (N,H,W,3) floats in [0,1] and returns channel-first
    arrays centered to [-1,1]. The centering matters: with bias-free conv
    blocks and the small pinned init, a common-mode positive background
    drowns out the class signal and the network never leaves the
    uniform-softmax plateau.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        chw = image.transpose(2, 0, 1)
    elif image.ndim == 4:
        chw = image.transpose(0, 3, 1, 2)
    else:
        raise ValueError(f"expected (H,W,3) or (N,H,W,3) image, got shape {image.shape}")
    return (chw - 0.5) * 2.0


@dataclass(frozen=True)
class ModelConfig:
    """Static architecture description.

    ``conv_blocks`` is a sequence of (out_channels, kernel, stride); every
    block is a padded conv (padding=kernel//2) followed by ReLU.
    ``drop_layer_index`` selects the block whose output is F' — the map the
    attentive-dropout mask is drawn on.  It must come strictly before the
    final block so F' is produced strictly before F.
    """

    input_channels: int = 3
    input_size: int = 64
    conv_blocks: tuple = DEFAULT_CONV_BLOCKS
    drop_layer_index: int = 2
    num_classes: int = 8

    def __post_init__(self):
        if self.input_channels < 1 or self.input_size < 1:
            raise ConfigError(
                f"bad input geometry: channels={self.input_channels} size={self.input_size}")
        blocks = tuple(tuple(b) for b in self.conv_blocks)
        object.__setattr__(self, "conv_blocks", blocks)
        if not blocks:
            raise ConfigError("conv_blocks must not be empty")
        for b in blocks:
            if len(b) != 3 or any(int(v) != v or v < 1 for v in b):
                raise ConfigError(f"bad conv block spec {b!r}; need (out_channels, kernel, stride)")
        if not 0 <= self.drop_layer_index < len(blocks) - 1:
            raise ConfigError(
                f"drop_layer_index={self.drop_layer_index} must select a block strictly "
                f"before the last of {len(blocks)} blocks")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        h = self.input_size
        for (_, k, s) in blocks:
            h = (h + 2 * (k // 2) - k) // s + 1
            if h < 1:
                raise ConfigError(f"conv_blocks shrink the input below 1x1: {blocks}")
        if h < 2:
            raise ConfigError(
                f"final feature map is {h}x{h}; need >= 2x2 for localization")

    @property
    def feature_dim(self) -> int:
        return self.conv_blocks[-1][0]

    def spatial_sizes(self):
        """Spatial side length after each block (index 0 = first block)."""
        sizes = []
        h = self.input_size
        for (_, k, s) in self.conv_blocks:
            h = (h + 2 * (k // 2) - k) // s + 1
            sizes.append(h)
        return sizes

    @property
    def feature_size(self) -> int:
        return self.spatial_sizes()[-1]

    def to_dict(self):
        return {
            "input_channels": self.input_channels,
            "input_size": self.input_size,
            "conv_blocks": [list(b) for b in self.conv_blocks],
            "drop_layer_index": self.drop_layer_index,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        unknown = set(d) - {"input_channels", "input_size", "conv_blocks",
                            "drop_layer_index", "num_classes"}
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        if "conv_blocks" in d:
            d["conv_blocks"] = tuple(tuple(b) for b in d["conv_blocks"])
        return cls(**d)


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)    # name -> Tensor
    groups: dict = field(default_factory=dict)    # name -> group label

    @property
    def head(self) -> Tensor:
        return self.params["head"]

    def conv_kernels(self):
        return [self.params[f"conv{i}"] for i in range(len(self.config.conv_blocks))]


def build_model(config: ModelConfig, seed: int) -> Model:
    """Uniform ±sqrt(1/fan_in) init, fixed draw order, fully seeded."""
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), 11)))
    model = Model(config=config)
    cin = config.input_channels
    for i, (cout, k, _s) in enumerate(config.conv_blocks):
        bound = float(np.sqrt(1.0 / (cin * k * k)))
        w = rng.uniform(-bound, bound, size=(cout, cin, k, k))
        model.params[f"conv{i}"] = Tensor(w, requires_grad=True)
        model.groups[f"conv{i}"] = GROUP_FORMER
        cin = cout
    bound = float(np.sqrt(1.0 / config.feature_dim))
    head = rng.uniform(-bound, bound, size=(config.num_classes, config.feature_dim))
    model.params["head"] = Tensor(head, requires_grad=True)
    model.groups["head"] = GROUP_LATTER
    return model


@dataclass
class ForwardBundle:
    f_prime: Tensor   # F': features at the drop layer
    f_map: Tensor     # F: final feature map
    pooled: Tensor    # f: GAP(F)
    logits: Tensor


def _check_image_shape(config, image):
    shape = image.data.shape
    want = (config.input_channels, config.input_size, config.input_size)
    ok = shape == want or (len(shape) == 4 and shape[1:] == want)
    if not ok:
        raise ValueError(f"image shape {shape} does not match model input {want}")


def forward(model: Model, image: Tensor) -> ForwardBundle:
    """Run the whole network; accepts one image (C,H,W) or a batch (N,C,H,W)."""
    _check_image_shape(model.config, image)
    h = image
    f_prime = None
    for i, (cout, k, s) in enumerate(model.config.conv_blocks):
        h = ad.relu(ad.conv2d(h, model.params[f"conv{i}"], stride=s, padding=k // 2))
        if i == model.config.drop_layer_index:
            f_prime = h
    f_map = h
    pooled = ad.global_average_pool(f_map)
    logits = ad.linear_no_bias(pooled, model.params["head"])
    return ForwardBundle(f_prime=f_prime, f_map=f_map, pooled=pooled, logits=logits)


def forward_tail(model: Model, f_prime: Tensor) -> Tensor:
    """Re-run the blocks after the drop layer on a (possibly masked) F'."""
    h = f_prime
    for i in range(model.config.drop_layer_index + 1, len(model.config.conv_blocks)):
        _cout, k, s = model.config.conv_blocks[i]
        h = ad.relu(ad.conv2d(h, model.params[f"conv{i}"], stride=s, padding=k // 2))
    return h


def forward_with_drop(model: Model, image: Tensor, mask) -> Tensor:
    """F_drop: forward pass where F' is spatially masked before the tail.

    Shares parameters with the clean path, so backward through
    ``L_CE + L_drop`` accumulates both paths' gradients into the same
    kernels.
    """
    from .attn_dropout import apply_mask

    bundle = forward(model, image)
    return forward_tail(model, apply_mask(bundle.f_prime, mask))


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """−log softmax(logits)[label], max-subtracted for stability."""
    if logits.data.ndim != 1:
        raise ValueError(f"cross_entropy: logits must be 1-d, got shape {logits.data.shape}")
    c = logits.data.shape[0]
    if not 0 <= int(label) == label < c:
        raise ValueError(f"cross_entropy: label {label} out of range for {c} classes")
    label = int(label)
    z = logits.data - logits.data.max()
    ez = np.exp(z)
    softmax = ez / ez.sum()
    loss = np.log(ez.sum()) - z[label]

    def bwd(g):
        grad = softmax.copy()
        grad[label] -= 1.0
        return (g * grad,)

    return ad.custom_op(loss, (logits,), bwd, name="cross_entropy")


def cross_entropy_batch(logits: Tensor, labels) -> Tensor:
    """Mean cross-entropy over a batch; one fused node."""
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy_batch: logits must be 2-d, got shape {logits.data.shape}")
    n, c = logits.data.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"cross_entropy_batch: {n} logit rows but labels shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"cross_entropy_batch: label out of range for {c} classes")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    softmax = ez / ez.sum(axis=1, keepdims=True)
    rows = np.arange(n)
    loss = float(np.mean(np.log(ez.sum(axis=1)) - z[rows, labels]))

    def bwd(g):
        grad = softmax.copy()
        grad[rows, labels] -= 1.0
        return (g * (grad / n),)

    return ad.custom_op(loss, (logits,), bwd, name="cross_entropy_batch")


class SGD:
    """SGD with momentum and coupled weight decay, per-group learning rates.

    Update per parameter: g' = g + wd·θ; v = momentum·v + g'; θ -= lr·v.
    Gradients are cleared after the step.
    """

    def __init__(self, model: Model, lr_per_group, momentum=0.9, weight_decay=5e-4):
        missing = {g for g in model.groups.values()} - set(lr_per_group)
        if missing:
            raise ConfigError(f"no learning rate for parameter groups {sorted(missing)}")
        self.model = model
        self.lr_per_group = dict(lr_per_group)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.velocity = {name: np.zeros_like(p.data) for name, p in model.params.items()}

    def step(self):
        for name, p in self.model.params.items():
            if p.grad is None:
                raise NumericError(f"sgd_step: missing gradient for parameter {name!r}")
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p.data -= self.lr_per_group[self.model.groups[name]] * v
            p.grad = None


def sgd_step(model: Model, lr_per_group, momentum: float, weight_decay: float,
             state: SGD | None = None) -> SGD:
    """One optimizer step; returns the state object to pass back next time."""
    if state is None:
        state = SGD(model, lr_per_group, momentum, weight_decay)
    state.step()
    return state


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: Model, directory) -> None:
    """One FTEN file per parameter + manifest.json {name -> file,shape,group},
    plus model.json with the architecture."""
    os.makedirs(directory, exist_ok=True)
    manifest = {}
    for name, p in model.params.items():
        fname = f"{name}.ften"
        write_ften(os.path.join(directory, fname), p.data)
        manifest[name] = {
            "file": fname,
            "shape": list(p.data.shape),
            "group": model.groups[name],
        }
    with open(os.path.join(directory, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(directory, "model.json"), "w") as fh:
        json.dump(model.config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(directory) -> Model:
    manifest_path = os.path.join(directory, "manifest.json")
    config_path = os.path.join(directory, "model.json")
    for path in (manifest_path, config_path):
        if not os.path.isfile(path):
            raise DataError(f"not a checkpoint directory (missing {os.path.basename(path)}): {directory}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    with open(config_path) as fh:
        config = ModelConfig.from_dict(json.load(fh))
    model = Model(config=config)
    expected = [f"conv{i}" for i in range(len(config.conv_blocks))] + ["head"]
    if sorted(manifest) != sorted(expected):
        raise DataError(
            f"checkpoint parameters {sorted(manifest)} do not match architecture "
            f"{sorted(expected)}: {directory}")
    for name, entry in manifest.items():
        arr = read_ften(os.path.join(directory, entry["file"]))
        if list(arr.shape) != list(entry["shape"]):
            raise DataError(
                f"checkpoint tensor {name!r} has shape {list(arr.shape)}, "
                f"manifest says {entry['shape']}: {directory}")
        model.params[name] = Tensor(arr, requires_grad=True)
        model.groups[name] = entry["group"]
    head = model.params["head"].data
    if head.shape != (config.num_classes, config.feature_dim):
        raise DataError(
            f"checkpoint head shape {head.shape} does not match config "
            f"({config.num_classes} classes, {config.feature_dim} features): {directory}")
    return model
