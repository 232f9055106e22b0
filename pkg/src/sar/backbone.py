"""ResNet feature extractor producing the 2-D feature map used by encoder and attention."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import tensor as T
from .params import Initializer, ParamStore
from .tensor import Tensor

# (kernel, stride) of the three max-pooling layers. The last one halves
# height only, which gives the 1/8 vertical, 1/4 horizontal down-sampling.
DEFAULT_POOLS = (((2, 2), (2, 2)), ((2, 2), (2, 2)), ((2, 1), (2, 1)))


@dataclass
class BackboneConfig:
    channel_multiplier: Fraction = Fraction(1)
    pool_spec: tuple = DEFAULT_POOLS
    input_channels: int = 1
    input_height: int = 48
    final_channels: int = 512
    normalize: bool = False

    def __post_init__(self):
        self.channel_multiplier = Fraction(self.channel_multiplier).limit_denominator(1024)
        self.pool_spec = tuple((tuple(k), tuple(s)) for k, s in self.pool_spec)
        if self.channel_multiplier <= 0:
            raise ValueError("channel_multiplier must be positive")
        if self.input_channels not in (1, 3):
            raise ValueError("input_channels must be 1 or 3")

    def channels(self, base: int) -> int:
        c = base * self.channel_multiplier
        if c.denominator != 1:
            raise ValueError(f"channel multiplier {self.channel_multiplier} gives non-integral width {c} for {base}")
        return int(c)

    @property
    def vertical_ratio(self) -> int:
        return math.prod(s[0] for _, s in self.pool_spec)

    @property
    def horizontal_ratio(self) -> int:
        return math.prod(s[1] for _, s in self.pool_spec)

    def to_dict(self) -> dict:
        return {
            "channel_multiplier": str(self.channel_multiplier),
            "pool_spec": [[list(k), list(s)] for k, s in self.pool_spec],
            "input_channels": self.input_channels,
            "input_height": self.input_height,
            "final_channels": self.final_channels,
            "normalize": self.normalize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        d = dict(d)
        if "channel_multiplier" in d:
            d["channel_multiplier"] = Fraction(d["channel_multiplier"])
        return cls(**d)


@dataclass
class FeatureMap:
    """Backbone output ``values`` (N x H' x W' x D) and per-sample valid widths."""

    values: Tensor
    valid_width: np.ndarray = field(default=None)

    def __post_init__(self):
        n, _, w, _ = self.values.shape
        if self.valid_width is None:
            self.valid_width = np.full(n, w, dtype=np.int64)
        self.valid_width = np.asarray(self.valid_width, dtype=np.int64).reshape(-1)
        if self.valid_width.shape != (n,):
            raise ValueError("one valid width per sample is required")
        if (self.valid_width < 1).any() or (self.valid_width > w).any():
            raise ValueError(f"valid widths must lie in [1, {w}]")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def mask(self) -> np.ndarray:
        """Boolean N x H' x W' mask of valid positions."""
        n, h, w, _ = self.values.shape
        cols = np.arange(w)[None, :] < self.valid_width[:, None]
        return np.broadcast_to(cols[:, None, :], (n, h, w))


def layer_plan(config: BackboneConfig) -> list[tuple]:
    """Ordered layer list: ("conv", name, cout), ("pool", k, s), ("block", name, cout)."""
    c = config.channels
    plan: list[tuple] = [("conv", "conv1", c(64)), ("conv", "conv2", c(128)), ("pool", 0)]
    plan += [("block", "block1", c(256)), ("conv", "conv3", c(256)), ("pool", 1)]
    plan += [("block", f"block{i}", c(256)) for i in (2, 3)]
    plan += [("conv", "conv4", c(256)), ("pool", 2)]
    plan += [("block", f"block{i}", c(512)) for i in range(4, 9)]
    plan += [("conv", "conv5", c(512))]
    plan += [("block", f"block{i}", c(512)) for i in range(9, 12)]
    plan += [("conv", "conv6", config.final_channels)]
    return plan


def build_backbone(store: ParamStore, config: BackboneConfig, seed: int, prefix: str = "backbone") -> None:
    init = Initializer(store, seed)
    cin = config.input_channels
    for layer in layer_plan(config):
        kind = layer[0]
        if kind == "pool":
            continue
        name, cout = layer[1], layer[2]
        if kind == "conv":
            init.conv(f"{prefix}.{name}", 3, 3, cin, cout)
            if config.normalize:
                _norm_params(init, f"{prefix}.{name}", cout)
        else:
            init.conv(f"{prefix}.{name}.conv1", 3, 3, cin, cout)
            init.conv(f"{prefix}.{name}.conv2", 3, 3, cout, cout)
            if config.normalize:
                _norm_params(init, f"{prefix}.{name}.conv1", cout)
                _norm_params(init, f"{prefix}.{name}.conv2", cout)
            if cin != cout:
                init.conv(f"{prefix}.{name}.shortcut", 1, 1, cin, cout)
        cin = cout


NORM_MOMENTUM = 0.1
NORM_EPS = 1e-5


def _norm_params(init: Initializer, prefix: str, c: int) -> None:
    init.store.add(f"{prefix}.gamma", np.ones(c))
    init.zeros(f"{prefix}.beta", (c,))
    # running statistics; stored with the parameters but never given a gradient
    init.zeros(f"{prefix}.running_mean", (c,))
    init.store.add(f"{prefix}.running_var", np.ones(c))


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, widths: np.ndarray | None = None) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Per-channel normalization with statistics over batch, height and valid columns.

    Returns the output plus the batch mean and (biased) variance as arrays.
    """
    n, h, w, _ = x.shape
    if widths is None:
        widths = np.full(n, w)
    m = (np.arange(w)[None, :] < widths[:, None]).astype(x.dtype).reshape(n, 1, w, 1)
    count = float(h * np.sum(widths))
    mu = T.tsum(x * m, axis=(0, 1, 2)) / count
    d = x - mu
    var = T.tsum(d * d * m, axis=(0, 1, 2)) / count
    inv = T.div(1.0, T.exp(T.log(var + NORM_EPS) * 0.5))
    return d * inv * gamma + beta, mu.data, var.data


def _normalize(x: Tensor, store: ParamStore, prefix: str, widths, training: bool) -> Tensor:
    gamma, beta = store[f"{prefix}.gamma"], store[f"{prefix}.beta"]
    rm, rv = store[f"{prefix}.running_mean"], store[f"{prefix}.running_var"]
    if training:
        y, mu, var = batch_norm(x, gamma, beta, widths)
        rm.data[...] = (1 - NORM_MOMENTUM) * rm.data + NORM_MOMENTUM * mu
        rv.data[...] = (1 - NORM_MOMENTUM) * rv.data + NORM_MOMENTUM * var
        return y
    # inference uses fixed statistics, so each output depends only on its receptive field
    scale = gamma.data / np.sqrt(rv.data + NORM_EPS)
    return x * Tensor(scale) + Tensor(beta.data - rm.data * scale)


def _conv(x: Tensor, store: ParamStore, prefix: str, config: BackboneConfig, act: bool = True,
          widths: np.ndarray | None = None, training: bool = False) -> Tensor:
    y = T.conv2d(x, store[f"{prefix}.weight"], store[f"{prefix}.bias"], padding=(1, 1))
    if config.normalize:
        y = _normalize(y, store, prefix, widths, training)
    return T.relu(y) if act else y


def forward(store: ParamStore, config: BackboneConfig, images: Tensor, prefix: str = "backbone",
            widths=None, training: bool = False) -> Tensor:
    """Run the backbone on an N x H x W x C batch, returning N x H' x W' x D.

    ``widths`` (content width per sample) and ``training`` only matter with
    ``normalize``. Training normalizes with batch statistics over the valid
    columns and updates the running statistics; otherwise the running ones are used.
    """
    x = images
    widths = None if widths is None else np.asarray(widths, dtype=np.int64).reshape(-1)
    for layer in layer_plan(config):
        kind = layer[0]
        if kind == "pool":
            k, s = config.pool_spec[layer[1]]
            x = T.maxpool2d(x, k, s, ceil_mode=True)
            if widths is not None:
                widths = np.minimum([T.pool_output_size(int(v), k[1], s[1], True) for v in widths], x.shape[2])
                widths = np.asarray(widths, dtype=np.int64)
        elif kind == "conv":
            x = _conv(x, store, f"{prefix}.{layer[1]}", config, widths=widths, training=training)
        else:
            p = f"{prefix}.{layer[1]}"
            y = _conv(x, store, f"{p}.conv1", config, widths=widths, training=training)
            y = _conv(y, store, f"{p}.conv2", config, act=False, widths=widths, training=training)
            if f"{p}.shortcut.weight" in store:
                x = T.conv2d(x, store[f"{p}.shortcut.weight"], store[f"{p}.shortcut.bias"])
            x = T.relu(x + y)
    return x


def output_width(width: int, config: BackboneConfig) -> int:
    for k, s in config.pool_spec:
        width = T.pool_output_size(width, k[1], s[1], ceil_mode=True)
    return width


def output_height(height: int, config: BackboneConfig) -> int:
    for k, s in config.pool_spec:
        height = T.pool_output_size(height, k[0], s[0], ceil_mode=True)
    return height


def extract_features(store: ParamStore, config: BackboneConfig, images, widths=None,
                     prefix: str = "backbone", training: bool = False) -> FeatureMap:
    """Feature map for one image (H x W x C) or a right-padded batch (N x H x W x C).

    ``widths`` gives each sample's content width before padding; the valid
    feature width is derived from it.
    """
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=store.dtype))
    if x.ndim == 3:
        x = T.reshape(x, (1,) + x.shape)
    if x.ndim != 4:
        raise ValueError(f"expected an H x W x C image or N x H x W x C batch, got shape {x.shape}")
    n, h, w, c = x.shape
    if h != config.input_height:
        raise ValueError(f"image height {h} != configured input height {config.input_height}")
    if c != config.input_channels:
        raise ValueError(f"image has {c} channels, backbone expects {config.input_channels}")
    if widths is None:
        widths = np.full(n, w)
    widths = np.asarray(widths).reshape(-1)
    values = forward(store, config, x, prefix, widths, training)
    valid = np.array([output_width(int(wi), config) for wi in widths], dtype=np.int64)
    valid = np.minimum(valid, values.shape[2])
    return FeatureMap(values, valid)
