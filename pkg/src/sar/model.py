"""LSTM encoder/decoder with 2-D attention on top of the ResNet backbone."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import attention as A
from . import backbone as B
from . import tensor as T
from .charset import CharSet
from .params import Initializer, ParamStore
from .tensor import Tensor


@dataclass
class ModelConfig:
    backbone: B.BackboneConfig = field(default_factory=B.BackboneConfig)
    charset: CharSet = field(default_factory=CharSet)
    hidden: int = 512
    layers: int = 2
    attn_dim: int = 512
    embed_dim: int | None = None
    variant: str = "proposed2d"
    attn_bias: bool = True
    max_len: int = 30
    precision: str = "float32"

    def __post_init__(self):
        if self.embed_dim is None:
            self.embed_dim = self.hidden
        if self.variant not in A.VARIANTS:
            raise ValueError(f"unknown attention variant {self.variant!r}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def feature_dim(self) -> int:
        return self.backbone.final_channels

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "charset": "".join(self.charset.symbols),
            "hidden": self.hidden,
            "layers": self.layers,
            "attn_dim": self.attn_dim,
            "embed_dim": self.embed_dim,
            "variant": self.variant,
            "attn_bias": self.attn_bias,
            "max_len": self.max_len,
            "precision": self.precision,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = B.BackboneConfig.from_dict(d.get("backbone", {}))
        if "charset" in d:
            d["charset"] = CharSet(d["charset"])
        return cls(**d)


@dataclass
class DecoderState:
    layers: list[tuple[Tensor, Tensor]]

    @property
    def top(self) -> Tensor:
        return self.layers[-1][0]


class SAR:
    """Parameters plus configuration; all methods are pure over the store."""

    def __init__(self, config: ModelConfig, store: ParamStore | None = None, seed: int = 0):
        self.config = config
        if store is None:
            store = ParamStore(config.dtype)
            build_model(store, config, seed)
        self.store = store
        self.attn = A.AttentionParams(store, config.variant, config.feature_dim, config.hidden,
                                      config.attn_dim, config.attn_bias)

    @property
    def charset(self) -> CharSet:
        return self.config.charset

    def features(self, images, widths=None, training: bool = False) -> B.FeatureMap:
        return B.extract_features(self.store, self.config.backbone, images, widths, training=training)

    def encode(self, fmap: B.FeatureMap) -> Tensor:
        return encode(self.store, self.config, fmap)

    def start(self, fmap: B.FeatureMap) -> tuple[DecoderState, A.AttentionContext]:
        """Encode, run decoder step 0 on the holistic feature, and prepare attention."""
        holistic = self.encode(fmap)
        state = initial_state(self.store, self.config, holistic)
        return state, A.prepare(self.attn, fmap)

    def step(self, tokens, state: DecoderState, ctx: A.AttentionContext):
        return decode_step(self.store, self.config, self.attn, tokens, state, ctx)


def build_model(store: ParamStore, config: ModelConfig, seed: int) -> None:
    B.build_backbone(store, config.backbone, seed)
    init = Initializer(store, seed + 1)
    dh, emb = config.hidden, config.embed_dim
    for layer in range(config.layers):
        init.lstm(f"encoder.lstm{layer}", config.feature_dim if layer == 0 else dh, dh)
    for layer in range(config.layers):
        init.lstm(f"decoder.lstm{layer}", emb if layer == 0 else dh, dh)
    init.weight("decoder.embed.weight", (config.charset.num_inputs, emb), config.charset.num_inputs)
    init.linear("decoder.holistic", dh, emb)
    init.linear("decoder.out", dh + config.feature_dim, config.charset.num_classes)
    A.make_variant(config.variant, config.feature_dim, dh, config.attn_dim, seed + 2,
                   store=store, bias=config.attn_bias)


def _zeros_state(store: ParamStore, config: ModelConfig, n: int) -> list[tuple[Tensor, Tensor]]:
    z = np.zeros((n, config.hidden), dtype=store.dtype)
    return [(Tensor(z), Tensor(z)) for _ in range(config.layers)]


def _stack_step(store: ParamStore, prefix: str, x: Tensor, layers: list[tuple[Tensor, Tensor]]):
    new = []
    for i, (h, c) in enumerate(layers):
        p = f"{prefix}.lstm{i}"
        h, c = T.lstm_step(x, h, c, store[f"{p}.w_x"], store[f"{p}.w_h"], store[f"{p}.bias"])
        new.append((h, c))
        x = h
    return new


def encode(store: ParamStore, config: ModelConfig, fmap: B.FeatureMap) -> Tensor:
    """Holistic feature: top-layer hidden state after the last valid column.

    Columns are max-pooled over height and fed left to right; samples whose
    valid width is exhausted keep their state unchanged.
    """
    if (fmap.valid_width < 1).any():
        raise ValueError("valid_width must be at least 1")
    columns = T.amax(fmap.values, axis=1)  # N x W x D
    n = columns.shape[0]
    layers = _zeros_state(store, config, n)
    steps = int(fmap.valid_width.max())
    for t in range(steps):
        new = _stack_step(store, "encoder", columns[:, t, :], layers)
        live = fmap.valid_width > t
        if live.all():
            layers = new
        else:
            m = live[:, None]
            layers = [(T.where(m, h1, h0), T.where(m, c1, c0)) for (h1, c1), (h0, c0) in zip(new, layers)]
    return layers[-1][0]


def initial_state(store: ParamStore, config: ModelConfig, holistic: Tensor) -> DecoderState:
    """Decoder step 0: the holistic feature (through a linear adapter) conditions the state."""
    if holistic.ndim == 1:
        holistic = T.reshape(holistic, (1, -1))
    x = T.linear(holistic, store["decoder.holistic.weight"], store["decoder.holistic.bias"])
    layers = _stack_step(store, "decoder", x, _zeros_state(store, config, holistic.shape[0]))
    return DecoderState(layers)


def decode_step(store: ParamStore, config: ModelConfig, attn: A.AttentionParams, tokens,
                state: DecoderState, ctx: A.AttentionContext):
    """Feed one token per sample; returns (logits N x C, new state, attention N x H x W).

    Attention is guided by the updated top-layer hidden state, and the output
    head reads the concatenation of that state and the glimpse.
    """
    tokens = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.charset.num_inputs):
        raise IndexError(f"decoder input token outside [0, {config.charset.num_inputs})")
    x = T.embedding(store["decoder.embed.weight"], tokens)
    layers = _stack_step(store, "decoder", x, state.layers)
    h = layers[-1][0]
    glimpse, alpha = A.attend_prepared(attn, ctx, h)
    logits = T.linear(T.concat([h, glimpse], axis=1), store["decoder.out.weight"], store["decoder.out.bias"])
    return logits, DecoderState(layers), alpha


def decode_probs(model: SAR, prev_input, state: DecoderState | None, fmap: B.FeatureMap):
    """Single-sample convenience wrapper.

    ``prev_input`` is either the holistic feature (step 0; returns no
    distribution) or a token id. Returns (probs | None, state, attention | None).
    """
    ctx = A.prepare(model.attn, fmap)
    if isinstance(prev_input, Tensor):
        return None, initial_state(model.store, model.config, prev_input), None
    logits, state, alpha = model.step([prev_input], state, ctx)
    probs = T.softmax(logits, axis=1)
    return T.reshape(probs, (-1,)), state, T.reshape(alpha, alpha.shape[1:])


def targets_from_labels(charset: CharSet, labels: list[str]) -> np.ndarray:
    """N x (Lmax+1) target ids, END-terminated, PAD-filled."""
    seqs = [charset.encode(s) for s in labels]
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), charset.PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, :len(s)] = s
    return out


def sequence_loss(model: SAR, fmap: B.FeatureMap, targets: np.ndarray) -> Tensor:
    """Teacher-forced cross-entropy averaged over non-PAD target positions."""
    cs = model.charset
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim == 1:
        targets = targets[None, :]
    if targets.shape[1] == 0 or (targets[:, 0] == cs.PAD).any():
        raise ValueError("empty target sequence")
    state, ctx = model.start(fmap)
    n, steps = targets.shape
    inputs = np.full(n, cs.START, dtype=np.int64)
    logits_per_step = []
    for t in range(steps):
        logits, state, _ = model.step(inputs, state, ctx)
        logits_per_step.append(logits)
        nxt = targets[:, t]
        inputs = np.where(nxt < len(cs), nxt, cs.START)
    logits = T.reshape(T.stack(logits_per_step, axis=1), (n * steps, cs.num_classes))
    return T.softmax_cross_entropy(logits, targets.reshape(-1), ignore_index=cs.PAD)
