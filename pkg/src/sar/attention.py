"""2-D attention over the backbone feature map.

Three variants share one interface:

* ``proposed2d``: the score at (i, j) mixes the feature there with its
  eight neighbours through one 3x3 convolution, plus a projection of the
  decoder hidden state, then tanh and a dot with a learned vector.
* ``traditional2d``: same, with the neighbour terms removed (a 1x1 conv).
* ``oned``: the map is max-pooled over height first and attention runs
  over columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .backbone import FeatureMap
from .params import Initializer, ParamStore
from .tensor import Tensor

VARIANTS = ("proposed2d", "traditional2d", "oned")


@dataclass
class AttentionParams:
    store: ParamStore
    variant: str
    feature_dim: int
    hidden_dim: int
    attn_dim: int
    bias: bool = True
    prefix: str = "attention"

    @property
    def kernel(self) -> int:
        return 3 if self.variant == "proposed2d" else 1

    @property
    def conv_weight(self) -> Tensor:
        return self.store[f"{self.prefix}.conv.weight"]

    @property
    def conv_bias(self) -> Tensor | None:
        name = f"{self.prefix}.conv.bias"
        return self.store[name] if name in self.store else None

    @property
    def w_h(self) -> Tensor:
        return self.store[f"{self.prefix}.w_h"]

    @property
    def w_e(self) -> Tensor:
        return self.store[f"{self.prefix}.w_e"]

    def num_scalars(self) -> int:
        return self.store.num_scalars(self.prefix)


def make_variant(variant: str, feature_dim: int, hidden_dim: int, attn_dim: int, seed: int,
                 store: ParamStore | None = None, bias: bool = True,
                 prefix: str = "attention") -> AttentionParams:
    if variant not in VARIANTS:
        raise ValueError(f"unknown attention variant {variant!r}; expected one of {VARIANTS}")
    store = store if store is not None else ParamStore()
    init = Initializer(store, seed)
    k = 3 if variant == "proposed2d" else 1
    init.conv(f"{prefix}.conv", k, k, feature_dim, attn_dim, bias=bias)
    init.weight(f"{prefix}.w_h", (hidden_dim, attn_dim), hidden_dim)
    init.weight(f"{prefix}.w_e", (attn_dim,), attn_dim)
    return AttentionParams(store, variant, feature_dim, hidden_dim, attn_dim, bias, prefix)


@dataclass
class AttentionContext:
    """Per-image quantities that do not depend on the decoder state."""

    values: Tensor      # N x H x W x D features attended over
    keys: Tensor        # N x H x W x da, the convolved features
    mask: np.ndarray    # N x H x W valid positions


def prepare(params: AttentionParams, fmap: FeatureMap) -> AttentionContext:
    v = fmap.values
    if v.shape[-1] != params.feature_dim:
        raise ValueError(f"feature map has {v.shape[-1]} channels, attention expects {params.feature_dim}")
    mask = fmap.mask()
    if not mask.reshape(mask.shape[0], -1).any(axis=1).all():
        raise ValueError("attention over an empty valid region")
    if params.variant == "oned":
        v = T.reshape(T.amax(v, axis=1), (v.shape[0], 1, v.shape[2], v.shape[3]))
        mask = mask[:, :1, :]
    pad = params.kernel // 2
    keys = T.conv2d(v, params.conv_weight, params.conv_bias, padding=(pad, pad))
    return AttentionContext(v, keys, np.ascontiguousarray(mask))


def attend_prepared(params: AttentionParams, ctx: AttentionContext, h_dec: Tensor) -> tuple[Tensor, Tensor]:
    """Glimpse (N x D) and attention weights (N x H x W) for decoder states ``h_dec`` (N x dh)."""
    n, h, w, da = ctx.keys.shape
    if h_dec.shape != (n, params.hidden_dim):
        raise ValueError(f"decoder state shape {h_dec.shape}, expected ({n}, {params.hidden_dim})")
    q = T.reshape(T.matmul(h_dec, params.w_h), (n, 1, 1, da))
    e = T.tanh(ctx.keys + q)
    scores = T.matmul(T.reshape(e, (n * h * w, da)), T.reshape(params.w_e, (da, 1)))
    alpha = T.softmax(T.reshape(scores, (n, h * w)), axis=1, mask=ctx.mask.reshape(n, h * w))
    alpha = T.reshape(alpha, (n, h, w, 1))
    glimpse = T.tsum(alpha * ctx.values, axis=(1, 2))
    return glimpse, T.reshape(alpha, (n, h, w))


def attend(params: AttentionParams, fmap: FeatureMap, h_dec) -> tuple[Tensor, Tensor]:
    """Single-call attention; accepts one decoder state (dh) or a batch (N x dh)."""
    h_dec = h_dec if isinstance(h_dec, Tensor) else Tensor(np.asarray(h_dec, dtype=params.store.dtype))
    single = h_dec.ndim == 1
    if single:
        h_dec = T.reshape(h_dec, (1, -1))
    g, alpha = attend_prepared(params, prepare(params, fmap), h_dec)
    if single and g.shape[0] == 1:
        return T.reshape(g, g.shape[1:]), T.reshape(alpha, alpha.shape[1:])
    return g, alpha
