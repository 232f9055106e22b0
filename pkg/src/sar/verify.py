"""Gradient-check suite: every differentiable op, then a micro SAR model.

Ops are looked up on the ``tensor`` module at call time, so a patched op is
what gets checked.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from . import tensor as T
from .backbone import BackboneConfig, batch_norm
from .charset import CharSet
from .model import SAR, ModelConfig, sequence_loss, targets_from_labels
from .params import ParamStore, grad_check
from .tensor import Tensor

TOLERANCE = 1e-5


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    seconds: float

    @property
    def ok(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _store(rng: np.random.Generator, **shapes) -> ParamStore:
    s = ParamStore(np.float64)
    for name, shape in shapes.items():
        s.add(name, rng.standard_normal(shape))
    return s


def _spread(rng: np.random.Generator, shape, gap: float = 0.05) -> np.ndarray:
    """Distinct values at least ``gap`` apart, so no finite-difference step crosses a tie."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    x = rng.standard_normal(shape)
    return np.where(x >= 0, x + margin, x - margin)


def _project(y: Tensor, seed: int = 99) -> Tensor:
    """Random linear functional of ``y``: a scalar whose gradient exercises every output."""
    w = np.random.default_rng(seed).standard_normal(y.shape)
    return T.tsum(T.mul(y, Tensor(w)))


def _op_cases() -> dict[str, tuple[ParamStore, Callable[[ParamStore], Tensor]]]:
    r = np.random.default_rng(0)
    cases: dict[str, tuple[ParamStore, Callable]] = {}

    def case(name, store, fn):
        cases[name] = (store, fn)

    s = _store(r, a=(3, 4), b=(4,))
    case("add", s, lambda p: _project(T.add(p["a"], p["b"])))
    case("sub", s, lambda p: _project(T.sub(p["a"], p["b"])))
    case("mul", s, lambda p: _project(T.mul(p["a"], p["b"])))
    d = _store(r, a=(3, 4))
    d.add("b", np.abs(r.standard_normal((3, 1))) + 0.5)
    case("div", d, lambda p: _project(T.div(p["a"], p["b"])))
    rl = ParamStore(np.float64)
    rl.add("x", _away_from_zero(r, (3, 5)))
    case("relu", rl, lambda p: _project(T.relu(p["x"])))
    u = _store(r, x=(3, 5))
    case("tanh", u, lambda p: _project(T.tanh(p["x"])))
    case("sigmoid", u, lambda p: _project(T.sigmoid(p["x"])))
    case("exp", u, lambda p: _project(T.exp(p["x"])))
    pos = ParamStore(np.float64)
    pos.add("x", np.abs(r.standard_normal((3, 5))) + 0.5)
    case("log", pos, lambda p: _project(T.log(p["x"])))
    wm = r.random((3, 5)) > 0.5
    w = _store(r, a=(3, 5), b=(3, 5))
    case("where", w, lambda p: _project(T.where(wm, p["a"], p["b"])))
    red = _store(r, x=(2, 3, 4))
    case("sum", red, lambda p: _project(T.tsum(p["x"], axis=1)))
    case("mean", red, lambda p: _project(T.mean(p["x"], axis=(0, 2), keepdims=True)))
    am = ParamStore(np.float64)
    am.add("x", _spread(r, (2, 3, 4)))
    case("amax", am, lambda p: _project(T.amax(p["x"], axis=1)))
    case("reshape", red, lambda p: _project(T.reshape(p["x"], (6, 4))))
    case("transpose", red, lambda p: _project(T.transpose(p["x"], (2, 0, 1))))
    case("getitem", red, lambda p: _project(T.getitem(p["x"], (slice(None), 1, slice(1, 3)))))
    case("getitem_fancy", red, lambda p: _project(T.getitem(p["x"], (np.array([0, 1, 1]), np.array([2, 0, 2])))))
    cat = _store(r, a=(2, 3), b=(2, 2))
    case("concat", cat, lambda p: _project(T.concat([p["a"], p["b"]], axis=1)))
    st = _store(r, a=(2, 3), b=(2, 3))
    case("stack", st, lambda p: _project(T.stack([p["a"], p["b"]], axis=1)))
    pr = _store(r, x=(2, 3, 4, 2))
    case("pad_right", pr, lambda p: _project(T.pad_right(p["x"], 6, axis=2)))
    mm = _store(r, a=(3, 4), b=(4, 5), c=(5,))
    case("matmul", mm, lambda p: _project(T.matmul(p["a"], p["b"])))
    case("linear", mm, lambda p: _project(T.linear(p["a"], p["b"], p["c"])))
    emb = _store(r, w=(6, 3))
    ids = np.array([0, 5, 2, 2])
    case("embedding", emb, lambda p: _project(T.embedding(p["w"], ids)))
    cv = _store(r, x=(2, 5, 6, 3), w=(3, 3, 3, 4), b=(4,))
    case("conv2d_3x3", cv, lambda p: _project(T.conv2d(p["x"], p["w"], p["b"], padding=(1, 1))))
    c1 = _store(r, x=(2, 4, 5, 3), w=(1, 1, 3, 2), b=(2,))
    case("conv2d_1x1", c1, lambda p: _project(T.conv2d(p["x"], p["w"], p["b"])))
    mp = ParamStore(np.float64)
    mp.add("x", _spread(r, (2, 5, 7, 2)))
    case("maxpool2d", mp, lambda p: _project(T.maxpool2d(p["x"], (2, 2), (2, 2), ceil_mode=True)))
    case("maxpool2d_tall", mp, lambda p: _project(T.maxpool2d(p["x"], (2, 1), (2, 1), ceil_mode=True)))
    sm = _store(r, x=(3, 6))
    smask = np.ones((3, 6), dtype=bool)
    smask[1, 4:] = False
    case("softmax", sm, lambda p: _project(T.softmax(p["x"], axis=1)))
    case("softmax_masked", sm, lambda p: _project(T.softmax(p["x"], axis=1, mask=smask)))
    case("log_softmax", sm, lambda p: _project(T.log_softmax(p["x"], axis=1)))
    tgt = np.array([1, 5, 3])
    case("cross_entropy", sm, lambda p: T.softmax_cross_entropy(p["x"], tgt))
    case("cross_entropy_ignore", sm, lambda p: T.softmax_cross_entropy(p["x"], np.array([1, -1, 3]), ignore_index=-1))
    ls = _store(r, x=(2, 3), h=(2, 4), c=(2, 4), wx=(3, 16), wh=(4, 16), b=(16,))

    def lstm(p):
        h, c = T.lstm_step(p["x"], p["h"], p["c"], p["wx"], p["wh"], p["b"])
        return T.add(_project(h, 1), _project(c, 2))

    case("lstm_step", ls, lstm)
    bn = _store(r, x=(2, 3, 5, 2), beta=(2,))
    bn.add("gamma", r.uniform(0.5, 1.5, 2))
    case("batch_norm", bn, lambda p: _project(batch_norm(p["x"], p["gamma"], p["beta"], np.array([3, 5]))[0]))
    return cases


def op_names() -> list[str]:
    return list(_op_cases())


def check_ops(only: list[str] | None = None) -> list[CheckResult]:
    out = []
    for name, (store, fn) in _op_cases().items():
        if only is not None and name not in only:
            continue
        t0 = time.perf_counter()
        err = grad_check(fn, store)
        out.append(CheckResult(f"op:{name}", err, time.perf_counter() - t0))
    return out


MICRO_SYMBOLS = "abcde"


def micro_config(variant: str = "proposed2d") -> ModelConfig:
    """Input 16 x 32, channel multiplier 1/8, dh = da = 32, five symbols, double precision."""
    bb = BackboneConfig(channel_multiplier=Fraction(1, 8), input_height=16, final_channels=512)
    return ModelConfig(backbone=bb, charset=CharSet(MICRO_SYMBOLS), hidden=32, attn_dim=32,
                       variant=variant, max_len=6, precision="float64")


def micro_batch(seed: int = 0) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Two 16-pixel-high inputs, the second padded on the right (width 24 of 32)."""
    r = np.random.default_rng(seed)
    x = r.uniform(-1, 1, size=(2, 16, 32, 1))
    x[1, :, 24:, :] = 0.0
    return x, np.array([32, 24]), ["abca", "ed"]


def micro_loss_fn(model: SAR, seed: int = 0) -> Callable[[ParamStore], Tensor]:
    x, widths, labels = micro_batch(seed)
    targets = targets_from_labels(model.charset, labels)

    names = [n for n in model.store.names() if n.startswith("backbone.")]
    cache: dict = {}

    def f(store: ParamStore) -> Tensor:
        # the backbone output is reused while no backbone parameter has moved
        snap = cache.get("snap")
        if T.is_grad_enabled() or snap is None or any(
                not np.array_equal(store[n].data, snap[n]) for n in names):
            fmap = model.features(Tensor(x), widths)
            if not T.is_grad_enabled():
                cache["snap"] = {n: store[n].data.copy() for n in names}
                cache["fmap"] = fmap
        else:
            fmap = cache["fmap"]
        return sequence_loss(model, fmap, targets)

    return f


def generic_point(store: ParamStore, seed: int = 1, gain: float = 2.0) -> None:
    """Move a freshly initialized store off its degenerate starting point.

    Zero biases put every zero-padded position exactly on a ReLU kink, and the
    small init leaves many gradients below finite-difference round-off. Random
    biases and a weight gain fix both without changing the graph.
    """
    r = np.random.default_rng(seed)
    for name, p in store.items():
        if name.endswith("bias"):
            p.data[...] = r.uniform(-0.1, 0.1, p.data.shape)
        else:
            p.data *= gain


def check_model(variant: str = "proposed2d", max_per_param: int | None = 4, seed: int = 0) -> CheckResult:
    model = SAR(micro_config(variant), seed=seed)
    generic_point(model.store, seed + 1)
    t0 = time.perf_counter()
    err = grad_check(micro_loss_fn(model, seed), model.store, max_per_param=max_per_param,
                     seed=seed, adaptive=True)
    return CheckResult(f"model:{variant}", err, time.perf_counter() - t0)


def run_suite(variants: tuple[str, ...] = ("proposed2d",), max_per_param: int | None = 4) -> list[CheckResult]:
    results = check_ops()
    results += [check_model(v, max_per_param) for v in variants]
    return results
