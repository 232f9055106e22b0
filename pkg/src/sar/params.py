"""Named parameter storage, seeded initialization and the ADAM optimizer."""

from __future__ import annotations

import math
from typing import Callable, Iterator, Mapping

import numpy as np

from .tensor import Tensor, no_grad


class ParamStore:
    """Ordered map from dot-separated names to trainable tensors.

    Iteration is lexicographic by name. ADAM moments are created lazily, the
    first time a parameter takes part in an optimizer step.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        for name in self.names():
            yield name, self._params[name]

    def subtree(self, prefix: str) -> dict[str, Tensor]:
        p = prefix + "."
        return {k: v for k, v in self.items() if k.startswith(p)}

    def num_scalars(self, prefix: str | None = None) -> int:
        items = self.subtree(prefix).items() if prefix else self.items()
        return sum(t.data.size for _, t in items)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: t.grad for k, t in self.items() if t.grad is not None}

    def astype(self, dtype) -> "ParamStore":
        """Copy of the parameters (not the optimizer state) in another precision."""
        out = ParamStore(dtype)
        for k, t in self.items():
            out.add(k, t.data)
        return out

    def copy(self) -> "ParamStore":
        out = self.astype(self.dtype)
        out.m = {k: v.copy() for k, v in self.m.items()}
        out.v = {k: v.copy() for k, v in self.v.items()}
        out.step = self.step
        return out


class Initializer:
    """Seeded uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) weights and zero biases."""

    def __init__(self, store: ParamStore, seed: int):
        self.store = store
        self.rng = np.random.default_rng(seed)

    def weight(self, name: str, shape: tuple[int, ...], fan_in: int) -> Tensor:
        bound = math.sqrt(1.0 / fan_in)
        return self.store.add(name, self.rng.uniform(-bound, bound, size=shape))

    def zeros(self, name: str, shape: tuple[int, ...]) -> Tensor:
        return self.store.add(name, np.zeros(shape))

    def lstm(self, prefix: str, din: int, dh: int) -> None:
        self.weight(f"{prefix}.w_x", (din, 4 * dh), din + dh)
        self.weight(f"{prefix}.w_h", (dh, 4 * dh), din + dh)
        b = np.zeros(4 * dh)
        b[dh:2 * dh] = 1.0  # forget gate
        self.store.add(f"{prefix}.bias", b)

    def conv(self, prefix: str, kh: int, kw: int, cin: int, cout: int, bias: bool = True) -> None:
        self.weight(f"{prefix}.weight", (kh, kw, cin, cout), kh * kw * cin)
        if bias:
            self.zeros(f"{prefix}.bias", (cout,))

    def linear(self, prefix: str, din: int, dout: int, bias: bool = True) -> None:
        self.weight(f"{prefix}.weight", (din, dout), din)
        if bias:
            self.zeros(f"{prefix}.bias", (dout,))


def adam_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> ParamStore:
    """Bias-corrected ADAM update in place; parameters without a gradient are left alone."""
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in store.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        g = g.astype(store.dtype, copy=False)
        if name not in store.m:
            store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data -= update.astype(store.dtype, copy=False)
    return store


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for k in grads:
            grads[k] = grads[k] * np.asarray(scale, dtype=grads[k].dtype)
    return total


def grad_check(f: Callable[[ParamStore], Tensor], store: ParamStore, step: float = 1e-4,
               names: list[str] | None = None, max_per_param: int | None = None,
               seed: int = 0, adaptive: bool = False) -> float:
    """Largest relative error between backprop and central-difference gradients.

    The relative error of one coordinate is ``|a - n| / max(1e-8, |a| + |n|)``.
    ``max_per_param`` limits the check to a seeded random subset of coordinates
    of each tensor (every tensor still gets checked).

    With ``adaptive`` each estimate uses the fourth-order five-point stencil
    and the step walks down from ``1000 * step`` by factors of ten; the first
    estimate that agrees with the next smaller step (up to 1e-7 relative plus
    the round-off bound of both) is taken, failing that the closest
    consecutive pair wins. Large steps disagree when they straddle
    a ReLU or max switch, so deep piecewise-linear nets end up on small steps
    while weakly coupled parameters keep the large steps their tiny gradients
    need. The choice never looks at the analytic gradient.
    """
    if store.dtype != np.float64:
        raise TypeError("grad_check needs a float64 parameter store")
    store.zero_grad()
    loss = f(store)
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("loss is not finite")
    if loss.requires_grad:
        loss.backward()
    ulp = float(np.spacing(abs(float(loss.data))))
    rng = np.random.default_rng(seed)
    steps = [step * 10.0 ** k for k in range(3, -4, -1)] if adaptive else [step]
    worst = 0.0
    for name in names or store.names():
        p = store[name]
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_per_param is not None and flat.size > max_per_param:
            coords = np.sort(rng.choice(flat.size, size=max_per_param, replace=False))

        def at(idx: int, value: float) -> float:
            flat[idx] = value
            with no_grad():
                out = float(f(store).data)
            if not math.isfinite(out):
                raise FloatingPointError(f"loss not finite while perturbing {name}[{idx}]")
            return out

        def central(idx: int, h: float) -> float:
            orig = flat[idx]
            try:
                d1 = at(idx, orig + h) - at(idx, orig - h)
                if not adaptive:
                    return d1 / (2 * h)
                d2 = at(idx, orig + 2 * h) - at(idx, orig - 2 * h)
                return (8 * d1 - d2) / (12 * h)
            finally:
                flat[idx] = orig

        for idx in coords:
            num = central(idx, steps[0])
            if adaptive:
                best_gap, best = math.inf, num
                for h_prev, h in zip(steps, steps[1:]):
                    nxt = central(idx, h)
                    gap = abs(num - nxt)
                    noise = 4 * ulp / h_prev + 4 * ulp / h
                    if gap <= 1e-7 * (abs(num) + abs(nxt)) + noise:
                        best = num
                        break
                    if gap < best_gap:
                        best_gap, best = gap, num
                    num = nxt
                num = best
            a = float(analytic.reshape(-1)[idx])
            err = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, err)
    return worst
