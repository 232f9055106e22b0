"""Deterministic toy generator of word images.

Glyphs from the built-in 5x7 font are scaled by integer factors and placed at
integer positions; an optional curve or rotation warps the ink mask (nearest
neighbour), then flat foreground/background levels and integer noise are
applied. Each sample draws from its own xoshiro256** streams keyed by
(seed, sample index, purpose), so a sample does not depend on its neighbours.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .charset import ALNUM36
from .font import GLYPH_H, GLYPH_W, glyph, missing_glyphs
from .rng import Xoshiro256

_LABEL, _STYLE, _GEOM, _NOISE = 1, 2, 3, 4


class SynthSpecError(ValueError):
    pass


@dataclass
class SynthSpec:
    charset: str = ALNUM36
    min_len: int = 1
    max_len: int = 6
    scale_x: int = 1
    scale_y: int = 3
    margin: int = 2
    spacing: int = 1
    # each entry: {"kind": "none"} | {"kind": "rotate", "max_degrees": d}
    #             | {"kind": "curve", "amplitude": [lo, hi], "wavelength": [lo, hi]}
    distortions: list = field(default_factory=lambda: [{"kind": "none"}])
    noise: int = 12
    background: tuple = (150, 240)
    foreground: tuple = (0, 90)
    seed: int = 0

    def validate(self) -> None:
        if not self.charset:
            raise SynthSpecError("charset is empty")
        missing = missing_glyphs(self.charset)
        if missing:
            raise SynthSpecError(f"no glyph for charset symbols {missing!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise SynthSpecError("need 1 <= min_len <= max_len")
        if self.scale_x < 1 or self.scale_y < 1 or self.margin < 0 or self.spacing < 0:
            raise SynthSpecError("scales must be >= 1, margin and spacing >= 0")
        if not self.distortions:
            raise SynthSpecError("at least one distortion entry is required")
        for d in self.distortions:
            kind = d.get("kind")
            if kind not in ("none", "rotate", "curve"):
                raise SynthSpecError(f"unknown distortion kind {kind!r}")
            if kind == "curve" and float(max(d.get("wavelength", [1])) ) <= 0:
                raise SynthSpecError("curve wavelength must be positive")
        if not 0 <= self.noise <= 127:
            raise SynthSpecError("noise must lie in [0, 127]")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SynthSpecError(f"unknown SynthSpec keys {sorted(unknown)}")
        spec = cls(**d)
        spec.background = tuple(spec.background)
        spec.foreground = tuple(spec.foreground)
        return spec

    @classmethod
    def from_file(cls, path: str | Path) -> "SynthSpec":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass
class Sample:
    image: np.ndarray  # uint8, H x W or H x W x 3
    label: str
    id: str = ""


def render_mask(text: str, spec: SynthSpec) -> np.ndarray:
    """Boolean ink mask of ``text`` on a flat canvas."""
    sx, sy, m = spec.scale_x, spec.scale_y, spec.margin
    adv = (GLYPH_W + spec.spacing) * sx
    h = GLYPH_H * sy + 2 * m
    w = len(text) * adv - spec.spacing * sx + 2 * m
    mask = np.zeros((h, w), dtype=bool)
    for k, ch in enumerate(text):
        g = np.kron(glyph(ch), np.ones((sy, sx), dtype=bool))
        x0 = m + k * adv
        mask[m:m + GLYPH_H * sy, x0:x0 + GLYPH_W * sx] = g
    return mask


def curve(mask: np.ndarray, amplitude: float, wavelength: float, phase: float) -> np.ndarray:
    """Shift each column vertically along a sine; amplitude 0 leaves the mask unchanged."""
    pad = int(math.ceil(abs(amplitude)))
    h, w = mask.shape
    out = np.zeros((h + 2 * pad, w), dtype=bool)
    for x in range(w):
        shift = int(math.floor(amplitude * math.sin(2 * math.pi * x / wavelength + phase) + 0.5))
        out[pad + shift:pad + shift + h, x] = mask[:, x]
    return out


def rotate(mask: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the centre into an enlarged canvas (nearest neighbour)."""
    if degrees == 0:
        return mask.copy()
    th = math.radians(degrees)
    c, s = math.cos(th), math.sin(th)
    h, w = mask.shape
    w1 = int(math.ceil(abs(w * c) + abs(h * s) - 1e-9))
    h1 = int(math.ceil(abs(w * s) + abs(h * c) - 1e-9))
    yy, xx = np.mgrid[0:h1, 0:w1]
    dx = xx + 0.5 - w1 / 2
    dy = yy + 0.5 - h1 / 2
    xs = np.floor(c * dx - s * dy + w / 2).astype(np.int64)
    ys = np.floor(s * dx + c * dy + h / 2).astype(np.int64)
    ok = (xs >= 0) & (xs < w) & (ys >= 0) & (ys < h)
    out = np.zeros((h1, w1), dtype=bool)
    out[ok] = mask[ys[ok], xs[ok]]
    return out


def _distort(mask: np.ndarray, d: dict, rng: Xoshiro256) -> np.ndarray:
    kind = d["kind"]
    if kind == "none":
        return mask
    if kind == "curve":
        a_lo, a_hi = d.get("amplitude", [0, 0])
        l_lo, l_hi = d.get("wavelength", [16, 32])
        amp = rng.uniform(a_lo, a_hi)
        wl = rng.uniform(l_lo, l_hi)
        phase = rng.uniform(0, 2 * math.pi)
        return curve(mask, amp, wl, phase)
    m = float(d.get("max_degrees", 0))
    return rotate(mask, rng.uniform(-m, m))


def add_noise(img: np.ndarray, level: int, rng: Xoshiro256) -> np.ndarray:
    if level == 0:
        return img
    raw = np.frombuffer(rng.bytes(img.size), dtype=np.uint8).reshape(img.shape).astype(np.int32)
    noise = raw % (2 * level + 1) - level
    return np.clip(img.astype(np.int32) + noise, 0, 255).astype(np.uint8)


def render(text: str, spec: SynthSpec, index: int, distortion: dict | None = None) -> np.ndarray:
    style = Xoshiro256((spec.seed, index, _STYLE))
    d = distortion if distortion is not None else style.choice(spec.distortions)
    bg = style.randint(*spec.background)
    fg = style.randint(*spec.foreground)
    mask = _distort(render_mask(text, spec), d, Xoshiro256((spec.seed, index, _GEOM)))
    img = np.where(mask, fg, bg).astype(np.uint8)
    return add_noise(img, spec.noise, Xoshiro256((spec.seed, index, _NOISE)))


def random_label(spec: SynthSpec, index: int) -> str:
    rng = Xoshiro256((spec.seed, index, _LABEL))
    n = rng.randint(spec.min_len, spec.max_len)
    return "".join(rng.choice(spec.charset) for _ in range(n))


def synth_generate(spec: SynthSpec, n: int, start: int = 0) -> list[Sample]:
    """``n`` samples with indices ``start .. start + n - 1``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    spec.validate()
    out = []
    for i in range(start, start + n):
        label = random_label(spec, i)
        out.append(Sample(render(label, spec, i), label, f"{i:06d}"))
    return out
