"""Small configurations that train on one CPU core in minutes."""

from __future__ import annotations

from fractions import Fraction

from .backbone import BackboneConfig
from .charset import ALNUM36, CharSet
from .model import ModelConfig
from .synth import SynthSpec

MIXED_DISTORTIONS = [
    {"kind": "none"},
    {"kind": "curve", "amplitude": [1, 3], "wavelength": [16, 32]},
    {"kind": "rotate", "max_degrees": 12},
]


def toy_model_config(variant: str = "proposed2d") -> ModelConfig:
    """Channel multiplier 1/4, dh = da = 256, 36 alphanumerics, batch normalization in the backbone."""
    bb = BackboneConfig(channel_multiplier=Fraction(1, 4), normalize=True)
    return ModelConfig(backbone=bb, charset=CharSet(ALNUM36), hidden=256, attn_dim=256, variant=variant)


def toy_spec(seed: int = 1, max_len: int = 6, min_len: int = 1) -> SynthSpec:
    return SynthSpec(charset=ALNUM36, min_len=min_len, max_len=max_len, distortions=list(MIXED_DISTORTIONS),
                     seed=seed)
