"""Show-attend-and-read: a 2D-attention text recognizer on a small numpy autodiff core.

Submodules are imported lazily so ``sar.cli`` can set thread limits before
numpy loads.
"""

import importlib

__version__ = "0.1.0"

_EXPORTS = {
    "Tensor": "tensor",
    "no_grad": "tensor",
    "ParamStore": "params",
    "grad_check": "params",
    "CharSet": "charset",
    "BackboneConfig": "backbone",
    "ModelConfig": "model",
    "SAR": "model",
    "SynthSpec": "synth",
    "synth_generate": "synth",
    "recognize": "inference",
    "beam_search": "inference",
    "greedy_decode": "inference",
    "lexicon_match": "inference",
    "TrainConfig": "train",
    "Checkpoint": "train",
    "lr_at": "train",
}

__all__ = sorted(_EXPORTS)


def __getattr__(name):
    if name in _EXPORTS:
        return getattr(importlib.import_module(f".{_EXPORTS[name]}", __name__), name)
    raise AttributeError(f"module 'sar' has no attribute {name!r}")
