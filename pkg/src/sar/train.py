"""Training loop, learning-rate schedule, group sampling and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .data import make_batch, resize_policy
from .model import SAR, ModelConfig, sequence_loss, targets_from_labels
from .params import ParamStore, adam_step, clip_grad_norm
from .rng import Xoshiro256
from .synth import Sample
from .tensor import Tensor

log = logging.getLogger(__name__)

MAGIC = b"SARC"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr0: float = 1e-3
    decay: float = 0.9
    decay_every: int = 10000
    lr_floor: float = 1e-5
    group_sizes: list = field(default_factory=lambda: [256, 128, 128])
    epochs_per_group: int = 2
    groups: int = 4
    replacement: bool = False
    clip_norm: float | None = 5.0
    checkpoint_every: int = 0
    max_iterations: int | None = None
    seed: int = 0

    def __post_init__(self):
        if self.lr_floor > self.lr0:
            raise ValueError("lr_floor must not exceed lr0")
        counts = [self.batch_size, self.epochs_per_group, self.groups, self.decay_every, *self.group_sizes]
        if any(int(c) <= 0 for c in counts):
            raise ValueError("batch size, epochs, groups, decay period and group sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


def lr_at(iteration: int, lr0: float = 1e-3, decay: float = 0.9, every: int = 10000,
          floor: float = 1e-5) -> float:
    """Step-decayed learning rate: lr0 * decay^(iteration // every), floored."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return max(floor, lr0 * decay ** (iteration // every))


class GroupSampler:
    """Iteration plan built from data groups.

    Each group draws ``count`` items from every source (without replacement
    unless ``replacement``), then runs ``epochs`` shuffled passes over the
    group in batches. Batches are lists of (source, index) pairs. The plan is
    fully determined by the seed; ``state()`` captures enough to resume
    mid-group.
    """

    def __init__(self, source_sizes: Sequence[int], counts: Sequence[int], batch_size: int,
                 epochs: int = 2, groups: int = 1, seed: int = 0, replacement: bool = False):
        if len(source_sizes) != len(counts):
            raise ValueError("one count per source is required")
        if any(n <= 0 for n in source_sizes):
            raise ValueError("empty data source")
        if not replacement and any(c > n for c, n in zip(counts, source_sizes)):
            raise ValueError("group count exceeds source size (enable replacement to allow this)")
        self.source_sizes = list(source_sizes)
        self.counts = list(counts)
        self.batch_size = batch_size
        self.epochs = epochs
        self.groups = groups
        self.replacement = replacement
        self.rng = Xoshiro256(seed)
        self.group = 0
        self.pos = 0
        self._group_start_state = self.rng.get_state()
        self._plan: list[list[tuple[int, int]]] | None = None

    def _draw_group(self) -> list[list[tuple[int, int]]]:
        rng = self.rng
        items: list[tuple[int, int]] = []
        for s, (n, c) in enumerate(zip(self.source_sizes, self.counts)):
            if self.replacement:
                items += [(s, rng.randbelow(n)) for _ in range(c)]
            else:
                pool = list(range(n))
                for i in range(c):  # partial Fisher-Yates
                    j = i + rng.randbelow(n - i)
                    pool[i], pool[j] = pool[j], pool[i]
                items += [(s, k) for k in pool[:c]]
        plan = []
        for _ in range(self.epochs):
            order = list(items)
            rng.shuffle(order)
            plan += [order[i:i + self.batch_size] for i in range(0, len(order), self.batch_size)]
        return plan

    def batches_per_group(self) -> int:
        return self.epochs * math.ceil(sum(self.counts) / self.batch_size)

    def __len__(self) -> int:
        return self.groups * self.batches_per_group()

    def state(self) -> dict:
        return {"rng": list(self._group_start_state), "group": self.group, "pos": self.pos}

    def load_state(self, state: dict) -> None:
        self.rng.set_state(state["rng"])
        self._group_start_state = self.rng.get_state()
        self.group = int(state["group"])
        self.pos = int(state["pos"])
        self._plan = None

    def __iter__(self) -> Iterator[list[tuple[int, int]]]:
        while self.group < self.groups:
            if self._plan is None:
                self._group_start_state = self.rng.get_state()
                self._plan = self._draw_group()
            while self.pos < len(self._plan):
                batch = self._plan[self.pos]
                self.pos += 1
                yield batch
            self.group += 1
            self.pos = 0
            self._plan = None


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    model_config: ModelConfig
    store: ParamStore
    iteration: int = 0
    sampler_state: dict = field(default_factory=lambda: {"rng": [0, 0, 0, 0], "group": 0, "pos": 0})
    train_config: dict = field(default_factory=dict)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<I", VERSION))
        blob = json.dumps({"model": self.model_config.to_dict(), "train": self.train_config},
                          sort_keys=True).encode("utf-8")
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
        names = self.store.names()
        buf.write(struct.pack("<I", len(names)))
        for name in names:
            _write_name(buf, name)
            _write_array(buf, self.store[name].data)
        moments = sorted(self.store.m)
        buf.write(struct.pack("<I", len(moments)))
        for name in moments:
            _write_name(buf, name)
            _write_array(buf, self.store.m[name])
            _write_array(buf, self.store.v[name])
        buf.write(struct.pack("<QQ", self.store.step, self.iteration))
        st = self.sampler_state
        buf.write(struct.pack("<4Q", *[int(x) for x in st["rng"]]))
        buf.write(struct.pack("<QQ", int(st["group"]), int(st["pos"])))
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        path = Path(path)
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_bytes(self.to_bytes())
        tmp.replace(path)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Checkpoint":
        buf = io.BytesIO(raw)
        if buf.read(4) != MAGIC:
            raise ValueError("not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", buf.read(4))
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", buf.read(4))
        blob = json.loads(buf.read(n).decode("utf-8"))
        config = ModelConfig.from_dict(blob["model"])
        (count,) = struct.unpack("<I", buf.read(4))
        store = None
        for _ in range(count):
            name = _read_name(buf)
            arr = _read_array(buf)
            if store is None:
                store = ParamStore(arr.dtype)
            store.add(name, arr)
        store = store if store is not None else ParamStore(config.dtype)
        (count,) = struct.unpack("<I", buf.read(4))
        for _ in range(count):
            name = _read_name(buf)
            store.m[name] = _read_array(buf)
            store.v[name] = _read_array(buf)
        store.step, iteration = struct.unpack("<QQ", buf.read(16))
        rng = list(struct.unpack("<4Q", buf.read(32)))
        group, pos = struct.unpack("<QQ", buf.read(16))
        return cls(config, store, iteration, {"rng": rng, "group": group, "pos": pos}, blob["train"])

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())

    def model(self) -> SAR:
        return SAR(self.model_config, self.store)


def _write_name(buf, name: str) -> None:
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def _read_name(buf) -> str:
    (n,) = struct.unpack("<H", buf.read(2))
    return buf.read(n).decode("utf-8")


def _write_array(buf, arr: np.ndarray) -> None:
    tag = _DTYPE_TAGS[arr.dtype]
    buf.write(struct.pack("<BB", tag, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def _read_array(buf) -> np.ndarray:
    tag, rank = struct.unpack("<BB", buf.read(2))
    dims = struct.unpack(f"<{rank}I", buf.read(4 * rank))
    dtype = _TAG_DTYPES[tag].newbyteorder("<")
    n = int(np.prod(dims)) if rank else 1
    arr = np.frombuffer(buf.read(n * dtype.itemsize), dtype=dtype).reshape(dims)
    return arr.astype(_TAG_DTYPES[tag])


# ---------------------------------------------------------------- training


@dataclass
class Prepared:
    """A sample after the resize policy, ready for batching."""

    image: np.ndarray
    width: int
    label: str


def prepare_samples(samples: Sequence[Sample], height: int = 48) -> list[Prepared]:
    out = []
    for s in samples:
        img, cw = resize_policy(s.image, height=height)
        out.append(Prepared(img, cw, s.label))
    return out


def batch_loss(model: SAR, items: Sequence[Prepared]) -> Tensor:
    x, widths = make_batch([(p.image, p.width) for p in items], dtype=model.store.dtype)
    fmap = model.features(Tensor(x), widths, training=True)
    targets = targets_from_labels(model.charset, [p.label for p in items])
    return sequence_loss(model, fmap, targets)


class NonFiniteLoss(FloatingPointError):
    pass


def train_loop(model: SAR, config: TrainConfig, sampler: GroupSampler, sources: Sequence[Sequence[Prepared]],
               start_iteration: int = 0, checkpoint_path: str | Path | None = None,
               on_log: Callable[[int, float, float], None] | None = None,
               should_stop: Callable[[int], bool] | None = None) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    """Run ADAM over the sampler's batches; returns the final checkpoint and the loss log.

    ``should_stop(iteration)`` is consulted after every update and may end
    training early. Checkpoints go to ``checkpoint_path`` every
    ``config.checkpoint_every`` iterations and at the end.
    """
    store = model.store
    iteration = start_iteration
    history: list[tuple[int, float, float]] = []

    def snapshot() -> Checkpoint:
        return Checkpoint(model.config, store, iteration, sampler.state(), config.to_dict())

    for batch in sampler:
        if config.max_iterations is not None and iteration >= config.max_iterations:
            # undo the draw so a resumed run sees this batch again
            sampler.pos -= 1
            break
        lr = lr_at(iteration, config.lr0, config.decay, config.decay_every, config.lr_floor)
        store.zero_grad()
        loss = batch_loss(model, [sources[s][i] for s, i in batch])
        value = float(loss.data)
        if not math.isfinite(value):
            if checkpoint_path is not None:
                snapshot().save(Path(str(checkpoint_path) + ".nonfinite"))
            raise NonFiniteLoss(f"loss became {value} at iteration {iteration}")
        loss.backward()
        grads = store.grads()
        if config.clip_norm:
            clip_grad_norm(grads, config.clip_norm)
        adam_step(store, grads, lr)
        store.zero_grad()
        history.append((iteration, lr, value))
        if on_log is not None:
            on_log(iteration, lr, value)
        iteration += 1
        if checkpoint_path is not None and config.checkpoint_every and iteration % config.checkpoint_every == 0:
            snapshot().save(checkpoint_path)
        if should_stop is not None and should_stop(iteration):
            break
    ckpt = snapshot()
    if checkpoint_path is not None:
        ckpt.save(checkpoint_path)
    return ckpt, history


def write_loss_log(path: str | Path, history: Sequence[tuple[int, float, float]], append: bool = False) -> None:
    mode = "a" if append else "w"
    with open(path, mode, encoding="utf-8", newline="\n") as f:
        if not append:
            f.write("iteration,lr,loss\n")
        for it, lr, loss in history:
            f.write(f"{it},{lr!r},{loss!r}\n")
