"""Resize policy, raster and manifest I/O, and batch assembly."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Iterator

import numpy as np

from .synth import Sample

TARGET_HEIGHT = 48
MIN_WIDTH = 48
MAX_WIDTH = 160


class DatasetError(ValueError):
    pass


# ---------------------------------------------------------------- resize


def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resampling with edge clamping; float64 result."""
    src = img.astype(np.float64)
    squeeze = src.ndim == 2
    if squeeze:
        src = src[:, :, None]
    h, w, _ = src.shape
    if (h, w) == (out_h, out_w):
        out = src.copy()
        return out[:, :, 0] if squeeze else out

    def axis_weights(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis_weights(h, out_h)
    x0, x1, fx = axis_weights(w, out_w)
    top = src[y0][:, x0] * (1 - fx)[None, :, None] + src[y0][:, x1] * fx[None, :, None]
    bot = src[y1][:, x0] * (1 - fx)[None, :, None] + src[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return out[:, :, 0] if squeeze else out


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def resize_policy(img: np.ndarray, height: int = TARGET_HEIGHT, min_width: int = MIN_WIDTH,
                  max_width: int = MAX_WIDTH) -> tuple[np.ndarray, int]:
    """Scale to ``height`` keeping aspect, clamp width to [min_width, max_width].

    Too-wide images are squeezed to ``max_width``; too-narrow ones are padded
    on the right with the image mean. Returns (image, content width).
    """
    h, w = img.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("image must be at least 1x1")
    new_w = max(1, _round_half_up(w * height / h))
    new_w = min(new_w, max_width)
    out = bilinear_resize(img, height, new_w)
    if new_w < min_width:
        fill = float(out.mean())
        pad = [(0, 0), (0, min_width - new_w)] + [(0, 0)] * (out.ndim - 2)
        out = np.pad(out, pad, constant_values=fill)
    return out, new_w


def to_input(img: np.ndarray) -> np.ndarray:
    """H x W (x C) pixel values in [0, 255] -> H x W x C in [-1, 1]."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, :, None]
    return x / 127.5 - 1.0


def make_batch(images: list[np.ndarray], dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad already-resized images (zero in input space) to a common width.

    Returns (N x H x Wmax x C array, content widths). Each entry of ``images``
    is a (resized image, content width) pair or a plain resized image.
    """
    arrs, widths = [], []
    for item in images:
        if isinstance(item, tuple):
            img, cw = item
        else:
            img, cw = item, item.shape[1]
        arrs.append(to_input(img))
        widths.append(cw)
    wmax = max(a.shape[1] for a in arrs)
    h, c = arrs[0].shape[0], arrs[0].shape[2]
    batch = np.zeros((len(arrs), h, wmax, c), dtype=dtype)
    for i, a in enumerate(arrs):
        batch[i, :, :a.shape[1], :] = a
    return batch, np.asarray(widths, dtype=np.int64)


# ---------------------------------------------------------------- PGM / PPM


def write_pnm(path: str | Path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise DatasetError("only 8-bit rasters are written")
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise DatasetError(f"cannot write raster of shape {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(np.ascontiguousarray(img).tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace after maxval
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise DatasetError(f"{path}: unsupported format {magic!r} (need P5 or P6)")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise DatasetError(f"{path}: malformed header") from None
    if maxval != 255:
        raise DatasetError(f"{path}: maxval {maxval} unsupported (need 255)")
    ch = 1 if magic == b"P5" else 3
    payload = data[pos:pos + w * h * ch]
    if len(payload) != w * h * ch:
        raise DatasetError(f"{path}: pixel data truncated")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


# ---------------------------------------------------------------- manifest


def write_dataset(samples: list[Sample], out_dir: str | Path, manifest_name: str = "manifest.tsv") -> Path:
    """Write rasters plus a manifest of ``relative_path<TAB>label`` lines."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        ext = "pgm" if s.image.ndim == 2 else "ppm"
        rel = f"images/{s.id or f'{i:06d}'}.{ext}"
        write_pnm(out / rel, s.image)
        lines.append(f"{rel}\t{s.label}\n")
    path = out / manifest_name
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.writelines(lines)
    return path


def iter_manifest(path: str | Path) -> Iterator[Sample]:
    """Stream samples in manifest order; image paths are relative to the manifest."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"manifest not found: {path}")
    base = path.parent
    with open(path, encoding="utf-8", newline="\n") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise DatasetError(f"{path}:{lineno}: expected 'image_path<TAB>label'")
            img_path = Path(parts[0])
            if not img_path.is_absolute():
                img_path = base / img_path
            try:
                img = read_pnm(img_path)
            except FileNotFoundError:
                raise DatasetError(f"{path}:{lineno}: image not found: {img_path}") from None
            except DatasetError as e:
                raise DatasetError(f"{path}:{lineno}: {e}") from None
            yield Sample(img, parts[1], img_path.stem)


def load_manifest(path: str | Path) -> list[Sample]:
    return list(iter_manifest(path))
