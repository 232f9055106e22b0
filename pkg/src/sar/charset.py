"""Character inventory and the label codec."""

from __future__ import annotations

import string
from pathlib import Path
from typing import Iterable, Sequence

DEFAULT_PUNCTUATION = string.punctuation.replace("`", "")
DEFAULT_SYMBOLS = string.digits + string.ascii_uppercase + string.ascii_lowercase + DEFAULT_PUNCTUATION
ALNUM36 = string.digits + string.ascii_uppercase


class CharsetError(ValueError):
    pass


class CharSet:
    """Ordered symbols plus implicit specials.

    Output classes are the symbols followed by END; decoder inputs are the
    symbols followed by START. PAD marks unused target positions and is the
    loss's ignore index.
    """

    def __init__(self, symbols: Iterable[str] = DEFAULT_SYMBOLS):
        self.symbols = list(symbols)
        if any(len(s) != 1 for s in self.symbols):
            raise CharsetError("every symbol must be a single character")
        if len(set(self.symbols)) != len(self.symbols):
            raise CharsetError("duplicate symbols in charset")
        if not self.symbols:
            raise CharsetError("empty charset")
        self.index = {s: i for i, s in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def __eq__(self, other) -> bool:
        return isinstance(other, CharSet) and self.symbols == other.symbols

    @property
    def END(self) -> int:
        return len(self.symbols)

    @property
    def START(self) -> int:
        return len(self.symbols)

    @property
    def PAD(self) -> int:
        return len(self.symbols) + 1

    @property
    def num_classes(self) -> int:
        return len(self.symbols) + 1

    @property
    def num_inputs(self) -> int:
        return len(self.symbols) + 1

    def validate(self, text: str) -> None:
        missing = sorted({ch for ch in text if ch not in self.index})
        if missing:
            raise CharsetError(f"symbols not in charset: {missing!r}")

    def encode(self, text: str) -> list[int]:
        """Token ids for ``text`` followed by END."""
        self.validate(text)
        return [self.index[ch] for ch in text] + [self.END]

    def decode(self, ids: Sequence[int]) -> str:
        """Text for ids, stopping at the first END and skipping PAD."""
        out = []
        for i in ids:
            i = int(i)
            if i == self.END:
                break
            if i == self.PAD:
                continue
            out.append(self.symbols[i])
        return "".join(out)

    def to_text(self) -> str:
        return "".join(s + "\n" for s in self.symbols)

    @classmethod
    def from_file(cls, path: str | Path) -> "CharSet":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(lines)
