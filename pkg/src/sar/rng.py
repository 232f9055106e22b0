"""xoshiro256** pseudo-random generator, seeded through splitmix64.

Pure integer arithmetic, so streams are identical on every platform.
Constants follow the reference implementation by Blackman and Vigna.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step: returns (new_state, output)."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    __slots__ = ("s",)

    def __init__(self, seed: int | tuple = 0):
        if isinstance(seed, tuple):
            # derive a seed from a tuple of integers (e.g. (seed, sample, purpose))
            acc = 0
            for part in seed:
                acc, out = splitmix64((acc ^ (int(part) & MASK64)) & MASK64)
                acc = out
            seed = acc
        x = int(seed) & MASK64
        s = []
        for _ in range(4):
            x, out = splitmix64(x)
            s.append(out)
        self.s = s

    def get_state(self) -> tuple[int, int, int, int]:
        return tuple(self.s)

    def set_state(self, state) -> None:
        self.s = [int(v) & MASK64 for v in state]

    @classmethod
    def from_state(cls, state) -> "Xoshiro256":
        r = cls(0)
        r.set_state(state)
        return r

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in [lo, hi] inclusive."""
        return lo + self.randbelow(hi - lo + 1)

    def choice(self, seq):
        return seq[self.randbelow(len(seq))]

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def bytes(self, n: int) -> bytes:
        out = bytearray()
        while len(out) < n:
            out += self.next_u64().to_bytes(8, "little")
        return bytes(out[:n])
