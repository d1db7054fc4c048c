"""Bit strings, seeded randomness and randomness accounting.

Bit order is big-endian everywhere: index 0 is the leftmost bit and the
most significant bit of any chunk read as an integer.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import BadChunking, IndivisibleLength


class BitString:
    """Immutable ordered sequence of bits."""

    __slots__ = ("_bits",)

    def __init__(self, bits: Iterable[int] = ()):
        values = tuple(int(b) for b in bits)
        if any(b not in (0, 1) for b in values):
            raise ValueError("bits must be 0 or 1")
        self._bits = values

    @classmethod
    def from_str(cls, text: str) -> BitString:
        if any(c not in "01" for c in text):
            raise ValueError(f"not a bit string: {text!r}")
        return cls(int(c) for c in text)

    @classmethod
    def from_int(cls, value: int, width: int) -> BitString:
        if width < 0 or not 0 <= value < (1 << width) or (width == 0 and value):
            raise ValueError(f"{value} does not fit in {width} bits")
        return cls((value >> (width - 1 - i)) & 1 for i in range(width))

    @classmethod
    def from_array(cls, array: np.ndarray) -> BitString:
        return cls(np.asarray(array, dtype=np.uint8).ravel().tolist())

    def to_int(self) -> int:
        value = 0
        for b in self._bits:
            value = (value << 1) | b
        return value

    def to_array(self) -> np.ndarray:
        return np.array(self._bits, dtype=np.uint8)

    def __len__(self) -> int:
        return len(self._bits)

    def __iter__(self) -> Iterator[int]:
        return iter(self._bits)

    def __getitem__(self, index):
        if isinstance(index, slice):
            return BitString(self._bits[index])
        return self._bits[index]

    def __add__(self, other: BitString) -> BitString:
        if not isinstance(other, BitString):
            return NotImplemented
        return BitString(self._bits + other._bits)

    def __eq__(self, other) -> bool:
        return isinstance(other, BitString) and self._bits == other._bits

    def __hash__(self) -> int:
        return hash(self._bits)

    def __str__(self) -> str:
        return "".join(map(str, self._bits))

    def __repr__(self) -> str:
        return f"BitString('{self}')"


def concat(parts: Iterable[BitString]) -> BitString:
    out: list[int] = []
    for part in parts:
        out.extend(part)
    return BitString(out)


class SeededRng:
    """Deterministic generator (PCG64) standing in for Bob's private source.

    Output depends only on the seed; numpy guarantees the PCG64 stream is
    stable across platforms.
    """

    def __init__(self, seed: int, stream: int | None = None):
        self.seed = int(seed) & 0xFFFF_FFFF_FFFF_FFFF
        self.stream = stream
        if stream is None:
            bitgen = np.random.PCG64(self.seed)
        else:
            bitgen = np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=(stream,)))
        self._gen = np.random.Generator(bitgen)

    def derive(self, stream: int) -> SeededRng:
        """Independent generator for a named sub-stream of the same seed."""
        return SeededRng(self.seed, stream)

    def bits(self, n: int) -> np.ndarray:
        return self._gen.integers(0, 2, size=n, dtype=np.uint8)

    def random(self) -> float:
        return float(self._gen.random())

    def choice_index(self, probs: Sequence[float]) -> int:
        """Draw an index with the given probabilities (inverse-CDF, one uniform)."""
        u = self.random()
        acc = 0.0
        for i, p in enumerate(probs):
            acc += p
            if u < acc:
                return i
        # rounding slack: fall back to the last index with positive mass
        return max(i for i, p in enumerate(probs) if p > 0)

    def uniform_sign(self) -> int:
        return 1 if self.random() < 0.5 else -1


def random_bits(rng: SeededRng, n: int) -> BitString:
    if n < 0:
        raise ValueError("n must be nonnegative")
    return BitString.from_array(rng.bits(n))


def partition_input(x: BitString) -> tuple[BitString, BitString]:
    """Split ``x`` into (x1, r) with |r| = 2|x1|."""
    if len(x) % 3:
        raise IndivisibleLength(f"length {len(x)} is not divisible by 3")
    m = len(x) // 3
    return x[:m], x[m:]


def chunk_to_indices(x: BitString, width: int) -> list[int]:
    if width < 1 or len(x) % width:
        raise BadChunking(f"cannot split {len(x)} bits into {width}-bit chunks")
    return [x[i:i + width].to_int() for i in range(0, len(x), width)]


def indices_to_bits(indices: Iterable[int], width: int) -> BitString:
    return concat(BitString.from_int(i, width) for i in indices)


@dataclass
class RandomnessLedger:
    """Counts of bits consumed, produced raw by devices, and finally output."""

    bits_consumed: int = 0
    bits_emitted_raw: int = 0
    bits_output_final: int = 0
    bits_discarded: int = 0

    def _bump(self, name: str, amount: int) -> None:
        if amount < 0:
            raise ValueError("ledger counters are monotone")
        setattr(self, name, getattr(self, name) + amount)

    def consume(self, n: int) -> None:
        self._bump("bits_consumed", n)

    def emit_raw(self, n: int) -> None:
        self._bump("bits_emitted_raw", n)

    def output(self, n: int) -> None:
        self._bump("bits_output_final", n)

    def discard(self, n: int) -> None:
        self._bump("bits_discarded", n)

    def merge(self, other: RandomnessLedger) -> None:
        self.consume(other.bits_consumed)
        self.emit_raw(other.bits_emitted_raw)
        self.output(other.bits_output_final)
        self.discard(other.bits_discarded)

    def as_dict(self) -> dict[str, int]:
        return {
            "bits_consumed": self.bits_consumed,
            "bits_emitted_raw": self.bits_emitted_raw,
            "bits_output_final": self.bits_output_final,
            "bits_discarded": self.bits_discarded,
        }
