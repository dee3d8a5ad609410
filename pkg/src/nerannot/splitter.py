"""Sample-space / target partition of the training split and random context draws.

All randomness goes through :class:`SplitMix64` so that a seed gives the same
ids on every platform and Python version. The generator and the sampling
procedure below are part of the output contract: changing either changes
every split ever produced, so bump ``RNG_ALGORITHM`` if you touch them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

from .errors import ConfigError

RNG_ALGORITHM = "splitmix64/fisher-yates-v1"

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """Steele, Lea & Flood's SplitMix64: a 64-bit counter advanced by a fixed
    odd increment, passed through a two-round xor-shift-multiply finalizer."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + _GAMMA) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n


def derive_seed(seed: int, stream: int) -> int:
    """Independent-looking seed for sub-stream ``stream`` of ``seed``."""
    rng = SplitMix64(seed ^ ((stream * _GAMMA) & _MASK64))
    return rng.next_u64()


def sample_without_replacement(items: Sequence, k: int, seed: int) -> list:
    """First ``k`` positions of a Fisher-Yates shuffle driven by SplitMix64."""
    pool = list(items)
    if not 0 <= k <= len(pool):
        raise ValueError(f"cannot draw {k} items from {len(pool)}")
    rng = SplitMix64(seed)
    n = len(pool)
    for i in range(k):
        j = i + rng.below(n - i)
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:k]


@dataclass(frozen=True)
class SplitSpec:
    fraction: float
    seed: int = 42

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ConfigError(f"fraction must lie in (0, 1), got {self.fraction}")


@dataclass(frozen=True)
class SplitResult:
    fraction: float
    seed: int
    sample_space: tuple[int, ...]
    targets: tuple[int, ...]

    def to_dict(self) -> dict:
        return {
            "fraction": self.fraction,
            "seed": self.seed,
            "rng": RNG_ALGORITHM,
            "sample_space": list(self.sample_space),
            "targets": list(self.targets),
        }

    def save(self, path: str | Path) -> None:
        from .io import atomic_write_text

        atomic_write_text(path, json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SplitResult":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            fraction=d["fraction"],
            seed=d["seed"],
            sample_space=tuple(d["sample_space"]),
            targets=tuple(d["targets"]),
        )


@dataclass(frozen=True)
class ContextSet:
    example_ids: tuple[int, ...]
    selection: str  # "random" or "retrieved"


def sample_space_size(train_size: int, fraction: float) -> int:
    # half-up, computed in decimal so 0.5-boundaries are not at the mercy of binary floats
    return int((Decimal(str(fraction)) * train_size).to_integral_value(ROUND_HALF_UP))


def split_sample_space(train_size: int, spec: SplitSpec) -> SplitResult:
    """Partition ids ``0..train_size-1`` into a sample space and annotation targets.

    Both id lists are returned in ascending order.
    """
    if train_size < 2:
        raise ConfigError(f"need at least 2 training sentences, got {train_size}")
    x = sample_space_size(train_size, spec.fraction)
    if x < 1 or x >= train_size:
        raise ConfigError(
            f"fraction {spec.fraction} of {train_size} sentences leaves an empty "
            f"{'sample space' if x < 1 else 'target set'}"
        )
    chosen = sample_without_replacement(range(train_size), x, spec.seed)
    in_x = set(chosen)
    return SplitResult(
        fraction=spec.fraction,
        seed=spec.seed,
        sample_space=tuple(sorted(chosen)),
        targets=tuple(i for i in range(train_size) if i not in in_x),
    )


def sample_random_context(split: SplitResult, m: int, seed: int) -> ContextSet:
    x = len(split.sample_space)
    if m > x:
        raise ConfigError(f"context size m={m} exceeds sample space size x={x}")
    if m < 1:
        raise ConfigError(f"context size must be positive, got {m}")
    ids = sample_without_replacement(split.sample_space, m, seed)
    return ContextSet(example_ids=tuple(ids), selection="random")
