"""Dilation structures and the sparse exponential dilation space.

A structure is the ordered list of per-layer dilation rates of a multi-stage
TCN, grouped by stage.  Its text form is ``1,2,4|8,16`` (comma between
layers, pipe between stages), which is what logs, configs and checkpoints
carry.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, StructureParseError

# dilations feed float arithmetic in the local window, keep them exact there
MAX_EXACT_INT = 2**53


@dataclass(frozen=True)
class DilationStructure:
    """Per-stage, per-layer dilation rates.  Immutable and hashable."""

    stages: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        stages = tuple(tuple(stage) for stage in self.stages)
        if not stages:
            raise ConfigError("a structure needs at least one stage")
        for stage in stages:
            if not stage:
                raise ConfigError("every stage needs at least one layer")
            for d in stage:
                if isinstance(d, (bool, np.bool_)) or not isinstance(d, (int, np.integer)):
                    raise ConfigError(f"dilation {d!r} is not an integer")
                if d < 1:
                    raise ConfigError(f"dilation {d} is below 1")
        object.__setattr__(self, "stages", tuple(tuple(int(d) for d in s) for s in stages))

    @classmethod
    def from_flat(cls, values: Iterable[int], shape: Sequence[int]) -> DilationStructure:
        values = [int(v) for v in values]
        if sum(shape) != len(values):
            raise ConfigError(f"{len(values)} dilations do not fit shape {list(shape)}")
        stages, pos = [], 0
        for n in shape:
            stages.append(tuple(values[pos:pos + n]))
            pos += n
        return cls(tuple(stages))

    @classmethod
    def exponential(cls, num_stages: int = 4, num_layers: int = 10, base: int = 2) -> DilationStructure:
        """Hand-designed MS-TCN pattern: every stage uses 1, 2, 4, ..."""
        return cls(tuple(tuple(base**i for i in range(num_layers)) for _ in range(num_stages)))

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(len(s) for s in self.stages)

    @property
    def flat(self) -> tuple[int, ...]:
        return tuple(d for s in self.stages for d in s)

    @property
    def num_layers(self) -> int:
        return sum(self.shape)

    def replace_flat(self, index: int, value: int) -> DilationStructure:
        values = list(self.flat)
        values[index] = value
        return DilationStructure.from_flat(values, self.shape)

    def __str__(self):
        return encode_structure(self)


@dataclass(frozen=True)
class GlobalSearchSpace:
    """Sparse dilation set ``{k**0, ..., k**T}``."""

    k: int
    T: int

    def __post_init__(self):
        if self.k < 2:
            raise ConfigError(f"sparsity base k must be >= 2, got {self.k}")
        if self.T < 0:
            raise ConfigError(f"max exponent T must be >= 0, got {self.T}")
        if self.k**self.T > MAX_EXACT_INT:
            raise OverflowError(f"{self.k}**{self.T} exceeds the exact integer range 2**53")

    @property
    def dilations(self) -> tuple[int, ...]:
        return tuple(self.k**i for i in range(self.T + 1))

    def __len__(self):
        return self.T + 1


def build_global_space(k: int, T: int) -> GlobalSearchSpace:
    return GlobalSearchSpace(int(k), int(T))


def random_structure(space: GlobalSearchSpace, shape: Sequence[int],
                     rng: np.random.Generator) -> DilationStructure:
    """Draw every layer's dilation uniformly from ``space``."""
    shape = list(shape)
    if not shape or any(n < 1 for n in shape):
        raise ConfigError(f"invalid structure shape {shape}")
    choices = np.asarray(space.dilations, dtype=np.int64)
    idx = rng.integers(0, len(choices), size=sum(shape))
    return DilationStructure.from_flat(choices[idx].tolist(), shape)


def encode_structure(s: DilationStructure) -> str:
    return "|".join(",".join(str(d) for d in stage) for stage in s.stages)


_TOKEN = re.compile(r"[^,|]*")


def decode_structure(text: str) -> DilationStructure:
    """Parse ``stage ("|" stage)*`` where ``stage := int ("," int)*``."""
    if not isinstance(text, str):
        raise StructureParseError("structure text must be a string", text, 0)
    stages: list[list[int]] = [[]]
    pos = 0
    while True:
        tok = _TOKEN.match(text, pos).group()
        if tok == "":
            what = "empty stage" if not stages[-1] else "empty layer"
            raise StructureParseError(what, tok, pos)
        if not tok.isascii() or not tok.isdigit():
            raise StructureParseError("expected a positive integer", tok, pos)
        value = int(tok)
        if value < 1:
            raise StructureParseError("dilation must be >= 1", tok, pos)
        stages[-1].append(value)
        pos += len(tok)
        if pos == len(text):
            break
        if text[pos] == "|":
            stages.append([])
        pos += 1
    return DilationStructure(tuple(tuple(s) for s in stages))
