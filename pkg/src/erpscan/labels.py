"""Five-factor participant labels and their 12-slot multi-one-hot encoding."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

FACTORS = ("age", "gender", "site", "depression", "axis1")
BLOCKS = (2, 2, 4, 2, 2)
CLASS_NAMES = {
    "age": ("child", "adult"),
    "gender": ("M", "F"),
    "site": ("1", "2", "3", "4"),
    "depression": ("0", "1"),
    "axis1": ("0", "1"),
}
N_SLOTS = sum(BLOCKS)


class LabelError(ValueError):
    pass


def block_slices() -> dict[str, slice]:
    out, lo = {}, 0
    for name, width in zip(FACTORS, BLOCKS):
        out[name] = slice(lo, lo + width)
        lo += width
    return out


@dataclass(frozen=True)
class LabelVector:
    """Class index per factor; ``None`` marks an unset block (partial symbol)."""

    age: Optional[int] = None
    gender: Optional[int] = None
    site: Optional[int] = None
    depression: Optional[int] = None
    axis1: Optional[int] = None

    def __post_init__(self):
        for f, width in zip(fields(self), BLOCKS):
            v = getattr(self, f.name)
            if v is not None and not 0 <= v < width:
                raise LabelError(f"{f.name}={v} outside 0..{width - 1}")

    def as_tuple(self) -> tuple:
        return tuple(getattr(self, f) for f in FACTORS)

    @property
    def is_full(self) -> bool:
        return all(v is not None for v in self.as_tuple())

    @property
    def is_empty(self) -> bool:
        return all(v is None for v in self.as_tuple())

    def encode(self) -> np.ndarray:
        out = np.zeros(N_SLOTS)
        for (name, sl), v in zip(block_slices().items(), self.as_tuple()):
            if v is not None:
                out[sl.start + v] = 1.0
        return out

    @classmethod
    def decode(cls, vec) -> "LabelVector":
        vec = np.asarray(vec)
        if vec.shape != (N_SLOTS,):
            raise LabelError(f"label encoding must have {N_SLOTS} slots, got shape {vec.shape}")
        values = {}
        for name, sl in block_slices().items():
            block = vec[sl]
            hot = np.flatnonzero(block)
            if len(hot) > 1 or np.any((block != 0) & (block != 1)):
                raise LabelError(f"block {name} is not one-hot: {block}")
            values[name] = int(hot[0]) if len(hot) else None
        return cls(**values)

    @classmethod
    def single(cls, factor: str, value: int) -> "LabelVector":
        if factor not in FACTORS:
            raise LabelError(f"unknown factor {factor!r}")
        return cls(**{factor: value})
