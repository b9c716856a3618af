"""2D masks: the unit exchanged between segmenter, occupancy field, and
evaluator."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class EmptyMask(Exception):
    """A mask with no foreground where foreground was required."""


@dataclass
class Mask:
    """H x W soft mask in [0,1] with a binarization threshold."""

    values: np.ndarray  # (H, W)
    threshold: float = 0.5

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("mask values must be H x W")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("mask values must lie in [0,1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def binary(self) -> np.ndarray:
        return self.values >= self.threshold

    @classmethod
    def from_binary(cls, binary: np.ndarray) -> "Mask":
        return cls(values=np.asarray(binary, dtype=np.float64))


def mask_iou(a: Mask, b: Mask) -> float:
    """Intersection over union of the binarized masks; both empty -> 1."""
    if a.values.shape != b.values.shape:
        raise ValueError("mask dimensions differ")
    ba, bb = a.binary, b.binary
    union = np.count_nonzero(ba | bb)
    if union == 0:
        return 1.0
    return np.count_nonzero(ba & bb) / union
