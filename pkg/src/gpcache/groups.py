"""Random class partitions for the group-wise GP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GroupPartition:
    num_classes: int
    groups: tuple[tuple[int, ...], ...]
    seed: int | None = None

    def __post_init__(self):
        flat = [c for g in self.groups for c in g]
        if sorted(flat) != list(range(self.num_classes)):
            raise ValueError("groups must be a disjoint cover of all classes")
        if any(len(g) == 0 for g in self.groups):
            raise ValueError("empty group")

    @property
    def g(self) -> int:
        return len(self.groups)

    @property
    def class_order(self) -> np.ndarray:
        """Classes in concatenated group order."""
        return np.array([c for g in self.groups for c in g], dtype=np.int64)

    @classmethod
    def single(cls, num_classes: int) -> "GroupPartition":
        return cls(num_classes, (tuple(range(num_classes)),))


def make_partition(c: int, g: int, seed: int = 0) -> GroupPartition:
    """Shuffle the classes and deal them into ``g`` groups of near-equal size."""
    if not 1 <= g <= c:
        raise ValueError(f"need 1 <= g <= c, got g={g}, c={c}")
    perm = np.random.default_rng(seed).permutation(c)
    groups = tuple(tuple(sorted(int(x) for x in part)) for part in np.array_split(perm, g))
    return GroupPartition(c, groups, seed)
