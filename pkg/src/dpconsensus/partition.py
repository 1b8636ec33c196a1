"""Class-allocation matrices and label-skewed dataset splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng as rngmod
from .errors import EmptyClassError
from .objectives import LabeledDataset


@dataclass(frozen=True)
class SplitMatrix:
    """``entries[i, j]`` is the fraction of class ``j`` held by agent ``i``."""

    t: float
    entries: np.ndarray

    @property
    def n_agents(self) -> int:
        return self.entries.shape[0]

    @property
    def n_classes(self) -> int:
        return self.entries.shape[1]


def build_split_matrix(t: float, n_agents: int, n_classes: int) -> SplitMatrix:
    """Off-owner agents get ``(1 - t) / N`` of each class, the owner the rest.

    The owner of class ``j`` is agent ``j mod N``. ``t = 0`` spreads every
    class evenly and ``t = 1`` gives each owner its classes exclusively.
    """
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    if n_agents < 1 or n_classes < 1:
        raise ValueError("need at least one agent and one class")
    a = np.full((n_agents, n_classes), (1.0 - t) / n_agents)
    for j in range(n_classes):
        owner = j % n_agents
        a[owner, j] = 1.0 - (np.sum(a[:, j]) - a[owner, j])
    a.setflags(write=False)
    return SplitMatrix(float(t), a)


def allocate_counts(fractions: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder rounding of ``fractions * total`` to integers summing to ``total``."""
    raw = np.asarray(fractions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        # stable sort keeps ties in agent order
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def partition_indices(labels: np.ndarray, split: SplitMatrix, seed: int) -> list[np.ndarray]:
    labels = np.asarray(labels)
    per_agent: list[list[np.ndarray]] = [[] for _ in range(split.n_agents)]
    for j in range(split.n_classes):
        members = np.flatnonzero(labels == j)
        if len(members) == 0:
            raise EmptyClassError(f"class {j} has no samples")
        members = rngmod.substream(seed, rngmod.PARTITION, j).permutation(members)
        counts = allocate_counts(split.entries[:, j], len(members))
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(split.n_agents):
            per_agent[i].append(members[bounds[i]: bounds[i + 1]])
    return [np.sort(np.concatenate(parts)) for parts in per_agent]


def partition(data: LabeledDataset, split: SplitMatrix, seed: int) -> list[LabeledDataset]:
    """Disjoint per-agent datasets following ``split``.

    Each class is shuffled under ``seed`` and cut into contiguous runs whose
    lengths are the largest-remainder rounding of the class column.

    Raises:
        EmptyClassError: if a class of the split has no samples.
    """
    if data.num_classes > split.n_classes:
        raise ValueError(
            f"data has {data.num_classes} classes, split covers {split.n_classes}"
        )
    return [data.subset(idx) for idx in partition_indices(data.labels, split, seed)]


def partition_counts(parts: list[LabeledDataset], n_classes: int) -> list[list[int]]:
    return [np.bincount(p.labels, minlength=n_classes).tolist() for p in parts]
