"""Containers for epoched multi-channel trials grouped by recording domain."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np


@dataclass(frozen=True)
class Trial:
    """One epoch: a (channels, timepoints) matrix, its class and its domain."""

    data: np.ndarray
    label: int | None = None
    domain: str = ""

    def __post_init__(self):
        x = np.asarray(self.data, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ValueError(f"trial must be (channels, timepoints), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("trial contains non-finite values")
        object.__setattr__(self, "data", x)


@dataclass
class DomainDataset:
    """Ordered trials of one domain (session, block or subject).

    Stored as a (n_trials, channels, timepoints) array plus integer labels.
    """

    domain: str
    X: np.ndarray
    y: np.ndarray = field(default=None)

    def __post_init__(self):
        self.domain = str(self.domain)
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim != 3:
            raise ValueError(f"domain {self.domain}: expected (trials, channels, time), got {self.X.shape}")
        if self.y is None:
            self.y = np.full(len(self.X), -1, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.y.shape != (len(self.X),):
            raise ValueError(f"domain {self.domain}: {len(self.y)} labels for {len(self.X)} trials")

    def __len__(self) -> int:
        return len(self.X)

    @property
    def shape(self) -> tuple[int, int]:
        return self.X.shape[1], self.X.shape[2]

    @property
    def trials(self) -> Iterator[Trial]:
        for x, label in zip(self.X, self.y):
            yield Trial(x, int(label) if label >= 0 else None, self.domain)

    @classmethod
    def from_trials(cls, domain: str, trials: list[Trial]) -> "DomainDataset":
        if not trials:
            raise ValueError(f"domain {domain}: no trials")
        shapes = {t.data.shape for t in trials}
        if len(shapes) != 1:
            raise ValueError(f"domain {domain}: mixed trial shapes {sorted(shapes)}")
        labels = [-1 if t.label is None else t.label for t in trials]
        return cls(domain, np.stack([t.data for t in trials]), np.array(labels))

    def with_data(self, X: np.ndarray) -> "DomainDataset":
        return DomainDataset(self.domain, X, self.y.copy())


def pool(domains: list[DomainDataset]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate domains into one (X, y) pool, in domain order."""
    if not domains:
        raise ValueError("no domains to pool")
    return np.concatenate([d.X for d in domains]), np.concatenate([d.y for d in domains])
