"""Euclidean alignment of trials, batch and streaming.

Batch alignment whitens a whole domain by the inverse square root of its
mean spatial covariance. The streaming variant keeps a running mean that is
updated one trial at a time, so each trial is aligned using only the trials
that arrived before it (and itself).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .symlinalg import inv_sqrt, mean_covariance, spatial_covariance
from .trials import DomainDataset


class AlignmentError(ValueError):
    pass


def _as_stack(trials) -> np.ndarray:
    if isinstance(trials, DomainDataset):
        return trials.X
    if isinstance(trials, np.ndarray):
        x = np.asarray(trials, dtype=np.float64)
    else:
        shapes = {np.shape(getattr(t, "data", t))[0] for t in trials}
        if len(shapes) > 1:
            raise AlignmentError(f"mixed channel counts {sorted(shapes)}")
        x = np.stack([np.asarray(getattr(t, "data", t), dtype=np.float64) for t in trials]) if trials else np.empty((0, 1, 1))
    if x.ndim != 3:
        raise AlignmentError(f"expected (trials, channels, time), got {x.shape}")
    if len(x) == 0:
        raise AlignmentError("cannot align an empty domain")
    return x


def reference_matrix(trials) -> np.ndarray:
    """Inverse square root of the domain's mean spatial covariance."""
    return inv_sqrt(mean_covariance(_as_stack(trials)))


def align_domain(trials) -> np.ndarray:
    """Whiten one domain: every trial is left-multiplied by ``R^{-1/2}``.

    Accepts a (trials, channels, time) array, a list of 2-d arrays or
    :class:`~abat.trials.Trial` objects, or a DomainDataset. Returns the
    aligned (trials, channels, time) array.
    """
    x = _as_stack(trials)
    ref = reference_matrix(x)
    return np.matmul(ref, x)


def align_corpus(domains: list[DomainDataset]) -> list[DomainDataset]:
    """Align each domain independently with its own reference matrix."""
    out = []
    for d in domains:
        try:
            out.append(d.with_data(align_domain(d.X)))
        except (AlignmentError, ValueError) as exc:
            raise AlignmentError(f"domain {d.domain}: {exc}") from exc
    return out


@dataclass
class AlignmentState:
    """Running mean spatial covariance of the trials seen so far in one domain."""

    n: int = 0
    mean_cov: np.ndarray | None = None
    _ref: np.ndarray | None = field(default=None, repr=False)

    @property
    def reference(self) -> np.ndarray:
        if self.mean_cov is None:
            raise AlignmentError("alignment state has seen no trials")
        if self._ref is None:
            self._ref = inv_sqrt(self.mean_cov)
        return self._ref

    def update(self, trial) -> np.ndarray:
        """Fold one trial into the running mean and return it aligned (in place)."""
        x = np.asarray(getattr(trial, "data", trial), dtype=np.float64)
        cov = spatial_covariance(x)
        if self.mean_cov is None:
            self.mean_cov = cov
        else:
            if cov.shape != self.mean_cov.shape:
                raise AlignmentError(f"trial has {x.shape[0]} channels, state has {self.mean_cov.shape[0]}")
            self.mean_cov = (self.n * self.mean_cov + cov) / (self.n + 1)
        self.n += 1
        self._ref = None
        return self.reference @ x


def incremental_update(state: AlignmentState, trial) -> tuple[AlignmentState, np.ndarray]:
    """Functional form of :meth:`AlignmentState.update`; ``state`` is left untouched."""
    new = replace(state, mean_cov=None if state.mean_cov is None else state.mean_cov.copy(), _ref=None)
    aligned = new.update(trial)
    return new, aligned


def align_stream(trials) -> np.ndarray:
    """Align a session trial by trial with a fresh state (causal)."""
    x = _as_stack(trials)
    state = AlignmentState()
    return np.stack([state.update(t) for t in x])
