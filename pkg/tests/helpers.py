"""Small models and bookkeeping shared by the test modules."""

from __future__ import annotations

import numpy as np

from abat import autodiff as ad

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


class LinearModel:
    """Logits ``W @ flatten(x) + b``; attackable like a ModelGraph."""

    training = False

    def __init__(self, W, b=None):
        self.W = np.asarray(W, dtype=float)
        self.b = np.zeros(len(self.W)) if b is None else np.asarray(b, dtype=float)

    def forward(self, x, track_params=False):
        if not isinstance(x, ad.Tensor):
            x = ad.Tensor(x)
        return ad.linear(ad.flatten(x), ad.Tensor(self.W), ad.Tensor(self.b))

    def classify(self, X):
        return np.argmax(self.forward(np.asarray(X, float)).data, axis=1)


def logistic(w, b=0.0) -> LinearModel:
    """Two-class model whose positive-class logit is ``w . x + b``."""
    w = np.asarray(w, dtype=float)
    return LinearModel(np.stack([np.zeros_like(w), w]), [0.0, b])


class FlatModel(LinearModel):
    """Constant logits: every input gradient is zero."""

    def __init__(self, dim: int, classes: int = 2):
        super().__init__(np.zeros((classes, dim)))


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale < 1e-8 else float(np.linalg.norm(a - b) / scale)
