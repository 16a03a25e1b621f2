"""Symmetric-matrix kernels: spatial covariance, Jacobi eigensolver, inverse square root."""

from __future__ import annotations

from typing import Iterable

import numpy as np

DEFAULT_FLOOR = 1e-8


class ConvergenceError(RuntimeError):
    """The Jacobi iteration hit its sweep cap before the off-diagonal vanished."""


def symmetrize(m: np.ndarray) -> np.ndarray:
    """Copy the upper triangle onto the lower one, giving exact symmetry."""
    upper = np.triu(m)
    return upper + np.triu(m, 1).T


def spatial_covariance(trial: np.ndarray) -> np.ndarray:
    """``X @ X.T`` for a (channels, timepoints) trial, exactly symmetric."""
    x = np.asarray(trial, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ValueError(f"expected a (channels, timepoints) trial, got shape {x.shape}")
    return symmetrize(x @ x.T)


def mean_covariance(trials: Iterable[np.ndarray]) -> np.ndarray:
    """Arithmetic mean of per-trial spatial covariances, summed in index order."""
    acc = None
    n = 0
    for x in trials:
        cov = spatial_covariance(x)
        if acc is None:
            acc = cov.copy()
        elif cov.shape != acc.shape:
            raise ValueError(f"trial {n} has {cov.shape[0]} channels, expected {acc.shape[0]}")
        else:
            acc += cov
        n += 1
    if acc is None:
        raise ValueError("mean_covariance of an empty trial list")
    return acc / n


def sym_eig(m: np.ndarray, tol: float = 1e-15, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns eigenvalues in non-increasing order and the matching orthonormal
    eigenvectors as columns. Sweeps stop once the off-diagonal Frobenius norm
    drops below ``tol`` times the matrix norm.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got {a.shape}")
    if not np.allclose(a, a.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(a).max())):
        raise ValueError("sym_eig needs a symmetric matrix")
    a = symmetrize(a)
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v

    def off_norm() -> float:
        # direct sum: subtracting the diagonal from the full norm cancels badly
        return float(np.linalg.norm(a - np.diag(np.diag(a))))

    for _ in range(max_sweeps):
        if off_norm() <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        residual = off_norm()
        if residual > tol * scale:
            raise ConvergenceError(f"Jacobi did not converge: off-diagonal norm {residual:.3e}")

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


def inv_sqrt(m: np.ndarray, floor: float | None = None) -> np.ndarray:
    """Inverse principal square root with eigenvalues clamped from below.

    ``floor`` defaults to ``1e-8 * max(lambda_max, 1)``; eigenvalues under it
    are raised to it, so rank-deficient inputs still produce a finite result.
    """
    vals, vecs = sym_eig(m)
    if floor is None:
        floor = DEFAULT_FLOOR * max(float(vals[0]) if vals.size else 0.0, 1.0)
    if floor <= 0:
        raise ValueError("floor must be positive")
    d = np.maximum(vals, floor) ** -0.5
    return symmetrize((vecs * d) @ vecs.T)
