"""Comparison methods: L2-regularized logistic regression, PCA, linear SFA and closed-form CCA."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .models import LogisticHead, sigmoid
from .numeric import Rng, sym_eig
from .patterns import PROB_CLAMP
from .training import TrainConfig, sgd, split_batches

__all__ = [
    "NO_PENALTY",
    "DEFAULT_C_GRID",
    "EIG_FLOOR",
    "LinearProjector",
    "LogregFit",
    "train_logreg",
    "fit_logreg_grid",
    "fit_pca",
    "fit_sfa",
    "fit_cca",
    "accuracy",
]

#: Grid entry meaning "no L2 penalty" (C = infinity).
NO_PENALTY = math.inf
DEFAULT_C_GRID = (0.001, 0.01, 0.1, 1.0, NO_PENALTY)
#: Eigenvalues below ``EIG_FLOOR * max_eigenvalue`` are dropped when whitening.
EIG_FLOOR = 1e-10


def accuracy(pred, y) -> float:
    return float(np.mean(np.asarray(pred).reshape(-1) == np.asarray(y).reshape(-1)))


def _sign_fix(rows: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(rows), axis=1)
    signs = np.sign(rows[np.arange(rows.shape[0]), idx])
    signs[signs == 0] = 1.0
    return rows * signs[:, None]


@dataclass
class LinearProjector:
    """``x -> directions @ (x - mean)``; ``directions`` is ``(k, d)``."""

    directions: np.ndarray
    mean: np.ndarray
    method: str
    whitening: Optional[np.ndarray] = None

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return (x - self.mean) @ self.directions.T


def _whitener(cov: np.ndarray, k_min: int, what: str) -> np.ndarray:
    """Rows span the non-degenerate eigenspace of ``cov`` and map it to unit variance."""
    w, v = sym_eig(cov)
    top = w[0] if len(w) else 0.0
    keep = w > EIG_FLOOR * max(top, 0.0)
    if top <= 0 or keep.sum() < k_min:
        raise ValueError(f"{what}: covariance has rank {int(keep.sum())} after flooring, need at least {k_min}")
    return (v[:, keep] / np.sqrt(w[keep])).T


def fit_pca(x, k: int) -> LinearProjector:
    """Top-``k`` principal directions of mean-centered ``x`` (orthonormal rows)."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least 2 samples")
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    mean = x.mean(axis=0)
    xc = x - mean
    _, v = sym_eig(xc.T @ xc / (n - 1))
    return LinearProjector(v[:, :k].T.copy(), mean, "pca")


def fit_sfa(x, k: int) -> LinearProjector:
    """Linear slow feature analysis on a time-ordered sequence.

    Whitens the centered signal (PCA whitening, near-null directions dropped),
    then keeps the ``k`` whitened directions whose temporal differences have the
    smallest variance. Outputs have unit variance on the training sequence.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < 3:
        raise ValueError("SFA needs at least 3 time steps")
    if not 1 <= k <= d:
        raise ValueError(f"k must lie in [1, {d}], got {k}")
    mean = x.mean(axis=0)
    xc = x - mean
    white = _whitener(xc.T @ xc / (n - 1), k, "SFA")
    xw = xc @ white.T
    dx = np.diff(xw, axis=0)
    _, v = sym_eig(dx.T @ dx / (n - 2))
    slow = v[:, ::-1][:, :k]
    directions = _sign_fix((white.T @ slow).T)
    return LinearProjector(directions, mean, "sfa", whitening=white)


def fit_cca(x, z, k: int = 1) -> tuple[LinearProjector, LinearProjector, np.ndarray]:
    """Closed-form CCA: whiten both views, eigendecompose ``C C^T`` of the whitened cross-covariance.

    Returns the x- and z-projectors (each output has unit variance) and the
    canonical correlations in descending order.
    """
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[:, None]
    n = x.shape[0]
    if z.shape[0] != n:
        raise ValueError("views must have the same number of samples")
    if n < max(x.shape[1], z.shape[1]) + 1:
        raise ValueError(f"CCA needs more than {max(x.shape[1], z.shape[1])} samples, got {n}")
    mx, mz = x.mean(axis=0), z.mean(axis=0)
    xc, zc = x - mx, z - mz
    wx = _whitener(xc.T @ xc / (n - 1), k, "CCA x-view")
    wz = _whitener(zc.T @ zc / (n - 1), k, "CCA z-view")
    c = wx @ (xc.T @ zc / (n - 1)) @ wz.T
    lam, u = sym_eig(c @ c.T)
    rho = np.sqrt(np.clip(lam[:k], 0.0, None))
    u = u[:, :k]
    v = c.T @ u
    norms = np.linalg.norm(v, axis=0)
    v = v / np.where(norms > 0, norms, 1.0)
    a = (wx.T @ u).T
    b = (wz.T @ v).T
    # sign fix on the x side; the z side follows so that correlations stay positive
    idx = np.argmax(np.abs(a), axis=1)
    signs = np.sign(a[np.arange(k), idx])
    signs[signs == 0] = 1.0
    a = a * signs[:, None]
    b = b * signs[:, None]
    return (LinearProjector(a, mx, "cca-x", whitening=wx),
            LinearProjector(b, mz, "cca-z", whitening=wz),
            np.minimum(rho, 1.0))


@dataclass
class LogregFit:
    head: LogisticHead
    accuracies: dict = field(default_factory=dict)
    best_c: float = NO_PENALTY
    metadata: dict = field(default_factory=dict)

    def predict(self, x) -> np.ndarray:
        return (self.head.logit(x) > 0.0).astype(np.int64)


def train_logreg(x, y, c: float, config: TrainConfig, rng: Rng, bias: bool = True) -> LogisticHead:
    """Minimize ``mean cross-entropy + ||w||^2 / (2 C n)`` with the package's Nesterov SGD.

    This is ``C * sum(cross-entropy) + ||w||^2 / 2`` divided by ``C n``; the
    bias (if any) is not penalized. ``C = NO_PENALTY`` drops the penalty term.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    n, d = x.shape
    head = LogisticHead.zeros(d, bias=bias)
    penalty = 0.0 if math.isinf(c) else 1.0 / (c * n)

    def grad_at(theta, idx):
        w = theta[:d]
        t = x[idx] @ w + (theta[d] if bias else 0.0)
        p = sigmoid(t)
        inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
        g = (p - y[idx]) / len(idx) * inside
        gw = x[idx].T @ g + penalty * w
        return np.concatenate([gw, [g.sum()]]) if bias else gw

    def batches(_):
        return split_batches(rng.permutation(n), config.batch_size)

    theta = sgd(np.zeros(d + int(bias)), grad_at, batches, config.epochs, config.learning_rate, config.momentum)
    head.weight[...] = theta[:d]
    if bias:
        head.bias[...] = theta[d]
    return head


def fit_logreg_grid(train_x, train_y, test_x, test_y, grid=DEFAULT_C_GRID,
                    config: Optional[TrainConfig] = None, seed: int = 0, bias: bool = True) -> LogregFit:
    """Train one model per C and keep the one with the best *test* accuracy.

    Selecting on the test set reproduces the reference protocol and is
    optimistic; ``metadata["selection"]`` says so.
    """
    grid = tuple(grid)
    if not grid:
        raise ValueError("empty C grid")
    if len(train_x) == 0 or len(test_x) == 0:
        raise ValueError("train and test splits must be nonempty")
    config = config or TrainConfig()
    base = Rng(seed).fork("logreg")
    best = None
    accs = {}
    for c in grid:
        if not (c > 0):
            raise ValueError(f"C must be positive, got {c}")
        head = train_logreg(train_x, train_y, c, config, base.fork(repr(c)), bias=bias)
        tx = np.asarray(test_x, dtype=np.float64)
        acc = accuracy(head.logit(tx[:, None] if tx.ndim == 1 else tx) > 0.0, test_y)
        accs[c] = acc
        if best is None or acc > accs[best[0]]:
            best = (c, head)
    return LogregFit(best[1], accs, best[0], {"selection": "test-set (optimistic)"})
