"""Deterministic sampling and the small dense linear-algebra kernel.

Every random draw in the package goes through :class:`Rng`. Uniforms are built
directly from the raw 64-bit output of a PCG64 bit generator and normals use the
Box-Muller transform on top of them, so a seed pins the stream regardless of
platform or of changes to numpy's higher-level sampling routines.
"""

from __future__ import annotations

import math
import zlib

import numpy as np

__all__ = [
    "Rng",
    "sample_standard_normal",
    "random_rotation",
    "sym_eig",
    "EIG_MAX_DIM",
    "JACOBI_TOL",
]

_TWO_POW_53 = float(2**53)

#: Largest matrix accepted by :func:`sym_eig`.
EIG_MAX_DIM = 256
#: Cyclic Jacobi stops once the off-diagonal Frobenius norm falls below
#: ``JACOBI_TOL * ||A||_F``.
JACOBI_TOL = 1e-14


class Rng:
    """Seeded random stream that can be forked into named, independent substreams.

    ``Rng(7).fork("data")`` always yields the same stream, and drawing from the
    parent never perturbs a fork (forks are keyed by name, not by draw order).
    """

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        self._bits = np.random.PCG64(ss)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, key={self.key})"

    def fork(self, name: str) -> "Rng":
        return Rng(self.seed, self.key + (zlib.crc32(name.encode("utf-8")),))

    def uniform01(self, n: int) -> np.ndarray:
        """``n`` doubles in [0, 1) with 53 random mantissa bits each."""
        if n == 0:
            return np.empty(0)
        raw = self._bits.random_raw(n)
        return (raw >> np.uint64(11)).astype(np.float64) / _TWO_POW_53

    def uniform(self, low: float, high: float, size) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape))
        return (low + (high - low) * self.uniform01(n)).reshape(shape)

    def standard_normal(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        return sample_standard_normal(self, int(np.prod(shape))).reshape(shape)

    def permutation(self, n: int) -> np.ndarray:
        # argsort of iid uniforms is a uniform permutation (ties have probability ~2^-53)
        return np.argsort(self.uniform01(n), kind="stable")

    def integers(self, high: int, size: int) -> np.ndarray:
        """Integers uniform on ``[0, high)``."""
        return np.minimum((self.uniform01(size) * high).astype(np.int64), high - 1)


def sample_standard_normal(rng: Rng, n: int) -> np.ndarray:
    """Draw ``n`` iid N(0, 1) values with the Box-Muller transform.

    Uniforms are consumed in pairs ``(u1, u2)``; each pair yields
    ``sqrt(-2 ln(1 - u1)) * (cos(2 pi u2), sin(2 pi u2))``. An odd ``n`` discards
    the last sine value.
    """
    if n < 0:
        raise ValueError(f"n must be non-negative, got {n}")
    if n == 0:
        return np.empty(0)
    m = (n + 1) // 2
    u = rng.uniform01(2 * m).reshape(m, 2)
    radius = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
    angle = 2.0 * math.pi * u[:, 1]
    out = np.empty((m, 2))
    out[:, 0] = radius * np.cos(angle)
    out[:, 1] = radius * np.sin(angle)
    return out.reshape(-1)[:n]


def random_rotation(dim: int, rng: Rng) -> np.ndarray:
    """Haar-distributed ``dim x dim`` orthogonal matrix.

    QR-factorizes a standard-normal matrix and flips column signs so that the
    triangular factor has a positive diagonal; without the flip the result is
    not uniform over the orthogonal group.
    """
    if dim < 1:
        raise ValueError(f"dim must be at least 1, got {dim}")
    g = rng.standard_normal((dim, dim))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def _check_symmetric(a: np.ndarray, tol: float) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got shape {a.shape}")
    if a.shape[0] > EIG_MAX_DIM:
        raise ValueError(f"sym_eig supports dimension <= {EIG_MAX_DIM}, got {a.shape[0]}")
    if not np.all(np.isfinite(a)):
        raise ValueError("sym_eig got non-finite entries")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > tol:
        raise ValueError(f"matrix is not symmetric: max |A - A^T| = {asym:.3g} > {tol:g}")
    return 0.5 * (a + a.T)


def _jacobi(a: np.ndarray, tol: float, max_sweeps: int) -> tuple[np.ndarray, np.ndarray]:
    a = a.copy()
    n = a.shape[0]
    v = np.eye(n)
    scale = np.linalg.norm(a)
    if scale == 0.0:
        return np.zeros(n), v
    for _ in range(max_sweeps):
        # summing the off-diagonal squares directly; ||A||^2 - sum(diag^2) cancels badly
        off = math.sqrt(2.0 * float(np.sum(np.triu(a, 1) ** 2)))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta  # theta^2 would overflow
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise RuntimeError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    return np.diag(a).copy(), v


def sym_eig(a, method: str = "lapack", tol: float = 1e-9) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a real symmetric matrix.

    Returns ``(w, V)`` with eigenvalues ``w`` in descending order and the
    matching unit eigenvectors as the columns of ``V``. Each eigenvector is
    signed so that its largest-magnitude entry is positive.

    ``method="jacobi"`` runs cyclic Jacobi rotations until the off-diagonal norm
    drops below ``JACOBI_TOL`` relative to ``||A||_F``; ``method="lapack"`` calls
    the LAPACK divide-and-conquer driver through numpy. Both obey the same
    ordering and sign conventions.
    """
    a = _check_symmetric(a, tol)
    if method == "jacobi":
        w, v = _jacobi(a, JACOBI_TOL, max_sweeps=100)
    elif method == "lapack":
        w, v = np.linalg.eigh(a)
    else:
        raise ValueError(f"unknown eigensolver {method!r}")
    order = np.argsort(-w, kind="stable")
    w = w[order]
    v = v[:, order]
    if v.size:
        idx = np.argmax(np.abs(v), axis=0)
        signs = np.sign(v[idx, np.arange(v.shape[1])])
        signs[signs == 0] = 1.0
        v = v * signs
    return w, v
