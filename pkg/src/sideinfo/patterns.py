"""Main and side objectives.

Every loss returns ``(value, grads)`` where ``grads`` maps a role name
(``"phi"``, ``"psi"``, ``"beta"``) to that map's parameter gradients. All sums
are normalized to means over samples (or pairs), so objective weights are
comparable across batch sizes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .models import LinearMap, LogisticHead, MlpStack, sigmoid

__all__ = [
    "PATTERN_KINDS",
    "SIGMA_KINDS",
    "Sigma",
    "PatternSpec",
    "PairIndex",
    "NoMatchingPairsWarning",
    "add_grads",
    "scale_grads",
    "loss_supervised",
    "loss_direct",
    "loss_multitask",
    "loss_multiview_corr",
    "loss_multiview_pred",
    "loss_pairwise",
    "loss_transform_fixed",
    "loss_transform_pairs",
    "irrelevance_penalty",
]

PATTERN_KINDS = (
    "direct",
    "multi-task",
    "multi-view-corr",
    "multi-view-pred",
    "pairwise-sim",
    "pairwise-transform",
    "irrelevance",
)
SIGMA_KINDS = ("margin", "exp-neg-dist", "gaussian")
PROB_CLAMP = 1e-12


class NoMatchingPairsWarning(UserWarning):
    """A discrete transformation batch had no two transitions with equal side information."""


@dataclass(frozen=True)
class Sigma:
    """Proximity function on a distance ``d``.

    ``margin``: max(0, m - d^2); ``exp-neg-dist``: exp(-d); ``gaussian``: exp(-d^2).
    """

    kind: str = "margin"
    margin: float = 1.0

    def __post_init__(self):
        if self.kind not in SIGMA_KINDS:
            raise ValueError(f"unknown sigma {self.kind!r}; expected one of {SIGMA_KINDS}")
        if not (math.isfinite(self.margin) and self.margin > 0):
            raise ValueError(f"margin must be finite and positive, got {self.margin}")

    def __call__(self, d):
        d = np.asarray(d, dtype=np.float64)
        if self.kind == "margin":
            return np.maximum(0.0, self.margin - d * d)
        if self.kind == "exp-neg-dist":
            return np.exp(-d)
        return np.exp(-d * d)

    def value_and_grad(self, delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """sigma(||delta_r||) per row and its gradient with respect to each row of ``delta``."""
        d2 = np.sum(delta * delta, axis=1)
        if self.kind == "margin":
            active = (self.margin - d2) > 0.0
            return np.where(active, self.margin - d2, 0.0), -2.0 * delta * active[:, None]
        if self.kind == "gaussian":
            v = np.exp(-d2)
            return v, -2.0 * delta * v[:, None]
        d = np.sqrt(d2)
        v = np.exp(-d)
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(d > 0.0, -v / d, 0.0)
        return v, delta * coef[:, None]


@dataclass(frozen=True)
class PatternSpec:
    """Which side objective to use and how to weight it against the main objective.

    ``gamma`` scales the unit-variance penalty of ``multi-view-corr``.
    ``transform`` selects the pairwise-transform variant: ``"fixed"`` regresses
    the representation change onto z, ``"pairs"`` compares changes of pairs of
    transitions (by equality of z, or weighted by ``sigma`` when ``continuous``).
    """

    kind: str
    sigma: Sigma = field(default_factory=Sigma)
    w_main: float = 0.5
    w_side: float = 0.5
    gamma: float = 1.0
    transform: str = "fixed"
    continuous: bool = False

    def __post_init__(self):
        if self.kind not in PATTERN_KINDS:
            raise ValueError(f"unknown pattern {self.kind!r}; expected one of {PATTERN_KINDS}")
        if self.w_main < 0 or self.w_side < 0 or abs(self.w_main + self.w_side - 1.0) > 1e-12:
            raise ValueError(f"objective weights must be nonnegative and sum to 1, got ({self.w_main}, {self.w_side})")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.transform not in ("fixed", "pairs"):
            raise ValueError(f"unknown transform variant {self.transform!r}")

    @property
    def has_beta(self) -> bool:
        return self.kind in ("multi-task", "multi-view-corr", "multi-view-pred", "irrelevance")


@dataclass(frozen=True)
class PairIndex:
    """Explicit pair list: ``(i[k], j[k])`` is similar when ``similar[k]`` is true."""

    i: np.ndarray
    j: np.ndarray
    similar: np.ndarray

    @classmethod
    def from_lists(cls, pairs, similar) -> "PairIndex":
        arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), np.asarray(similar, dtype=bool).reshape(-1))

    def __len__(self) -> int:
        return len(self.i)

    def subset(self, idx) -> "PairIndex":
        return PairIndex(self.i[idx], self.j[idx], self.similar[idx])

    def validate(self, n: int) -> None:
        if not (len(self.i) == len(self.j) == len(self.similar)):
            raise ValueError("pair arrays have different lengths")
        if len(self.i) == 0:
            raise ValueError("no pairs given")
        for name, idx in (("i", self.i), ("j", self.j)):
            bad = (idx < 0) | (idx >= n)
            if np.any(bad):
                raise IndexError(f"pair index {name}={int(idx[bad][0])} out of range for batch of {n}")
        if np.any(self.i == self.j):
            raise ValueError("a pair must join two different samples")


def add_grads(a: dict, b: dict, scale: float = 1.0) -> dict:
    """``a + scale * b`` over role-keyed gradient dicts (new dict, inputs untouched)."""
    out = {role: {k: v.copy() for k, v in g.items()} for role, g in a.items()}
    for role, g in b.items():
        tgt = out.setdefault(role, {})
        for k, v in g.items():
            tgt[k] = tgt[k] + scale * v if k in tgt else scale * v
    return out


def scale_grads(a: dict, scale: float) -> dict:
    return {role: {k: scale * v for k, v in g.items()} for role, g in a.items()}


def _targets(z, n: int, dim: int, what: str) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim == 1:
        z = z[None, :] if n == 1 and dim != 1 else z[:, None]
    if z.shape != (n, dim):
        raise ValueError(f"{what}: side information has shape {z.shape}, expected ({n}, {dim})")
    return z


def _bce(head: LogisticHead, enc, enc_role: str, inputs, y) -> tuple[float, dict]:
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None] if enc.in_dim == 1 else inputs[None, :]
    if inputs.shape[0] == 0:
        raise ValueError("empty batch")
    if y is None:
        raise ValueError("labels are required")
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if y.shape[0] != inputs.shape[0]:
        raise ValueError(f"{y.shape[0]} labels for a batch of {inputs.shape[0]}")
    if np.any((y != 0.0) & (y != 1.0)):
        raise ValueError("labels must be 0 or 1")
    b = inputs.shape[0]
    s = enc.forward(inputs)
    p = sigmoid(head.logit(s))
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    value = -np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    g_logit = (p - y) / b * inside
    g_head, g_s = head.backward_logit(s, g_logit)
    g_enc, _ = enc.backward(inputs, g_s)
    return float(value), {"psi": g_head, enc_role: g_enc}


def loss_supervised(psi: LogisticHead, phi, x, y) -> tuple[float, dict]:
    """Mean binary cross-entropy of ``psi(phi(x))`` against ``y``; probabilities clamped to [1e-12, 1 - 1e-12]."""
    return _bce(psi, phi, "phi", x, y)


def loss_direct(phi, x, z) -> tuple[float, dict]:
    """Mean over the batch of ||phi(x_i) - z_i||^2."""
    s = phi.forward(x)
    z = _targets(z, s.shape[0], s.shape[1], "direct")
    diff = s - z
    b = s.shape[0]
    g, _ = phi.backward(x, 2.0 * diff / b)
    return float(np.sum(diff * diff) / b), {"phi": g}


def loss_multitask(beta, phi, x, z) -> tuple[float, dict]:
    """Mean of ||beta(phi(x_i)) - z_i||^2; gradients reach both beta and phi."""
    s = phi.forward(x)
    zh = beta.forward(s)
    z = _targets(z, zh.shape[0], zh.shape[1], "multi-task")
    diff = zh - z
    b = s.shape[0]
    g_beta, g_s = beta.backward(s, 2.0 * diff / b)
    g_phi, _ = phi.backward(x, g_s)
    return float(np.sum(diff * diff) / b), {"phi": g_phi, "beta": g_beta}


def _variance_penalty(s: np.ndarray, gamma: float) -> tuple[float, np.ndarray]:
    b = s.shape[0]
    centered = s - s.mean(axis=0)
    var = np.sum(centered * centered, axis=0) / (b - 1)
    excess = var - 1.0
    value = gamma * float(np.sum(excess * excess))
    grad = gamma * 2.0 * excess * 2.0 * centered / (b - 1)
    return value, grad


def loss_multiview_corr(beta, phi, x, z, gamma: float = 0.0) -> tuple[float, dict]:
    """Mean of ||phi(x_i) - beta(z_i)||^2 plus ``gamma * sum_k (Var(s_k) - 1)^2`` on both views.

    The variance term (unbiased batch variance) blocks the collapsed solution
    phi = beta = 0 when the objective is optimized on its own.
    """
    s = phi.forward(x)
    zz = np.asarray(z, dtype=np.float64)
    if zz.ndim == 1:
        zz = zz[:, None] if beta.in_dim == 1 else zz[None, :]
    sp = beta.forward(zz)
    if sp.shape != s.shape:
        raise ValueError(f"multi-view-corr: phi gives {s.shape}, beta gives {sp.shape}")
    b = s.shape[0]
    if gamma > 0 and b < 2:
        raise ValueError("variance penalty needs a batch of at least 2")
    diff = s - sp
    value = float(np.sum(diff * diff) / b)
    g_s = 2.0 * diff / b
    g_sp = -2.0 * diff / b
    if gamma > 0:
        v1, g1 = _variance_penalty(s, gamma)
        v2, g2 = _variance_penalty(sp, gamma)
        value += v1 + v2
        g_s = g_s + g1
        g_sp = g_sp + g2
    g_phi, _ = phi.backward(x, g_s)
    g_beta, _ = beta.backward(zz, g_sp)
    return value, {"phi": g_phi, "beta": g_beta}


def loss_multiview_pred(psi: LogisticHead, beta, z, y) -> tuple[float, dict]:
    """Cross-entropy of ``psi(beta(z))`` against ``y``, sharing psi with the main objective."""
    return _bce(psi, beta, "beta", z, y)


def loss_pairwise(phi, x, pairs: PairIndex, sigma: Sigma) -> tuple[float, dict]:
    """Similar pairs cost ||s_i - s_j||^2, dissimilar pairs cost sigma(||s_i - s_j||); mean over pairs."""
    x = np.asarray(x, dtype=np.float64)
    pairs.validate(x.shape[0])
    stacked = np.concatenate([x[pairs.i], x[pairs.j]], axis=0)
    s = phi.forward(stacked)
    n = len(pairs)
    delta = s[:n] - s[n:]
    sim = pairs.similar
    per_pair = np.sum(delta * delta, axis=1)
    g_delta = 2.0 * delta
    if not np.all(sim):
        dis = ~sim
        v, g = sigma.value_and_grad(delta[dis])
        per_pair[dis] = v
        g_delta[dis] = g
    g_delta = g_delta / n
    grads, _ = phi.backward(stacked, np.concatenate([g_delta, -g_delta], axis=0))
    return float(per_pair.sum() / n), {"phi": grads}


def _transitions(phi, x_t, x_next):
    x_t = np.asarray(x_t, dtype=np.float64)
    x_next = np.asarray(x_next, dtype=np.float64)
    if x_t.shape != x_next.shape:
        raise ValueError(f"misaligned transitions: {x_t.shape} vs {x_next.shape}")
    return x_t, x_next, phi.forward(x_t), phi.forward(x_next)


def loss_transform_fixed(phi, x_t, x_next, z, beta=None) -> tuple[float, dict]:
    """Mean of ||(phi(x_next) - phi(x_t)) - z||^2; z is the forward change s_{t+1} - s_t.

    With a ``beta`` map the change is instead predicted as ``beta([s_t, s_next])``.
    """
    x_t, x_next, s0, s1 = _transitions(phi, x_t, x_next)
    b = s0.shape[0]
    if beta is None:
        pred = s1 - s0
    else:
        pair = np.concatenate([s0, s1], axis=1)
        pred = beta.forward(pair)
    z = _targets(z, b, pred.shape[1], "pairwise-transform")
    diff = pred - z
    g_pred = 2.0 * diff / b
    grads = {}
    if beta is None:
        g0, g1 = -g_pred, g_pred
    else:
        grads["beta"], g_pair = beta.backward(pair, g_pred)
        k = s0.shape[1]
        g0, g1 = g_pair[:, :k], g_pair[:, k:]
    g_phi, _ = phi.backward(np.concatenate([x_t, x_next]), np.concatenate([g0, g1]))
    grads["phi"] = g_phi
    return float(np.sum(diff * diff) / b), grads


def loss_transform_pairs(phi, x_t, x_next, z, sigma: Optional[Sigma] = None,
                         continuous: bool = False) -> tuple[float, dict]:
    """Penalize different representation changes for transitions with the same z.

    Discrete mode averages ||D_i - D_j||^2 over pairs with z_i == z_j, where
    D_i = phi(x_{i+1}) - phi(x_i). Continuous mode averages over all pairs,
    weighting each by ``sigma(||z_i - z_j||)`` (Gaussian by default). A discrete
    batch without matching pairs returns 0 and emits ``NoMatchingPairsWarning``.
    """
    x_t, x_next, s0, s1 = _transitions(phi, x_t, x_next)
    b = s0.shape[0]
    if b < 2:
        raise ValueError("need at least 2 transitions")
    z = np.asarray(z, dtype=np.float64).reshape(b, -1)
    delta = s1 - s0
    ii, jj = np.triu_indices(b, 1)
    if continuous:
        sig = sigma if sigma is not None else Sigma("gaussian")
        dz = np.sqrt(np.sum((z[ii] - z[jj]) ** 2, axis=1))
        w = sig(dz)
        count = len(ii)
    else:
        w = np.all(z[ii] == z[jj], axis=1).astype(np.float64)
        count = int(w.sum())
        if count == 0:
            warnings.warn("no transitions with equal side information in batch", NoMatchingPairsWarning)
            zero, _ = phi.backward(x_t, np.zeros_like(s0))
            return 0.0, {"phi": {k: np.zeros_like(v) for k, v in zero.items()}}
    dd = delta[ii] - delta[jj]
    value = float(np.sum(w * np.sum(dd * dd, axis=1)) / count)
    g_pair = 2.0 * w[:, None] * dd / count
    g_delta = np.zeros_like(delta)
    np.add.at(g_delta, ii, g_pair)
    np.add.at(g_delta, jj, -g_pair)
    g_phi, _ = phi.backward(np.concatenate([x_t, x_next]), np.concatenate([-g_delta, g_delta]))
    return value, {"phi": g_phi}


def _linear_rows(m, role: str) -> np.ndarray:
    if isinstance(m, MlpStack):
        raise TypeError(f"irrelevance penalty is defined for linear {role} only; got a nonlinear stack")
    if isinstance(m, LogisticHead):
        return m.weight[None, :]
    if isinstance(m, LinearMap):
        return m.weight
    raise TypeError(f"unsupported map for {role}: {type(m).__name__}")


def irrelevance_penalty(psi, beta) -> tuple[float, dict]:
    """||W_psi W_beta^T||_F^2, zero when every psi row is orthogonal to every beta row.

    Both maps read the representation, so their weight rows live in the same
    space; biases do not enter.
    """
    wp = _linear_rows(psi, "psi")
    wb = _linear_rows(beta, "beta")
    if wp.shape[1] != wb.shape[1]:
        raise ValueError(f"psi reads {wp.shape[1]} dims, beta reads {wb.shape[1]}")
    p = wp @ wb.T
    g_wp = 2.0 * p @ wb
    g_wb = 2.0 * p.T @ wp
    g_psi = {"weight": g_wp.reshape(psi.weight.shape)}
    if psi.bias is not None:
        g_psi["bias"] = np.zeros_like(psi.bias)
    g_beta = {"weight": g_wb}
    if beta.bias is not None:
        g_beta["bias"] = np.zeros_like(beta.bias)
    return float(np.sum(p * p)), {"psi": g_psi, "beta": g_beta}
