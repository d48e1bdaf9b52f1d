"""Verification suites: finite-difference gradient checks and independent oracles.

The naive references below recompute each loss with explicit Python loops over
samples, pairs and coordinates, sharing no code with :mod:`sideinfo.patterns`
beyond the map ``forward`` calls.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .baselines import fit_cca, fit_pca, fit_sfa
from .models import LinearMap, LogisticHead, MlpStack, ModelStack, init_parameters
from .numeric import Rng
from .patterns import (
    PairIndex,
    PatternSpec,
    Sigma,
    SIGMA_KINDS,
    irrelevance_penalty,
    loss_direct,
    loss_multitask,
    loss_multiview_corr,
    loss_multiview_pred,
    loss_pairwise,
    loss_supervised,
    loss_transform_fixed,
    loss_transform_pairs,
)
from .training import Dataset, TrainConfig, train_decoupled

__all__ = [
    "MAP_FAMILIES",
    "GRADCHECK_TOL",
    "GradcheckResult",
    "SuiteResult",
    "gradcheck_combinations",
    "run_gradcheck",
    "ORACLE_SUITES",
    "run_oracle_suites",
    "naive_supervised",
    "naive_direct",
    "naive_multitask",
    "naive_multiview_corr",
    "naive_multiview_pred",
    "naive_pairwise",
    "naive_transform_fixed",
    "naive_transform_pairs",
    "naive_irrelevance",
]

MAP_FAMILIES = ("linear", "mlp")
GRADCHECK_TOL = 1e-5
GRADCHECK_DRAWS = 20
ORACLE_SUITES = ("cca", "sfa", "pca", "loss")
LOSS_TOL = 1e-12


# ---------------------------------------------------------------- naive references

def _row(m, v) -> list[float]:
    return [float(a) for a in m.forward(np.asarray(v, dtype=np.float64)[None, :])[0]]


def _sqdist(a, b) -> float:
    total = 0.0
    for p, q in zip(a, b):
        total += (p - q) * (p - q)
    return total


def _bce_scalar(t: float, y: float) -> float:
    p = 1.0 / (1.0 + math.exp(-t)) if t >= 0 else math.exp(t) / (1.0 + math.exp(t))
    p = min(max(p, 1e-12), 1.0 - 1e-12)
    return -(y * math.log(p) + (1.0 - y) * math.log(1.0 - p))


def _logit(psi: LogisticHead, s) -> float:
    t = 0.0
    for w, v in zip(psi.weight, s):
        t += float(w) * v
    if psi.bias is not None:
        t += float(psi.bias)
    return t


def naive_supervised(psi, phi, x, y) -> float:
    return sum(_bce_scalar(_logit(psi, _row(phi, xi)), float(yi)) for xi, yi in zip(x, y)) / len(x)


def naive_direct(phi, x, z) -> float:
    z = np.asarray(z, dtype=np.float64).reshape(len(x), -1)
    return sum(_sqdist(_row(phi, xi), zi) for xi, zi in zip(x, z)) / len(x)


def naive_multitask(beta, phi, x, z) -> float:
    z = np.asarray(z, dtype=np.float64).reshape(len(x), -1)
    return sum(_sqdist(_row(beta, _row(phi, xi)), zi) for xi, zi in zip(x, z)) / len(x)


def _naive_var_penalty(rows: list[list[float]], gamma: float) -> float:
    b = len(rows)
    total = 0.0
    for k in range(len(rows[0])):
        mean = sum(r[k] for r in rows) / b
        var = sum((r[k] - mean) ** 2 for r in rows) / (b - 1)
        total += (var - 1.0) ** 2
    return gamma * total


def naive_multiview_corr(beta, phi, x, z, gamma: float = 0.0) -> float:
    z = np.asarray(z, dtype=np.float64).reshape(len(x), -1)
    s = [_row(phi, xi) for xi in x]
    sp = [_row(beta, zi) for zi in z]
    value = sum(_sqdist(a, b) for a, b in zip(s, sp)) / len(x)
    if gamma > 0:
        value += _naive_var_penalty(s, gamma) + _naive_var_penalty(sp, gamma)
    return value


def naive_multiview_pred(psi, beta, z, y) -> float:
    z = np.asarray(z, dtype=np.float64).reshape(len(y), -1)
    return sum(_bce_scalar(_logit(psi, _row(beta, zi)), float(yi)) for zi, yi in zip(z, y)) / len(y)


def _naive_sigma(kind: str, margin: float, d: float) -> float:
    if kind == "margin":
        return max(0.0, margin - d * d)
    if kind == "exp-neg-dist":
        return math.exp(-d)
    return math.exp(-d * d)


def naive_pairwise(phi, x, pairs: PairIndex, sigma: Sigma) -> float:
    total = 0.0
    for i, j, similar in zip(pairs.i, pairs.j, pairs.similar):
        d2 = _sqdist(_row(phi, x[i]), _row(phi, x[j]))
        total += d2 if similar else _naive_sigma(sigma.kind, sigma.margin, math.sqrt(d2))
    return total / len(pairs)


def naive_transform_fixed(phi, x_t, x_next, z) -> float:
    z = np.asarray(z, dtype=np.float64).reshape(len(x_t), -1)
    total = 0.0
    for a, b, zi in zip(x_t, x_next, z):
        change = [q - p for p, q in zip(_row(phi, a), _row(phi, b))]
        total += _sqdist(change, zi)
    return total / len(x_t)


def naive_transform_pairs(phi, x_t, x_next, z, sigma: Optional[Sigma] = None, continuous: bool = False) -> float:
    z = np.asarray(z, dtype=np.float64).reshape(len(x_t), -1)
    changes = []
    for a, b in zip(x_t, x_next):
        changes.append([q - p for p, q in zip(_row(phi, a), _row(phi, b))])
    total, count = 0.0, 0
    for i in range(len(changes)):
        for j in range(i + 1, len(changes)):
            if continuous:
                sig = sigma or Sigma("gaussian")
                w = _naive_sigma(sig.kind, sig.margin, math.sqrt(_sqdist(z[i], z[j])))
                count += 1
            else:
                w = 1.0 if all(p == q for p, q in zip(z[i], z[j])) else 0.0
                count += int(w)
            total += w * _sqdist(changes[i], changes[j])
    return total / count if count else 0.0


def naive_irrelevance(psi, beta) -> float:
    wp = np.atleast_2d(psi.weight)
    wb = np.atleast_2d(beta.weight)
    total = 0.0
    for a in range(wp.shape[0]):
        for b in range(wb.shape[0]):
            dot = 0.0
            for k in range(wp.shape[1]):
                dot += float(wp[a, k]) * float(wb[b, k])
            total += dot * dot
    return total


# ---------------------------------------------------------------- gradient checks

@dataclass
class GradcheckResult:
    family: str
    pattern: str
    sigma: Optional[str]
    max_rel_error: float
    draws: int

    @property
    def name(self) -> str:
        return f"{self.family}/{self.pattern}" + (f"[{self.sigma}]" if self.sigma else "")

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= GRADCHECK_TOL


def _encoder(family: str, in_dim: int, out_dim: int, rng: Rng):
    if family == "linear":
        m = LinearMap.zeros(in_dim, out_dim, bias=True)
    else:
        m = MlpStack.zeros([in_dim, 5, out_dim], bias=True)
    init_parameters(m, rng)
    # nonzero biases so their gradients are exercised too
    layers = m.layers if isinstance(m, MlpStack) else [m]
    for layer in layers:
        if layer.bias is not None:
            layer.bias[...] = rng.uniform(-0.5, 0.5, layer.bias.shape)
    return m


def gradcheck_combinations() -> list[tuple[str, str, Optional[str]]]:
    """Every (map family, pattern[, sigma]) combination the checker covers."""
    combos = []
    for family in MAP_FAMILIES:
        combos.append((family, "supervised", None))
        for kind in ("direct", "multi-task", "multi-view-corr", "multi-view-pred"):
            combos.append((family, kind, None))
        for sig in SIGMA_KINDS:
            combos.append((family, "pairwise-sim", sig))
        combos.append((family, "pairwise-transform", None))
        combos.append((family, "pairwise-transform-beta", None))
        combos.append((family, "pairwise-transform-pairs", None))
        for sig in SIGMA_KINDS:
            combos.append((family, "pairwise-transform-continuous", sig))
    # the irrelevance penalty is only defined for linear maps
    combos.append(("linear", "irrelevance", None))
    return combos


def _problem(family: str, pattern: str, sigma: Optional[str], rng: Rng):
    """Build maps and a loss closure ``f() -> (value, grads)`` for one random draw."""
    d, k, e, b = 4, 2, 3, 6
    phi = _encoder(family, d, k, rng.fork("phi"))
    psi = LogisticHead(rng.uniform(-1, 1, k), rng.uniform(-0.5, 0.5, ()))
    x = rng.standard_normal((b, d))
    y = (rng.uniform01(b) < 0.5).astype(np.float64)
    maps = {"phi": phi, "psi": psi}
    if pattern == "supervised":
        return maps, lambda: loss_supervised(psi, phi, x, y)
    if pattern == "direct":
        z = rng.standard_normal((b, k))
        return maps, lambda: loss_direct(phi, x, z)
    if pattern == "multi-task":
        beta = _encoder(family, k, e, rng.fork("beta"))
        maps["beta"] = beta
        z = rng.standard_normal((b, e))
        return maps, lambda: loss_multitask(beta, phi, x, z)
    if pattern == "multi-view-corr":
        beta = _encoder(family, e, k, rng.fork("beta"))
        maps["beta"] = beta
        z = rng.standard_normal((b, e))
        return maps, lambda: loss_multiview_corr(beta, phi, x, z, gamma=0.7)
    if pattern == "multi-view-pred":
        beta = _encoder(family, e, k, rng.fork("beta"))
        maps = {"psi": psi, "beta": beta}
        z = rng.standard_normal((b, e))
        return maps, lambda: loss_multiview_pred(psi, beta, z, y)
    if pattern == "pairwise-sim":
        # margin 3 keeps some dissimilar pairs on the active side of the hinge
        sig = Sigma(sigma, margin=3.0)
        pairs = PairIndex.from_lists([(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 0)],
                                     [True, False, True, False, False, True])
        return maps, lambda: loss_pairwise(phi, x, pairs, sig)
    xn = x + 0.3 * rng.standard_normal((b, d))
    if pattern == "pairwise-transform":
        z = rng.standard_normal((b, k))
        return maps, lambda: loss_transform_fixed(phi, x, xn, z)
    if pattern == "pairwise-transform-beta":
        beta = _encoder(family, 2 * k, k, rng.fork("beta"))
        maps["beta"] = beta
        z = rng.standard_normal((b, k))
        return maps, lambda: loss_transform_fixed(phi, x, xn, z, beta=beta)
    if pattern == "pairwise-transform-pairs":
        z = np.array([[0.0], [1.0], [0.0], [1.0], [0.0], [2.0]])
        return maps, lambda: loss_transform_pairs(phi, x, xn, z)
    if pattern == "pairwise-transform-continuous":
        z = rng.standard_normal((b, 1))
        return maps, lambda: loss_transform_pairs(phi, x, xn, z, Sigma(sigma, margin=3.0), continuous=True)
    if pattern == "irrelevance":
        beta = LinearMap(rng.standard_normal((e, k)), rng.standard_normal(e))
        maps = {"psi": psi, "beta": beta}
        return maps, lambda: irrelevance_penalty(psi, beta)
    raise ValueError(f"unknown gradcheck pattern {pattern!r}")


def _max_rel_error(maps: dict, fn: Callable) -> float:
    _, grads = fn()
    worst = 0.0
    for role, m in maps.items():
        for name, arr in m.params().items():
            analytic = np.asarray(grads.get(role, {}).get(name, np.zeros_like(arr)), dtype=np.float64)
            flat = arr.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                h = 1e-6 * max(1.0, abs(orig))
                flat[i] = orig + h
                up = fn()[0]
                flat[i] = orig - h
                down = fn()[0]
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)
            scale = max(np.max(np.abs(a)), np.max(np.abs(numeric)), 1.0)
            worst = max(worst, float(np.max(np.abs(a - numeric)) / scale))
    return worst


def run_gradcheck(only: Optional[str] = None, sigma: Optional[str] = None, family: Optional[str] = None,
                  draws: int = GRADCHECK_DRAWS, seed: int = 0) -> list[GradcheckResult]:
    """Central finite differences against the analytic gradients.

    The relative error of one parameter array is ``max|a - n| / max(|a|, |n|, 1)``
    (the floor of 1 turns it into an absolute error for tiny gradients); the
    step is ``h = 1e-6 * max(1, |theta|)``.
    """
    combos = gradcheck_combinations()
    if only is not None:
        combos = [c for c in combos if c[1] == only or (only == "pairwise-transform" and c[1].startswith(only))]
        if not combos:
            raise ValueError(f"no gradcheck combination for pattern {only!r}")
    if sigma is not None:
        if sigma not in SIGMA_KINDS:
            raise ValueError(f"unknown sigma {sigma!r}")
        combos = [c for c in combos if c[2] in (sigma, None)]
    if family is not None:
        combos = [c for c in combos if c[0] == family]
    base = Rng(seed).fork("gradcheck")
    results = []
    for fam, pattern, sig in combos:
        worst = 0.0
        for draw in range(draws):
            rng = base.fork(f"{fam}/{pattern}/{sig}").fork(str(draw))
            maps, fn = _problem(fam, pattern, sig, rng)
            worst = max(worst, _max_rel_error(maps, fn))
        results.append(GradcheckResult(fam, pattern, sig, worst, draws))
    return results


# ---------------------------------------------------------------- oracle suites

@dataclass
class SuiteResult:
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    seconds: float = 0.0


def _suite_loss(rng: Rng, tol: float) -> tuple[bool, dict]:
    """Vectorized losses against the naive loops on random 6-pair / 6-transition batches."""
    errors = {}
    for fam in MAP_FAMILIES:
        for draw in range(5):
            r = rng.fork(fam).fork(str(draw))
            phi = _encoder(fam, 4, 2, r.fork("phi"))
            x = r.standard_normal((6, 4))
            xn = x + 0.5 * r.standard_normal((6, 4))
            first = r.integers(6, 6)
            second = (first + 1 + r.integers(5, 6)) % 6
            pairs = PairIndex.from_lists(list(zip(first, second)), list(r.uniform01(6) < 0.5))
            for kind in SIGMA_KINDS:
                sig = Sigma(kind, margin=2.0)
                got = loss_pairwise(phi, x, pairs, sig)[0]
                errors[f"pairwise-sim[{kind}]"] = max(errors.get(f"pairwise-sim[{kind}]", 0.0),
                                                      abs(got - naive_pairwise(phi, x, pairs, sig)))
            z = r.standard_normal((6, 2))
            key = "pairwise-transform"
            errors[key] = max(errors.get(key, 0.0),
                              abs(loss_transform_fixed(phi, x, xn, z)[0] - naive_transform_fixed(phi, x, xn, z)))
            zd = np.array([[0.0], [1.0], [0.0], [1.0], [1.0], [2.0]])
            key = "pairwise-transform-pairs"
            errors[key] = max(errors.get(key, 0.0),
                              abs(loss_transform_pairs(phi, x, xn, zd)[0] - naive_transform_pairs(phi, x, xn, zd)))
            zc = r.standard_normal((6, 1))
            for kind in SIGMA_KINDS:
                sig = Sigma(kind, margin=2.0)
                key = f"pairwise-transform-continuous[{kind}]"
                got = loss_transform_pairs(phi, x, xn, zc, sig, continuous=True)[0]
                errors[key] = max(errors.get(key, 0.0),
                                  abs(got - naive_transform_pairs(phi, x, xn, zc, sig, continuous=True)))
    errors = {k: float(v) for k, v in errors.items()}
    worst = max(errors.values())
    return worst <= tol, {"max_abs_error": worst, "tolerance": tol, "per_loss": errors}


def _suite_sfa(rng: Rng) -> tuple[bool, dict]:
    """A slow sinusoid mixed with fast sources by a random matrix must come back out."""
    t = np.arange(2000)
    slow = np.sin(2 * np.pi * t / 1000.0)
    fast = rng.standard_normal((2000, 4))
    sources = np.column_stack([slow, fast])
    mix = rng.standard_normal((5, 5)) + 2.0 * np.eye(5)
    x = sources @ mix.T
    out = fit_sfa(x, 1).transform(x)[:, 0]
    rho = float(np.corrcoef(out, slow)[0, 1])
    return abs(rho) >= 0.99, {"abs_corr": abs(rho), "threshold": 0.99}


def _suite_pca(rng: Rng) -> tuple[bool, dict]:
    """Rank-1 data plus tiny noise: the first component is the planted direction."""
    u = rng.standard_normal(6)
    u /= np.linalg.norm(u)
    a = 3.0 * rng.standard_normal(500)
    x = np.outer(a, u) + 1e-3 * rng.standard_normal((500, 6))
    direction = fit_pca(x, 1).directions[0]
    cos = float(abs(direction @ u))
    return cos >= 0.999, {"abs_cos": cos, "threshold": 0.999}


def _suite_cca(rng: Rng) -> tuple[bool, dict]:
    """Identical views give correlation 1; decoupled multi-view-corr finds the CCA direction."""
    x = rng.standard_normal((300, 4))
    _, _, rho = fit_cca(x, x.copy(), 1)
    ident_err = abs(float(rho[0]) - 1.0)

    # planted shared latent, independent per-view noise
    n = 2000
    latent = rng.standard_normal(n)
    xs = np.column_stack([latent, rng.standard_normal((n, 3))])
    zs = np.column_stack([latent + 0.1 * rng.standard_normal(n), rng.standard_normal((n, 2))])
    x = xs @ (rng.standard_normal((4, 4)) + 2.0 * np.eye(4)).T
    z = zs @ (rng.standard_normal((3, 3)) + 2.0 * np.eye(3)).T
    # unit-variance columns keep the quartic variance penalty in a stable range
    x = x / x.std(axis=0)
    z = z / z.std(axis=0)
    px, _, _ = fit_cca(x, z, 1)
    stack = ModelStack(LinearMap.zeros(4, 1), LogisticHead.zeros(1, bias=False), LinearMap.zeros(3, 1))
    init_rng = rng.fork("init")
    for role, m in stack.maps().items():
        init_parameters(m, init_rng.fork(role))
    data = Dataset(x, (latent <= 0).astype(np.float64), z, kind="vector")
    cfg = TrainConfig(procedure="decoupled", learning_rate=0.01, epochs=20, batch_size=50, seed=0)
    train_decoupled(stack, PatternSpec("multi-view-corr", gamma=1.0), data, cfg)
    w = stack.phi.weight[0]
    cos = float(abs(w @ px.directions[0]) / (np.linalg.norm(w) * np.linalg.norm(px.directions[0])))
    ok = ident_err <= 1e-8 and cos >= 0.99
    return ok, {"identical_view_error": ident_err, "alignment_abs_cos": cos,
                "thresholds": {"identical_view_error": 1e-8, "alignment_abs_cos": 0.99}}


def run_oracle_suites(suites=ORACLE_SUITES, tolerance: float = LOSS_TOL, seed: int = 0) -> list[SuiteResult]:
    """Run the named oracle suites; ``tolerance`` bounds the loss-equality suite."""
    if not (tolerance >= 0 and math.isfinite(tolerance)):
        raise ValueError(f"tolerance must be a finite non-negative number, got {tolerance}")
    unknown = [s for s in suites if s not in ORACLE_SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; expected a subset of {ORACLE_SUITES}")
    base = Rng(seed).fork("oracle")
    out = []
    for name in suites:
        start = time.perf_counter()
        rng = base.fork(name)
        if name == "loss":
            ok, details = _suite_loss(rng, tolerance)
        elif name == "sfa":
            ok, details = _suite_sfa(rng)
        elif name == "pca":
            ok, details = _suite_pca(rng)
        else:
            ok, details = _suite_cca(rng)
        out.append(SuiteResult(name, bool(ok), details, time.perf_counter() - start))
    return out
