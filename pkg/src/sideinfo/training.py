"""Nesterov SGD and the three ways of combining the main and side objectives.

* simultaneous: every step descends ``w_main * L_f + w_side * L_z`` over phi, psi, beta.
* decoupled: phi (and beta) are fit to ``L_z`` alone, then psi is fit to ``L_f`` with phi frozen.
* pretrain-finetune: decoupled, followed by joint (phi, psi) descent on ``L_f``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .models import LinearMap, ModelStack
from .numeric import Rng
from .patterns import (
    PairIndex,
    PatternSpec,
    add_grads,
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

__all__ = [
    "PROCEDURES",
    "Dataset",
    "TrainConfig",
    "OptimizerState",
    "TrainingDiverged",
    "FutileFinetuneWarning",
    "nesterov_step",
    "sgd",
    "split_batches",
    "temporal_pairs",
    "side_loss",
    "main_loss",
    "evaluate_losses",
    "train",
    "train_supervised",
    "train_simultaneous",
    "train_decoupled",
    "train_pretrain_finetune",
]

PROCEDURES = ("decoupled", "simultaneous", "pretrain-finetune")


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""


class FutileFinetuneWarning(UserWarning):
    """Fine-tuning a linear phi under a convex main objective just unlearns the pretraining."""


@dataclass
class Dataset:
    """Training data for one run.

    ``kind`` says how ``z`` lines up with the samples:

    * ``"vector"``: ``z[t]`` belongs to sample ``t`` (``len(z) == len(x)``).
    * ``"relative"``: ``z[t]`` is the change from sample ``t`` to ``t + 1`` (``len(z) == len(x) - 1``).
    * ``"pairwise"``: side information is the explicit pair list ``pairs``.
    """

    x: np.ndarray
    y: Optional[np.ndarray] = None
    z: Optional[np.ndarray] = None
    kind: str = "vector"
    pairs: Optional[PairIndex] = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        n = self.x.shape[0]
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=np.float64).reshape(-1)
            if len(self.y) != n:
                raise ValueError(f"{len(self.y)} labels for {n} samples")
        if self.z is not None:
            self.z = np.asarray(self.z, dtype=np.float64)
            if self.z.ndim == 1:
                self.z = self.z[:, None]
        if self.kind == "vector" and self.z is not None and len(self.z) != n:
            raise ValueError(f"vector side information needs {n} rows, got {len(self.z)}")
        if self.kind == "relative" and self.z is not None and len(self.z) != n - 1:
            raise ValueError(f"relative side information needs {n - 1} rows, got {len(self.z)}")
        if self.kind not in ("vector", "relative", "pairwise"):
            raise ValueError(f"unknown side-information kind {self.kind!r}")

    def __len__(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class TrainConfig:
    procedure: str = "simultaneous"
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    finetune_epochs: int = 10
    finetune_lr: float = 0.001
    batch_size: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.procedure not in PROCEDURES:
            raise ValueError(f"unknown procedure {self.procedure!r}; expected one of {PROCEDURES}")
        if not self.learning_rate > 0 or not self.finetune_lr > 0:
            raise ValueError("learning rates must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.finetune_epochs < 0:
            raise ValueError("finetune_epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class OptimizerState:
    velocity: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, theta) -> "OptimizerState":
        return cls(np.zeros_like(np.asarray(theta, dtype=np.float64)))


def nesterov_step(params, state: OptimizerState, grad_fn: Callable, lr: float, momentum: float):
    """One Nesterov update in lookahead form.

    ``g = grad_fn(theta + mu v)``, ``v <- mu v - lr g``, ``theta <- theta + v``.
    """
    g = np.asarray(grad_fn(params + momentum * state.velocity), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise TrainingDiverged(f"non-finite gradient at step {state.step}")
    v = momentum * state.velocity - lr * g
    return params + v, OptimizerState(v, state.step + 1)


def split_batches(perm: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Cut ``perm`` into ``ceil(len / batch_size)`` batches of near-equal size.

    Near-equal sizes avoid a trailing batch of one, which the variance penalty
    cannot handle.
    """
    if len(perm) == 0:
        return []
    return np.array_split(perm, math.ceil(len(perm) / batch_size))


def sgd(theta, grad_at: Callable, batches_for_epoch: Callable, epochs: int, lr: float,
        momentum: float, on_epoch: Optional[Callable] = None) -> np.ndarray:
    """Run ``epochs`` passes of Nesterov SGD; ``grad_at(theta, batch)`` gives the flat gradient."""
    theta = np.asarray(theta, dtype=np.float64).copy()
    state = OptimizerState.zeros_like(theta)
    for epoch in range(epochs):
        for batch in batches_for_epoch(epoch):
            theta, state = nesterov_step(theta, state, lambda th: grad_at(th, batch), lr, momentum)
        if on_epoch is not None:
            on_epoch(epoch, theta)
    return theta


def temporal_pairs(y, rng: Rng) -> PairIndex:
    """Pairs for the slowness prior on a sequence.

    Neighbours ``(t, t + 1)`` are similar; each sample also gets one partner
    with a different label, drawn at random, as a dissimilar pair.
    """
    y = np.asarray(y).reshape(-1)
    n = len(y)
    sim_i = np.arange(n - 1)
    pairs_i = [sim_i]
    pairs_j = [sim_i + 1]
    flags = [np.ones(n - 1, dtype=bool)]
    draws = rng.uniform01(n)
    for label in np.unique(y):
        mine = np.flatnonzero(y == label)
        other = np.flatnonzero(y != label)
        if len(other) == 0:
            continue
        pick = other[np.minimum((draws[mine] * len(other)).astype(np.int64), len(other) - 1)]
        pairs_i.append(mine)
        pairs_j.append(pick)
        flags.append(np.zeros(len(mine), dtype=bool))
    return PairIndex(np.concatenate(pairs_i), np.concatenate(pairs_j), np.concatenate(flags))


def _transition_targets(data: Dataset) -> np.ndarray:
    if data.kind == "relative":
        return data.z
    if data.kind == "vector":
        # a per-sample channel becomes a relative one by differencing
        return data.z[1:] - data.z[:-1]
    raise ValueError("pairwise-transform needs sequential side information")


def _side_setup(stack: ModelStack, pattern: PatternSpec, data: Dataset, rng: Rng):
    """Return ``(n_records, aligned, loss_fn)``; ``loss_fn(idx)`` evaluates L_z on those records."""
    kind = pattern.kind
    x = data.x
    if pattern.has_beta and stack.beta is None:
        raise ValueError(f"pattern {kind!r} needs a beta map")
    if kind == "pairwise-sim":
        pairs = data.pairs
        if pairs is None:
            if data.y is None:
                raise ValueError("pairwise-sim without explicit pairs needs labels to derive dissimilar pairs")
            pairs = temporal_pairs(data.y, rng.fork("pairs"))
        return len(pairs), False, lambda idx: loss_pairwise(stack.phi, x, pairs.subset(idx), pattern.sigma)
    if kind == "pairwise-transform":
        if data.z is None:
            raise ValueError("pairwise-transform needs side information")
        zt = _transition_targets(data)
        if pattern.transform == "fixed":
            return len(zt), False, lambda idx: loss_transform_fixed(stack.phi, x[idx], x[idx + 1], zt[idx])
        return len(zt), False, lambda idx: loss_transform_pairs(
            stack.phi, x[idx], x[idx + 1], zt[idx], pattern.sigma, pattern.continuous)
    if data.z is None or data.kind != "vector":
        raise ValueError(f"pattern {kind!r} needs per-sample vector side information")
    z = data.z
    n = len(data)
    if kind == "direct":
        return n, True, lambda idx: loss_direct(stack.phi, x[idx], z[idx])
    if kind == "multi-task":
        return n, True, lambda idx: loss_multitask(stack.beta, stack.phi, x[idx], z[idx])
    if kind == "multi-view-corr":
        return n, True, lambda idx: loss_multiview_corr(stack.beta, stack.phi, x[idx], z[idx], pattern.gamma)
    if kind == "multi-view-pred":
        if data.y is None:
            raise ValueError("multi-view-pred needs labels for the side view")
        return n, True, lambda idx: loss_multiview_pred(stack.psi, stack.beta, z[idx], data.y[idx])
    if kind == "irrelevance":
        def irrelevance(idx):
            v1, g1 = loss_multitask(stack.beta, stack.phi, x[idx], z[idx])
            v2, g2 = irrelevance_penalty(stack.psi, stack.beta)
            return v1 + v2, add_grads(g1, g2)
        return n, True, irrelevance
    raise ValueError(f"unsupported pattern {kind!r}")


def side_loss(stack: ModelStack, pattern: PatternSpec, data: Dataset, idx=None, seed: int = 0):
    """Evaluate the side objective on records ``idx`` (all records by default)."""
    m, _, fn = _side_setup(stack, pattern, data, Rng(seed))
    return fn(np.arange(m) if idx is None else np.asarray(idx))


def main_loss(stack: ModelStack, data: Dataset, idx=None):
    idx = np.arange(len(data)) if idx is None else np.asarray(idx)
    return loss_supervised(stack.psi, stack.phi, data.x[idx], data.y[idx])


def evaluate_losses(stack: ModelStack, pattern: Optional[PatternSpec], data: Dataset, seed: int = 0):
    """``(main_loss, side_loss)`` on the whole training set; side is NaN without a pattern."""
    main = main_loss(stack, data)[0] if data.y is not None else math.nan
    side = side_loss(stack, pattern, data, seed=seed)[0] if pattern is not None else math.nan
    return main, side


def _trainable(stack: ModelStack, pattern: Optional[PatternSpec], base: tuple[str, ...]) -> tuple[str, ...]:
    roles = list(base)
    if pattern is not None and pattern.has_beta and stack.beta is not None and "beta" not in roles:
        roles.append("beta")
    return tuple(roles)


class _Tracer:
    def __init__(self, stack, pattern, data, seed, trace):
        self.stack, self.pattern, self.data, self.seed, self.trace = stack, pattern, data, seed, trace
        self.epoch = 0

    def hook(self, roles):
        if self.trace is None:
            return None

        def on_epoch(_, theta):
            self.stack.set_flat(theta, roles)
            main, side = evaluate_losses(self.stack, self.pattern, self.data, self.seed)
            self.trace.append({"epoch": self.epoch, "main_loss": main, "side_loss": side})
            self.epoch += 1
        return on_epoch


def _run_phase(stack, roles, grad_of_batch, batches_for_epoch, epochs, lr, momentum, on_epoch):
    def grad_at(theta, batch):
        stack.set_flat(theta, roles)
        return stack.flat_grads(grad_of_batch(batch), roles)

    theta = sgd(stack.get_flat(roles), grad_at, batches_for_epoch, epochs, lr, momentum, on_epoch)
    stack.set_flat(theta, roles)


def _main_phase(stack, data, roles, config, rng, epochs, lr, tracer):
    n = len(data)

    def batches(_):
        return split_batches(rng.permutation(n), config.batch_size)

    def grads(idx):
        return main_loss(stack, data, idx)[1]

    _run_phase(stack, roles, grads, batches, epochs, lr, config.momentum, tracer.hook(roles))


def train_supervised(stack: ModelStack, data: Dataset, config: TrainConfig, trace: Optional[list] = None) -> ModelStack:
    """Plain supervised training of (phi, psi); the reference point for the side objectives."""
    rng = Rng(config.seed).fork("shuffle")
    tracer = _Tracer(stack, None, data, config.seed, trace)
    _main_phase(stack, data, ("phi", "psi"), config, rng.fork("main"), config.epochs, config.learning_rate, tracer)
    return stack


def train_simultaneous(stack: ModelStack, pattern: PatternSpec, data: Dataset, config: TrainConfig,
                       trace: Optional[list] = None) -> ModelStack:
    if data.y is None:
        raise ValueError("simultaneous training needs labels")
    if abs(pattern.w_main + pattern.w_side - 1.0) > 1e-12:
        raise ValueError("objective weights must sum to 1")
    rng = Rng(config.seed).fork("shuffle")
    main_rng, side_rng = rng.fork("main"), rng.fork("side")
    m, aligned, side_fn = _side_setup(stack, pattern, data, Rng(config.seed))
    aligned = aligned and m == len(data)
    roles = _trainable(stack, pattern, ("phi", "psi"))
    n = len(data)
    w_main, w_side = pattern.w_main, pattern.w_side

    def batches(_):
        mains = split_batches(main_rng.permutation(n), config.batch_size)
        if aligned:
            return list(zip(mains, mains))
        sides = np.array_split(side_rng.permutation(m), len(mains))
        return list(zip(mains, sides))

    def grads(batch):
        main_idx, side_idx = batch
        g = main_loss(stack, data, main_idx)[1]
        if w_main != 1.0:
            g = add_grads({}, g, w_main)
        if w_side != 0.0 and len(side_idx) > 0:
            g = add_grads(g, side_fn(side_idx)[1], w_side)
        return g

    tracer = _Tracer(stack, pattern, data, config.seed, trace)
    _run_phase(stack, roles, grads, batches, config.epochs, config.learning_rate, config.momentum, tracer.hook(roles))
    return stack


def _decoupled_phases(stack, pattern, data, config, tracer):
    if pattern.kind in ("multi-view-pred", "irrelevance"):
        raise ValueError(f"pattern {pattern.kind!r} involves psi in its side objective and cannot be decoupled")
    rng = Rng(config.seed).fork("shuffle")
    m, _, side_fn = _side_setup(stack, pattern, data, Rng(config.seed))
    side_rng = rng.fork("side")
    roles = _trainable(stack, pattern, ("phi",))

    def batches(_):
        return split_batches(side_rng.permutation(m), config.batch_size)

    _run_phase(stack, roles, lambda idx: side_fn(idx)[1], batches, config.epochs,
               config.learning_rate, config.momentum, tracer.hook(roles))
    if data.y is None:
        raise ValueError("the main phase needs labels")
    _main_phase(stack, data, ("psi",), config, rng.fork("main"), config.epochs, config.learning_rate, tracer)
    return rng


def train_decoupled(stack: ModelStack, pattern: PatternSpec, data: Dataset, config: TrainConfig,
                    trace: Optional[list] = None) -> ModelStack:
    tracer = _Tracer(stack, pattern, data, config.seed, trace)
    _decoupled_phases(stack, pattern, data, config, tracer)
    return stack


def train_pretrain_finetune(stack: ModelStack, pattern: PatternSpec, data: Dataset, config: TrainConfig,
                            trace: Optional[list] = None) -> ModelStack:
    if isinstance(stack.phi, LinearMap):
        warnings.warn("pretrain-finetune with a linear phi: the convex main objective undoes the pretraining",
                      FutileFinetuneWarning)
    tracer = _Tracer(stack, pattern, data, config.seed, trace)
    rng = _decoupled_phases(stack, pattern, data, config, tracer)
    if config.finetune_epochs > 0:
        _main_phase(stack, data, ("phi", "psi"), config, rng.fork("finetune"), config.finetune_epochs,
                    config.finetune_lr, tracer)
    return stack


def train(stack: ModelStack, pattern: PatternSpec, data: Dataset, config: TrainConfig,
          trace: Optional[list] = None) -> ModelStack:
    """Dispatch on ``config.procedure``."""
    if config.procedure == "simultaneous":
        return train_simultaneous(stack, pattern, data, config, trace)
    if config.procedure == "decoupled":
        return train_decoupled(stack, pattern, data, config, trace)
    return train_pretrain_finetune(stack, pattern, data, config, trace)
