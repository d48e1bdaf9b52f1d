"""Synthetic random-walk task and the experiment runner built on it.

An agent's 1-d position ``s_t`` and ``d - 1`` distractors ``u_t`` perform
independent Gaussian random walks; the learner sees ``x_t = R [s_t, u_t]`` for
a fixed random rotation ``R`` and must tell whether ``s_t > 0`` (label 0) or
not (label 1). Three training-only side channels carry information about s:

* ``direct``: ``s_t + eps``
* ``embedded``: ``Q [s_t + eps, v_t]`` with its own random-walk distractors ``v``
* ``relative``: ``s_t - s_{t-1} + eps``
"""

from __future__ import annotations

import csv
import functools
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Iterable, Optional

import numpy as np

from .baselines import DEFAULT_C_GRID, EIG_FLOOR, NO_PENALTY, fit_logreg_grid, fit_pca, fit_sfa
from .models import LinearMap, LogisticHead, MlpStack, ModelStack, init_parameters, sigmoid
from .numeric import Rng, random_rotation, sym_eig
from .patterns import PATTERN_KINDS, PROB_CLAMP, PatternSpec, Sigma
from .training import (
    PROCEDURES,
    Dataset,
    TrainConfig,
    TrainingDiverged,
    evaluate_losses,
    train,
)

__all__ = [
    "SIDE_KINDS",
    "BASELINES",
    "DEFAULT_APPLICABILITY",
    "DEFAULT_SIDE_WEIGHTS",
    "DEFAULT_N_GRID",
    "RAW_HEADER",
    "AGG_HEADER",
    "GeneratorConfig",
    "Trajectory",
    "BenchConfig",
    "ResultRecord",
    "make_rotations",
    "generate",
    "applicable",
    "pattern_for",
    "run_cell",
    "run_cell_detailed",
    "run_sweep",
    "aggregate",
    "write_raw_csv",
    "read_raw_csv",
    "write_aggregate_csv",
    "read_aggregate_csv",
    "bayes_rate",
]

SIDE_KINDS = ("direct", "embedded", "relative")
BASELINES = ("logreg", "pca", "sfa")
BASELINE_PROCEDURE = "baseline"

DEFAULT_APPLICABILITY = {
    "direct": frozenset({"direct", "multi-task", "multi-view-corr", "pairwise-transform"}),
    "embedded": frozenset({"direct", "multi-task", "multi-view-corr", "multi-view-pred"}),
    "relative": frozenset({"pairwise-transform"}),
}
DEFAULT_SIDE_WEIGHTS = {
    "direct": 0.5,
    "multi-task": 0.5,
    "multi-view-corr": 0.01,
    "multi-view-pred": 0.5,
    "pairwise-sim": 0.5,
    "pairwise-transform": 0.5,
    "irrelevance": 0.5,
}
DEFAULT_N_GRID = (25, 50, 100, 200, 400, 800)
PREPROCESS = ("none", "scale", "whiten")

RAW_HEADER = ["side_info", "pattern", "procedure", "n_train", "seed", "test_accuracy",
              "main_loss", "side_loss", "wall_ms", "failed"]
AGG_HEADER = ["side_info", "pattern", "procedure", "n_train", "mean_accuracy", "stderr", "n_seeds"]


@dataclass(frozen=True)
class GeneratorConfig:
    d: int = 50
    e: Optional[int] = None
    noise_std: float = 0.05
    T: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.d < 2:
            raise ValueError(f"d must be >= 2, got {self.d}")
        if self.embedded_dim < 2:
            raise ValueError(f"e must be >= 2, got {self.embedded_dim}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.T < 2:
            raise ValueError("T must be >= 2")

    @property
    def embedded_dim(self) -> int:
        return self.d // 2 if self.e is None else self.e


@dataclass
class Trajectory:
    s: np.ndarray
    u: np.ndarray
    v: np.ndarray
    x: np.ndarray
    y: np.ndarray
    R: np.ndarray
    Q: np.ndarray
    z_direct: np.ndarray
    z_embedded: np.ndarray
    z_relative: np.ndarray

    def side(self, kind: str) -> np.ndarray:
        return {"direct": self.z_direct, "embedded": self.z_embedded, "relative": self.z_relative}[kind]


def make_rotations(d: int, e: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    return random_rotation(d, rng.fork("R")), random_rotation(e, rng.fork("Q"))


def _walk(rng: Rng, T: int, dims: int) -> np.ndarray:
    # row 0 is the N(0, 1) start, later rows add unit-variance steps
    return np.cumsum(rng.standard_normal((T, dims)), axis=0)


def generate(config: GeneratorConfig, rotations=None, rng: Optional[Rng] = None) -> Trajectory:
    """Sample one trajectory of length ``config.T``.

    ``rotations`` fixes ``(R, Q)`` so that train and test sets share the same
    observation model; otherwise they are drawn from the seed.
    """
    rng = Rng(config.seed) if rng is None else rng
    d, e, T = config.d, config.embedded_dim, config.T
    R, Q = make_rotations(d, e, rng.fork("rotations")) if rotations is None else rotations
    latent = _walk(rng.fork("latent"), T, d)
    s, u = latent[:, 0], latent[:, 1:]
    v = _walk(rng.fork("embedded-walk"), T, e - 1)
    x = latent @ R.T
    y = (s <= 0).astype(np.int64)
    sd = config.noise_std
    z_direct = (s + sd * rng.fork("noise-direct").standard_normal(T))[:, None]
    noisy_s = s + sd * rng.fork("noise-embedded").standard_normal(T)
    z_embedded = np.column_stack([noisy_s, v]) @ Q.T
    z_relative = (np.diff(s) + sd * rng.fork("noise-relative").standard_normal(T - 1))[:, None]
    return Trajectory(s, u, v, x, y, R, Q, z_direct, z_embedded, z_relative)


@dataclass(frozen=True)
class BenchConfig:
    """Everything a benchmark cell needs besides its key.

    ``preprocess``: ``"none"`` keeps raw units; ``"scale"`` divides x by its
    training RMS; ``"whiten"`` (default) maps x through the uncentered
    second-moment whitener of the training set (of the increments of x for
    ``pairwise-transform``). Both are invertible linear maps a linear phi can
    absorb, so only the optimization path changes. Except under ``"none"``,
    vector side channels are scaled to unit mean squared norm and increments by
    the RMS of x. ``gamma`` defaults lower than in :class:`PatternSpec`: the
    batch-variance penalty is noisy at batch size 20.
    ``side_weight`` overrides the per-pattern defaults in ``DEFAULT_SIDE_WEIGHTS``.
    ``hidden`` non-empty makes phi a rectifier MLP with those layer widths.
    ``extra_applicability`` adds ``"side_kind:pattern"`` combinations.
    """

    d: int = 50
    e: Optional[int] = None
    noise_std: float = 0.05
    test_size: int = 50000
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 100
    batch_size: int = 20
    finetune_epochs: int = 10
    finetune_lr: float = 0.001
    init: str = "scaled-uniform"
    phi_bias: bool = False
    psi_bias: bool = False
    hidden: tuple = ()
    preprocess: str = "whiten"
    gamma: float = 0.1
    sigma: str = "margin"
    margin: float = 1.0
    side_weight: Optional[float] = None
    c_grid: tuple = DEFAULT_C_GRID
    extra_applicability: tuple = ()

    def __post_init__(self):
        GeneratorConfig(d=self.d, e=self.e, noise_std=self.noise_std, T=max(self.test_size, 2))
        Sigma(self.sigma, self.margin)
        if self.preprocess not in PREPROCESS:
            raise ValueError(f"preprocess must be one of {PREPROCESS}, got {self.preprocess!r}")
        self.train_config("simultaneous", 0)
        if self.side_weight is not None and not 0.0 <= self.side_weight <= 1.0:
            raise ValueError("side_weight must lie in [0, 1]")
        for item in self.extra_applicability:
            kind, _, pattern = item.partition(":")
            if kind not in SIDE_KINDS or pattern not in PATTERN_KINDS:
                raise ValueError(f"bad applicability entry {item!r}; expected 'side_kind:pattern'")

    def generator(self, T: int, seed: int = 0) -> GeneratorConfig:
        return GeneratorConfig(d=self.d, e=self.e, noise_std=self.noise_std, T=T, seed=seed)

    def train_config(self, procedure: str, seed: int) -> TrainConfig:
        return TrainConfig(procedure=procedure, learning_rate=self.learning_rate, momentum=self.momentum,
                           epochs=self.epochs, finetune_epochs=self.finetune_epochs,
                           finetune_lr=self.finetune_lr, batch_size=self.batch_size, seed=seed)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["hidden"] = list(self.hidden)
        out["c_grid"] = ["inf" if math.isinf(c) else c for c in self.c_grid]
        out["extra_applicability"] = list(self.extra_applicability)
        return out

    @classmethod
    def from_dict(cls, values: dict) -> "BenchConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown configuration keys: {sorted(unknown)}")
        values = dict(values)
        if "hidden" in values:
            values["hidden"] = tuple(int(h) for h in values["hidden"])
        if "c_grid" in values:
            values["c_grid"] = tuple(NO_PENALTY if str(c).lower() in ("inf", "infinity") else float(c)
                                     for c in values["c_grid"])
        if "extra_applicability" in values:
            values["extra_applicability"] = tuple(values["extra_applicability"])
        return cls(**values)


@dataclass
class ResultRecord:
    side_info: str
    pattern: str
    procedure: str
    n_train: int
    seed: int
    test_accuracy: float
    main_loss: float
    side_loss: float
    wall_ms: float
    failed: bool = False
    error: str = field(default="", compare=False)

    def key(self) -> tuple:
        return (self.side_info, self.pattern, self.procedure, self.n_train, self.seed)

    def row(self) -> list[str]:
        return [self.side_info, self.pattern, self.procedure, str(self.n_train), str(self.seed),
                repr(float(self.test_accuracy)), repr(float(self.main_loss)), repr(float(self.side_loss)),
                repr(float(self.wall_ms)), "1" if self.failed else "0"]


def applicable(side_kind: str, pattern: str, extra: Iterable[str] = ()) -> bool:
    if side_kind not in SIDE_KINDS:
        raise ValueError(f"unknown side information {side_kind!r}; expected one of {SIDE_KINDS}")
    if pattern in BASELINES:
        return True
    return pattern in DEFAULT_APPLICABILITY[side_kind] or f"{side_kind}:{pattern}" in set(extra)


def pattern_for(kind: str, config: BenchConfig) -> PatternSpec:
    w_side = DEFAULT_SIDE_WEIGHTS[kind] if config.side_weight is None else config.side_weight
    return PatternSpec(kind=kind, sigma=Sigma(config.sigma, config.margin), w_main=1.0 - w_side,
                       w_side=w_side, gamma=config.gamma)


def _check_cell(side_kind: str, pattern: str, procedure: str):
    if pattern in BASELINES:
        if procedure != BASELINE_PROCEDURE:
            raise ValueError(f"baseline {pattern!r} runs with procedure {BASELINE_PROCEDURE!r}, not {procedure!r}")
        return
    if pattern not in PATTERN_KINDS:
        raise ValueError(f"unknown pattern {pattern!r}")
    if procedure not in PROCEDURES:
        raise ValueError(f"unknown procedure {procedure!r}")
    if procedure != "simultaneous" and pattern in ("multi-view-pred", "irrelevance"):
        raise ValueError(f"pattern {pattern!r} cannot be trained with procedure {procedure!r}")


def _rms(a: np.ndarray) -> float:
    r = float(np.sqrt(np.mean(a * a)))
    return r if r > 0 else 1.0


def _build_stack(pattern: str, in_dim: int, z_dim: int, config: BenchConfig, rng: Rng) -> ModelStack:
    k = z_dim if pattern == "direct" else 1
    if config.hidden:
        sizes = [in_dim, *config.hidden, k]
        phi = MlpStack([LinearMap.zeros(i, o, bias=(config.phi_bias or j < len(sizes) - 2))
                        for j, (i, o) in enumerate(zip(sizes, sizes[1:]))])
    else:
        phi = LinearMap.zeros(in_dim, k, bias=config.phi_bias)
    psi = LogisticHead.zeros(k, bias=config.psi_bias)
    beta = None
    if pattern in ("multi-task", "irrelevance"):
        beta = LinearMap.zeros(k, z_dim)
    elif pattern in ("multi-view-corr", "multi-view-pred"):
        beta = LinearMap.zeros(z_dim, k)
    stack = ModelStack(phi, psi, beta)
    for role, m in stack.maps().items():
        init_parameters(m, rng.fork(role), config.init)
    return stack


def _second_moment_whitener(x: np.ndarray) -> np.ndarray:
    """Rows map x onto the span of the training samples with unit second moment in every direction.

    Uncentered, so a bias-free phi stays bias-free; directions with eigenvalue
    below ``EIG_FLOOR`` times the largest are dropped.
    """
    w, v = sym_eig(x.T @ x / x.shape[0])
    keep = w > EIG_FLOOR * w[0]
    return (v[:, keep] / np.sqrt(w[keep])).T


@functools.lru_cache(maxsize=4)
def _split(seed: int, n_train: int, d: int, e: int, noise_std: float, test_size: int):
    """Train and test trajectories of one seed; cached because every cell of a seed reuses them."""
    rng = Rng(seed)
    gen = GeneratorConfig(d=d, e=e, noise_std=noise_std, T=n_train, seed=seed)
    rotations = make_rotations(gen.d, gen.embedded_dim, rng.fork("task"))
    tr = generate(gen, rotations, rng.fork("train"))
    te = generate(replace(gen, T=test_size), rotations, rng.fork("test"))
    for traj in (tr, te):
        for value in vars(traj).values():
            value.flags.writeable = False
    return tr, te


def _cell_data(side_kind: str, n_train: int, seed: int, config: BenchConfig, pattern: str = "direct"):
    rng = Rng(seed)
    gen = config.generator(n_train)
    tr, te = _split(seed, n_train, gen.d, gen.embedded_dim, gen.noise_std, config.test_size)
    x_scale = _rms(tr.x) if config.preprocess != "none" else 1.0
    z = tr.side(side_kind)
    if config.preprocess != "none":
        # increments share the units of x; state channels get unit mean squared norm
        z = z / x_scale if side_kind == "relative" else z / math.sqrt(np.mean(np.sum(z * z, axis=1)))
    kind = "relative" if side_kind == "relative" else "vector"
    if config.preprocess == "whiten" and pattern not in ("pca", "sfa"):
        # whiten what the side objective reads: increments for the transform pattern, x otherwise
        white = _second_moment_whitener(np.diff(tr.x, axis=0) if pattern == "pairwise-transform" else tr.x)
        train_x, test_x = tr.x @ white.T, te.x @ white.T
    else:
        train_x, test_x = tr.x / x_scale, te.x / x_scale
    data = Dataset(train_x, tr.y, z, kind=kind)
    return data, test_x, te.y, rng


def run_cell(side_kind: str, pattern: str, procedure: str, n_train: int, seed: int,
             config: Optional[BenchConfig] = None) -> ResultRecord:
    """Train and evaluate one (side information, pattern, procedure, n, seed) combination.

    Baselines (``logreg``, ``pca``, ``sfa``) use procedure ``"baseline"`` and
    ignore the side channel; their ``side_loss`` is NaN.
    """
    return run_cell_detailed(side_kind, pattern, procedure, n_train, seed, config)[0]


def run_cell_detailed(side_kind: str, pattern: str, procedure: str, n_train: int, seed: int,
                      config: Optional[BenchConfig] = None, trace: Optional[list] = None):
    """Like :func:`run_cell` but also returns the trained ``ModelStack`` (None for baselines).

    ``trace``, if given, receives one ``{"epoch", "main_loss", "side_loss"}`` dict per epoch.
    """
    config = config or BenchConfig()
    _check_cell(side_kind, pattern, procedure)
    if not applicable(side_kind, pattern, config.extra_applicability):
        raise ValueError(f"pattern {pattern!r} is not applicable to {side_kind!r} side information")
    if n_train < 3:
        raise ValueError("n_train must be >= 3")
    start = time.perf_counter()
    data, test_x, test_y, rng = _cell_data(side_kind, n_train, seed, config, pattern)
    nan = math.nan
    stack = None
    try:
        with np.errstate(over="ignore", under="ignore"):
            if pattern in BASELINES:
                acc, main = _run_baseline(pattern, data, test_x, test_y, config, seed)
                side = nan
            else:
                spec = pattern_for(pattern, config)
                stack = _build_stack(pattern, data.x.shape[1], data.z.shape[1], config, rng.fork("init"))
                train(stack, spec, data, config.train_config(procedure, seed), trace)
                acc = float(np.mean(stack.predict(test_x) == test_y))
                main, side = evaluate_losses(stack, spec, data, seed)
        if not math.isfinite(main) or (pattern not in BASELINES and not math.isfinite(side)):
            raise TrainingDiverged("non-finite final loss")
        failed, error = False, ""
    except (TrainingDiverged, FloatingPointError) as exc:
        acc, main, side, failed, error = nan, nan, nan, True, str(exc)
    wall = (time.perf_counter() - start) * 1000.0
    record = ResultRecord(side_kind, pattern, procedure, n_train, seed, acc, main, side, wall, failed, error)
    return record, stack


def _run_baseline(name: str, data: Dataset, test_x, test_y, config: BenchConfig, seed: int):
    tc = config.train_config("simultaneous", seed)
    if name == "logreg":
        tr_f, te_f = data.x, test_x
    else:
        proj = fit_pca(data.x, 1) if name == "pca" else fit_sfa(data.x, 1)
        tr_f, te_f = proj.transform(data.x), proj.transform(test_x)
    fit = fit_logreg_grid(tr_f, data.y, te_f, test_y, config.c_grid, tc, seed, bias=config.psi_bias)
    p = np.clip(sigmoid(fit.head.logit(tr_f)), PROB_CLAMP, 1.0 - PROB_CLAMP)
    main = float(-np.mean(data.y * np.log(p) + (1 - data.y) * np.log(1 - p)))
    return fit.accuracies[fit.best_c], main


def _run_job(job):
    return run_cell(*job)


def run_sweep(cells, n_values, seeds, config: Optional[BenchConfig] = None, workers: int = 1) -> list[ResultRecord]:
    """Run every ``(side_kind, pattern, procedure)`` cell at every n and seed.

    Invalid cells are rejected up front; failed trainings are recorded, not raised.
    Records come back in (cell, n, seed) order whatever the worker count.
    """
    config = config or BenchConfig()
    cells = [tuple(c) for c in cells]
    n_values, seeds = list(n_values), list(seeds)
    if not cells or not n_values or not seeds:
        raise ValueError("sweep needs at least one cell, one n and one seed")
    for side_kind, pattern, procedure in cells:
        _check_cell(side_kind, pattern, procedure)
        if not applicable(side_kind, pattern, config.extra_applicability):
            raise ValueError(f"pattern {pattern!r} is not applicable to {side_kind!r} side information")
    jobs = [(c[0], c[1], c[2], n, s, config) for c in cells for n in n_values for s in seeds]
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))


def aggregate(records: Iterable[ResultRecord]) -> list[dict]:
    """Mean accuracy and its standard error over seeds for each (cell, n); failed runs are skipped."""
    groups: dict[tuple, list[float]] = {}
    for r in records:
        key = (r.side_info, r.pattern, r.procedure, r.n_train)
        groups.setdefault(key, [])
        if not r.failed:
            groups[key].append(r.test_accuracy)
    out = []
    for key, accs in groups.items():
        k = len(accs)
        mean = float(np.mean(accs)) if k else math.nan
        stderr = float(np.std(accs, ddof=1) / math.sqrt(k)) if k > 1 else math.nan
        out.append(dict(zip(AGG_HEADER, [*key, mean, stderr, k])))
    return out


def write_raw_csv(path, records: Iterable[ResultRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RAW_HEADER)
        for r in records:
            w.writerow(r.row())


def read_raw_csv(path) -> list[ResultRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [ResultRecord(r["side_info"], r["pattern"], r["procedure"], int(r["n_train"]), int(r["seed"]),
                         float(r["test_accuracy"]), float(r["main_loss"]), float(r["side_loss"]),
                         float(r["wall_ms"]), r["failed"] == "1") for r in rows]


def write_aggregate_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGG_HEADER)
        for r in rows:
            w.writerow([r["side_info"], r["pattern"], r["procedure"], r["n_train"],
                        repr(float(r["mean_accuracy"])), repr(float(r["stderr"])), r["n_seeds"]])


def read_aggregate_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["n_train"] = int(r["n_train"])
        r["mean_accuracy"] = float(r["mean_accuracy"])
        r["stderr"] = float(r["stderr"])
        r["n_seeds"] = int(r["n_seeds"])
    return rows


def bayes_rate(config: Optional[BenchConfig] = None, seeds: Iterable[int] = range(10),
               T: Optional[int] = None) -> float:
    """Monte-Carlo accuracy of thresholding ``s + N(0, noise_std^2)`` at 0 on test-length trajectories.

    This is the best any classifier can do when its only view of s is the
    direct side channel's noise level.
    """
    config = config or BenchConfig()
    T = config.test_size if T is None else T
    accs = []
    for seed in seeds:
        rng = Rng(seed).fork("bayes")
        s = _walk(rng.fork("latent"), T, 1)[:, 0]
        noisy = s + config.noise_std * rng.fork("noise").standard_normal(T)
        accs.append(np.mean((noisy <= 0) == (s <= 0)))
    return float(np.mean(accs))


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("SIDEINFO_WORKERS", "1")))
    except ValueError:
        return 1


def with_overrides(config: BenchConfig, **kwargs) -> BenchConfig:
    return replace(config, **kwargs)
