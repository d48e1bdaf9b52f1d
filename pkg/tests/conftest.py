import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from sideinfo.numeric import Rng

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return Rng(1234)


def random_symmetric(rng: Rng, n: int) -> np.ndarray:
    a = rng.standard_normal((n, n))
    return 0.5 * (a + a.T)


# ---------------------------------------------------------------- shared benchmark sweep

SWEEP_N = (100, 200, 400)
SWEEP_SEEDS = tuple(range(10))
PATTERN_PROCEDURES = ("simultaneous", "decoupled")
DIRECT_PATTERNS = ("direct", "multi-task", "multi-view-corr", "pairwise-transform")
EMBEDDED_PATTERNS = ("direct", "multi-task", "multi-view-corr")


def sweep_cells():
    cells = [("direct", p, q) for p in DIRECT_PATTERNS for q in PATTERN_PROCEDURES]
    # baselines ignore the side channel, so one run serves every side kind
    cells += [("direct", b, "baseline") for b in ("logreg", "pca", "sfa")]
    cells += [("embedded", p, q) for p in EMBEDDED_PATTERNS for q in PATTERN_PROCEDURES]
    cells += [("embedded", "multi-view-pred", "simultaneous")]
    cells += [("relative", "pairwise-transform", q) for q in PATTERN_PROCEDURES]
    return cells


class SweepTable:
    """Mean accuracy lookup over the shared sweep."""

    def __init__(self, records):
        from sideinfo.bench import aggregate

        self.records = records
        self.rows = aggregate(records)
        self._mean = {(r["side_info"], r["pattern"], r["procedure"], r["n_train"]): r["mean_accuracy"]
                      for r in self.rows}

    def mean(self, side, pattern, procedure, n):
        if procedure == "baseline":
            side = "direct"
        return self._mean[(side, pattern, procedure, n)]

    def best(self, side, pattern, n):
        """A pattern's accuracy: the better of its procedures."""
        procs = ["simultaneous"] if pattern == "multi-view-pred" else PATTERN_PROCEDURES
        return max(self.mean(side, pattern, q, n) for q in procs)

    def best_baseline(self, n):
        return max(self.mean("direct", b, "baseline", n) for b in ("logreg", "pca", "sfa"))


@pytest.fixture(scope="session")
def sweep():
    import os

    from sideinfo.bench import BenchConfig, default_workers, read_raw_csv, run_sweep, write_raw_csv

    # optional raw CSV cache, handy when iterating on the ordering tests
    cache = os.environ.get("SIDEINFO_SWEEP_CACHE")
    if cache and os.path.exists(cache):
        return SweepTable(read_raw_csv(cache))
    records = run_sweep(sweep_cells(), SWEEP_N, SWEEP_SEEDS, BenchConfig(), workers=default_workers())
    if cache:
        write_raw_csv(cache, records)
    return SweepTable(records)
