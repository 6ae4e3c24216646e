"""Thread-pool dispatch of independent rollouts.

The compiled closed-loop kernel releases the GIL, so plain threads give real
parallelism. Every job carries its own seed derived from a stable hash of
``(campaign_seed, k, j, kind)``; results are therefore independent of how many
workers run them or in which order they finish.
"""

from __future__ import annotations

import logging
import os
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

log = logging.getLogger(__name__)

_MASK = (1 << 64) - 1
WORKERS_ENV = "TWINTUNE_WORKERS"


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def derive_seed(campaign_seed: int, k: int, j: int, kind: str) -> int:
    """Stable 63-bit seed for one job; identical across runs, platforms and worker counts."""
    h = _splitmix64(int(campaign_seed) & _MASK)
    for part in (int(k) & _MASK, int(j) & _MASK, zlib.crc32(kind.encode())):
        h = _splitmix64(h ^ part)
    return h >> 1


def default_workers() -> int:
    env = os.environ.get(WORKERS_ENV)
    if env:
        n = int(env)
        if n < 1:
            raise ValueError(f"{WORKERS_ENV} must be >= 1")
        return n
    return max(1, os.cpu_count() or 1)


@dataclass(frozen=True)
class RolloutJob:
    """One closed-loop rollout: ``(k, j, kind)`` identifies it within a campaign."""

    k: int
    j: int
    kind: str
    theta: np.ndarray
    plant: Any
    path: Any
    config: Any

    @property
    def job_id(self) -> tuple:
        return (self.k, self.j, self.kind)

    def run(self):
        from .oracle import run_oracle

        return run_oracle(self.theta, self.plant, self.path, self.config)


def _failure(message: str):
    from .oracle import PerformanceRecord

    return PerformanceRecord.failure(message)


def _guarded(job, runner: Callable | None):
    try:
        return runner(job) if runner is not None else job.run()
    except Exception as exc:  # a broken job becomes data, never aborts the batch
        log.warning("job %s failed: %r", getattr(job, "job_id", "?"), exc)
        return _failure(f"{type(exc).__name__}: {exc}")


def execute_batch(jobs, worker_count: int | None = None, runner: Callable | None = None) -> list:
    """Run every job and return results in the order of ``jobs``.

    ``runner(job)`` overrides the default ``job.run()``.
    """
    jobs = list(jobs)
    ids = [getattr(j, "job_id", i) for i, j in enumerate(jobs)]
    if len(set(ids)) != len(ids):
        raise ValueError("job ids must be unique within a batch")
    workers = default_workers() if worker_count is None else int(worker_count)
    if workers < 1:
        raise ValueError("worker_count must be >= 1")
    if not jobs:
        return []
    if workers == 1 or len(jobs) == 1:
        return [_guarded(j, runner) for j in jobs]
    with ThreadPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(lambda j: _guarded(j, runner), jobs))
