"""Monte Carlo estimates and the deterministic batch scheduler."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

BATCH = 1024


@dataclass
class MCEstimate:
    """Sample mean with standard error; ``mean`` may be a vector."""

    mean: object
    stderr: object
    n: int
    seed: int = 0
    dtau: float = 0.0
    var: object = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples, seed=0, dtau=0.0, **meta):
        a = np.asarray(samples, dtype=float)
        n = a.shape[0]
        mean = a.mean(axis=0)
        var = a.var(axis=0, ddof=1) if n > 1 else np.zeros_like(mean)
        se = np.sqrt(var / n)
        if a.ndim == 1:
            mean, var, se = float(mean), float(var), float(se)
        return cls(mean, se, n, seed, dtau, var, dict(meta))

    @classmethod
    def exact(cls, value, seed=0, dtau=0.0, n=0, **meta):
        v = np.asarray(value, dtype=float)
        z = np.zeros_like(v)
        if v.ndim == 0:
            v, z = float(v), 0.0
        return cls(v, z, n, seed, dtau, z, dict(meta))

    def merge(self, other: "MCEstimate") -> "MCEstimate":
        """Pool two estimates built from disjoint streams (Chan's update)."""
        n = self.n + other.n
        m1, m2 = np.asarray(self.mean), np.asarray(other.mean)
        d = m2 - m1
        mean = m1 + d * other.n / n
        M2 = np.asarray(self.var) * (self.n - 1) + np.asarray(other.var) * (other.n - 1)
        M2 = M2 + d * d * self.n * other.n / n
        var = M2 / (n - 1)
        se = np.sqrt(var / n)
        if np.ndim(mean) == 0:
            mean, var, se = float(mean), float(var), float(se)
        return MCEstimate(mean, se, n, self.seed, self.dtau, var, dict(self.meta))

    def to_dict(self):
        def conv(v):
            return np.asarray(v).tolist() if v is not None else None

        return {"mean": conv(self.mean), "stderr": conv(self.stderr), "n": int(self.n),
                "seed": int(self.seed), "dtau": float(self.dtau)}

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def pooled_stderr(*ses):
    return float(np.sqrt(sum(float(np.sum(np.square(s))) for s in ses)))


def batches(n, size=BATCH):
    """Fixed partition of path indices; never depends on the worker count."""
    return [range(i, min(i + size, n)) for i in range(0, n, size)]


def run_batches(func, tasks, jobs=1):
    """Apply func to each task, in order. Results are identical for any jobs."""
    tasks = list(tasks)
    if jobs is None or jobs <= 1 or len(tasks) <= 1:
        return [func(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(func, tasks))
