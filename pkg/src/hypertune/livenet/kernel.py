"""Synthetic per-sample work that stands in for a training step."""
from __future__ import annotations

import bisect
import time
from dataclasses import dataclass, field

import numpy as np

from .. import _kernels
from ..errors import ValidationError

COMPUTE = "compute"
SLEEP = "sleep"


@dataclass(frozen=True)
class SyntheticKernel:
    """Cost model of one step: ``overhead_samples + batch`` units of work.

    ``compute`` burns ``iters_per_sample`` multiply-adds per unit over a
    buffer of ``buffer_bytes``; ``sleep`` waits ``seconds_per_sample`` per
    unit instead, which keeps tests independent of host CPU load.
    """

    kind: str = COMPUTE
    iters_per_sample: int = 20000
    buffer_bytes: int = 1 << 20
    seconds_per_sample: float = 2e-4
    overhead_samples: int = 10

    def __post_init__(self):
        if self.kind not in (COMPUTE, SLEEP):
            raise ValidationError(f"unknown kernel kind {self.kind!r}")
        if self.iters_per_sample < 1 or self.seconds_per_sample <= 0 or self.overhead_samples < 0:
            raise ValidationError("kernel cost parameters must be positive")


@dataclass(frozen=True)
class ThrottleSchedule:
    """Capacity fraction by training-step count: ``[(from_step, capacity), ...]``.

    Emulates an external workload: each step's busy time is followed by
    idle time so the worker gets only ``capacity`` of its normal share.
    """

    changes: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        steps = [s for s, _ in self.changes]
        if steps != sorted(steps):
            raise ValidationError("throttle changes must be sorted by step")
        if any(not 0 < c <= 1 for _, c in self.changes):
            raise ValidationError("throttle capacity must be in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "ThrottleSchedule":
        """``"40:0.5,80:1"`` -> capacity 0.5 from step 40, full from step 80."""
        out = []
        for part in filter(None, (p.strip() for p in text.split(","))):
            try:
                s, c = part.split(":")
                out.append((int(s), float(c)))
            except ValueError as exc:
                raise ValidationError(f"bad throttle entry {part!r}") from exc
        return cls(tuple(out))

    def capacity(self, step_count: int) -> float:
        k = bisect.bisect_right([s for s, _ in self.changes], step_count)
        return 1.0 if k == 0 else self.changes[k - 1][1]


@dataclass
class KernelExecutor:
    """Runs the kernel and records the wall time and CPU share of each step."""

    kernel: SyntheticKernel = field(default_factory=SyntheticKernel)
    core_count: int = 1
    capacity: float = 1.0
    last_cpu: float = 0.0
    last_wall: float = 0.0

    def __post_init__(self):
        n = max(1, self.kernel.buffer_bytes // 8)
        self._buf = np.random.default_rng(0).random(n)

    def _work(self, units: int) -> float:
        """Do ``units`` of work; return the busy seconds spent on it."""
        if self.kernel.kind == SLEEP:
            busy = units * self.kernel.seconds_per_sample
            time.sleep(busy)
            return busy
        c0 = time.thread_time()
        _kernels.burn(self._buf, units, self.kernel.iters_per_sample)
        return time.thread_time() - c0

    def run_step(self, batch_size: int) -> float:
        t0 = time.perf_counter()
        busy = self._work(batch_size + self.kernel.overhead_samples)
        elapsed = time.perf_counter() - t0
        if self.capacity < 1.0:
            time.sleep(elapsed * (1.0 / self.capacity - 1.0))
        wall = time.perf_counter() - t0
        self.last_wall = wall
        self.last_cpu = min(1.0, busy / wall) * self.core_count
        return wall
