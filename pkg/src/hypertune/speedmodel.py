"""Batch-size -> throughput models built from micro-benchmark sweeps.

A model is a piecewise-linear curve through measured (batch, samples/s)
knots. It never extrapolates: queries outside the probed range raise
:class:`OutOfRange`.
"""
from __future__ import annotations

import bisect
import math
import statistics
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

from .errors import InvalidFactor, NonMonotonic, OutOfRange, ProbeFailure, ValidationError

MONOTONE_TOLERANCE = 0.03
PLATEAU_FRACTION = 0.99


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SpeedPoint:
    batch_size: int
    throughput: float

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.throughput > 0:
            raise ValidationError(f"throughput must be > 0, got {self.throughput}")


@dataclass(frozen=True)
class SpeedModel:
    points: tuple[SpeedPoint, ...]
    node_class: str = "node"

    def __post_init__(self):
        pts = tuple(self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) < 2:
            raise ValidationError("a speed model needs at least 2 distinct batch sizes")
        for a, b in zip(pts, pts[1:]):
            if b.batch_size <= a.batch_size:
                raise ValidationError("batch sizes must be strictly increasing")
            if b.throughput < a.throughput:
                raise NonMonotonic(
                    f"{self.node_class}: throughput drops from {a.throughput} at "
                    f"{a.batch_size} to {b.throughput} at {b.batch_size}"
                )

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[int, float]], node_class: str = "node") -> "SpeedModel":
        return cls(tuple(SpeedPoint(int(b), float(s)) for b, s in pairs), node_class)

    @property
    def batch_sizes(self) -> list[int]:
        return [p.batch_size for p in self.points]

    @property
    def throughputs(self) -> list[float]:
        return [p.throughput for p in self.points]

    @property
    def min_batch(self) -> int:
        return self.points[0].batch_size

    @property
    def max_batch(self) -> int:
        return self.points[-1].batch_size

    @property
    def peak(self) -> float:
        return self.points[-1].throughput

    def pairs(self) -> list[tuple[int, float]]:
        return [(p.batch_size, p.throughput) for p in self.points]


class WorkloadExecutor(Protocol):
    def run_step(self, batch_size: int) -> float:
        """Run one step at ``batch_size`` and return its wall time in seconds."""


def speed_at(model: SpeedModel, batch_size: float) -> float:
    """Interpolated throughput at ``batch_size``; exact at knots."""
    bs = model.batch_sizes
    if batch_size < bs[0] or batch_size > bs[-1]:
        raise OutOfRange(f"batch {batch_size} outside probed range [{bs[0]}, {bs[-1]}]")
    i = bisect.bisect_left(bs, batch_size)
    if bs[i] == batch_size:
        return model.points[i].throughput
    lo, hi = model.points[i - 1], model.points[i]
    w = (batch_size - lo.batch_size) / (hi.batch_size - lo.batch_size)
    return lo.throughput + w * (hi.throughput - lo.throughput)


def step_time(model: SpeedModel, batch_size: float) -> float:
    return batch_size / speed_at(model, batch_size)


def _segment_batch(b_lo, b_hi, s_lo, s_hi, target, literal):
    if literal:
        # weights as printed: the lower knot gets (target - s_lo)/(s_hi - s_lo)
        return b_lo * (target - s_lo) / (s_hi - s_lo) + b_hi * (s_hi - target) / (s_hi - s_lo)
    return b_lo + (b_hi - b_lo) * (target - s_lo) / (s_hi - s_lo)


def batch_for_speed(model: SpeedModel, target_throughput: float, literal: bool = False) -> int:
    """Batch size whose interpolated throughput equals ``target_throughput``.

    On a flat run of knots the smallest batch of the run is returned.
    ``literal`` swaps the interpolation weights to the printed form of the
    weighted-average rule, which maps the lower knot speed to the upper batch.
    """
    sp = model.throughputs
    if target_throughput < sp[0] or target_throughput > sp[-1]:
        raise OutOfRange(
            f"throughput {target_throughput} outside model span [{sp[0]}, {sp[-1]}]"
        )
    i = bisect.bisect_left(sp, target_throughput)
    if sp[i] == target_throughput:
        return model.points[i].batch_size
    lo, hi = model.points[i - 1], model.points[i]
    return round_half_up(
        _segment_batch(lo.batch_size, hi.batch_size, lo.throughput, hi.throughput,
                       target_throughput, literal)
    )


def equalize(model: SpeedModel, target_step_time: float, literal: bool = False) -> float:
    """Real-valued batch whose step time is closest to ``target_step_time``.

    Each segment has throughput ``a*b + c``, so step time ``b/(a*b + c)`` is
    monotone on it and the crossing solves in closed form. The smallest
    feasible crossing wins; without one, the knot with the nearest step time.
    """
    T = target_step_time
    pts = model.points
    for lo, hi in zip(pts, pts[1:]):
        a = (hi.throughput - lo.throughput) / (hi.batch_size - lo.batch_size)
        c = lo.throughput - a * lo.batch_size
        denom = 1.0 - T * a
        if denom == 0.0:
            continue
        b = T * c / denom
        eps = 1e-9 * hi.batch_size
        if lo.batch_size - eps <= b <= hi.batch_size + eps:
            b = min(max(b, lo.batch_size), hi.batch_size)
            if literal and hi.throughput > lo.throughput:
                v = a * b + c
                b = _segment_batch(lo.batch_size, hi.batch_size, lo.throughput,
                                   hi.throughput, v, True)
            return b
    best = min(pts, key=lambda p: (abs(p.batch_size / p.throughput - T), p.batch_size))
    return float(best.batch_size)


def plateau_start(model: SpeedModel, fraction: float = PLATEAU_FRACTION) -> int:
    """Smallest knot whose throughput reaches ``fraction`` of the maximum."""
    limit = fraction * model.peak
    for p in model.points:
        if p.throughput >= limit:
            return p.batch_size
    return model.max_batch  # unreachable: the last knot is the maximum


def has_plateau(model: SpeedModel, fraction: float = PLATEAU_FRACTION) -> bool:
    return plateau_start(model, fraction) != model.max_batch


def degrade(model: SpeedModel, capacity_factor: float) -> SpeedModel:
    if not 0.0 < capacity_factor <= 1.0:
        raise InvalidFactor(f"capacity factor must be in (0, 1], got {capacity_factor}")
    return scale(model, capacity_factor)


def scale(model: SpeedModel, factor: float) -> SpeedModel:
    """Multiply every throughput by ``factor`` (any positive value)."""
    if not factor > 0:
        raise InvalidFactor(f"scale factor must be positive, got {factor}")
    if factor == 1.0:
        return model
    return SpeedModel(
        tuple(SpeedPoint(p.batch_size, p.throughput * factor) for p in model.points),
        model.node_class,
    )


def benchmark_sweep(
    executor: WorkloadExecutor,
    batch_sizes: Sequence[int],
    steps_per_probe: int,
    node_class: str = "node",
) -> SpeedModel:
    """Probe ``executor`` at each batch size and build a model.

    Every batch size gets one warm-up step (discarded) followed by
    ``steps_per_probe`` timed steps; throughput is batch / median time.
    Dips of at most 3% below the running maximum are treated as noise and
    clipped to that maximum.
    """
    batch_sizes = [int(b) for b in batch_sizes]
    if not batch_sizes:
        raise ValidationError("batch_sizes is empty")
    if len(set(batch_sizes)) < 2:
        raise ValidationError("at least 2 distinct batch sizes are required")
    if any(b2 <= b1 for b1, b2 in zip(batch_sizes, batch_sizes[1:])):
        raise ValidationError("batch_sizes must be strictly increasing")
    if batch_sizes[0] < 1:
        raise ValidationError("batch sizes must be positive")
    if steps_per_probe < 1:
        raise ValidationError("steps_per_probe must be >= 1")

    measured = []
    for b in batch_sizes:
        times = []
        for _ in range(steps_per_probe + 1):
            try:
                t = float(executor.run_step(b))
            except Exception as exc:  # executor failures surface uniformly
                raise ProbeFailure(f"probe at batch {b} failed: {exc}") from exc
            if not t > 0 or math.isinf(t):
                raise ProbeFailure(f"probe at batch {b} returned invalid time {t}")
            times.append(t)
        measured.append(b / statistics.median(times[1:]))

    running = measured[0]
    clipped = []
    for b, s in zip(batch_sizes, measured):
        if s < running * (1.0 - MONOTONE_TOLERANCE):
            raise NonMonotonic(
                f"throughput at batch {b} ({s:.4g}) dips more than "
                f"{MONOTONE_TOLERANCE:.0%} below {running:.4g}"
            )
        running = max(running, s)
        clipped.append(running)
    return SpeedModel.from_pairs(zip(batch_sizes, clipped), node_class)


def to_text(model: SpeedModel) -> str:
    lines = [f"speedmodel {model.node_class}"]
    lines += [f"{p.batch_size} {p.throughput!r}" for p in model.points]
    return "\n".join(lines) + "\n"


def from_text(text: str) -> dict[str, SpeedModel]:
    """Parse one or more ``speedmodel`` blocks."""
    models: dict[str, SpeedModel] = {}
    name, pairs = None, []

    def flush():
        if name is not None:
            models[name] = SpeedModel.from_pairs(pairs, name)

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if fields[0] == "speedmodel":
            if len(fields) != 2:
                raise ValidationError(f"line {lineno}: expected 'speedmodel <class>'")
            flush()
            name, pairs = fields[1], []
            continue
        if name is None or len(fields) != 2:
            raise ValidationError(f"line {lineno}: expected '<batch_size> <throughput>'")
        try:
            pairs.append((int(fields[0]), float(fields[1])))
        except ValueError as exc:
            raise ValidationError(f"line {lineno}: {exc}") from exc
    flush()
    if not models:
        raise ValidationError("no speedmodel block found")
    return models
