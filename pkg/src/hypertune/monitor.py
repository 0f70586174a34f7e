"""Per-step throughput monitoring with a decline index and hysteresis."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import GenerationMismatch, InsufficientWindow, MissingReport, ValidationError
from .planner import BatchPlan
from .speedmodel import SpeedModel, round_half_up, speed_at

SPEED_WEIGHT = 0.7
PROGRESS_WEIGHT = 0.3


@dataclass(frozen=True)
class StepReport:
    node_id: str
    generation: int
    step_index: int
    measured_throughput: float
    cpu_utilization: float
    wall_time: float


@dataclass(frozen=True)
class MonitorConfig:
    decline_threshold: float = 0.20
    decline_gate: float = 0.05
    hysteresis: int = 5
    cpu_window: int = 10
    cpu_hint_steps: int = 5


@dataclass(frozen=True)
class FlagEvidence:
    node_id: str
    current_speed: float
    cpu_evidence: float
    index: float


@dataclass(frozen=True)
class Continue:
    flagged: tuple[str, ...] = ()

    @property
    def flagged_ids(self) -> tuple[str, ...]:
        return self.flagged


@dataclass(frozen=True)
class TerminateEpochAndRetune:
    node_id: str
    current_speed: float
    cpu_evidence: float
    flagged: tuple[FlagEvidence, ...] = ()

    @property
    def flagged_ids(self) -> tuple[str, ...]:
        return tuple(e.node_id for e in self.flagged)


MonitorDecision = Continue | TerminateEpochAndRetune


def decline_value(reference: float, current: float, step: int, n_steps: int) -> float:
    speed_term = max(0.0, (reference - current) / reference)
    return SPEED_WEIGHT * speed_term + PROGRESS_WEIGHT * (n_steps - step) / n_steps


def decline_index(reference_speed: float, report: StepReport, steps_per_epoch: int) -> float:
    """Weighted speed loss plus remaining-epoch fraction.

    >>> round(decline_index(31.1, StepReport("a", 0, 100, 15.55, 1.0, 1.0), 416), 4)
    0.5779
    """
    return decline_value(reference_speed, report.measured_throughput, report.step_index, steps_per_epoch)


@dataclass
class MonitorState:
    """Coordinator-owned monitoring state; callers serialize ``observe``."""

    models: Mapping[str, SpeedModel]
    node_classes: Mapping[str, str]
    normal_cpu: dict[str, float]
    config: MonitorConfig = field(default_factory=MonitorConfig)
    generation: int = -1
    reference_speed: dict[str, float] = field(default_factory=dict)
    flag_history: dict[str, deque] = field(default_factory=dict)
    cpu_window: dict[str, deque] = field(default_factory=dict)
    speed_window: dict[str, deque] = field(default_factory=dict)
    last_index: dict[str, float] = field(default_factory=dict)
    initial_batch: dict[str, int] = field(default_factory=dict)
    discarded: int = 0

    def rebase(self, plan: BatchPlan) -> None:
        """Adopt ``plan``: new reference speeds, cleared evidence."""
        cfg = self.config
        self.generation = plan.generation
        if not self.initial_batch:
            self.initial_batch = dict(plan.batch_sizes)
        self.reference_speed = {
            i: plan.capacity_of(i) * speed_at(self.models[self.node_classes[i]], bs)
            for i, bs in plan.batch_sizes.items()
        }
        self.flag_history = {i: deque(maxlen=cfg.hysteresis) for i in plan.batch_sizes}
        self.cpu_window = {i: deque(maxlen=cfg.cpu_window) for i in plan.batch_sizes}
        self.speed_window = {i: deque(maxlen=cfg.hysteresis) for i in plan.batch_sizes}
        self.last_index = {}

    def flagged_run(self, node_id: str) -> int:
        n = 0
        for f in reversed(self.flag_history[node_id]):
            if not f:
                break
            n += 1
        return n

    def evidence_speed(self, node_id: str) -> float:
        run = max(1, self.flagged_run(node_id))
        speeds = list(self.speed_window[node_id])[-run:]
        return sum(speeds) / len(speeds)

    def recent_cpu(self, node_id: str, n: int | None = None) -> float:
        n = self.config.cpu_hint_steps if n is None else n
        window = self.cpu_window[node_id]
        if len(window) < n:
            raise InsufficientWindow(f"{node_id}: {len(window)} CPU samples, need {n}")
        tail = list(window)[-n:]
        return sum(tail) / n

    def quiet(self, node_id: str) -> bool:
        """True once the node has a full history window without flags."""
        h = self.flag_history[node_id]
        return len(h) == h.maxlen and not any(h)


def observe(state: MonitorState, reports: Sequence[StepReport], plan: BatchPlan) -> MonitorDecision:
    if state.generation != plan.generation:
        state.rebase(plan)
    live = []
    for r in reports:
        if r.generation < plan.generation:
            state.discarded += 1
        else:
            live.append(r)
    if not live:
        return Continue()
    gens = {r.generation for r in live}
    steps = {r.step_index for r in live}
    if len(gens) > 1 or len(steps) > 1 or plan.generation not in gens:
        raise GenerationMismatch(f"reports span generations {sorted(gens)} / steps {sorted(steps)}")
    by_node = {r.node_id: r for r in live}
    if len(by_node) != len(live):
        raise ValidationError("duplicate report for a node")
    missing = [i for i in plan.batch_sizes if i not in by_node]
    if missing:
        raise MissingReport(f"no report from {missing}")

    cfg = state.config
    n_steps = plan.steps_per_epoch
    flagged = []
    for node_id in plan.batch_sizes:
        r = by_node[node_id]
        ref = state.reference_speed[node_id]
        idx = decline_index(ref, r, n_steps)
        drop = (ref - r.measured_throughput) / ref
        flag = drop >= cfg.decline_gate and idx > cfg.decline_threshold
        state.flag_history[node_id].append(flag)
        state.cpu_window[node_id].append(r.cpu_utilization)
        state.speed_window[node_id].append(r.measured_throughput)
        state.last_index[node_id] = idx
        if flag:
            flagged.append(node_id)

    full = [i for i in flagged if state.flagged_run(i) >= cfg.hysteresis]
    if not full:
        return Continue(tuple(flagged))
    lead = max(full, key=lambda i: (state.last_index[i], -plan.node_ids.index(i)))
    evidence = tuple(
        FlagEvidence(i, state.evidence_speed(i), _cpu_mean(state, i), state.last_index[i])
        for i in flagged
    )
    lead_ev = next(e for e in evidence if e.node_id == lead)
    return TerminateEpochAndRetune(lead, lead_ev.current_speed, lead_ev.cpu_evidence, evidence)


def _cpu_mean(state: MonitorState, node_id: str) -> float:
    window = list(state.cpu_window[node_id])[-state.config.cpu_hint_steps:]
    return sum(window) / len(window)


def cpu_retune_hint(state: MonitorState, node_id: str, current_batch: float) -> int:
    """Batch scaled by recent CPU use over the node's normal CPU use."""
    mean = state.recent_cpu(node_id)
    normal = state.normal_cpu[node_id]
    if not normal > 0:
        raise ValidationError(f"{node_id}: normal CPU must be positive")
    return max(1, round_half_up(current_batch * mean / normal))
