"""Deterministic simulation of synchronous data-parallel training.

Every step runs on all nodes and ends at a barrier, so the step's wall
time is the slowest node's compute time. The controller (monitor and
retuner) sees the same per-step reports the live coordinator would.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .control import Controller, StepOutcome
from .monitor import StepReport
from .planner import BatchPlan, DatasetSpec, plan_initial
from .scenario import Scenario
from .speedmodel import speed_at
from .trace import SimTrace, TraceRecorder, make_meta

log = logging.getLogger(__name__)


def shuffle_assignment(dataset: DatasetSpec, plan: BatchPlan, epoch: int, seed: int) -> dict[str, np.ndarray]:
    """Per-node ordered sample ids for one epoch.

    Public ids are permuted across all public portions; each owner's
    private ids stay on the owner. Each node's list is then shuffled.
    """
    rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, epoch, plan.generation])
    public = rng.permutation(np.arange(dataset.public_range().start, dataset.total_samples, dtype=np.int64))
    ranges = dataset.private_ranges()
    out, cursor = {}, 0
    for node_id, share in plan.dataset_shares.items():
        priv = ranges.get(node_id, range(0))
        need = share - len(priv)
        ids = np.concatenate([np.arange(priv.start, priv.stop, dtype=np.int64), public[cursor:cursor + need]])
        cursor += need
        out[node_id] = rng.permutation(ids)
    return out


@dataclass(frozen=True)
class Coverage:
    counts: np.ndarray
    histogram: np.ndarray

    @property
    def never_trained(self) -> float:
        return float(self.histogram[0]) / len(self.counts) if len(self.counts) else 0.0


def coverage_report(trace: SimTrace) -> Coverage:
    """How many epochs trained each sample in a completed step."""
    counts = trace.coverage if trace.coverage is not None else np.zeros(0, dtype=np.int64)
    return Coverage(counts, np.bincount(counts, minlength=1))


class _Cluster:
    """Active per-node models and cached compute times."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.cores_taken = {n.node_id: 0 for n in scenario.nodes}
        self._cache: dict[tuple[str, int, int], tuple[float, float]] = {}

    def apply(self, node_id: str, cores: int) -> None:
        self.cores_taken[node_id] = cores

    def speed(self, node, bs: int) -> tuple[float, float]:
        """(active throughput, capacity fraction) for ``node`` at batch ``bs``."""
        key = (node.node_id, bs, self.cores_taken[node.node_id])
        hit = self._cache.get(key)
        if hit is None:
            nominal = speed_at(self.sc.models[node.node_class], bs)
            active = speed_at(self.sc.degraded_model(node, key[2]), bs)
            hit = (active, active / nominal)
            self._cache[key] = hit
        return hit


def _meta(sc: Scenario) -> dict:
    return make_meta(sc.name, "sim", sc.nodes, sc.models, sc.dataset,
                     {n.node_id: float(n.core_count) for n in sc.nodes}, sc.controller, sc.policy, sc.monitor)


def run(scenario: Scenario) -> SimTrace:
    sc = scenario
    nodes = list(sc.nodes)
    plan = plan_initial(nodes, sc.models, sc.dataset, literal=sc.policy.eq3_literal,
                        privacy_slack=sc.policy.privacy_slack)
    controller = None
    if sc.controller:
        controller = Controller(
            {n.node_id: n.node_class for n in nodes},
            sc.models,
            {n.node_id: float(n.core_count) for n in nodes},
            sc.dataset,
            sc.policy,
            sc.monitor,
        )
    trace = SimTrace(name=sc.name, meta=_meta(sc))
    rec = TraceRecorder(trace)
    cluster = _Cluster(sc)
    noise_rng = np.random.default_rng([sc.seed & 0xFFFFFFFFFFFFFFFF, 0])
    stop_rng = np.random.default_rng([sc.seed & 0xFFFFFFFFFFFFFFFF, 1])
    coverage = np.zeros(sc.dataset.total_samples, dtype=np.int64)
    power = np.array([sc.power_w.get(n.node_class, 0.0) for n in nodes])
    pending = list(sc.events)
    t = 0.0

    for epoch in range(sc.epochs):
        assignment = shuffle_assignment(sc.dataset, plan, epoch, sc.seed)
        epoch_plan = plan
        forced_stop = None
        if sc.force_terminate_rate > 0 and stop_rng.random() < sc.force_terminate_rate:
            forced_stop = int(stop_rng.integers(0, plan.steps_per_epoch))
        completed = 0
        terminated = False
        for step in range(epoch_plan.steps_per_epoch):
            if step == forced_stop:
                terminated = True
                break
            events = {}
            while pending and pending[0].at_time <= t:
                ev = pending.pop(0)
                cluster.apply(ev.node_id, ev.cores_taken)
                events[ev.node_id] = f"cores={ev.cores_taken}"
                log.debug("t=%.1f %s now has %d cores taken", t, ev.node_id, ev.cores_taken)

            compute = np.empty(len(nodes))
            fracs = np.empty(len(nodes))
            for k, n in enumerate(nodes):
                sp, frac = cluster.speed(n, plan.batch_sizes[n.node_id])
                compute[k] = plan.batch_sizes[n.node_id] / sp
                fracs[k] = frac
            if sc.noise > 0:
                compute *= noise_rng.uniform(1.0 - sc.noise, 1.0 + sc.noise, len(nodes))
            wall = float(compute.max())
            reports = [
                StepReport(n.node_id, plan.generation, step, plan.batch_sizes[n.node_id] / float(compute[k]),
                           float(fracs[k] * n.core_count), wall)
                for k, n in enumerate(nodes)
            ]

            outcome = controller.step(plan, reports) if controller else StepOutcome()
            new_plan, tokens = outcome.new_plan, outcome.tokens

            rec.record_step(t, epoch, plan, reports, wall, events, tokens)
            trace.energy_j += float(power.sum()) * wall
            t += wall
            completed += 1
            if new_plan is not None:
                log.info("epoch %d step %d: %s -> generation %d", epoch, step, outcome.kind, new_plan.generation)
                plan = new_plan
                terminated = True
                break

        for node_id, ids in assignment.items():
            n_done = min(len(ids), completed * epoch_plan.batch_sizes[node_id])
            if n_done:
                _kernels.accumulate(coverage, ids[:n_done])
        trace.epochs_run += 1
        trace.epochs_terminated += int(terminated)

    trace.coverage = coverage
    trace.discarded_reports = controller.state.discarded if controller else 0
    return trace
