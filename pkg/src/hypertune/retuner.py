"""Batch-size retuning after the monitor terminates an epoch."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

from .errors import NoEvidence, ValidationError
from .monitor import MonitorState, TerminateEpochAndRetune, cpu_retune_hint
from .planner import BatchPlan, DatasetSpec, replan
from .speedmodel import SpeedModel, batch_for_speed, equalize, round_half_up, scale, speed_at

SPEED = "speed"
CPU = "cpu"
UPSCALE_CPU_FRACTION = 0.98


@dataclass(frozen=True)
class RetunePolicy:
    mode: str = SPEED
    clamp_low: float = 0.5
    clamp_high: float = 1.5
    eq3_literal: bool = False
    naive_inverse: bool = False
    privacy_slack: int = 0

    def __post_init__(self):
        if self.mode not in (SPEED, CPU):
            raise ValidationError(f"unknown retune mode {self.mode!r}")
        if not 0 < self.clamp_low <= 1 <= self.clamp_high:
            raise ValidationError("need 0 < clamp_low <= 1 <= clamp_high")


def clamp_batch(batch: float, initial: int, policy: RetunePolicy, model: SpeedModel) -> int:
    lo = max(math.ceil(policy.clamp_low * initial - 1e-9), model.min_batch, 1)
    hi = min(math.floor(policy.clamp_high * initial + 1e-9), model.max_batch)
    return int(min(max(round_half_up(batch), lo), hi))


def _step_times(plan: BatchPlan, state: MonitorState, models: Mapping[str, SpeedModel], nodes) -> dict[str, float]:
    out = {}
    for i in nodes:
        bs = plan.batch_sizes[i]
        out[i] = bs / (plan.capacity_of(i) * speed_at(models[state.node_classes[i]], bs))
    return out


def retune(
    plan: BatchPlan,
    decision: TerminateEpochAndRetune,
    models: Mapping[str, SpeedModel],
    state: MonitorState,
    policy: RetunePolicy,
    dataset: DatasetSpec,
) -> BatchPlan:
    """New plan with flagged nodes resized and everything else untouched."""
    if decision is None or not decision.flagged:
        raise NoEvidence("termination decision carries no flagged node")
    initial = state.initial_batch
    flagged = {e.node_id: e for e in decision.flagged}
    unflagged = [i for i in plan.batch_sizes if i not in flagged]
    if unflagged:
        T = max(_step_times(plan, state, models, unflagged).values())
    else:
        T = plan.predicted_step_time

    new_bs = dict(plan.batch_sizes)
    capacity = dict(plan.capacity)
    for node_id, ev in flagged.items():
        model = models[state.node_classes[node_id]]
        old = plan.batch_sizes[node_id]
        if policy.mode == CPU:
            cap_old = plan.capacity_of(node_id)
            target = cpu_retune_hint(state, node_id, old / cap_old)
            alpha = min(1.0, state.recent_cpu(node_id) / state.normal_cpu[node_id])
        else:
            if ev.current_speed >= state.reference_speed[node_id]:
                continue
            alpha = min(1.0, ev.current_speed / speed_at(model, old))
            if policy.naive_inverse:
                v = min(max(ev.current_speed, model.throughputs[0]), model.peak)
                target = batch_for_speed(model, v, policy.eq3_literal)
            else:
                target = equalize(scale(model, alpha), T, policy.eq3_literal)
        new_bs[node_id] = clamp_batch(target, initial[node_id], policy, model)
        capacity[node_id] = alpha

    predicted = max(
        new_bs[i] / (capacity.get(i, 1.0) * speed_at(models[state.node_classes[i]], new_bs[i]))
        for i in new_bs
    )
    return replan(plan, new_bs, dataset, capacity=capacity, predicted_step_time=predicted,
                  privacy_slack=policy.privacy_slack)


def upscale_check(plan: BatchPlan, state: MonitorState, policy: RetunePolicy) -> dict[str, int] | None:
    """Propose growing downscaled nodes whose CPU share is back to normal."""
    if policy.mode != CPU:
        return None
    proposal = {}
    for node_id, bs in plan.batch_sizes.items():
        initial = state.initial_batch[node_id]
        if bs >= initial or not state.quiet(node_id):
            continue
        if len(state.cpu_window[node_id]) < state.config.cpu_hint_steps:
            continue
        normal = state.normal_cpu[node_id]
        if state.recent_cpu(node_id) < UPSCALE_CPU_FRACTION * normal:
            continue
        hint = cpu_retune_hint(state, node_id, bs / plan.capacity_of(node_id))
        if hint >= UPSCALE_CPU_FRACTION * initial:
            hint = initial
        target = min(initial, hint)
        if target > bs:
            proposal[node_id] = target
    return proposal or None


def apply_upscale(
    plan: BatchPlan,
    proposal: Mapping[str, int],
    state: MonitorState,
    models: Mapping[str, SpeedModel],
    policy: RetunePolicy,
    dataset: DatasetSpec,
) -> BatchPlan:
    new_bs = dict(plan.batch_sizes)
    capacity = dict(plan.capacity)
    for node_id, bs in proposal.items():
        new_bs[node_id] = bs
        capacity[node_id] = min(1.0, state.recent_cpu(node_id) / state.normal_cpu[node_id])
    predicted = max(
        new_bs[i] / (capacity.get(i, 1.0) * speed_at(models[state.node_classes[i]], new_bs[i]))
        for i in new_bs
    )
    return replan(plan, new_bs, dataset, capacity=capacity, predicted_step_time=predicted,
                  privacy_slack=policy.privacy_slack)
