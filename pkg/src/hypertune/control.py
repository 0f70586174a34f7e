"""One control step: monitor the reports, retune or upscale when due.

Shared by the simulator, the live coordinator and trace replay so the
decision logic is identical across execution modes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .monitor import MonitorConfig, MonitorState, StepReport, TerminateEpochAndRetune, observe
from .planner import BatchPlan, DatasetSpec
from .retuner import RetunePolicy, apply_upscale, retune, upscale_check
from .speedmodel import SpeedModel


@dataclass
class StepOutcome:
    tokens: dict[str, list[str]] = field(default_factory=dict)
    new_plan: BatchPlan | None = None
    kind: str = ""


class Controller:
    def __init__(
        self,
        node_classes: Mapping[str, str],
        models: Mapping[str, SpeedModel],
        normal_cpu: Mapping[str, float],
        dataset: DatasetSpec,
        policy: RetunePolicy,
        config: MonitorConfig,
    ):
        self.models = models
        self.dataset = dataset
        self.policy = policy
        self.state = MonitorState(models, dict(node_classes), dict(normal_cpu), config)

    def step(self, plan: BatchPlan, reports: Sequence[StepReport]) -> StepOutcome:
        out = StepOutcome()
        decision = observe(self.state, reports, plan)
        for i in decision.flagged_ids:
            out.tokens.setdefault(i, []).append("FLAG")
        if isinstance(decision, TerminateEpochAndRetune):
            out.tokens[decision.node_id].append("TERMINATE")
            out.new_plan = retune(plan, decision, self.models, self.state, self.policy, self.dataset)
            out.kind = "RETUNE"
        else:
            proposal = upscale_check(plan, self.state, self.policy)
            if proposal:
                out.new_plan = apply_upscale(plan, proposal, self.state, self.models, self.policy, self.dataset)
                out.kind = "UPSCALE"
        if out.new_plan is not None:
            for i, old in plan.batch_sizes.items():
                new = out.new_plan.batch_sizes[i]
                if new != old:
                    out.tokens.setdefault(i, []).append(f"{out.kind}:{old}->{new}")
        return out
