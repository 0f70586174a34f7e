"""Offline re-execution of a recorded trace through the controller.

The recorded per-node throughputs (CSV) and CPU figures (meta sidecar)
are fed, step by step, into a freshly built monitor and retuner. Since
the control logic is shared between execution modes, the replayed
decisions must match the recorded ones exactly.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import groupby
from pathlib import Path

from .control import Controller
from .errors import EmptyTrace, ValidationError
from .monitor import MonitorConfig, StepReport
from .planner import BatchPlan, DatasetSpec, NodeProfile, plan_initial
from .retuner import RetunePolicy
from .speedmodel import SpeedModel
from .trace import read_csv, read_meta

Decision = tuple  # (epoch, step, generation, node_id, token)


@dataclass(frozen=True)
class ReplayResult:
    recorded: list[Decision]
    replayed: list[Decision]

    @property
    def agree(self) -> bool:
        return self.recorded == self.replayed

    def first_difference(self) -> int | None:
        for k, (a, b) in enumerate(zip(self.recorded, self.replayed)):
            if a != b:
                return k
        if len(self.recorded) != len(self.replayed):
            return min(len(self.recorded), len(self.replayed))
        return None


def _recorded(rows: list[dict]) -> list[Decision]:
    out = []
    for r in rows:
        for tok in r["decision"].split(";") if r["decision"] else ():
            if not tok.startswith("PLAN:"):
                out.append((r["epoch"], r["step"], r["generation"], r["node_id"], tok))
    return out


def replay_rows(rows: list[dict], meta: dict) -> ReplayResult:
    """Replay decoded CSV rows against the settings stored in ``meta``."""
    if not rows:
        raise EmptyTrace("trace has no rows")
    nodes = [NodeProfile(i, c, int(k), bool(s), int(p)) for i, c, k, s, p in meta["nodes"]]
    models = {c: SpeedModel.from_pairs(pts, c) for c, pts in meta["models"].items()}
    dataset = DatasetSpec.for_nodes(int(meta["dataset_total"]), nodes)
    policy = RetunePolicy(**meta["policy"])
    monitor = MonitorConfig(**meta["monitor"])
    cpu = {(e, s, g, n): u for e, s, g, n, u in meta.get("cpu", [])}

    recorded = _recorded(rows)
    if not meta.get("controller", True):
        return ReplayResult(recorded, [])

    plan: BatchPlan = plan_initial(nodes, models, dataset, literal=policy.eq3_literal,
                                   privacy_slack=policy.privacy_slack)
    controller = Controller({n.node_id: n.node_class for n in nodes}, models,
                            {k: float(v) for k, v in meta["normal_cpu"].items()}, dataset, policy, monitor)
    replayed: list[Decision] = []
    for (epoch, step, gen), group in groupby(rows, key=lambda r: (r["epoch"], r["step"], r["generation"])):
        group = list(group)
        if gen != plan.generation:
            raise ValidationError(
                f"epoch {epoch} step {step}: trace runs generation {gen}, replay is at {plan.generation}"
            )
        wall = plan.total_batch / group[0]["cluster_throughput"]
        reports = [
            StepReport(r["node_id"], gen, step, r["throughput"], cpu.get((epoch, step, gen, r["node_id"]), 0.0), wall)
            for r in group
        ]
        outcome = controller.step(plan, reports)
        for r in group:
            for tok in outcome.tokens.get(r["node_id"], []):
                replayed.append((epoch, step, gen, r["node_id"], tok))
        if outcome.new_plan is not None:
            plan = outcome.new_plan
    return ReplayResult(recorded, replayed)


def replay_file(path: str | Path) -> ReplayResult:
    """Replay ``path`` (trace CSV) using its ``.meta.json`` sidecar."""
    path = Path(path)
    try:
        rows = read_csv(path)
        meta = read_meta(path)
    except OSError as exc:
        raise ValidationError(f"cannot read trace {path}: {exc.strerror or exc}") from exc
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    return replay_rows(rows, meta)
