"""Trace records shared by the simulator and the live coordinator."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .monitor import StepReport
from .planner import BatchPlan

CSV_COLUMNS = (
    "time_s",
    "epoch",
    "step",
    "generation",
    "node_id",
    "throughput",
    "cluster_throughput",
    "event",
    "decision",
)


@dataclass(frozen=True)
class StepRecord:
    time: float
    epoch: int
    step: int
    generation: int
    wall_time: float
    samples: int
    cluster_throughput: float
    events: tuple[str, ...] = ()
    decision: str = ""


@dataclass
class SimTrace:
    """Per-node rows plus per-step records and run summary."""

    name: str = ""
    rows: list[tuple] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    plans: list[BatchPlan] = field(default_factory=list)
    cpu: list[tuple] = field(default_factory=list)
    coverage: np.ndarray | None = None
    epochs_run: int = 0
    epochs_terminated: int = 0
    samples_processed: int = 0
    energy_j: float = 0.0
    discarded_reports: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def end_time(self) -> float:
        if not self.steps:
            return 0.0
        last = self.steps[-1]
        return last.time + last.wall_time

    def decisions(self) -> list[tuple]:
        """(epoch, step, generation, node_id, token) for every control token."""
        out = []
        for time_s, epoch, step, gen, node, _, _, _, decision in self.rows:
            for tok in decision.split(";") if decision else ():
                if not tok.startswith("PLAN:"):
                    out.append((epoch, step, gen, node, tok))
        return out

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows:
            w.writerow(_fmt(v) for v in row)
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
            Path(str(path) + ".meta.json").write_text(json.dumps(self.meta_json(), sort_keys=True))
        return text

    def meta_json(self) -> dict:
        out = dict(self.meta)
        out["cpu"] = [list(c) for c in self.cpu]
        return out


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


class TraceRecorder:
    """Builds a :class:`SimTrace` step by step."""

    def __init__(self, trace: SimTrace):
        self.trace = trace
        self._announced = -1

    def record_step(
        self,
        time: float,
        epoch: int,
        plan: BatchPlan,
        reports: Sequence[StepReport],
        wall_time: float,
        events: Mapping[str, str] | None = None,
        tokens: Mapping[str, list[str]] | None = None,
    ) -> StepRecord:
        events = events or {}
        tokens = tokens or {}
        samples = plan.total_batch
        cluster = samples / wall_time
        step = reports[0].step_index
        new_plan = plan.generation != self._announced
        if new_plan:
            self._announced = plan.generation
            self.trace.plans.append(plan)
        for r in reports:
            toks = []
            if new_plan:
                toks.append(f"PLAN:{plan.batch_sizes[r.node_id]}")
            toks += tokens.get(r.node_id, [])
            self.trace.rows.append(
                (time, epoch, step, plan.generation, r.node_id, float(r.measured_throughput),
                 float(cluster), events.get(r.node_id, ""), ";".join(toks))
            )
            self.trace.cpu.append((epoch, step, plan.generation, r.node_id, float(r.cpu_utilization)))
        kinds = {t.split(":", 1)[0] for ts in tokens.values() for t in ts}
        summary = next((k for k in ("TERMINATE", "UPSCALE", "FLAG") if k in kinds), "")
        rec = StepRecord(time, epoch, step, plan.generation, wall_time, samples, cluster,
                         tuple(f"{n} {e}" for n, e in events.items()), summary)
        self.trace.steps.append(rec)
        self.trace.samples_processed += samples
        return rec


def make_meta(name, source, nodes, models, dataset, normal_cpu, controller, policy, monitor) -> dict:
    """Everything replay needs to rebuild the controller that produced a trace."""
    return {
        "name": name,
        "source": source,
        "nodes": [[n.node_id, n.node_class, n.core_count, n.is_storage_node, n.owned_private_samples] for n in nodes],
        "models": {c: m.pairs() for c, m in models.items()},
        "dataset_total": dataset.total_samples,
        "normal_cpu": dict(normal_cpu),
        "controller": controller,
        "policy": {
            "mode": policy.mode,
            "clamp_low": policy.clamp_low,
            "clamp_high": policy.clamp_high,
            "eq3_literal": policy.eq3_literal,
            "naive_inverse": policy.naive_inverse,
            "privacy_slack": policy.privacy_slack,
        },
        "monitor": {
            "decline_threshold": monitor.decline_threshold,
            "decline_gate": monitor.decline_gate,
            "hysteresis": monitor.hysteresis,
            "cpu_window": monitor.cpu_window,
            "cpu_hint_steps": monitor.cpu_hint_steps,
        },
    }


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        out = []
        for r in reader:
            out.append({
                "time_s": float(r["time_s"]),
                "epoch": int(r["epoch"]),
                "step": int(r["step"]),
                "generation": int(r["generation"]),
                "node_id": r["node_id"],
                "throughput": float(r["throughput"]),
                "cluster_throughput": float(r["cluster_throughput"]),
                "event": r["event"],
                "decision": r["decision"],
            })
        return out


def read_meta(path: str | Path) -> dict:
    return json.loads(Path(str(path) + ".meta.json").read_text())
