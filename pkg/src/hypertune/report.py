"""Phase segmentation and run summaries for traces."""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import EmptyTrace
from .scenario import Scenario
from .trace import SimTrace

UNTUNED = "untuned"
SINGLE = "single"


@dataclass(frozen=True)
class Phase:
    label: str
    start: float
    duration: float
    steps: int
    samples: int

    @property
    def throughput(self) -> float:
        """Samples over wall time, i.e. the time-weighted mean cluster throughput."""
        return self.samples / self.duration


@dataclass(frozen=True)
class RetuneEvent:
    time: float
    epoch: int
    step: int
    node_id: str
    old_batch: int
    new_batch: int
    kind: str


@dataclass
class RunReport:
    scenario: str
    phases: list[Phase]
    ratios: dict[str, float] = field(default_factory=dict)
    retunes: list[RetuneEvent] = field(default_factory=list)
    coverage: dict[str, float] = field(default_factory=dict)

    def format(self) -> str:
        lines = [f"scenario {self.scenario}", "", f"{'phase':<28}{'img/s':>10}{'duration_s':>12}{'steps':>8}"]
        for p in self.phases:
            lines.append(f"{p.label:<28}{p.throughput:>10.2f}{p.duration:>12.1f}{p.steps:>8d}")
        if self.retunes:
            lines.append("")
            for r in self.retunes:
                lines.append(f"{r.kind.lower():<8} t={r.time:.1f} epoch {r.epoch} step {r.step}: "
                             f"{r.node_id} {r.old_batch} -> {r.new_batch}")
        if self.ratios:
            lines.append("")
            for k, v in self.ratios.items():
                lines.append(f"{k:<24}{v:.3f}x")
        if self.coverage:
            lines.append("")
            lines.append("coverage " + " ".join(f"{k}={v:g}" for k, v in self.coverage.items()))
        return "\n".join(lines) + "\n"


def phases(trace: SimTrace) -> list[Phase]:
    """Split the trace at workload events and plan changes."""
    out: list[Phase] = []
    label, start, dur, steps, samples = None, 0.0, 0.0, 0, 0
    gen = None
    for rec in trace.steps:
        new_label = None
        if rec.events:
            new_label = "event:" + ",".join(rec.events)
        elif gen is not None and rec.generation != gen:
            kind = "upscale" if _is_upscale(trace, gen) else "retune"
            new_label = f"{kind}:g{rec.generation}"
        elif label is None:
            new_label = "normal"
        if new_label is not None:
            if label is not None:
                out.append(Phase(label, start, dur, steps, samples))
            label, start, dur, steps, samples = new_label, rec.time, 0.0, 0, 0
        gen = rec.generation
        dur += rec.wall_time
        steps += 1
        samples += rec.samples
    if label is not None:
        out.append(Phase(label, start, dur, steps, samples))
    return out


def _is_upscale(trace: SimTrace, generation: int) -> bool:
    """True if the plan after ``generation`` came from an upscale decision."""
    for rec in reversed(trace.steps):
        if rec.generation == generation:
            return rec.decision == "UPSCALE"
    return False


def retune_events(trace: SimTrace) -> list[RetuneEvent]:
    times = {(s.epoch, s.step, s.generation): s.time for s in trace.steps}
    out = []
    for epoch, step, gen, node, tok in trace.decisions():
        kind, _, change = tok.partition(":")
        if kind not in ("RETUNE", "UPSCALE"):
            continue
        old, new = change.split("->")
        out.append(RetuneEvent(times.get((epoch, step, gen), 0.0), epoch, step, node, int(old), int(new), kind))
    return out


def emit_report(trace: SimTrace, scenario: Scenario | None = None,
                baselines: dict[str, SimTrace] | None = None) -> RunReport:
    """Summarize ``trace``; ratios need baseline traces keyed "untuned"/"single"."""
    if not trace.steps:
        raise EmptyTrace(f"trace {trace.name!r} has no steps")
    baselines = baselines or {}
    ph = phases(trace)
    retunes = retune_events(trace)
    ratios = {}
    if len(ph) > 1:
        untuned = baselines.get(UNTUNED)
        if untuned is not None and untuned.steps and any(r.kind == "RETUNE" for r in retunes):
            ratios["tuned/untuned"] = ph[-1].throughput / phases(untuned)[-1].throughput
        single = baselines.get(SINGLE)
        if single is not None and single.steps:
            ratios["distributed/single"] = ph[0].throughput / phases(single)[0].throughput
    cov = {}
    if trace.coverage is not None and len(trace.coverage):
        counts = trace.coverage
        cov = {
            "never_trained": float((counts == 0).mean()),
            "min": float(counts.min()),
            "max": float(counts.max()),
            "mean": float(counts.mean()),
        }
    name = scenario.name if scenario is not None else trace.name
    return RunReport(name, ph, ratios, retunes, cov)


def baseline_traces(scenario: Scenario) -> dict[str, SimTrace]:
    """Controller-off and single-node runs of ``scenario`` for the report ratios."""
    from . import simengine

    out = {}
    if scenario.controller:
        out[UNTUNED] = simengine.run(scenario.with_controller(False))
    if scenario.single_node is not None and len(scenario.nodes) > 1:
        out[SINGLE] = simengine.run(scenario.single_node_variant())
    return out
