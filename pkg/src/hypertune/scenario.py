"""Scenario description and its INI-style file format.

Sections::

    [scenario]     name, epochs, seed, noise, single_node, force_terminate_rate
    [nodes]        <id> = <class> <cores> [storage] [private=<n>]
                   <prefix>*<count> = ...   expands to <prefix>00..<prefix>NN
    [models]       <class> = <bs>:<throughput> ...   or   <class> = @<speedmodel file>
    [degradation]  <class>:<cores_taken> = factor <f>   or   table <bs>:<throughput> ...
    [dataset]      total = <n>
    [events]       <label> = <time_s> <node_id> <cores_taken>
    [controller]   enabled, mode, clamp_low, clamp_high, eq3_literal, naive_inverse,
                   decline_threshold, decline_gate, hysteresis, cpu_window, privacy_slack
    [energy]       <class> = <watts>     (optional abstract energy proxy)
"""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Union

from .errors import ScenarioError, ValidationError
from .monitor import MonitorConfig
from .planner import DatasetSpec, NodeProfile
from .retuner import RetunePolicy
from .speedmodel import SpeedModel, degrade, from_text

Degradation = Union[SpeedModel, float]


@dataclass(frozen=True)
class WorkloadEvent:
    at_time: float
    node_id: str
    cores_taken: int


@dataclass(frozen=True)
class Scenario:
    nodes: tuple[NodeProfile, ...]
    models: Mapping[str, SpeedModel]
    dataset: DatasetSpec
    degradation: Mapping[tuple[str, int], Degradation] = field(default_factory=dict)
    events: tuple[WorkloadEvent, ...] = ()
    epochs: int = 1
    policy: RetunePolicy = field(default_factory=RetunePolicy)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    controller: bool = True
    seed: int = 0
    noise: float = 0.01
    force_terminate_rate: float = 0.0
    name: str = "scenario"
    single_node: str | None = None
    power_w: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        validate(self)

    def node(self, node_id: str) -> NodeProfile:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise ScenarioError(f"unknown node {node_id!r}")

    def degraded_model(self, node: NodeProfile, cores_taken: int) -> SpeedModel:
        base = self.models[node.node_class]
        if cores_taken == 0:
            return base
        d = self.degradation[(node.node_class, cores_taken)]
        if isinstance(d, SpeedModel):
            return d
        return degrade(base, d)

    def with_controller(self, enabled: bool) -> "Scenario":
        return replace(self, controller=enabled)

    def single_node_variant(self) -> "Scenario":
        """The ``single_node`` host training alone on the whole (public) dataset."""
        if self.single_node is None:
            raise ScenarioError("scenario has no single_node reference")
        host = self.node(self.single_node)
        host = replace(host, owned_private_samples=0)
        return replace(
            self,
            nodes=(host,),
            dataset=DatasetSpec(self.dataset.total_samples),
            events=(),
            name=f"{self.name}-single",
            single_node=None,
        )


def validate(s: Scenario) -> None:
    ids = [n.node_id for n in s.nodes]
    if not ids:
        raise ScenarioError("scenario has no nodes")
    if len(set(ids)) != len(ids):
        raise ScenarioError("duplicate node ids")
    for n in s.nodes:
        if n.node_class not in s.models:
            raise ScenarioError(f"node {n.node_id}: no model for class {n.node_class!r}")
    if s.epochs < 1:
        raise ScenarioError("epochs must be >= 1")
    if not 0 <= s.noise < 1:
        raise ScenarioError("noise must be in [0, 1)")
    if not 0 <= s.force_terminate_rate <= 1:
        raise ScenarioError("force_terminate_rate must be in [0, 1]")
    times = [e.at_time for e in s.events]
    if times != sorted(times):
        raise ScenarioError("events must be sorted by time")
    by_id = {n.node_id: n for n in s.nodes}
    for e in s.events:
        node = by_id.get(e.node_id)
        if node is None:
            raise ScenarioError(f"event targets unknown node {e.node_id!r}")
        if not 0 <= e.cores_taken <= node.core_count:
            raise ScenarioError(f"event takes {e.cores_taken} of {node.core_count} cores on {e.node_id}")
        if e.cores_taken and (node.node_class, e.cores_taken) not in s.degradation:
            raise ScenarioError(f"no degradation for ({node.node_class}, {e.cores_taken} cores)")
    for (cls, cores), d in s.degradation.items():
        if cls not in s.models:
            raise ScenarioError(f"degradation for unknown class {cls!r}")
        if isinstance(d, SpeedModel):
            if d.batch_sizes != s.models[cls].batch_sizes:
                raise ScenarioError(f"degraded table {cls}:{cores} must use the nominal knots")
        elif not 0 < d <= 1:
            raise ScenarioError(f"degradation factor {cls}:{cores} must be in (0, 1]")
    private = dict(s.dataset.private_samples)
    for n in s.nodes:
        if private.get(n.node_id, 0) != n.owned_private_samples:
            raise ScenarioError(f"dataset private counts disagree with node {n.node_id}")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ScenarioError(f"not a boolean: {text!r}")


def _pairs(text: str, where: str) -> list[tuple[int, float]]:
    out = []
    for tok in text.split():
        try:
            b, s = tok.split(":")
            out.append((int(b), float(s)))
        except ValueError as exc:
            raise ScenarioError(f"{where}: bad knot {tok!r}") from exc
    return out


def _expand(key: str) -> list[str]:
    if "*" not in key:
        return [key]
    prefix, count = key.split("*", 1)
    n = int(count)
    width = len(str(n - 1))
    return [f"{prefix}{k:0{width}d}" for k in range(n)]


def controller_settings(cp: configparser.ConfigParser) -> tuple[bool, RetunePolicy, MonitorConfig]:
    """(enabled, policy, monitor thresholds) from an optional [controller] section."""
    ctl = cp["controller"] if cp.has_section("controller") else {}
    policy = RetunePolicy(
        mode=ctl.get("mode", "speed"),
        clamp_low=float(ctl.get("clamp_low", 0.5)),
        clamp_high=float(ctl.get("clamp_high", 1.5)),
        eq3_literal=_bool(ctl.get("eq3_literal", "false")),
        naive_inverse=_bool(ctl.get("naive_inverse", "false")),
        privacy_slack=int(ctl.get("privacy_slack", 0)),
    )
    monitor = MonitorConfig(
        decline_threshold=float(ctl.get("decline_threshold", 0.2)),
        decline_gate=float(ctl.get("decline_gate", 0.05)),
        hysteresis=int(ctl.get("hysteresis", 5)),
        cpu_window=int(ctl.get("cpu_window", 10)),
    )
    return _bool(ctl.get("enabled", "true")), policy, monitor


def read_config(text: str) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(delimiters=("=",), inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ScenarioError(str(exc)) from exc
    return cp


def parse(text: str, base_dir: Path | None = None) -> Scenario:
    cp = read_config(text)
    for sec in ("nodes", "models", "dataset"):
        if not cp.has_section(sec):
            raise ScenarioError(f"missing [{sec}] section")
    base_dir = base_dir or Path(".")

    try:
        return _build(cp, base_dir)
    except ScenarioError:
        raise
    except (ValueError, KeyError) as exc:
        raise ScenarioError(str(exc)) from exc


def _build(cp, base_dir: Path) -> Scenario:
    meta = cp["scenario"] if cp.has_section("scenario") else {}

    nodes = []
    for key, value in cp["nodes"].items():
        fields = value.split()
        if len(fields) < 2:
            raise ScenarioError(f"node {key}: expected '<class> <cores> ...'")
        cls, cores = fields[0], int(fields[1])
        storage, private = False, 0
        for f in fields[2:]:
            if f == "storage":
                storage = True
            elif f.startswith("private="):
                private = int(f.split("=", 1)[1])
            else:
                raise ScenarioError(f"node {key}: unknown attribute {f!r}")
        for node_id in _expand(key):
            nodes.append(NodeProfile(node_id, cls, cores, storage, private))

    models: dict[str, SpeedModel] = {}
    for cls, value in cp["models"].items():
        value = value.strip()
        if value.startswith("@"):
            path = base_dir / value[1:]
            try:
                loaded = from_text(path.read_text())
            except OSError as exc:
                raise ScenarioError(f"model file {path}: {exc}") from exc
            if cls not in loaded:
                raise ScenarioError(f"{path} has no speedmodel {cls}")
            models[cls] = loaded[cls]
        else:
            models[cls] = SpeedModel.from_pairs(_pairs(value, f"model {cls}"), cls)

    degradation: dict[tuple[str, int], Degradation] = {}
    if cp.has_section("degradation"):
        for key, value in cp["degradation"].items():
            cls, cores = key.rsplit(":", 1)
            kind, _, rest = value.strip().partition(" ")
            if kind == "factor":
                degradation[(cls, int(cores))] = float(rest)
            elif kind == "table":
                degradation[(cls, int(cores))] = SpeedModel.from_pairs(_pairs(rest, f"degradation {key}"), cls)
            else:
                raise ScenarioError(f"degradation {key}: expected 'factor' or 'table'")

    ds = cp["dataset"]
    dataset = DatasetSpec(int(ds["total"]), {n.node_id: n.owned_private_samples for n in nodes})

    events = []
    if cp.has_section("events"):
        for label, value in cp["events"].items():
            f = value.split()
            if len(f) != 3:
                raise ScenarioError(f"event {label}: expected '<time> <node> <cores>'")
            events.append(WorkloadEvent(float(f[0]), f[1], int(f[2])))
    events.sort(key=lambda e: e.at_time)

    enabled, policy, monitor = controller_settings(cp)
    power = {}
    if cp.has_section("energy"):
        power = {k: float(v) for k, v in cp["energy"].items()}

    single = meta.get("single_node") or None
    try:
        return Scenario(
            nodes=tuple(nodes),
            models=models,
            dataset=dataset,
            degradation=degradation,
            events=tuple(events),
            epochs=int(meta.get("epochs", 1)),
            policy=policy,
            monitor=monitor,
            controller=enabled,
            seed=int(meta.get("seed", 0)),
            noise=float(meta.get("noise", 0.01)),
            force_terminate_rate=float(meta.get("force_terminate_rate", 0.0)),
            name=meta.get("name", "scenario"),
            single_node=single,
            power_w=power,
        )
    except ValidationError as exc:
        raise ScenarioError(str(exc)) from exc


def load(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc.strerror or exc}") from exc
    return parse(text, path.parent)
