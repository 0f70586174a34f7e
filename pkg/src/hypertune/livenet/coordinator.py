"""Coordinator side of the live protocol.

One reader thread per worker connection pushes decoded frames onto a
single queue; the decision loop below is the only consumer and the only
code that touches monitor state.
"""
from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from ..control import Controller, StepOutcome
from ..errors import HypertuneError, ProtocolError, ScenarioError, StepTimeout, ValidationError, WorkerLost
from ..monitor import MonitorConfig, StepReport
from ..planner import BatchPlan, DatasetSpec, NodeProfile, plan_initial
from ..retuner import RetunePolicy
from ..scenario import controller_settings, read_config
from ..speedmodel import SpeedModel
from ..trace import SimTrace, TraceRecorder, make_meta
from . import wire
from .kernel import SyntheticKernel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LiveConfig:
    dataset: DatasetSpec
    epochs: int = 1
    name: str = "live"
    bench_batch_sizes: tuple[int, ...] = (8, 16, 32, 64)
    steps_per_probe: int = 3
    controller: bool = True
    policy: RetunePolicy = field(default_factory=RetunePolicy)
    monitor: MonitorConfig = field(default_factory=MonitorConfig)
    timeout_factor: float = 10.0
    min_timeout: float = 2.0
    join_timeout: float = 30.0
    bench_timeout: float = 300.0

    @classmethod
    def from_file(cls, path: str | Path) -> "LiveConfig":
        """Read [scenario], [dataset], [controller] and an optional [live] section.

        Node and model sections are ignored: workers join at run time and
        their speed models come from the benchmark.
        """
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ScenarioError(f"cannot read scenario {path}: {exc.strerror or exc}") from exc
        cp = read_config(text)
        if not cp.has_section("dataset"):
            raise ScenarioError(f"{path}: missing [dataset] section")
        try:
            meta = cp["scenario"] if cp.has_section("scenario") else {}
            live = cp["live"] if cp.has_section("live") else {}
            enabled, policy, monitor = controller_settings(cp)
            kwargs = {}
            if "batch_sizes" in live:
                kwargs["bench_batch_sizes"] = tuple(int(b) for b in live["batch_sizes"].replace(",", " ").split())
            for key, conv in (("steps_per_probe", int), ("timeout_factor", float), ("min_timeout", float),
                              ("join_timeout", float)):
                if key in live:
                    kwargs[key] = conv(live[key])
            return cls(
                dataset=DatasetSpec(int(cp["dataset"]["total"])),
                epochs=int(meta.get("epochs", 1)),
                name=meta.get("name", path.stem),
                controller=enabled,
                policy=policy,
                monitor=monitor,
                **kwargs,
            )
        except (ValueError, KeyError) as exc:
            raise ScenarioError(f"{path}: {exc}") from exc


@dataclass
class _Worker:
    hello: wire.Hello
    sock: socket.socket


def average_models(results: dict[str, wire.BenchResult], classes: dict[str, str]) -> dict[str, SpeedModel]:
    """One model per class: pointwise mean throughput of that class's workers."""
    grouped: dict[str, list[wire.BenchResult]] = {}
    for node_id, res in results.items():
        grouped.setdefault(classes[node_id], []).append(res)
    models = {}
    for cls, rs in sorted(grouped.items()):
        batches = [b for b, _ in rs[0].points]
        if any([b for b, _ in r.points] != batches for r in rs):
            raise ProtocolError(f"class {cls}: workers benchmarked different batch sizes")
        mean = [sum(r.points[k][1] for r in rs) / len(rs) for k in range(len(batches))]
        models[cls] = SpeedModel.from_pairs(zip(batches, mean), cls)
    return models


class Coordinator:
    def __init__(self, listen: str, config: LiveConfig, expected_workers: int,
                 local_worker: SyntheticKernel | None = None):
        if expected_workers < 1:
            raise ValidationError("expected_workers must be >= 1")
        self.config = config
        self.expected = expected_workers + (local_worker is not None)
        self.local_worker = local_worker
        host, port = wire.parse_endpoint(listen)
        self._server = socket.create_server((host, port))
        self.address = self._server.getsockname()[:2]
        self._queue: queue.Queue = queue.Queue()
        self._workers: dict[str, _Worker] = {}
        self.discarded = 0
        self.trace: SimTrace | None = None

    @property
    def endpoint(self) -> str:
        return f"{self.address[0]}:{self.address[1]}"

    # connection handling -------------------------------------------------

    def _accept_all(self) -> None:
        deadline = time.monotonic() + self.config.join_timeout
        while len(self._workers) < self.expected:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise StepTimeout(f"only {len(self._workers)} of {self.expected} workers joined")
            self._server.settimeout(remaining)
            try:
                sock, addr = self._server.accept()
            except socket.timeout:
                continue
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.settimeout(remaining)
            try:
                hello = wire.recv_message(sock)
            except (OSError, ProtocolError) as exc:
                log.warning("dropping connection from %s: %s", addr, exc)
                sock.close()
                continue
            sock.settimeout(None)
            if not isinstance(hello, wire.Hello):
                sock.close()
                raise ProtocolError(f"expected HELLO from {addr}, got {type(hello).__name__}")
            if hello.node_id in self._workers:
                sock.close()
                raise ProtocolError(f"duplicate node id {hello.node_id!r}")
            log.info("worker %s joined (%s, %d cores) from %s", hello.node_id, hello.node_class, hello.core_count, addr)
            self._workers[hello.node_id] = _Worker(hello, sock)
        for node_id, w in self._workers.items():
            threading.Thread(target=self._reader, args=(node_id, w.sock), daemon=True,
                             name=f"reader-{node_id}").start()

    def _reader(self, node_id: str, sock: socket.socket) -> None:
        while True:
            try:
                msg = wire.recv_message(sock)
            except (OSError, ProtocolError) as exc:
                self._queue.put((node_id, exc))
                return
            self._queue.put((node_id, msg))

    def _next(self, deadline: float, what: str):
        remaining = deadline - time.monotonic()
        try:
            node_id, msg = self._queue.get(timeout=max(0.0, remaining))
        except queue.Empty:
            raise StepTimeout(f"timed out waiting for {what}") from None
        if isinstance(msg, ProtocolError):
            raise ProtocolError(f"{node_id}: {msg}")
        if isinstance(msg, Exception):
            raise WorkerLost(f"worker {node_id} lost: {msg}")
        return node_id, msg

    def _broadcast(self, msg) -> None:
        frame = wire.encode(msg)
        for node_id, w in self._workers.items():
            try:
                w.sock.sendall(frame)
            except OSError as exc:
                raise WorkerLost(f"worker {node_id} lost: {exc}") from exc

    def _send_plan(self, plan: BatchPlan) -> None:
        offsets = plan.share_offsets()
        entries = tuple(
            wire.PlanEntry(i, plan.batch_sizes[i], *offsets[i]) for i in plan.node_ids
        )
        self._broadcast(wire.Plan(plan.generation, plan.steps_per_epoch, entries))

    # phases ----------------------------------------------------------------

    def _benchmark(self) -> tuple[dict[str, SpeedModel], dict[str, float]]:
        cfg = self.config
        self._broadcast(wire.BenchRequest(tuple(cfg.bench_batch_sizes), cfg.steps_per_probe))
        deadline = time.monotonic() + cfg.bench_timeout
        results: dict[str, wire.BenchResult] = {}
        while len(results) < len(self._workers):
            node_id, msg = self._next(deadline, "benchmark results")
            if not isinstance(msg, wire.BenchResult):
                raise ProtocolError(f"{node_id}: expected BENCH_RESULT, got {type(msg).__name__}")
            results[node_id] = msg
        classes = {i: w.hello.node_class for i, w in self._workers.items()}
        normal = {i: r.normal_cpu for i, r in results.items()}
        return average_models(results, classes), normal

    def _gather(self, plan: BatchPlan, step: int, timeout: float) -> list[StepReport]:
        deadline = time.monotonic() + timeout
        got: dict[str, StepReport] = {}
        while len(got) < len(plan.batch_sizes):
            node_id, msg = self._next(deadline, f"reports of step {step}")
            if not isinstance(msg, wire.StepReportMsg):
                raise ProtocolError(f"{node_id}: expected STEP_REPORT, got {type(msg).__name__}")
            if msg.node_id != node_id:
                raise ProtocolError(f"{node_id}: report claims node {msg.node_id!r}")
            if (msg.generation, msg.step_index) != (plan.generation, step):
                if (msg.generation, msg.step_index) < (plan.generation, step):
                    self.discarded += 1
                    continue
                raise ProtocolError(f"{node_id}: report from the future ({msg.generation}, {msg.step_index})")
            got[node_id] = StepReport(node_id, msg.generation, msg.step_index, msg.measured_throughput,
                                      msg.cpu_utilization, msg.wall_time)
        return [got[i] for i in plan.node_ids]

    def run(self) -> SimTrace:
        cfg = self.config
        local = None
        if self.local_worker is not None:
            from .worker import worker_run

            local = threading.Thread(target=worker_run, args=(self.endpoint, self.local_worker),
                                     kwargs={"node_id": "coordinator"}, daemon=True)
            local.start()
        trace = SimTrace(name=cfg.name)
        self.trace = trace
        try:
            self._accept_all()
            models, normal_cpu = self._benchmark()
            nodes = [NodeProfile(i, w.hello.node_class, w.hello.core_count) for i, w in sorted(self._workers.items())]
            plan = plan_initial(nodes, models, cfg.dataset, literal=cfg.policy.eq3_literal,
                                privacy_slack=cfg.policy.privacy_slack)
            trace.meta = make_meta(cfg.name, "live", nodes, models, cfg.dataset, normal_cpu,
                                   cfg.controller, cfg.policy, cfg.monitor)
            controller = None
            if cfg.controller:
                controller = Controller({n.node_id: n.node_class for n in nodes}, models, normal_cpu,
                                        cfg.dataset, cfg.policy, cfg.monitor)
            self._train(trace, plan, controller)
        except HypertuneError as exc:
            exc.trace = trace
            raise
        finally:
            trace.discarded_reports = self.discarded
            self._shutdown()
        return trace

    def _train(self, trace: SimTrace, plan: BatchPlan, controller: Controller | None) -> None:
        cfg = self.config
        rec = TraceRecorder(trace)
        self._send_plan(plan)
        t0 = time.perf_counter()
        for epoch in range(cfg.epochs):
            terminated = False
            for step in range(plan.steps_per_epoch):
                timeout = max(cfg.timeout_factor * plan.predicted_step_time, cfg.min_timeout)
                start = time.perf_counter()
                self._broadcast(wire.StepBegin(plan.generation, step))
                reports = self._gather(plan, step, timeout)
                wall = time.perf_counter() - start
                outcome = controller.step(plan, reports) if controller else StepOutcome()
                rec.record_step(start - t0, epoch, plan, reports, wall, {}, outcome.tokens)
                if outcome.new_plan is not None:
                    log.info("epoch %d step %d: %s -> generation %d %s", epoch, step, outcome.kind,
                             outcome.new_plan.generation, dict(outcome.new_plan.batch_sizes))
                    plan = outcome.new_plan
                    self._broadcast(wire.RetuneNotice(plan.generation))
                    self._send_plan(plan)
                    terminated = True
                    break
            self._broadcast(wire.EpochEnd(epoch))
            trace.epochs_run += 1
            trace.epochs_terminated += int(terminated)

    def _shutdown(self) -> None:
        for w in self._workers.values():
            try:
                w.sock.sendall(wire.encode(wire.Shutdown()))
            except OSError:
                pass
        for w in self._workers.values():
            try:
                w.sock.shutdown(socket.SHUT_WR)
            except OSError:
                pass
            w.sock.close()
        self._server.close()


def coordinator_run(
    listen: str,
    config: LiveConfig,
    expected_workers: int,
    *,
    local_worker: SyntheticKernel | None = None,
    on_listen: Callable[[str], None] | None = None,
) -> SimTrace:
    """Run a full live session; on failure the raised error carries ``.trace``."""
    coord = Coordinator(listen, config, expected_workers, local_worker)
    if on_listen is not None:
        on_listen(coord.endpoint)
    return coord.run()
