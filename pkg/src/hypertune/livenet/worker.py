"""Worker side of the live protocol: benchmark on request, run planned steps."""
from __future__ import annotations

import logging
import os
import socket
import statistics
import time

from ..errors import ConnectFailure, NonMonotonic, ProtocolError
from ..speedmodel import benchmark_sweep
from . import wire
from .kernel import KernelExecutor, SyntheticKernel, ThrottleSchedule

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 3


def connect(endpoint: str, timeout: float = 10.0) -> socket.socket:
    """Connect to ``host:port``, retrying until ``timeout`` seconds pass."""
    host, port = wire.parse_endpoint(endpoint)
    deadline = time.monotonic() + timeout
    while True:
        try:
            sock = socket.create_connection((host, port), timeout=max(0.1, deadline - time.monotonic()))
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return sock
        except OSError as exc:
            if time.monotonic() >= deadline:
                raise ConnectFailure(f"cannot reach coordinator at {endpoint}: {exc}") from exc
            time.sleep(0.05)


class _Recorder:
    """Executor wrapper keeping the CPU share of every probe."""

    def __init__(self, executor: KernelExecutor):
        self.executor = executor
        self.cpu: list[float] = []

    def run_step(self, batch_size: int) -> float:
        t = self.executor.run_step(batch_size)
        self.cpu.append(self.executor.last_cpu)
        return t


def benchmark(executor: KernelExecutor, request: wire.BenchRequest, node_class: str, retries: int = 3) -> wire.BenchResult:
    """Sweep the requested batch sizes; retry when the sweep is too noisy."""
    for attempt in range(retries):
        rec = _Recorder(executor)
        try:
            model = benchmark_sweep(rec, request.batch_sizes, request.steps_per_probe, node_class)
        except NonMonotonic as exc:
            log.warning("benchmark attempt %d: %s", attempt + 1, exc)
            continue
        normal_cpu = statistics.median(rec.cpu[-request.steps_per_probe:])
        return wire.BenchResult(tuple(model.pairs()), float(normal_cpu))
    raise NonMonotonic(f"benchmark stayed non-monotone after {retries} attempts")


def worker_run(
    endpoint: str,
    kernel: SyntheticKernel | None = None,
    *,
    node_id: str | None = None,
    node_class: str = "worker",
    core_count: int = 1,
    throttle: ThrottleSchedule | None = None,
    connect_timeout: float = 10.0,
) -> int:
    """Serve one coordinator until SHUTDOWN; returns a process exit status."""
    node_id = node_id or f"{socket.gethostname()}-{os.getpid()}"
    throttle = throttle or ThrottleSchedule()
    executor = KernelExecutor(kernel or SyntheticKernel(), core_count)
    try:
        sock = connect(endpoint, connect_timeout)
    except ConnectFailure as exc:
        log.error("%s", exc)
        return EXIT_FAILURE

    batch, generation, steps_done = None, None, 0
    try:
        wire.send_message(sock, wire.Hello(node_id, core_count, node_class))
        while True:
            msg = wire.recv_message(sock)
            if isinstance(msg, wire.StepBegin):
                if batch is None:
                    raise ProtocolError("STEP_BEGIN before any PLAN")
                executor.capacity = throttle.capacity(steps_done)
                wall = executor.run_step(batch)
                steps_done += 1
                wire.send_message(sock, wire.StepReportMsg(
                    node_id, generation, msg.step, batch / wall, executor.last_cpu, wall))
            elif isinstance(msg, wire.Plan):
                mine = [e for e in msg.entries if e.node_id == node_id]
                if len(mine) != 1:
                    raise ProtocolError(f"PLAN generation {msg.generation} has no entry for {node_id}")
                batch, generation = mine[0].batch_size, msg.generation
                log.info("%s: generation %d batch %d share %d", node_id, generation, batch, mine[0].length)
            elif isinstance(msg, wire.BenchRequest):
                executor.capacity = throttle.capacity(0)
                wire.send_message(sock, benchmark(executor, msg, node_class))
            elif isinstance(msg, (wire.RetuneNotice, wire.EpochEnd)):
                log.debug("%s: %s", node_id, msg)
            elif isinstance(msg, wire.Shutdown):
                return EXIT_OK
            else:
                raise ProtocolError(f"unexpected {type(msg).__name__} from coordinator")
    except ProtocolError as exc:
        log.error("%s: protocol error: %s", node_id, exc)
        return EXIT_FAILURE
    except NonMonotonic as exc:
        log.error("%s: %s", node_id, exc)
        return EXIT_FAILURE
    except OSError as exc:
        log.error("%s: lost coordinator: %s", node_id, exc)
        return EXIT_FAILURE
    finally:
        sock.close()
