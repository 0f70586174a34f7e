import statistics
import threading
import time

import numpy as np
import pytest

from hypertune.errors import ProtocolError, WorkerLost
from hypertune.livenet import Coordinator, KernelExecutor, SyntheticKernel, ThrottleSchedule, worker_run
from hypertune.livenet import wire
from hypertune.replay import replay_rows
from hypertune.report import phases
from hypertune.speedmodel import SpeedModel, speed_at
from livehelp import FakeCoordinator, FakeWorker, config, fake_bench, live_session, serve_steps

pytestmark = pytest.mark.live


def rows_of(trace):
    keys = ("time_s", "epoch", "step", "generation", "node_id", "throughput", "cluster_throughput", "event",
            "decision")
    return [dict(zip(keys, r)) for r in trace.rows]


def test_uncontended_nodes_match_benchmark():
    trace, codes = live_session(config())
    assert codes == {"w0": 0, "w1": 0, "w2": 0}
    model = SpeedModel.from_pairs(trace.meta["models"]["sleeper"], "sleeper")
    batch = trace.plans[0].batch_sizes
    for node in ("w0", "w1", "w2"):
        speeds = [r[5] for r in trace.rows if r[4] == node]
        assert statistics.median(speeds) == pytest.approx(speed_at(model, batch[node]), rel=0.10)
    # a single slow step may flag, but a steady run never retunes
    assert not [d for d in trace.decisions() if d[-1] != "FLAG"]
    assert replay_rows(rows_of(trace), trace.meta_json()).agree


def test_throttled_worker_is_retuned():
    cfg = config(total=192 * 40, epochs=2)
    trace, codes = live_session(cfg, throttles={"w1": ThrottleSchedule(((10, 0.5),))})
    assert set(codes.values()) == {0}
    kinds = [tok.split(":")[0] for *_, tok in trace.decisions()]
    assert "TERMINATE" in kinds and "RETUNE" in kinds
    ph = phases(trace)
    assert [p.label.split(":")[0] for p in ph] == ["normal", "retune"]
    degraded = [s for s in trace.steps if s.generation == 0 and s.step >= 11]
    degraded_tp = sum(s.samples for s in degraded) / sum(s.wall_time for s in degraded)
    assert ph[-1].throughput >= 1.2 * degraded_tp
    assert trace.plans[-1].batch_sizes["w1"] < trace.plans[0].batch_sizes["w1"]
    assert replay_rows(rows_of(trace), trace.meta_json()).agree


def test_lost_worker_leaves_partial_trace():
    coord = Coordinator("127.0.0.1:0", config(min_timeout=2.0), 2)

    def good(sock):
        fake_bench(sock)
        serve_steps(sock, "good")

    def dies(sock):
        fake_bench(sock)
        serve_steps(sock, "dies", limit=3)

    peers = [FakeWorker(coord.endpoint, "good", good), FakeWorker(coord.endpoint, "dies", dies)]
    for p in peers:
        p.start()
    with pytest.raises(WorkerLost) as err:
        coord.run()
    assert "dies" in str(err.value)
    assert len(err.value.trace.steps) == 3
    for p in peers:
        p.join(5)


def test_stale_reports_are_discarded():
    coord = Coordinator("127.0.0.1:0", config(total=2 * 64 * 5), 2)

    def stale_first(sock, msg):
        if msg.step > 0:
            wire.send_message(sock, wire.StepReportMsg("a", msg.generation, msg.step - 1, 1.0, 1.0, 1.0))

    def a(sock):
        fake_bench(sock)
        serve_steps(sock, "a", on_step=stale_first)

    def b(sock):
        fake_bench(sock)
        serve_steps(sock, "b")

    peers = [FakeWorker(coord.endpoint, "a", a), FakeWorker(coord.endpoint, "b", b)]
    for p in peers:
        p.start()
    trace = coord.run()
    assert trace.discarded_reports == coord.discarded == 4
    assert len(trace.steps) == 5
    for p in peers:
        p.join(5)
        assert p.error is None


def test_barrier_holds_next_step_for_slowest_worker():
    coord = Coordinator("127.0.0.1:0", config(total=2 * 64 * 4), 2)
    log, lock = [], threading.Lock()

    def note(name):
        def on_step(sock, msg):
            with lock:
                log.append((name, "begin", msg.step))
            if name == "slow":
                time.sleep(0.05)
            with lock:
                log.append((name, "report", msg.step))
        return on_step

    def make(name):
        def script(sock):
            fake_bench(sock)
            serve_steps(sock, name, on_step=note(name))
        return script

    peers = [FakeWorker(coord.endpoint, n, make(n)) for n in ("fast", "slow")]
    for p in peers:
        p.start()
    coord.run()
    for p in peers:
        p.join(5)
    for step in range(1, 4):
        begin = min(k for k, e in enumerate(log) if e[1:] == ("begin", step))
        done = max(k for k, e in enumerate(log) if e[1:] == ("report", step - 1))
        assert done < begin


def test_future_report_is_protocol_error():
    coord = Coordinator("127.0.0.1:0", config(), 1)

    def script(sock):
        fake_bench(sock)
        wire.recv_message(sock)  # plan
        msg = wire.recv_message(sock)
        wire.send_message(sock, wire.StepReportMsg("x", 0, msg.step + 5, 1.0, 1.0, 1.0))
        wire.recv_message(sock)

    peer = FakeWorker(coord.endpoint, "x", script)
    peer.start()
    with pytest.raises(ProtocolError, match="future"):
        coord.run()
    peer.join(5)


class TestWorkerExits:
    def test_shutdown_before_any_step(self):
        fake = FakeCoordinator([wire.encode(wire.Shutdown())])
        fake.start()
        assert worker_run(fake.endpoint, node_id="w", connect_timeout=5) == 0
        fake.join(5)
        assert fake.hello == wire.Hello("w", 1, "worker")

    def test_malformed_frame(self):
        fake = FakeCoordinator([b"\x00\x00\x00\x00\x63"])
        fake.start()
        assert worker_run(fake.endpoint, node_id="w", connect_timeout=5) != 0
        fake.join(5)

    def test_step_before_plan(self):
        fake = FakeCoordinator([wire.encode(wire.StepBegin(0, 0))])
        fake.start()
        assert worker_run(fake.endpoint, node_id="w", connect_timeout=5) != 0
        fake.join(5)

    def test_unreachable_coordinator(self):
        import socket

        s = socket.create_server(("127.0.0.1", 0))
        port = s.getsockname()[1]
        s.close()
        assert worker_run(f"127.0.0.1:{port}", connect_timeout=0.3) != 0


def test_compute_kernel_time_is_linear_in_batch():
    ex = KernelExecutor(SyntheticKernel(iters_per_sample=20000, buffer_bytes=1 << 16), 1)
    ex.run_step(4)
    sizes = np.array([16, 32, 64, 96, 128, 192])
    best = 0.0
    # a shared host can stall a whole measurement round, so take the best of three rounds;
    # within a round the minimum over repeats drops steps that lost the CPU
    for _ in range(3):
        times = np.array([min(ex.run_step(int(b)) for _ in range(9)) for b in sizes])
        best = max(best, np.corrcoef(sizes, times)[0, 1] ** 2)
        if best > 0.99:
            break
    assert best > 0.99


def test_throttle_schedule():
    t = ThrottleSchedule.parse("40:0.5, 80:1")
    assert [t.capacity(s) for s in (0, 39, 40, 79, 80, 500)] == [1, 1, 0.5, 0.5, 1, 1]


def test_throttle_scales_step_time_and_cpu():
    ex = KernelExecutor(SyntheticKernel(kind="sleep", seconds_per_sample=1e-4, overhead_samples=0), 4)
    base = statistics.median(ex.run_step(100) for _ in range(3))
    ex.capacity = 0.5
    slow = statistics.median(ex.run_step(100) for _ in range(3))
    assert slow == pytest.approx(2 * base, rel=0.25)
    assert ex.last_cpu == pytest.approx(2.0, rel=0.25)
