"""Thread-based live sessions on one machine, plus scripted fake peers."""
import socket
import threading

from hypertune.livenet import Coordinator, LiveConfig, SyntheticKernel, ThrottleSchedule, worker_run
from hypertune.livenet import wire
from hypertune.planner import DatasetSpec

SLEEP = SyntheticKernel(kind="sleep", seconds_per_sample=2e-4, overhead_samples=10)


def config(total=3840, epochs=1, **kw):
    kw.setdefault("bench_batch_sizes", (8, 16, 32, 64))
    kw.setdefault("steps_per_probe", 2)
    kw.setdefault("join_timeout", 10.0)
    return LiveConfig(DatasetSpec(total), epochs=epochs, **kw)


def live_session(cfg, n_workers=3, throttles=None, kernel=SLEEP):
    """Run a coordinator with ``n_workers`` worker threads; return (trace, exit codes)."""
    throttles = throttles or {}
    coord = Coordinator("127.0.0.1:0", cfg, n_workers)
    codes = {}
    threads = []
    for k in range(n_workers):
        node = f"w{k}"

        def target(node=node):
            codes[node] = worker_run(coord.endpoint, kernel, node_id=node, node_class="sleeper",
                                     throttle=throttles.get(node, ThrottleSchedule()))

        t = threading.Thread(target=target, daemon=True)
        t.start()
        threads.append(t)
    try:
        trace = coord.run()
    finally:
        for t in threads:
            t.join(10)
    return trace, codes


class FakeWorker(threading.Thread):
    """Scripted peer: ``script(sock, hello)`` drives the conversation after HELLO."""

    def __init__(self, endpoint, node_id, script):
        super().__init__(daemon=True)
        self.endpoint, self.node_id, self.script = endpoint, node_id, script
        self.error = None

    def run(self):
        host, port = wire.parse_endpoint(self.endpoint)
        try:
            with socket.create_connection((host, port), timeout=10) as sock:
                wire.send_message(sock, wire.Hello(self.node_id, 1, "fake"))
                self.script(sock)
        except Exception as exc:  # surfaced by the test
            self.error = exc


def fake_bench(sock, speed=lambda b: b / ((b + 10) * 2e-4)):
    req = wire.recv_message(sock)
    assert isinstance(req, wire.BenchRequest)
    pts = tuple((b, float(speed(b))) for b in req.batch_sizes)
    wire.send_message(sock, wire.BenchResult(pts, 1.0))


def serve_steps(sock, node_id, on_step=None, limit=None):
    """Answer STEP_BEGIN with nominal reports until SHUTDOWN or ``limit`` steps."""
    batch, gen, n = None, None, 0
    while limit is None or n < limit:
        msg = wire.recv_message(sock)
        if isinstance(msg, wire.Plan):
            batch = next(e.batch_size for e in msg.entries if e.node_id == node_id)
            gen = msg.generation
        elif isinstance(msg, wire.StepBegin):
            if on_step is not None:
                on_step(sock, msg)
            wall = (batch + 10) * 2e-4
            wire.send_message(sock, wire.StepReportMsg(node_id, gen, msg.step, batch / wall, 1.0, wall))
            n += 1
        elif isinstance(msg, wire.Shutdown):
            return


class FakeCoordinator(threading.Thread):
    """Listens once, reads HELLO, then sends ``frames`` (raw bytes) and waits for close."""

    def __init__(self, frames):
        super().__init__(daemon=True)
        self.server = socket.create_server(("127.0.0.1", 0))
        self.endpoint = "127.0.0.1:%d" % self.server.getsockname()[1]
        self.frames = frames
        self.hello = None

    def run(self):
        conn, _ = self.server.accept()
        with conn, self.server:
            self.hello = wire.recv_message(conn)
            for f in self.frames:
                conn.sendall(f)
            conn.settimeout(10)
            try:
                while conn.recv(4096):
                    pass
            except OSError:
                pass
