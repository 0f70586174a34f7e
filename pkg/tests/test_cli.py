import csv
import socket
import subprocess
import sys
import threading

import pytest

from hypertune.cli import main
from hypertune.speedmodel import from_text


def test_plan_csd36(capsys):
    assert main(["plan", "--scenario", "fixtures/csd36.cfg"]) == 0
    out = capsys.readouterr().out
    assert "steps_per_epoch 416" in out
    rows = {line.split()[0]: line.split() for line in out.splitlines()[4:]}
    assert rows["host"][2:] == ["180", "75000"]
    assert rows["csd00"][2:] == ["15", "6250"]


def test_missing_scenario_is_invalid_input(capsys):
    assert main(["sim", "--scenario", "missing.cfg"]) == 2
    assert "missing.cfg" in capsys.readouterr().err


def test_sim_writes_trace_and_report(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert main(["sim", "--scenario", "fixtures/three_node.cfg", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "retune:g1" in text and "tuned/untuned" in text
    with open(out) as fh:
        header = next(csv.reader(fh))
    assert header[:3] == ["time_s", "epoch", "step"]
    assert (tmp_path / "t.csv.meta.json").exists()


def test_sim_controller_off(capsys):
    assert main(["sim", "--scenario", "fixtures/three_node.cfg", "--controller", "off", "--no-baselines"]) == 0
    assert "retune" not in capsys.readouterr().out


def test_replay_agrees_then_detects_tampering(tmp_path, capsys):
    out = tmp_path / "t.csv"
    assert main(["sim", "--scenario", "fixtures/three_node_recovery.cfg", "--out", str(out), "--no-baselines"]) == 0
    assert main(["replay", str(out)]) == 0
    assert "agree" in capsys.readouterr().out
    text = out.read_text().replace("RETUNE:180->144", "RETUNE:180->150")
    out.write_text(text)
    assert main(["replay", str(out)]) == 1


def test_replay_missing_file():
    assert main(["replay", "/nonexistent/trace.csv"]) == 2


def test_bench_writes_model(tmp_path, capsys):
    out = tmp_path / "m.txt"
    args = ["bench", "--out", str(out), "--batch-sizes", "8,16,32", "--steps-per-probe", "2",
            "--kernel", "sleep", "--seconds-per-sample", "1e-4", "--class", "box"]
    assert main(args) == 0
    model = from_text(out.read_text())["box"]
    assert model.batch_sizes == [8, 16, 32]


def test_bad_throttle_is_invalid_input(capsys):
    assert main(["work", "--throttle", "soon:half", "--connect-timeout", "0.1"]) == 2


@pytest.mark.live
def test_coord_and_work_processes(tmp_path):
    s = socket.create_server(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    out = tmp_path / "live.csv"
    kernel = ["--kernel", "sleep", "--seconds-per-sample", "2e-4"]
    coord = subprocess.Popen([sys.executable, "-m", "hypertune.cli", "coord", "--scenario", "fixtures/live_local.cfg",
                              "--listen", f"127.0.0.1:{port}", "--workers", "2", "--out", str(out)],
                             stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    workers = [subprocess.Popen([sys.executable, "-m", "hypertune.cli", "work", "--connect", f"127.0.0.1:{port}",
                                 "--node-id", f"w{k}", *kernel]) for k in range(2)]
    assert [w.wait(120) for w in workers] == [0, 0]
    stdout, stderr = coord.communicate(timeout=120)
    assert coord.returncode == 0, stderr
    assert "normal" in stdout
    assert main(["replay", str(out)]) == 0
