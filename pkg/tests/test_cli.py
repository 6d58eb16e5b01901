"""The installed binaries, exercised as subprocesses."""

import json
import os
import socket
import subprocess
import sys
import time

import yaml

CONFIG = """
seed: 11
ports: {{spa: {spa}, control: {control}}}
timing:
  rule_ttl: 60.0
  validation_interval: 30.0
material_dir: material
controller: {{id: "{ctrl}", host: 127.0.0.20}}
gateways:
  - {{id: "{gw}", host: 127.0.0.21}}
clients:
  - {{id: "{client}", host: 127.0.0.23, services: [echo-cloud]}}
services:
  - {{service_id: echo-cloud, gateway: "{gw}", protected_host: 127.0.0.22,
     protected_port: {svc}, public_port: {public}}}
"""

IDS = dict(ctrl="cc" * 16, gw="bb" * 16, client="aa" * 16)


def write_config(tmp_path, base):
    path = tmp_path / "deploy.yaml"
    path.write_text(CONFIG.format(spa=base + 1, control=base, svc=base + 2, public=base + 3, **IDS))
    return path


def run(args, **kw):
    return subprocess.run(args, capture_output=True, text=True, timeout=60, **kw)


def test_provision_and_force(tmp_path):
    cfg = write_config(tmp_path, 31000)
    first = run(["controller", "--config", str(cfg), "--provision"])
    assert first.returncode == 0, first.stderr
    again = run(["controller", "--config", str(cfg), "--provision"])
    assert again.returncode == 2
    assert "force" in again.stderr
    forced = run(["controller", "--config", str(cfg), "--provision", "--force"])
    assert forced.returncode == 0


def test_client_rejects_missing_material(tmp_path):
    cfg = write_config(tmp_path, 31100)
    result = run(["client", "--config", str(cfg), "--service", "echo-cloud"])
    assert result.returncode == 2


def test_full_binary_session(tmp_path):
    base = 31200
    cfg = write_config(tmp_path, base)
    assert run(["controller", "--config", str(cfg), "--provision"]).returncode == 0

    echo_code = (
        "import asyncio\n"
        "async def h(r, w):\n"
        "    while True:\n"
        "        d = await r.read(65536)\n"
        "        if not d: break\n"
        "        w.write(d)\n"
        "    w.close()\n"
        "async def m():\n"
        f"    s = await asyncio.start_server(h, '127.0.0.22', {base + 2})\n"
        "    async with s: await s.serve_forever()\n"
        "asyncio.run(m())\n"
    )
    procs = []
    try:
        procs.append(subprocess.Popen([sys.executable, "-c", echo_code]))
        procs.append(subprocess.Popen(["controller", "--config", str(cfg)], stdout=subprocess.DEVNULL))
        time.sleep(0.5)
        procs.append(
            subprocess.Popen(
                ["gateway", "--config", str(cfg), "--log", str(tmp_path / "gw.jsonl")], stdout=subprocess.DEVNULL
            )
        )
        time.sleep(0.7)
        client = subprocess.Popen(
            ["client", "--config", str(cfg), "--service", "echo-cloud", "--local-port", str(base + 9)],
            stdout=subprocess.PIPE,
            text=True,
        )
        procs.append(client)
        deadline = time.time() + 15
        while time.time() < deadline:
            try:
                s = socket.create_connection(("127.0.0.23", base + 9), timeout=0.5)
                break
            except OSError:
                time.sleep(0.2)
        else:
            raise AssertionError("local endpoint never came up")
        s.sendall(b"cli-tunnel-bytes")
        s.settimeout(5)
        assert s.recv(100) == b"cli-tunnel-bytes"
        s.close()
        # the verdict log exists and records the authorized forward
        time.sleep(0.3)
        lines = [json.loads(l) for l in (tmp_path / "gw.jsonl").read_text().splitlines()]
        forwards = [l for l in lines if l.get("event") == "filter" and l.get("verdict") == "forward"]
        assert forwards and forwards[0]["src"] == "127.0.0.23"
    finally:
        for p in procs:
            p.terminate()
        for p in procs:
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()


def test_attack_experiment_writes_artifacts(tmp_path):
    spec = tmp_path / "exp.yaml"
    spec.write_text(yaml.safe_dump(dict(window=10.0, flood_rate=100.0, flood_duration=4.0, flood_start=3.0, echo_rate=20.0)))
    result = run(["attack", "experiment", "--config", str(spec), "--seed", "5", "--out", str(tmp_path / "out")])
    assert result.returncode == 0, result.stderr
    summary = json.loads((tmp_path / "out" / "experiment.json").read_text())
    assert summary["zero_leak"] is True
    csv = (tmp_path / "out" / "capture.csv").read_text().splitlines()
    assert len(csv) == 11  # header + 10 intervals


def test_attack_scan_loopback(tmp_path):
    result = run(["attack", "scan", "--target", "127.0.0.25", "--ports", "31500-31510", "--timeout", "0.3",
                  "--out", str(tmp_path)])
    assert result.returncode == 0, result.stderr
    report = json.loads((tmp_path / "scan.json").read_text())
    assert report["counts"]["Open"] == 0
    assert report["counts"]["ClosedOrFiltered"] == 11


def test_scenario_cli(tmp_path):
    result = run(["scenario", "delay_sweep", "--seed", "3", "--out", str(tmp_path)])
    assert result.returncode == 0, result.stderr
    rows = json.loads((tmp_path / "delay_sweep-3" / "delay_sweep.json").read_text())
    assert all(r["delta"] == 0.0 for r in rows)


def test_delaycalc_with_trace(tmp_path):
    params = tmp_path / "params.yaml"
    params.write_text(
        yaml.safe_dump(
            dict(
                alpha_bits=[720.0, 720.0, 720.0, 720.0, 0.0, 0.0, 0.0, 0.0],
                beta_m=[50.0, 200.0, 200.0, 50.0, 0.0, 0.0, 0.0, 0.0],
                rate_bps=1.0e6,
                speed_mps=2.0e8,
                hop_nodes=[["client", "gateway"], ["gateway", "controller"], ["controller", "gateway"], ["gateway", "client"]],
            )
        )
    )
    from sdperim.scenarios import auth_trace_run

    frames, _ = auth_trace_run(seed=6, alpha_bits=(720, 720, 720, 720), beta_m=(50.0, 200.0, 200.0, 50.0))
    trace = tmp_path / "trace.jsonl"
    trace.write_text("".join(r.to_json() + "\n" for r in frames))
    result = run(["delaycalc", "--params", str(params), "--trace", str(trace)])
    assert result.returncode == 0, result.stderr
    report = json.loads(result.stdout)
    assert report["reconcile"]["delta"] == 0.0
    assert report["reconcile"]["count_mismatches"] == []
    assert report["sdp_overhead"] > 0
