"""Named scenarios: repeatable experiment runs with artifact output.

All six shipped scenarios execute on the simulated backend, so a (name,
seed) pair fully determines the artifacts. Each run writes into
``<out>/<name>-<seed>/`` and is idempotent: re-running replaces the files
with identical content.
"""

from __future__ import annotations

import json
import os

from .delay_model import DelayParams, reconcile
from .deploy import build_sim, default_config
from .harness.experiment import ExperimentSpec, run_experiment
from .harness.scan import ScannerNode
from .transport.sim import PROTOCOL_CLASSES, two_way

AUTH_HOPS = (("client", "gateway"), ("gateway", "controller"), ("controller", "gateway"), ("gateway", "client"))


def auth_trace_run(seed: int, alpha_bits=(720, 720, 720, 720), beta_m=(50.0, 200.0, 200.0, 50.0), rate_bps=1e6, speed_mps=2e8):
    """One full authentication on links pinned to uniform per-hop packet
    sizes; returns (protocol frame records, matching model params)."""
    cfg = default_config(
        seed=seed,
        topology={
            "links": [
                {"src": "client", "dst": "gateway", "rate_bps": rate_bps, "speed_mps": speed_mps, "beta_m": beta_m[0], "alpha_default_bits": alpha_bits[0]},
                {"src": "gateway", "dst": "controller", "rate_bps": rate_bps, "speed_mps": speed_mps, "beta_m": beta_m[1], "alpha_default_bits": alpha_bits[1]},
                {"src": "controller", "dst": "gateway", "rate_bps": rate_bps, "speed_mps": speed_mps, "beta_m": beta_m[2], "alpha_default_bits": alpha_bits[2]},
                {"src": "gateway", "dst": "client", "rate_bps": rate_bps, "speed_mps": speed_mps, "beta_m": beta_m[3], "alpha_default_bits": alpha_bits[3]},
                {"src": "gateway", "dst": "cloud", "rate_bps": rate_bps, "speed_mps": speed_mps, "beta_m": 1.0},
                {"src": "cloud", "dst": "gateway", "rate_bps": rate_bps, "speed_mps": speed_mps, "beta_m": 1.0},
            ]
        },
    )
    dep = build_sim(cfg, seed=seed, start_clients=False)
    net = dep.net
    net.run(until=5.0)
    if not dep.gateway().registered:
        raise RuntimeError("gateway failed to register")
    start_index = len(net.trace)
    client = dep.client()
    net.add_node(client)
    deadline = net.clock + 25.0  # well short of the first device-validation cycle
    while net.clock < deadline and not client.ready:
        net.run(until=net.clock + 0.25)
    if not client.ready:
        raise RuntimeError("authentication did not finish")
    frames = [r for r in net.trace[start_index:] if r.cls in PROTOCOL_CLASSES and not r.dropped]
    params = DelayParams(
        alpha_bits=tuple(float(a) for a in alpha_bits) + (0.0, 0.0, 0.0, 0.0),
        beta_m=tuple(float(b) for b in beta_m) + (0.0, 0.0, 0.0, 0.0),
        rate_bps=rate_bps,
        speed_mps=speed_mps,
    )
    return frames, params


def _write(out_dir: str, name: str, content: str) -> None:
    with open(os.path.join(out_dir, name), "w", encoding="utf-8") as fh:
        fh.write(content)


def _scenario_dos(seed: int, out_dir: str, with_sdp: bool, flood: bool = True) -> dict:
    spec = ExperimentSpec(
        seed=seed,
        with_sdp=with_sdp,
        window=120.0,
        flood_enabled=flood,
        flood_rate=1000.0,
        flood_duration=60.0,
        flood_start=30.0,
    )
    result = run_experiment(spec)
    _write(out_dir, "capture.csv", result.capture.to_csv())
    _write(out_dir, "experiment.json", result.to_json())
    _write(out_dir, "trace.jsonl", result.trace_jsonl)
    return result.summary()


def _scenario_portscan(seed: int, out_dir: str, with_sdp: bool) -> dict:
    ports = range(1, 2049)
    if with_sdp:
        cfg = default_config(seed=seed)
        dep = build_sim(cfg, seed=seed, start_clients=False)
        net = dep.net
        for link in two_way("scanner", "gateway"):
            net.topology.links[(link.src, link.dst)] = link
            net.topology.nodes.update((link.src, link.dst))
        client = dep.client()
        net.run(until=1.0)
        net.add_node(client)
        net.run(until=3.0)
        net.act(client, client.open_service("echo-cloud", net.clock))
        net.run(until=5.0)
        scanner = ScannerNode("scanner", "gateway", ports, timeout=0.5)
        net.add_node(scanner)
        net.run(until=net.clock + 10.0)
        report = scanner.report()
    else:
        from .services import EchoNode
        from .transport.sim import SimNet, Topology

        net = SimNet(Topology(two_way("scanner", "cloud")), seed=seed)
        net.add_node(EchoNode("cloud", 22))
        scanner = ScannerNode("scanner", "cloud", ports, timeout=0.5)
        net.add_node(scanner)
        net.run(until=10.0)
        report = scanner.report()
    _write(out_dir, "scan.json", report.to_json())
    return {"open": report.open_ports(), "counts": report.counts()}


def _scenario_delay_sweep(seed: int, out_dir: str) -> dict:
    rows = []
    for scale in (1, 2, 5, 10, 20, 50):
        beta = tuple(b * scale for b in (50.0, 200.0, 200.0, 50.0))
        frames, params = auth_trace_run(seed, beta_m=beta)
        report = reconcile(frames, params, AUTH_HOPS)
        rows.append(
            {
                "scale": scale,
                "predicted": report.predicted,
                "measured": report.measured,
                "delta": report.delta,
                "count_mismatches": report.count_mismatches,
            }
        )
    _write(out_dir, "delay_sweep.json", json.dumps(rows, indent=2))
    csv = "scale,predicted,measured,delta\n" + "".join(
        f"{r['scale']},{r['predicted']},{r['measured']},{r['delta']}\n" for r in rows
    )
    _write(out_dir, "delay_sweep.csv", csv)
    return {"rows": rows}


def scenario_run(name: str, seed: int, out: str) -> str:
    """Execute one shipped scenario; returns the artifacts directory."""
    runners = {
        "baseline": lambda d: _scenario_dos(seed, d, with_sdp=True, flood=False),
        "dos_with_sdp": lambda d: _scenario_dos(seed, d, with_sdp=True),
        "dos_without_sdp": lambda d: _scenario_dos(seed, d, with_sdp=False),
        "portscan_with_sdp": lambda d: _scenario_portscan(seed, d, with_sdp=True),
        "portscan_without_sdp": lambda d: _scenario_portscan(seed, d, with_sdp=False),
        "delay_sweep": lambda d: _scenario_delay_sweep(seed, d),
    }
    if name not in runners:
        raise ValueError(f"unknown scenario {name!r}; shipped: {', '.join(sorted(runners))}")
    out_dir = os.path.join(out, f"{name}-{seed}")
    os.makedirs(out_dir, exist_ok=True)
    summary = runners[name](out_dir)
    _write(out_dir, "summary.json", json.dumps(summary, indent=2, sort_keys=True))
    return out_dir


SCENARIO_NAMES = (
    "baseline",
    "dos_with_sdp",
    "dos_without_sdp",
    "portscan_with_sdp",
    "portscan_without_sdp",
    "delay_sweep",
)
