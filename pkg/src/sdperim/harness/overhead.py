"""Loopback timing of the connection phases, next to reference magnitudes.

The report rows mirror the classic evaluation table for this kind of
deployment: end-to-end connect time with and without the perimeter, the
one-time controller overhead, and the per-session gateway overhead. The
bundled reference magnitudes come from a LAN-scale hardware testbed and are
context only, never assertion targets.
"""

from __future__ import annotations

import asyncio
import json
import time
from dataclasses import dataclass

from ..deploy import build_client, build_controller, build_gateway, default_config
from ..config import generate_material
from ..services import EchoNode
from ..transport.real import RealHost

REFERENCE_SECONDS = {
    # measured on a hardware LAN testbed; reported for scale comparison only
    "e2e_with_sdp_measured": 0.555149629,
    "e2e_without_sdp_measured": 0.547851958,
    "controller_overhead_measured": 0.04477037,
    "gateway_overhead_measured": 0.04892312,
}


@dataclass
class OverheadReport:
    controller_overhead: float
    gateway_overhead: float
    e2e_with_sdp: float
    e2e_without_sdp: float

    def to_dict(self) -> dict:
        return {
            "controller_overhead": self.controller_overhead,
            "gateway_overhead": self.gateway_overhead,
            "e2e_with_sdp": self.e2e_with_sdp,
            "e2e_without_sdp": self.e2e_without_sdp,
            "reference_seconds": REFERENCE_SECONDS,
            "reference_note": "reference magnitudes from a hardware testbed; not targets",
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


async def _wait(predicate, timeout: float, step: float = 0.005) -> bool:
    deadline = time.time() + timeout
    while time.time() < deadline:
        if predicate():
            return True
        await asyncio.sleep(step)
    return predicate()


async def measure_loopback_overheads(
    port_base: int = 23000,
    seed: int = 7,
    ips: tuple[str, str, str, str] = ("127.0.0.10", "127.0.0.11", "127.0.0.12", "127.0.0.13"),
) -> OverheadReport:
    """Run one full connection on loopback sockets and time each phase."""
    import random

    ctrl_ip, gw_ip, cloud_ip, client_ip = ips
    cfg = default_config(
        seed=seed,
        ports={"spa": port_base + 1, "control": port_base},
        controller={"id": "cc" * 16, "host": ctrl_ip},
        gateways=[{"id": "bb" * 16, "host": gw_ip}],
        clients=[{"id": "aa" * 16, "host": client_ip, "services": ["echo-cloud"]}],
        services=[
            {
                "service_id": "echo-cloud",
                "gateway": "bb" * 16,
                "protected_host": cloud_ip,
                "protected_port": port_base + 2,
                "public_port": port_base + 3,
            }
        ],
    )
    material = generate_material(cfg, random.Random(f"material:{seed}"))
    ctrl = build_controller(cfg, material, random.Random(seed + 1))
    gw = build_gateway(cfg, material, cfg.gateways[0].id, random.Random(seed + 2), controller_host=ctrl_ip)
    client = build_client(cfg, material, cfg.clients[0].id, random.Random(seed + 3), gateway_host=gw_ip)
    echo = EchoNode(cloud_ip, port_base + 2)

    hosts = [RealHost(ctrl, ctrl_ip), RealHost(gw, gw_ip), RealHost(echo, cloud_ip)]
    client_host = RealHost(client, client_ip)
    try:
        for h in hosts:
            await h.start()
        if not await _wait(lambda: gw.registered, 5.0):
            raise RuntimeError("gateway failed to register")

        t0 = time.time()
        await client_host.start()
        hosts.append(client_host)
        if not await _wait(lambda: client.ready, 10.0):
            raise RuntimeError("client failed to authenticate")
        controller_overhead = time.time() - t0

        t1 = time.time()
        await client_host.call(lambda now: client.open_service("echo-cloud", now))
        if not await _wait(lambda: client.requests[1].state == "granted", 10.0):
            raise RuntimeError(f"service not granted: {client.requests[1].state}")
        gateway_overhead = time.time() - t1

        await client_host.call(lambda now: client.open_tunnel_stream("echo-cloud"))
        await _wait(lambda: client.tunnels["echo-cloud"].established, 5.0)
        await client_host.call(lambda now: client.tunnel_send("echo-cloud", b"x" * 64))
        if not await _wait(lambda: len(client.tunnels["echo-cloud"].rx) >= 64, 5.0):
            raise RuntimeError("echo round trip failed")
        e2e_with = time.time() - t0

        t2 = time.time()
        reader, writer = await asyncio.open_connection(cloud_ip, port_base + 2, local_addr=(client_ip, 0))
        writer.write(b"y" * 64)
        await asyncio.wait_for(reader.readexactly(64), timeout=5.0)
        writer.close()
        e2e_without = time.time() - t2
    finally:
        for h in hosts:
            await h.stop()

    return OverheadReport(controller_overhead, gateway_overhead, e2e_with, e2e_without)
