"""Connection-initiation flood generation for both backends."""

from __future__ import annotations

import asyncio
import time
from dataclasses import dataclass


@dataclass
class FloodSpec:
    """Half-open initiation flood. ``payload_size`` stays under 60 bytes so
    capture labeling can separate flood segments from legitimate handshakes
    by frame length."""

    target_host: str
    target_port: int
    rate: float = 1000.0
    duration: float = 60.0
    spoof_sources: bool = True
    payload_size: int = 40

    def __post_init__(self):
        if self.rate <= 0:
            raise ValueError("rate must be positive")
        if self.duration <= 0:
            raise ValueError("duration must be positive")
        if not 0 < self.payload_size < 60:
            raise ValueError("payload_size must be in (0, 60)")


@dataclass
class FloodStats:
    sent: int = 0
    mode: str = ""
    errors: int = 0
    sources: int = 0
    started_at: float = 0.0
    finished_at: float = 0.0

    def to_dict(self) -> dict:
        return {
            "sent": self.sent,
            "mode": self.mode,
            "errors": self.errors,
            "sources": self.sources,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
        }


def spoofed_source(rng, i: int) -> tuple[str, int]:
    # non-routable sources; the simulator delivers their handshake replies nowhere
    return (f"10.66.{(i // 250) % 250}.{i % 250 + 1}", 1024 + rng.randrange(60000))


def sim_flood(net, spec: FloodSpec, attacker: str, start: float) -> FloodStats:
    """Schedule the whole flood on the simulated backend. Segments originate
    at the ``attacker`` node; sources are spoofed per segment when requested."""
    stats = FloodStats(mode="sim-spoofed" if spec.spoof_sources else "sim-direct", started_at=start)
    rng = net.node_rng(f"{attacker}:flood")
    total = int(spec.rate * spec.duration)
    period = 1.0 / spec.rate
    target = (spec.target_host, spec.target_port)
    seen_sources = set()

    def make(i):
        if spec.spoof_sources:
            src = spoofed_source(rng, i)
        else:
            src = (attacker, 1024 + (i % 60000))
        seen_sources.add(src[0])

        def fire():
            net.inject_syn(src, target, size=spec.payload_size, attacker=attacker)
            stats.sent += 1

        return fire

    for i in range(total):
        net.call_at(start + i * period, make(i))
    stats.finished_at = start + spec.duration
    stats.sources = total if spec.spoof_sources else min(total, 60000)
    return stats


async def real_flood(spec: FloodSpec, bind_ips: list[str] | None = None) -> FloodStats:
    """Loopback flood: rapid aborted connection attempts. A user-space sender
    cannot forge raw sources, so this falls back to many ephemeral sources
    across the given bind addresses; the stats record that mode."""
    stats = FloodStats(mode="real-ephemeral-sources", started_at=time.time())
    bind_ips = bind_ips or ["127.0.0.1"]
    deadline = time.time() + spec.duration
    period = 1.0 / spec.rate
    i = 0
    next_at = time.time()
    while time.time() < deadline:
        ip = bind_ips[i % len(bind_ips)]
        i += 1
        try:
            conn = asyncio.open_connection(spec.target_host, spec.target_port, local_addr=(ip, 0))
            _, writer = await asyncio.wait_for(conn, timeout=0.2)
            writer.transport.abort()
            stats.sent += 1
        except (OSError, asyncio.TimeoutError):
            stats.errors += 1
            stats.sent += 1
        next_at += period
        delay = next_at - time.time()
        if delay > 0:
            await asyncio.sleep(delay)
    stats.sources = len(bind_ips)
    stats.finished_at = time.time()
    return stats
