"""Loopback integration on real sockets, and backend equivalence.

Every host binds its own 127.0.0.x alias so source addresses are meaningful.
Each test uses its own port range to avoid collisions.
"""

import asyncio
import random

from sdperim import spa
from sdperim.client import Phase
from sdperim.config import generate_material
from sdperim.deploy import build_client, build_controller, build_gateway, build_sim, default_config
from sdperim.services import EchoNode
from sdperim.transport.base import Send, SendDatagram
from sdperim.transport.real import RealHost

CTRL_IP, GW_IP, CLOUD_IP, CLIENT_IP, OTHER_IP = (
    "127.0.0.10",
    "127.0.0.11",
    "127.0.0.12",
    "127.0.0.13",
    "127.0.0.14",
)


def loopback_config(base: int, seed: int = 7):
    return default_config(
        seed=seed,
        ports={"spa": base + 1, "control": base},
        controller={"id": "cc" * 16, "host": CTRL_IP},
        gateways=[{"id": "bb" * 16, "host": GW_IP}],
        clients=[{"id": "aa" * 16, "host": CLIENT_IP, "services": ["echo-cloud"]}],
        services=[
            {
                "service_id": "echo-cloud",
                "gateway": "bb" * 16,
                "protected_host": CLOUD_IP,
                "protected_port": base + 2,
                "public_port": base + 3,
            }
        ],
    )


async def wait_for(cond, timeout=10.0, step=0.01):
    for _ in range(int(timeout / step)):
        if cond():
            return True
        await asyncio.sleep(step)
    return cond()


class Stack:
    """Controller + gateway + echo on loopback; clients join per test."""

    def __init__(self, base: int, seed: int = 7):
        self.cfg = loopback_config(base, seed)
        self.material = generate_material(self.cfg, random.Random(f"material:{seed}"))
        self.ctrl = build_controller(self.cfg, self.material, random.Random(seed + 1))
        self.gw = build_gateway(self.cfg, self.material, "bb" * 16, random.Random(seed + 2), controller_host=CTRL_IP)
        self.echo = EchoNode(CLOUD_IP, base + 2)
        self.hosts = []

    async def __aenter__(self):
        for node, ip in ((self.ctrl, CTRL_IP), (self.gw, GW_IP), (self.echo, CLOUD_IP)):
            host = RealHost(node, ip)
            self.hosts.append(host)
            await host.start()
        assert await wait_for(lambda: self.gw.registered, 5.0)
        return self

    async def __aexit__(self, *exc):
        for host in reversed(self.hosts):
            await host.stop()

    async def join_client(self, seed=3, **kw):
        client = build_client(self.cfg, self.material, "aa" * 16, random.Random(seed), gateway_host=GW_IP, **kw)
        host = RealHost(client, CLIENT_IP)
        self.hosts.append(host)
        await host.start()
        return client, host


def frame_tap(node, record):
    """Record the ordered frame kinds a node sends and receives."""
    for name in ("start", "on_datagram", "on_stream_request", "on_connected",
                 "on_connect_failed", "on_data", "on_closed", "on_timer"):
        original = getattr(node, name)

        def wrap(original=original, hook=name):
            def inner(*args):
                if hook == "on_data" and len(args[1]) >= 5:
                    record.append(("in", args[1][4]))
                actions = original(*args)
                for action in actions or ():
                    if isinstance(action, Send) and len(action.data) >= 5:
                        record.append(("out", action.data[4]))
                    elif isinstance(action, SendDatagram):
                        record.append(("out", "spa"))
                return actions

            return inner

        setattr(node, name, wrap())


def test_full_session_and_echo_round_trip():
    async def main():
        async with Stack(21000) as stack:
            client, host = await stack.join_client()
            assert await wait_for(lambda: client.ready)
            assert client.session.phase is Phase.AUTHENTICATED
            await host.call(lambda now: client.open_service("echo-cloud", now))
            assert await wait_for(lambda: client.requests[1].state == "granted")
            await host.call(lambda now: client.open_tunnel_stream("echo-cloud"))
            assert await wait_for(lambda: client.tunnels["echo-cloud"].established)
            await host.call(lambda now: client.tunnel_send("echo-cloud", b"ping-over-loopback"))
            assert await wait_for(lambda: bytes(client.tunnels["echo-cloud"].rx) == b"ping-over-loopback")
            # application binding: only the gateway ever reached the service
            assert set(stack.echo.stats.origins) == {GW_IP}

    asyncio.run(main())


def test_wrong_key_times_out_dark():
    async def main():
        async with Stack(21100) as stack:
            bad = build_client(stack.cfg, stack.material, "aa" * 16, random.Random(5), gateway_host=GW_IP)
            bad.spa_key = spa.SpaKey(bad.spa_key.client_id, b"\xee" * 32)
            bad.spa_timeout = 0.4
            received = []
            frame_tap(bad, received)
            bad_host = RealHost(bad, CLIENT_IP)
            stack.hosts.append(bad_host)
            await bad_host.start()
            assert await wait_for(lambda: bad.failed, 5.0)
            assert bad._attempts == 3
            assert [k for d, k in received if d == "in"] == []  # silence, only timeouts

    asyncio.run(main())


def test_backend_equivalence_frame_kind_sequences():
    """The client observes the same ordered frame kinds on both backends."""
    dep = build_sim(default_config(seed=9), start_clients=False)
    sim_client = dep.client()
    sim_seen = []
    frame_tap(sim_client, sim_seen)
    dep.net.run(until=1.0)
    dep.net.add_node(sim_client)
    dep.net.run(until=5.0)
    assert sim_client.ready
    dep.net.act(sim_client, sim_client.open_service("echo-cloud", dep.net.clock))
    dep.net.run(until=8.0)
    assert sim_client.requests[1].state == "granted"

    async def loopback():
        async with Stack(21200, seed=9) as stack:
            client = build_client(stack.cfg, stack.material, "aa" * 16, random.Random(9), gateway_host=GW_IP)
            seen = []
            frame_tap(client, seen)
            host = RealHost(client, CLIENT_IP)
            stack.hosts.append(host)
            await host.start()
            assert await wait_for(lambda: client.ready)
            await host.call(lambda now: client.open_service("echo-cloud", now))
            assert await wait_for(lambda: client.requests[1].state == "granted")
            return seen

    real_seen = asyncio.run(loopback())
    assert sim_seen == real_seen


def test_unauthorized_connection_severed_before_any_byte():
    async def main():
        async with Stack(21300) as stack:
            client, host = await stack.join_client()
            assert await wait_for(lambda: client.ready)
            await host.call(lambda now: client.open_service("echo-cloud", now))
            assert await wait_for(lambda: client.requests[1].state == "granted")
            # a different source hits the authorized public port
            public = stack.cfg.services[0].public_port
            reader, writer = await asyncio.open_connection(GW_IP, public, local_addr=(OTHER_IP, 0))
            try:
                writer.write(b"probe")
                data = await asyncio.wait_for(reader.read(64), timeout=2.0)
                assert data == b""  # severed cleanly: end of stream
            except ConnectionError:
                pass  # severed with a reset: equally no service bytes
            finally:
                writer.close()
            assert stack.echo.stats.origins.get(OTHER_IP) is None

    asyncio.run(main())


def test_gateway_relay_is_transparent_end_to_end():
    # the client <-> controller channel is end-to-end sealed; authentication
    # succeeding at all proves the relay never altered a byte
    async def main():
        async with Stack(21400) as stack:
            client, host = await stack.join_client()
            assert await wait_for(lambda: client.ready)
            assert client.session.session_id is not None
            assert stack.ctrl.session_count() == 1

    asyncio.run(main())
