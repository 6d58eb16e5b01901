"""End-to-end protocol behavior on the simulated backend.

The same node classes run under the real-socket driver (see
test_real_backend), so everything asserted here is backend-independent
protocol logic: authentication, authorization, relaying, revocation, rule
TTL semantics, and the darkness properties.
"""

import random

import pytest

from sdperim import spa
from sdperim.client import ClientNode, Phase
from sdperim.deploy import build_sim, default_config
from sdperim.transport.base import Node, OpenStream, Send, SendDatagram
from sdperim.transport.sim import PROTOCOL_CLASSES, two_way
from sdperim.wire import Kind, encode_frame

AUTH_DEADLINE = 20.0


def run_until(net, cond, deadline=AUTH_DEADLINE, step=0.25):
    while net.clock < deadline and not cond():
        net.run(until=net.clock + step)
    return cond()


def authed_deployment(seed=7, **overrides):
    dep = build_sim(default_config(seed=seed, **overrides), start_clients=False)
    dep.net.run(until=1.0)
    assert dep.gateway().registered
    return dep


def connect_client(dep, client=None):
    client = client or dep.client()
    dep.net.add_node(client)
    assert run_until(dep.net, lambda: client.ready or client.failed)
    return client


class TestAuthentication:
    def test_valid_credentials_reach_authenticated(self):
        dep = authed_deployment()
        client = connect_client(dep)
        assert client.ready and not client.failed
        assert client.session.phase is Phase.AUTHENTICATED
        assert client.session.services == [("echo-cloud", "gateway", 4444)]
        assert client.session.validation_interval == 30.0

    def test_wrong_key_sees_pure_silence_and_fails(self):
        dep = authed_deployment()
        good = dep.client()
        bad = ClientNode(
            "client",
            good.identity,
            good.ca_public,
            spa.SpaKey(good.session.client_id, b"\xee" * 32),
            "gateway",
            rng=dep.net.node_rng("client"),
        )
        dep.net.add_node(bad)
        assert run_until(dep.net, lambda: bad.failed, deadline=40.0)
        assert bad._attempts == 3
        assert not bad.ready
        # darkness: not a single protocol frame ever went back to the client
        frames_back = [r for r in dep.net.trace if r.src == "gateway" and r.dst == "client" and r.cls == "data"]
        assert frames_back == []

    def test_unknown_client_id_is_dark(self):
        dep = authed_deployment()
        stranger_key = spa.SpaKey(b"\x99" * 16, b"\x98" * 32)
        good = dep.client()
        stranger = ClientNode(
            "client", good.identity, good.ca_public, stranger_key, "gateway", rng=dep.net.node_rng("client")
        )
        dep.net.add_node(stranger)
        assert run_until(dep.net, lambda: stranger.failed, deadline=40.0)
        frames_back = [r for r in dep.net.trace if r.src == "gateway" and r.dst == "client" and r.cls == "data"]
        assert frames_back == []

    def test_per_hop_frame_counts(self):
        dep = authed_deployment()
        start = len(dep.net.trace)
        client = connect_client(dep)
        assert client.ready
        window = dep.net.trace[start:]

        def count(src, dst):
            return sum(1 for r in window if r.cls in PROTOCOL_CLASSES and not r.dropped and (r.src, r.dst) == (src, dst))

        assert count("client", "gateway") == 3
        assert count("gateway", "controller") == 4
        assert count("controller", "gateway") == 3
        assert count("gateway", "client") == 5

    def test_login_replay_is_idempotent(self):
        dep = authed_deployment()
        client = connect_client(dep)
        ctrl = dep.controller
        assert ctrl.session_count() == 1
        session_id = client.session.session_id
        ctx = next(iter(ctrl.clients_ctx.values()))
        # replay the login frame on the authenticated conversation
        actions = ctrl._on_login(ctx, None, dep.net.clock)
        dep.net.act(ctrl, actions)
        dep.net.run(until=dep.net.clock + 1.0)
        assert ctrl.session_count() == 1
        assert client.session.session_id == session_id

    def test_client_with_no_services_still_authenticates(self):
        dep = authed_deployment(clients=[{"id": "aa" * 16, "host": "client", "services": []}])
        client = connect_client(dep)
        assert client.ready
        assert client.session.phase is Phase.AUTHENTICATED
        assert client.session.services == []


class TestServiceVisibility:
    def test_two_clients_see_disjoint_service_sets(self):
        rng = random.Random(31)
        pool = [f"svc{i}" for i in range(6)]
        a_set = sorted(rng.sample(pool, 3))
        b_set = sorted(set(pool) - set(a_set))
        services = [
            {
                "service_id": sid,
                "gateway": "bb" * 16,
                "protected_host": "cloud",
                "protected_port": 7700 + i,
                "public_port": 4400 + i,
            }
            for i, sid in enumerate(pool)
        ]
        dep = authed_deployment(
            clients=[
                {"id": "aa" * 16, "host": "client", "services": a_set},
                {"id": "dd" * 16, "host": "client2", "services": b_set},
            ],
            services=services,
            topology={
                "links": [
                    dict(src=s, dst=d, rate_bps=1e9, speed_mps=2e8, beta_m=1.0)
                    for s, d in [
                        ("client", "gateway"), ("gateway", "client"),
                        ("client2", "gateway"), ("gateway", "client2"),
                        ("gateway", "controller"), ("controller", "gateway"),
                        ("gateway", "cloud"), ("cloud", "gateway"),
                    ]
                ]
            },
        )
        a = connect_client(dep, dep.clients["aa" * 16])
        b = connect_client(dep, dep.clients["dd" * 16])
        seen_a = {sid for sid, _, _ in a.session.services}
        seen_b = {sid for sid, _, _ in b.session.services}
        assert seen_a == set(a_set)
        assert seen_b == set(b_set)
        assert seen_a.isdisjoint(seen_b)


class TestAuthorization:
    def test_grant_installs_rule_with_ttl(self):
        dep = authed_deployment()
        client = connect_client(dep)
        gw = dep.gateway()
        dep.net.act(client, client.open_service("echo-cloud", dep.net.clock))
        assert run_until(dep.net, lambda: client.requests[1].state != "pending")
        assert client.requests[1].state == "granted"
        expiry = gw.engine.rule_expiry(client.session.client_id, "echo-cloud")
        assert expiry is not None and expiry > dep.net.clock
        assert expiry - dep.net.clock <= 60.0

    def test_unauthorized_service_denied_without_gateway_change(self):
        dep = authed_deployment()
        client = connect_client(dep)
        gw = dep.gateway()
        # forge a request for a service outside the authorized list, at the
        # protocol level (the client API would refuse locally)
        blob = client.channel.seal(
            Kind.CONNECTION_REQUEST,
            __import__("sdperim.wire", fromlist=["encode_fields"]).encode_fields(
                [(10, b"not-mine"), (20, (99).to_bytes(4, "big"))]
            ),
        )
        client.requests[99] = __import__("sdperim.client", fromlist=["ServiceRequest"]).ServiceRequest(99, "not-mine")
        dep.net.act(client, [Send(client._relay_flow, encode_frame(Kind.SECURE, [(15, blob)]))])
        assert run_until(dep.net, lambda: client.requests[99].state != "pending")
        assert client.requests[99].state == "denied"
        assert client.requests[99].reason == "unauthorized"
        assert gw.engine.rule_count() == 0

    def test_local_precondition_sends_nothing(self):
        dep = authed_deployment()
        client = connect_client(dep)
        before = len(dep.net.trace)
        with pytest.raises(ValueError):
            client.open_service("not-a-service", dep.net.clock)
        assert len(dep.net.trace) == before

    def test_wedged_gateway_yields_unavailable_after_ack_window(self):
        dep = authed_deployment()
        client = connect_client(dep)
        gw = dep.gateway()
        # the gateway keeps relaying but its rule installation is wedged, so
        # directives go unacknowledged and the controller denies after 2 s
        gw._on_authorize = lambda fields, now: []
        t0 = dep.net.clock
        dep.net.act(client, client.open_service("echo-cloud", dep.net.clock))
        assert run_until(dep.net, lambda: client.requests[1].state != "pending", deadline=t0 + 10.0)
        assert client.requests[1].state == "denied"
        assert client.requests[1].reason == "GatewayUnavailable"
        assert 2.0 <= dep.net.clock - t0 <= 3.5  # the 2 s ack window governs

    def test_killed_gateway_times_out_client_and_denies_at_controller(self):
        dep = authed_deployment()
        client = connect_client(dep)
        # hard kill: the gateway host disappears entirely
        del dep.net.nodes["gateway"]
        t0 = dep.net.clock
        dep.net.act(client, client.open_service("echo-cloud", dep.net.clock))
        assert run_until(dep.net, lambda: client.requests[1].state != "pending", deadline=t0 + 10.0)
        assert client.requests[1].state == "timeout"

    def test_offline_gateway_denied_immediately(self):
        dep = authed_deployment()
        client = connect_client(dep)
        ctrl = dep.controller
        link = next(iter(ctrl.by_gateway.values()))
        ctrl.by_gateway.clear()  # gateway channel torn down
        ctx = next(iter(ctrl.clients_ctx.values()))
        from sdperim.wire import F, Fields, encode_fields, text, u32

        fields = Fields.decode(encode_fields([(F.SERVICE_ID, text("echo-cloud")), (F.REQUEST_ID, u32(5))]))
        actions = ctrl._on_connection_request(ctx, fields, dep.net.clock)
        denied = [a for a in actions if hasattr(a, "record") and a.record.get("reason") == "gateway-unavailable"]
        assert denied


class TestTunnelAndTtl:
    def test_echo_round_trip(self):
        dep = authed_deployment()
        client = connect_client(dep)
        dep.net.act(client, client.open_service("echo-cloud", dep.net.clock))
        run_until(dep.net, lambda: client.requests[1].state == "granted")
        dep.net.act(client, client.open_tunnel_stream("echo-cloud"))
        tunnel = client.tunnels["echo-cloud"]
        assert run_until(dep.net, lambda: tunnel.established)
        dep.net.act(client, client.tunnel_send("echo-cloud", b"ping"))
        assert run_until(dep.net, lambda: bytes(tunnel.rx) == b"ping")

    def test_established_flow_survives_rule_expiry_new_ones_do_not(self):
        dep = authed_deployment(timing={"rule_ttl": 5.0, "validation_interval": 300.0})
        client = connect_client(dep)
        gw = dep.gateway()
        dep.net.act(client, client.open_service("echo-cloud", dep.net.clock))
        run_until(dep.net, lambda: client.requests[1].state == "granted")
        t_open = dep.net.clock
        dep.net.act(client, client.open_tunnel_stream("echo-cloud"))
        tunnel = client.tunnels["echo-cloud"]
        assert run_until(dep.net, lambda: tunnel.established)
        # rule gone by t_open + 5 (+ sweep tick); bytes still flow at T + 5
        dep.net.run(until=t_open + 10.0)
        assert gw.engine.rule_count() == 0
        dep.net.act(client, client.tunnel_send("echo-cloud", b"late-bytes"))
        assert run_until(dep.net, lambda: bytes(tunnel.rx) == b"late-bytes", deadline=t_open + 15.0)
        # a fresh initiation is silently dropped
        before_drops = gw.engine.dropped
        dep.net.inject_syn(("client", 55555), ("gateway", 4444))
        dep.net.run(until=dep.net.clock + 1.0)
        assert gw.engine.dropped == before_drops + 1
        # a second service request re-authorizes and reopens access
        dep.net.act(client, client.open_service("echo-cloud", dep.net.clock))
        assert run_until(dep.net, lambda: client.requests[2].state == "granted", deadline=dep.net.clock + 10.0)
        assert gw.engine.rule_count() == 1

    def test_no_client_bytes_touch_service_ports_before_authentication(self):
        dep = authed_deployment()
        start = len(dep.net.trace)
        client = connect_client(dep)
        auth_end_index = len(dep.net.trace)
        for rec in dep.net.trace[start:auth_end_index]:
            if rec.src == "client":
                assert rec.dst_port != 4444

    def test_service_down_closes_client_flow(self):
        dep = authed_deployment()
        client = connect_client(dep)
        dep.net.act(client, client.open_service("echo-cloud", dep.net.clock))
        run_until(dep.net, lambda: client.requests[1].state == "granted")
        # the protected service stops listening
        dep.net.nodes["cloud"].tcp_ports.clear()
        t0 = dep.net.clock
        dep.net.act(client, client.open_tunnel_stream("echo-cloud"))
        tunnel = client.tunnels["echo-cloud"]
        assert run_until(dep.net, lambda: tunnel.closed, deadline=t0 + 2.0)
        assert dep.net.clock - t0 <= 2.0


class TestSpliceIsolation:
    def test_two_clients_bytes_never_cross(self):
        dep = authed_deployment(
            clients=[
                {"id": "aa" * 16, "host": "client", "services": ["echo-cloud"]},
                {"id": "dd" * 16, "host": "client2", "services": ["echo-cloud"]},
            ],
            topology={
                "links": [
                    dict(src=s, dst=d, rate_bps=1e9, speed_mps=2e8, beta_m=1.0)
                    for s, d in [
                        ("client", "gateway"), ("gateway", "client"),
                        ("client2", "gateway"), ("gateway", "client2"),
                        ("gateway", "controller"), ("controller", "gateway"),
                        ("gateway", "cloud"), ("cloud", "gateway"),
                    ]
                ]
            },
        )
        a = connect_client(dep, dep.clients["aa" * 16])
        b = connect_client(dep, dep.clients["dd" * 16])
        rng = random.Random(8)
        for node, req_id in ((a, 1), (b, 1)):
            dep.net.act(node, node.open_service("echo-cloud", dep.net.clock))
            assert run_until(dep.net, lambda n=node: n.requests[1].state == "granted")
            dep.net.act(node, node.open_tunnel_stream("echo-cloud"))
            assert run_until(dep.net, lambda n=node: n.tunnels["echo-cloud"].established)
        sent_a, sent_b = bytearray(), bytearray()
        for i in range(40):
            pa = bytes([0xA0]) + rng.randbytes(10)
            pb = bytes([0xB0]) + rng.randbytes(10)
            sent_a.extend(pa)
            sent_b.extend(pb)
            dep.net.act(a, a.tunnel_send("echo-cloud", pa))
            dep.net.act(b, b.tunnel_send("echo-cloud", pb))
        assert run_until(dep.net, lambda: len(a.tunnels["echo-cloud"].rx) == len(sent_a) and len(b.tunnels["echo-cloud"].rx) == len(sent_b))
        assert bytes(a.tunnels["echo-cloud"].rx) == bytes(sent_a)
        assert bytes(b.tunnels["echo-cloud"].rx) == bytes(sent_b)


class TestDeviceValidation:
    def test_answering_client_persists(self):
        dep = authed_deployment(timing={"validation_interval": 2.0})
        client = connect_client(dep)
        dep.net.run(until=dep.net.clock + 10.0)  # several challenge cycles
        assert client.session.phase is Phase.AUTHENTICATED
        assert dep.controller.session_count() == 1

    def test_silent_client_revoked_and_rules_removed(self):
        dep = authed_deployment(timing={"validation_interval": 2.0})
        client = connect_client(dep)
        client.validation_mode = "silent"
        dep.net.act(client, client.open_service("echo-cloud", dep.net.clock))
        run_until(dep.net, lambda: client.requests[1].state == "granted")
        dep.net.act(client, client.open_tunnel_stream("echo-cloud"))
        run_until(dep.net, lambda: client.tunnels["echo-cloud"].established)
        assert run_until(dep.net, lambda: client.session.phase is Phase.REVOKED, deadline=dep.net.clock + 10.0)
        assert client.tunnels["echo-cloud"].closed
        assert dep.controller.session_count() == 0
        assert dep.gateway().engine.rule_count() == 0
        assert dep.gateway().engine.conntrack_count() == 0

    def test_tampered_ack_revokes(self):
        dep = authed_deployment(timing={"validation_interval": 2.0})
        client = connect_client(dep)
        client.validation_mode = "tamper"
        assert run_until(dep.net, lambda: client.session.phase is Phase.REVOKED, deadline=dep.net.clock + 10.0)
        assert dep.controller.session_count() == 0


class TestDarkness:
    def test_fuzz_unknown_host_never_gets_a_byte(self):
        # every port the perimeter guards: first-contact, relay, service
        dep = authed_deployment()
        rng = random.Random(13)
        stranger = Node("stranger")
        for link in two_way("stranger", "gateway") + two_way("stranger", "controller"):
            dep.net.topology.links[(link.src, link.dst)] = link
            dep.net.topology.nodes.update((link.src, link.dst))
        dep.net.add_node(stranger)
        actions = []
        for i in range(300):
            if rng.random() < 0.5:
                port = rng.choice([62201, 5000, 4444])
                actions.append(SendDatagram(("gateway", port), rng.randbytes(rng.randrange(0, 200))))
            else:
                port = rng.choice([5000, 4444])  # the tcp ports the filter guards
                actions.append(OpenStream(stranger.new_flow(), ("gateway", port), "raw"))
        dep.net.act(stranger, actions)
        for i in range(100):
            port = rng.choice([62201, 5000])
            dep.net.act(stranger, [SendDatagram(("controller", port), rng.randbytes(rng.randrange(0, 200)))])
            dep.net.act(stranger, [OpenStream(stranger.new_flow(), ("controller", 5000), "raw")])
        dep.net.run(until=dep.net.clock + 10.0)
        replies = [r for r in dep.net.trace if r.dst == "stranger"]
        assert replies == []

    def test_malformed_spa_datagram_is_silent(self):
        dep = authed_deployment()
        stranger = Node("client")  # legitimate link, garbage traffic
        before = len(dep.net.trace)
        dep.net.add_node(stranger)
        dep.net.act(stranger, [SendDatagram(("gateway", 62201), b"\x00" * 89)])
        dep.net.run(until=dep.net.clock + 2.0)
        replies = [r for r in dep.net.trace[before:] if r.dst == "client"]
        assert replies == []

    def test_least_privilege_rule_table_subset_of_records(self):
        dep = authed_deployment()
        client = connect_client(dep)
        dep.net.act(client, client.open_service("echo-cloud", dep.net.clock))
        run_until(dep.net, lambda: client.requests[1].state == "granted")
        allowed = dep.controller.authorized_pairs()
        assert (client.session.client_id, "echo-cloud") in allowed
        assert dep.gateway().engine.rule_count() == 1


class TestGatewayIntegrity:
    def test_forged_directive_from_client_flow_ignored(self):
        dep = authed_deployment()
        client = connect_client(dep)
        gw = dep.gateway()
        forged = encode_frame(
            Kind.AH_AUTHORIZE,
            [(20, (1).to_bytes(4, "big")), (1, client.session.client_id), (10, b"echo-cloud"),
             (8, b"client"), (9, (4444).to_bytes(2, "big")), (11, (60000).to_bytes(4, "big"))],
        )
        dep.net.act(client, [Send(client._relay_flow, forged)])
        dep.net.run(until=dep.net.clock + 2.0)
        assert gw.engine.rule_count() == 0

    def test_verdict_log_records_filter_decisions(self):
        dep = authed_deployment()
        client = connect_client(dep)
        dep.net.inject_syn(("nowhere", 1), ("gateway", 4444), attacker="client")
        dep.net.run(until=dep.net.clock + 1.0)
        verdicts = [r for r in dep.net.logs["gateway"] if r.get("event") == "filter"]
        assert verdicts
        rec = verdicts[-1]
        assert rec["verdict"] == "drop"
        assert {"ts", "src", "src_port", "dst_port", "proto", "reason"} <= set(rec)
