"""Gateway node: the accepting host in front of protected services.

Default posture is drop-everything. Three kinds of traffic get through:

- first-contact authorization datagrams on the spa port (consumed, never
  answered),
- relay streams on the control port from sources whose controller-bound
  authorization datagram was just seen (bytes are relayed verbatim to the
  controller and back), and
- service connections matching an Active firewall rule, which are spliced
  byte-for-byte onto a gateway-originated connection to the protected
  service and tracked until closed or idle.

Rules expire after their TTL; tracked connections survive rule expiry.
Every verdict is logged as one structured record.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .. import spa
from ..credentials import CredentialError, HandshakeInitiator, Identity, PeerRole
from ..transport.base import (
    FRAMED,
    RAW,
    AcceptStream,
    Close,
    Log,
    Node,
    OpenStream,
    Send,
    SendDatagram,
    SetTimer,
)
from ..wire import F, Fields, Kind, WireError, decode_frame, encode_fields, encode_frame, parse_service_entry, u8, u16, u32
from .filtering import FORWARD, FilterEngine

GATE_WINDOW = 60.0
REGISTER_RETRY = 2.0


@dataclass
class ServiceBinding:
    service_id: str
    public_port: int
    protected_host: str
    protected_port: int


@dataclass
class _RelayGate:
    client_id: bytes
    spa_bytes: bytes
    deadline: float
    consumed: bool = False


@dataclass
class _RelayFlow:
    flow: int
    relay_id: int
    client_id: bytes
    src: tuple
    dead: bool = False  # blackholed: bytes are swallowed, nothing is sent
    ready_sent: bool = False  # the relay-confirmed frame waits for the controller's verdict


@dataclass
class _Splice:
    client_flow: int
    service_flow: int
    five: tuple  # (src ip, src port, public port)
    client_id: bytes
    service_ready: bool = False
    backlog: list = field(default_factory=list)


class GatewayNode(Node):
    def __init__(
        self,
        name: str,
        identity: Identity,
        ca_public: bytes,
        spa_key: spa.SpaKey,
        controller_addr: tuple[str, int],
        services: list[ServiceBinding],
        rng,
        spa_port: int = 62201,
        relay_port: int = 5000,
        sweep_tick: float = 1.0,
        conntrack_idle: float = 300.0,
        skew_window: float = spa.DEFAULT_SKEW_WINDOW,
    ):
        super().__init__(name)
        self.identity = identity
        self.ca_public = ca_public
        self.spa_key = spa_key
        self.controller_addr = controller_addr
        self.rng = rng
        self.spa_port = spa_port
        self.relay_port = relay_port
        self.sweep_tick = sweep_tick
        self.conntrack_idle = conntrack_idle
        self.services = {s.service_id: s for s in services}
        self.by_public_port = {s.public_port: s for s in services}
        self.udp_ports = [spa_port]
        self.tcp_ports = {relay_port: FRAMED}
        for s in services:
            self.tcp_ports[s.public_port] = RAW
        self.engine = FilterEngine()
        self.client_store = spa.SpaKeyStore(skew_window)
        self.relay_gate: dict[str, _RelayGate] = {}
        self.data_gate: dict[bytes, str] = {}
        self.client_infos: dict[bytes, dict] = {}
        self.relay_flows: dict[int, _RelayFlow] = {}
        self.by_relay_id: dict[int, _RelayFlow] = {}
        self._next_relay_id = 1
        self.upstream_flow: int | None = None
        self.registered = False
        self._initiator: HandshakeInitiator | None = None
        self.channel = None
        self._counter = spa.SpaCounterSource()
        self.splices: dict[int, _Splice] = {}  # both flow ids point at the same record
        self._flow_src: dict[int, tuple] = {}

    # -- upstream channel -----------------------------------------------------

    def start(self, now):
        return self._begin_register(now)

    def _begin_register(self, now):
        nonce = self.rng.randbytes(spa.NONCE_LEN)
        packet = spa.build_spa(self.spa_key, self._counter.next(now), spa.TargetRole.CONTROLLER, now, nonce)
        self._initiator = HandshakeInitiator(self.identity, self.ca_public, nonce, self.rng.randbytes(32))
        self.upstream_flow = self.new_flow()
        return [
            SendDatagram((self.controller_addr[0], self.spa_port), packet.encode()),
            OpenStream(self.upstream_flow, self.controller_addr, FRAMED),
            SetTimer("register-retry", REGISTER_RETRY),
        ]

    def on_connected(self, flow, now):
        if flow == self.upstream_flow:
            return [Send(flow, encode_frame(Kind.CHANNEL_HELLO, [(F.SUBJECT_ID, self.identity.cert.subject_id)]))]
        splice = self.splices.get(flow)
        if splice is not None and flow == splice.service_flow:
            splice.service_ready = True
            out = [Send(splice.service_flow, chunk) for chunk in splice.backlog]
            splice.backlog.clear()
            return out
        return []

    def on_connect_failed(self, flow, reason, now):
        if flow == self.upstream_flow:
            self.registered = False
            return []
        splice = self.splices.get(flow)
        if splice is not None:
            return self._teardown_splice(splice, f"service-unreachable:{reason}")
        return []

    def _upstream(self, kind, fields) -> Send:
        blob = self.channel.seal(kind, fields if isinstance(fields, bytes) else encode_fields(fields))
        return Send(self.upstream_flow, encode_frame(Kind.SECURE, [(F.DATA, blob)]))

    # -- datagrams: the authorization gates --------------------------------------

    def on_datagram(self, port, src, data, now):
        pkt = spa.parse_spa(data)
        if pkt is None:
            return [Log({"event": "spa", "verdict": "drop", "reason": "malformed", "src": src[0]})]
        if pkt.target == spa.TargetRole.CONTROLLER:
            # structural gate only; the controller is the verifier of record
            self.relay_gate[src[0]] = _RelayGate(pkt.client_id, data, now + GATE_WINDOW)
            return [Log({"event": "spa", "verdict": "gate-relay", "src": src[0], "client": pkt.client_id.hex()})]
        verdict = self.client_store.verify(pkt, now)
        if verdict is not spa.SpaVerdict.ACCEPT:
            return [Log({"event": "spa", "verdict": verdict.value, "src": src[0]})]
        self.data_gate[pkt.client_id] = src[0]
        return [Log({"event": "spa", "verdict": "accept", "src": src[0], "client": pkt.client_id.hex()})]

    # -- inbound streams ------------------------------------------------------------

    def on_stream_request(self, flow, port, src, now):
        if port == self.relay_port:
            gate = self.relay_gate.get(src[0])
            if not self.registered or gate is None or gate.consumed or gate.deadline < now:
                return [Log({"event": "stream", "verdict": "drop", "reason": "ungated", "src": src[0], "port": port})]
            self._flow_src[flow] = src
            return [AcceptStream(flow)]
        binding = self.by_public_port.get(port)
        if binding is None:
            return []
        verdict, reason = self.engine.verdict_initiation(src[0], src[1], port, now)
        log = Log(
            {
                "event": "filter",
                "verdict": "forward" if verdict == FORWARD else "drop",
                "reason": reason,
                "src": src[0],
                "src_port": src[1],
                "dst_port": port,
                "proto": "tcp",
            }
        )
        if verdict != FORWARD:
            return [log]
        service_flow = self.new_flow()
        splice = _Splice(
            client_flow=flow,
            service_flow=service_flow,
            five=(src[0], src[1], port),
            client_id=self.engine.conntrack_client(src[0], src[1], port),
        )
        self.splices[flow] = splice
        self.splices[service_flow] = splice
        self._flow_src[flow] = src
        return [
            log,
            AcceptStream(flow),
            OpenStream(service_flow, (binding.protected_host, binding.protected_port), RAW),
        ]

    # -- frames and bytes --------------------------------------------------------------

    def on_data(self, flow, data, now):
        if flow == self.upstream_flow:
            return self._on_upstream_frame(data, now)
        relay = self.relay_flows.get(flow)
        if relay is not None:
            return self._on_relay_frame(relay, data, now)
        if flow in self._flow_src and flow not in self.splices:
            return self._on_first_relay_frame(flow, data, now)
        splice = self.splices.get(flow)
        if splice is not None:
            return self._on_splice_data(splice, flow, data, now)
        return []

    def _on_first_relay_frame(self, flow, data, now):
        src = self._flow_src[flow]
        try:
            kind, fields = decode_frame(data)
        except WireError:
            return [Log({"event": "relay", "verdict": "drop", "reason": "malformed", "src": src[0]})]
        if kind != Kind.CHANNEL_HELLO:
            return [Log({"event": "relay", "verdict": "drop", "reason": "no-hello", "src": src[0]})]
        gate = self.relay_gate.get(src[0])
        subject = fields.need(F.SUBJECT_ID)
        if gate is None or gate.consumed or gate.client_id != subject or gate.deadline < now:
            return [Log({"event": "relay", "verdict": "drop", "reason": "gate-mismatch", "src": src[0]})]
        gate.consumed = True
        relay = _RelayFlow(flow=flow, relay_id=self._next_relay_id, client_id=subject, src=src)
        self._next_relay_id += 1
        self.relay_flows[flow] = relay
        self.by_relay_id[relay.relay_id] = relay
        return [
            Log({"event": "relay", "verdict": "open", "src": src[0], "client": subject.hex()}),
            self._upstream(
                Kind.RELAY_OPEN,
                [
                    (F.FLOW, u32(relay.relay_id)),
                    (F.SUBJECT_ID, subject),
                    (F.HOST, src[0].encode()),
                    (F.PORT, u16(src[1])),
                ],
            ),
            self._upstream(Kind.SPA_FORWARD, [(F.FLOW, u32(relay.relay_id)), (F.DATA, gate.spa_bytes)]),
        ]

    def _on_relay_frame(self, relay, data, now):
        if relay.dead or not self.registered:
            return []
        return [self._upstream(Kind.RELAY_DATA, [(F.FLOW, u32(relay.relay_id)), (F.DATA, data)])]

    def _on_upstream_frame(self, data, now):
        try:
            kind, fields = decode_frame(data)
        except WireError:
            return []
        if kind == Kind.CHANNEL_ACCEPT and not self.registered:
            try:
                _, confirm, channel = self._initiator.process_accept(fields, PeerRole.CONTROLLER)
            except CredentialError as exc:
                return [Log({"event": "register", "verdict": "failed", "reason": str(exc)})]
            self.channel = channel
            body = channel.seal(Kind.AH_REGISTER, encode_fields([(F.SUBJECT_ID, self.identity.cert.subject_id)]))
            return [Send(self.upstream_flow, encode_frame(Kind.AH_REGISTER, confirm + [(F.BODY, body)]))]
        if kind == Kind.SECURE and self.channel is not None:
            try:
                inner_kind, payload = self.channel.open_blob(fields.need(F.DATA))
            except CredentialError:
                return []
            return self._on_controller_message(inner_kind, Fields.decode(payload), now)
        return []

    def _on_controller_message(self, kind, fields, now):
        if kind == Kind.AH_REGISTER_ACK:
            self.registered = True
            return [Log({"event": "register", "verdict": "ok"}), SetTimer("sweep", self.sweep_tick)]
        if kind == Kind.RELAY_DATA:
            relay = self.by_relay_id.get(fields.u32(F.FLOW))
            if relay is None or relay.dead:
                return []
            out = []
            if not relay.ready_sent:
                # controller spoke: the relay is confirmed, tell the client
                relay.ready_sent = True
                out.append(Send(relay.flow, encode_frame(Kind.RELAY_READY, [])))
            out.append(Send(relay.flow, fields.need(F.DATA)))
            return out
        if kind == Kind.RELAY_CLOSE:
            relay = self.by_relay_id.get(fields.u32(F.FLOW))
            if relay is not None:
                relay.dead = True  # swallow everything; the source times out
            return []
        if kind == Kind.CLIENT_SERVICES:
            return self._on_client_services(fields, now)
        if kind == Kind.AH_AUTHORIZE:
            return self._on_authorize(fields, now)
        if kind == Kind.AH_REVOKE:
            return self._on_revoke(fields.need(F.SUBJECT_ID), now)
        return []

    def _on_client_services(self, fields, now):
        relay = self.by_relay_id.get(fields.u32(F.FLOW))
        client_id = fields.need(F.SUBJECT_ID)
        key = spa.SpaKey(client_id, fields.need(F.SECRET), now)
        self.client_store.register(key, last_counter=fields.u64(F.COUNTER))
        entries = [parse_service_entry(e) for e in fields.all(F.ENTRY)]
        self.client_infos[client_id] = {
            "cert": fields.need(F.CERT),
            "services": {sid: (host, port) for sid, host, port in entries},
        }
        if relay is None or relay.dead:
            return []
        return [
            Send(relay.flow, fields.need(F.DATA)),  # the client-bound service list, sealed end to end
            Send(relay.flow, encode_frame(Kind.GATEWAY_READY, [(F.SPA_PORT, u16(self.spa_port))])),
            self._upstream(Kind.SERVICES_ACK, [(F.FLOW, u32(relay.relay_id)), (F.SUBJECT_ID, client_id)]),
        ]

    def _on_authorize(self, fields, now):
        token = fields.u32(F.REQUEST_ID)
        client_id = fields.need(F.SUBJECT_ID)
        service_id = fields.text(F.SERVICE_ID)
        src_host = fields.text(F.HOST)
        public_port = fields.u16(F.PORT)
        ttl = fields.u32(F.TTL_MS) / 1000.0
        if self.data_gate.get(client_id) != src_host:
            return [
                Log({"event": "rule", "verdict": "refused", "reason": "no-spa-gate", "client": client_id.hex()}),
                self._upstream(
                    Kind.AH_ACK,
                    [(F.REQUEST_ID, u32(token)), (F.OK, u8(0)), (F.REASON, b"no-spa-gate")],
                ),
            ]
        if service_id not in self.services:
            return [
                self._upstream(
                    Kind.AH_ACK,
                    [(F.REQUEST_ID, u32(token)), (F.OK, u8(0)), (F.REASON, b"unknown-service")],
                )
            ]
        rule_id, expires_at = self.engine.install_rule(client_id, src_host, service_id, public_port, now, ttl)
        return [
            Log(
                {
                    "event": "rule",
                    "verdict": "installed",
                    "rule_id": rule_id,
                    "client": client_id.hex(),
                    "service": service_id,
                    "src": src_host,
                    "expires_at": expires_at,
                }
            ),
            self._upstream(Kind.AH_ACK, [(F.REQUEST_ID, u32(token)), (F.OK, u8(1)), (F.RULE_ID, u32(rule_id))]),
        ]

    def _on_revoke(self, client_id, now):
        rules, flows = self.engine.sever_client(client_id)
        actions = [
            Log({"event": "revoke", "client": client_id.hex(), "rules": rules, "flows": len(flows)})
        ]
        severed = set(flows)
        for flow, splice in list(self.splices.items()):
            if flow != splice.client_flow:
                continue
            if splice.five in severed or splice.client_id == client_id:
                actions.extend(self._teardown_splice(splice, "revoked"))
        for relay in list(self.relay_flows.values()):
            if relay.client_id == client_id and not relay.dead:
                relay.dead = True
                actions.append(Close(relay.flow))
        self.data_gate.pop(client_id, None)
        self.client_infos.pop(client_id, None)
        self.client_store.remove(client_id)
        return actions

    # -- the data plane ----------------------------------------------------------------

    def _on_splice_data(self, splice, flow, data, now):
        if flow == splice.client_flow:
            verdict, reason = self.engine.verdict_segment(*splice.five, now)
            if verdict != FORWARD:
                return self._teardown_splice(splice, reason)
            if not splice.service_ready:
                splice.backlog.append(data)
                return []
            return [Send(splice.service_flow, data)]
        # return path from the protected service
        self.engine.touch(*splice.five, now)
        return [Send(splice.client_flow, data)]

    def _teardown_splice(self, splice, reason):
        self.splices.pop(splice.client_flow, None)
        self.splices.pop(splice.service_flow, None)
        self._flow_src.pop(splice.client_flow, None)
        self.engine.conntrack_remove(*splice.five)
        return [
            Log({"event": "splice", "verdict": "closed", "reason": reason, "src": splice.five[0]}),
            Close(splice.client_flow),
            Close(splice.service_flow),
        ]

    def on_closed(self, flow, now):
        if flow == self.upstream_flow:
            self.registered = False
            self.channel = None
            return [SetTimer("register-retry", REGISTER_RETRY)]
        relay = self.relay_flows.pop(flow, None)
        if relay is not None:
            self.by_relay_id.pop(relay.relay_id, None)
            self._flow_src.pop(flow, None)
            if self.registered and not relay.dead:
                return [self._upstream(Kind.RELAY_CLOSE, [(F.FLOW, u32(relay.relay_id))])]
            return []
        splice = self.splices.get(flow)
        if splice is not None:
            return self._teardown_splice(splice, "peer-closed")
        self._flow_src.pop(flow, None)
        return []

    # -- timers --------------------------------------------------------------------

    def on_timer(self, key, now):
        if key == "sweep":
            expired = self.engine.expire_rules(now)
            idled = self.engine.expire_idle(now, self.conntrack_idle)
            for host in [h for h, g in self.relay_gate.items() if g.deadline < now]:
                del self.relay_gate[host]
            actions = [SetTimer("sweep", self.sweep_tick)]
            if expired or idled:
                actions.append(Log({"event": "sweep", "rules_expired": expired, "conns_idled": idled}))
            return actions
        if key == "register-retry":
            if not self.registered:
                return self._begin_register(now)
            return []
        return []
