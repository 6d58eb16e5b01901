"""Controller node: the control-plane decision point.

Holds the authorized-host and service records, verifies every first-contact
authorization packet, runs the mutual-auth channel with clients (through the
gateway relay) and gateways (directly), distributes service lists, directs
gateways to open access, and revokes sessions that fail device validation.

A host not present in the key store can never elicit a byte from this node:
datagram failures are log-only, and inbound streams from ungated sources are
never accepted.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from . import spa
from .credentials import (
    CredentialError,
    HandshakeResponder,
    Identity,
    PeerRole,
    verify_certificate,
    verify_validation,
)
from .transport.base import AcceptStream, CancelTimer, Close, Log, Node, Send, SetTimer
from .wire import (
    F,
    Fields,
    Kind,
    WireError,
    decode_frame,
    encode_fields,
    encode_frame,
    service_entry,
    text,
    u8,
    u16,
    u32,
    u64,
)

GATE_WINDOW = 60.0  # seconds an accepted gate entry stays usable
GATEWAY_ACK_TIMEOUT = 2.0


@dataclass
class ServiceDescriptor:
    service_id: str
    gateway_id: bytes
    protected_host: str
    protected_port: int
    public_port: int
    protocol: str = "tcp"
    rule_ttl: float | None = None  # overrides the deployment default


@dataclass
class ClientRecord:
    client_id: bytes
    spa_key: spa.SpaKey
    certificate: bytes
    authorized_services: list[str] = field(default_factory=list)
    validation_interval: float = 30.0


@dataclass
class GatewayRecord:
    gateway_id: bytes
    spa_key: spa.SpaKey
    certificate: bytes
    host: str = ""


@dataclass
class _GateEntry:
    subject_id: bytes
    nonce: bytes
    deadline: float


@dataclass
class _GatewayLink:
    flow: int
    src: tuple
    subject_id: bytes | None = None
    responder: HandshakeResponder | None = None
    channel: object = None
    gateway_id: bytes | None = None

    @property
    def registered(self) -> bool:
        return self.channel is not None and self.gateway_id is not None


@dataclass
class _ClientCtx:
    """One relayed client conversation (keyed by gateway link + relay flow id)."""

    gw: _GatewayLink
    relay_flow: int
    client_id: bytes
    observed_host: str
    observed_port: int
    responder: HandshakeResponder | None = None
    channel: object = None
    session_id: bytes | None = None
    record: ClientRecord | None = None
    active: bool = False  # services delivered and acknowledged
    pending_nonce: bytes | None = None
    validated: bool = True


@dataclass
class Session:
    session_id: bytes
    client_id: bytes
    phase: str = "authenticated"  # authenticated -> revoked, never backwards


class ControllerNode(Node):
    def __init__(
        self,
        name: str,
        identity: Identity,
        ca_public: bytes,
        clients: list[ClientRecord],
        services: list[ServiceDescriptor],
        gateways: list[GatewayRecord],
        rng,
        control_port: int = 5000,
        spa_port: int = 62201,
        rule_ttl: float = 60.0,
        skew_window: float = spa.DEFAULT_SKEW_WINDOW,
    ):
        super().__init__(name)
        self.identity = identity
        self.ca_public = ca_public
        self.rng = rng
        self.control_port = control_port
        self.rule_ttl = rule_ttl
        self.records = {c.client_id: c for c in clients}
        self.services = {s.service_id: s for s in services}
        self.gateway_records = {g.gateway_id: g for g in gateways}
        self.store = spa.SpaKeyStore(skew_window)
        for c in clients:
            self.store.register(c.spa_key)
        for g in gateways:
            self.store.register(g.spa_key)
        self.udp_ports = [spa_port]
        self.tcp_ports = {control_port: "framed"}
        self.gated: dict[str, _GateEntry] = {}
        self.links: dict[int, _GatewayLink] = {}
        self.by_gateway: dict[bytes, _GatewayLink] = {}
        self.clients_ctx: dict[tuple[int, int], _ClientCtx] = {}
        self.sessions: dict[bytes, Session] = {}
        self._pending_auth: dict[int, dict] = {}
        self._next_request = 1

    # -- helpers ------------------------------------------------------------

    def _log(self, **record):
        return Log(record)

    def _gw_send(self, link: _GatewayLink, kind: int, fields) -> Send:
        blob = link.channel.seal(kind, fields if isinstance(fields, bytes) else encode_fields(fields))
        return Send(link.flow, encode_frame(Kind.SECURE, [(F.DATA, blob)]))

    def _client_send(self, ctx: _ClientCtx, kind: int, fields) -> Send:
        inner = ctx.channel.seal(kind, fields if isinstance(fields, bytes) else encode_fields(fields))
        frame = encode_frame(Kind.SECURE, [(F.DATA, inner)])
        return self._gw_send(ctx.gw, Kind.RELAY_DATA, [(F.FLOW, u32(ctx.relay_flow)), (F.DATA, frame)])

    def session_count(self) -> int:
        return len(self.sessions)

    def authorized_pairs(self) -> set[tuple[bytes, str]]:
        """Every (client, service) pair the records allow; gateway rule tables
        must always be a subset of this (least privilege)."""
        out = set()
        for record in self.records.values():
            for sid in record.authorized_services:
                out.add((record.client_id, sid))
        return out

    # -- datagrams: first contact --------------------------------------------

    def on_datagram(self, port, src, data, now):
        pkt = spa.parse_spa(data)
        if pkt is None:
            return [self._log(event="spa", verdict="malformed", src=src[0])]
        if pkt.target != spa.TargetRole.CONTROLLER:
            return [self._log(event="spa", verdict="wrong-target", src=src[0])]
        verdict = self.store.verify(pkt, now)
        if verdict is not spa.SpaVerdict.ACCEPT:
            return [self._log(event="spa", verdict=verdict.value, src=src[0])]
        self.gated[src[0]] = _GateEntry(pkt.client_id, pkt.nonce, now + GATE_WINDOW)
        return [self._log(event="spa", verdict="accept", src=src[0], subject=pkt.client_id.hex())]

    # -- streams ---------------------------------------------------------------

    def on_stream_request(self, flow, port, src, now):
        gate = self.gated.get(src[0])
        if gate is None or gate.deadline < now:
            return [self._log(event="stream", verdict="drop", reason="ungated", src=src[0])]
        self.links[flow] = _GatewayLink(flow=flow, src=src)
        return [AcceptStream(flow)]

    def on_closed(self, flow, now):
        link = self.links.pop(flow, None)
        if link is None:
            return []
        if link.gateway_id is not None:
            self.by_gateway.pop(link.gateway_id, None)
        for key in [k for k in self.clients_ctx if k[0] == flow]:
            ctx = self.clients_ctx.pop(key)
            # channel gone: the session ends, but established service flows
            # are the gateway's business (expiry semantics, not revocation)
            if ctx.session_id is not None:
                self.sessions.pop(ctx.session_id, None)
        return []

    def on_data(self, flow, data, now):
        link = self.links.get(flow)
        if link is None:
            return []
        try:
            kind, fields = decode_frame(data)
        except WireError:
            return [self._log(event="frame", verdict="drop", reason="malformed")]
        try:
            if kind == Kind.CHANNEL_HELLO:
                return self._on_hello(link, fields, now)
            if kind == Kind.AH_REGISTER:
                return self._on_register(link, fields, now)
            if kind == Kind.SECURE and link.registered:
                inner_kind, payload = link.channel.open_blob(fields.need(F.DATA))
                return self._on_gateway_message(link, inner_kind, Fields.decode(payload), now)
        except (CredentialError, WireError, KeyError) as exc:
            self.links.pop(flow, None)
            return [self._log(event="channel", verdict="closed", reason=str(exc)), Close(flow)]
        return [self._log(event="frame", verdict="ignored", kind=kind)]

    def _on_hello(self, link, fields, now):
        subject = fields.need(F.SUBJECT_ID)
        gate = self.gated.get(link.src[0])
        if gate is None or gate.subject_id != subject or gate.deadline < now:
            self.links.pop(link.flow, None)
            return [self._log(event="hello", verdict="drop", reason="gate-mismatch"), Close(link.flow)]
        link.subject_id = subject
        link.responder = HandshakeResponder(
            self.identity, gate.nonce, self.rng.randbytes(32), self.rng.randbytes(16)
        )
        return [Send(link.flow, encode_frame(Kind.CHANNEL_ACCEPT, link.responder.accept_fields()))]

    def _on_register(self, link, fields, now):
        if link.responder is None or link.subject_id is None:
            raise CredentialError("register before hello")
        cert = verify_certificate(fields.need(F.CERT), self.ca_public, PeerRole.GATEWAY)
        if cert.subject_id != link.subject_id or cert.subject_id not in self.gateway_records:
            raise CredentialError("gateway certificate subject mismatch")
        channel = link.responder.finish(cert, fields.need(F.EPH_PUB), fields.need(F.SIG))
        inner_kind, payload = channel.open_blob(fields.need(F.BODY))
        if inner_kind != Kind.AH_REGISTER:
            raise CredentialError("unexpected register body")
        link.channel = channel
        link.gateway_id = cert.subject_id
        self.by_gateway[cert.subject_id] = link
        self.gateway_records[cert.subject_id].host = link.src[0]
        return [
            self._log(event="gateway", verdict="registered", gateway=cert.subject_id.hex()),
            self._gw_send(link, Kind.AH_REGISTER_ACK, [(F.OK, u8(1))]),
        ]

    # -- relayed client conversation ---------------------------------------------

    def _on_gateway_message(self, link, kind, fields, now):
        if kind == Kind.RELAY_OPEN:
            relay_flow = fields.u32(F.FLOW)
            ctx = _ClientCtx(
                gw=link,
                relay_flow=relay_flow,
                client_id=fields.need(F.SUBJECT_ID),
                observed_host=fields.text(F.HOST),
                observed_port=fields.u16(F.PORT),
            )
            self.clients_ctx[(link.flow, relay_flow)] = ctx
            return []
        if kind == Kind.SPA_FORWARD:
            return self._on_client_spa(link, fields, now)
        if kind == Kind.RELAY_DATA:
            ctx = self.clients_ctx.get((link.flow, fields.u32(F.FLOW)))
            if ctx is None:
                return []
            return self._on_client_frame(ctx, fields.need(F.DATA), now)
        if kind == Kind.SERVICES_ACK:
            ctx = self.clients_ctx.get((link.flow, fields.u32(F.FLOW)))
            if ctx is None or ctx.session_id is None:
                return []
            ctx.active = True
            interval = ctx.record.validation_interval
            return [SetTimer(f"validate:{ctx.gw.flow}:{ctx.relay_flow}", interval)]
        if kind == Kind.AH_ACK:
            return self._on_ah_ack(fields, now)
        if kind == Kind.RELAY_CLOSE:
            ctx = self.clients_ctx.pop((link.flow, fields.u32(F.FLOW)), None)
            if ctx is not None and ctx.session_id is not None:
                self.sessions.pop(ctx.session_id, None)
            return []
        return [self._log(event="gateway-frame", verdict="ignored", kind=kind)]

    def _on_client_spa(self, link, fields, now):
        relay_flow = fields.u32(F.FLOW)
        ctx = self.clients_ctx.get((link.flow, relay_flow))
        if ctx is None:
            return []
        out = []
        pkt = spa.parse_spa(fields.need(F.DATA))
        verdict = None
        if pkt is None or pkt.target != spa.TargetRole.CONTROLLER or pkt.client_id != ctx.client_id:
            verdict = "malformed"
        else:
            verdict = self.store.verify(pkt, now).value
        record = self.records.get(ctx.client_id)
        if verdict != "accept" or record is None:
            # dark toward the client: the gateway blackholes the flow
            self.clients_ctx.pop((link.flow, relay_flow), None)
            out.append(self._log(event="client-spa", verdict=verdict or "unknown-client", client=ctx.client_id.hex()))
            out.append(self._gw_send(link, Kind.RELAY_CLOSE, [(F.FLOW, u32(relay_flow))]))
            return out
        ctx.record = record
        ctx.responder = HandshakeResponder(self.identity, pkt.nonce, self.rng.randbytes(32), self.rng.randbytes(16))
        accept_frame = encode_frame(Kind.CHANNEL_ACCEPT, ctx.responder.accept_fields())
        out.append(self._log(event="client-spa", verdict="accept", client=ctx.client_id.hex()))
        out.append(self._gw_send(link, Kind.RELAY_DATA, [(F.FLOW, u32(relay_flow)), (F.DATA, accept_frame)]))
        return out

    def _on_client_frame(self, ctx, frame, now):
        try:
            kind, fields = decode_frame(frame)
        except WireError:
            return [self._log(event="client-frame", verdict="drop", reason="malformed")]
        if kind == Kind.LOGIN_REQUEST:
            return self._on_login(ctx, fields, now)
        if kind == Kind.SECURE and ctx.channel is not None:
            try:
                inner_kind, payload = ctx.channel.open_blob(fields.need(F.DATA))
            except CredentialError as exc:
                return [self._log(event="client-frame", verdict="drop", reason=str(exc))]
            return self._on_client_message(ctx, inner_kind, Fields.decode(payload), now)
        return [self._log(event="client-frame", verdict="ignored", kind=kind)]

    def _on_login(self, ctx, fields, now):
        if ctx.session_id is not None and ctx.channel is not None:
            # replayed login on an authenticated conversation: idempotent
            return [
                self._client_send(
                    ctx,
                    Kind.LOGIN_RESPONSE,
                    [(F.SESSION, ctx.session_id), (F.INTERVAL_MS, u32(int(ctx.record.validation_interval * 1000)))],
                )
            ]
        if ctx.responder is None or ctx.record is None:
            return []
        try:
            cert = verify_certificate(fields.need(F.CERT), self.ca_public, PeerRole.CLIENT)
            if cert.subject_id != ctx.client_id:
                raise CredentialError("certificate/client mismatch")
            channel = ctx.responder.finish(cert, fields.need(F.EPH_PUB), fields.need(F.SIG))
            inner_kind, payload = channel.open_blob(fields.need(F.BODY))
            if inner_kind != Kind.LOGIN_REQUEST or Fields.decode(payload).need(F.SUBJECT_ID) != ctx.client_id:
                raise CredentialError("login body mismatch")
        except (CredentialError, WireError) as exc:
            # certificate mismatch: the conversation is torn down
            key = (ctx.gw.flow, ctx.relay_flow)
            self.clients_ctx.pop(key, None)
            return [
                self._log(event="login", verdict="rejected", reason=str(exc), client=ctx.client_id.hex()),
                self._gw_send(ctx.gw, Kind.RELAY_CLOSE, [(F.FLOW, u32(ctx.relay_flow))]),
            ]
        ctx.channel = channel
        ctx.session_id = self.rng.randbytes(16)
        self.sessions[ctx.session_id] = Session(ctx.session_id, ctx.client_id)
        actions = [
            self._log(event="login", verdict="ok", client=ctx.client_id.hex(), session=ctx.session_id.hex()),
            self._client_send(
                ctx,
                Kind.LOGIN_RESPONSE,
                [(F.SESSION, ctx.session_id), (F.INTERVAL_MS, u32(int(ctx.record.validation_interval * 1000)))],
            ),
        ]
        actions.extend(self._push_services(ctx))
        return actions

    def client_service_list(self, client_id: bytes) -> list[tuple[str, str, int]]:
        """The service view for one client: exactly its authorized services,
        resolved to (service id, gateway host, public port)."""
        record = self.records.get(client_id)
        if record is None:
            return []
        out = []
        for sid in record.authorized_services:
            svc = self.services.get(sid)
            if svc is None:
                continue
            host = self.gateway_records[svc.gateway_id].host or ""
            out.append((sid, host, svc.public_port))
        return out

    def _push_services(self, ctx):
        entries = self.client_service_list(ctx.client_id)
        ih_fields = [(F.ENTRY, service_entry(sid, host, port)) for sid, host, port in entries]
        ih_inner = ctx.channel.seal(Kind.IH_SERVICES, encode_fields(ih_fields))
        ih_frame = encode_frame(Kind.SECURE, [(F.DATA, ih_inner)])
        gw_entries = []
        for sid in ctx.record.authorized_services:
            svc = self.services.get(sid)
            if svc is None or svc.gateway_id != ctx.gw.gateway_id:
                continue
            gw_entries.append((F.ENTRY, service_entry(sid, svc.protected_host, svc.protected_port)))
        payload = [
            (F.FLOW, u32(ctx.relay_flow)),
            (F.SUBJECT_ID, ctx.client_id),
            (F.CERT, ctx.record.certificate),
            (F.SECRET, ctx.record.spa_key.secret),
            (F.COUNTER, u64(self.store.last_counter(ctx.client_id))),
            (F.DATA, ih_frame),
        ] + gw_entries
        return [self._gw_send(ctx.gw, Kind.CLIENT_SERVICES, payload)]

    def _on_client_message(self, ctx, kind, fields, now):
        if kind == Kind.CONNECTION_REQUEST:
            return self._on_connection_request(ctx, fields, now)
        if kind == Kind.DEVICE_VALIDATE_ACK:
            return self._on_validate_ack(ctx, fields, now)
        return [self._log(event="client-message", verdict="ignored", kind=kind)]

    def _on_connection_request(self, ctx, fields, now):
        service_id = fields.text(F.SERVICE_ID)
        request_id = fields.u32(F.REQUEST_ID)
        svc = self.services.get(service_id)
        session = self.sessions.get(ctx.session_id) if ctx.session_id else None
        if (
            session is None
            or session.phase != "authenticated"
            or svc is None
            or service_id not in ctx.record.authorized_services
        ):
            return [
                self._log(event="authorize", verdict="denied", reason="unauthorized", service=service_id),
                self._client_send(
                    ctx,
                    Kind.CONNECTION_RESPONSE,
                    [(F.REQUEST_ID, u32(request_id)), (F.OK, u8(0)), (F.REASON, text("unauthorized"))],
                ),
            ]
        gw_link = self.by_gateway.get(svc.gateway_id)
        if gw_link is None:
            return [
                self._log(event="authorize", verdict="denied", reason="gateway-unavailable", service=service_id),
                self._client_send(
                    ctx,
                    Kind.CONNECTION_RESPONSE,
                    [(F.REQUEST_ID, u32(request_id)), (F.OK, u8(0)), (F.REASON, text("GatewayUnavailable"))],
                ),
            ]
        token = self._next_request
        self._next_request += 1
        ttl = svc.rule_ttl if svc.rule_ttl is not None else self.rule_ttl
        self._pending_auth[token] = {
            "ctx": ctx,
            "request_id": request_id,
            "service_id": service_id,
            "svc": svc,
        }
        directive = [
            (F.REQUEST_ID, u32(token)),
            (F.SUBJECT_ID, ctx.client_id),
            (F.SERVICE_ID, text(service_id)),
            (F.HOST, text(ctx.observed_host)),
            (F.PORT, u16(svc.public_port)),
            (F.TTL_MS, u32(int(ttl * 1000))),
        ]
        return [
            self._gw_send(gw_link, Kind.AH_AUTHORIZE, directive),
            SetTimer(f"ahack:{token}", GATEWAY_ACK_TIMEOUT),
        ]

    def _on_ah_ack(self, fields, now):
        token = fields.u32(F.REQUEST_ID)
        pending = self._pending_auth.pop(token, None)
        if pending is None:
            return []
        ctx = pending["ctx"]
        ok = fields.need(F.OK)[0]
        actions = [CancelTimer(f"ahack:{token}")]
        if ok:
            svc = pending["svc"]
            host = self.gateway_records[svc.gateway_id].host or ""
            actions.append(
                self._client_send(
                    ctx,
                    Kind.CONNECTION_RESPONSE,
                    [
                        (F.REQUEST_ID, u32(pending["request_id"])),
                        (F.OK, u8(1)),
                        (F.HOST, text(host)),
                        (F.PORT, u16(svc.public_port)),
                    ],
                )
            )
        else:
            reason = fields.get(F.REASON) or b"rejected"
            actions.append(
                self._client_send(
                    ctx,
                    Kind.CONNECTION_RESPONSE,
                    [(F.REQUEST_ID, u32(pending["request_id"])), (F.OK, u8(0)), (F.REASON, reason)],
                )
            )
        return actions

    # -- device validation -------------------------------------------------------

    def _on_validate_ack(self, ctx, fields, now):
        nonce = fields.need(F.NONCE)
        sig = fields.need(F.SIG)
        if ctx.pending_nonce is None or nonce != ctx.pending_nonce:
            return [self._log(event="validate", verdict="stale", client=ctx.client_id.hex())]
        cert = verify_certificate(ctx.record.certificate, self.ca_public)
        if not verify_validation(cert, nonce, sig):
            return self._revoke(ctx, "validation-signature", now)
        ctx.pending_nonce = None
        ctx.validated = True
        return [self._log(event="validate", verdict="ok", client=ctx.client_id.hex())]

    def on_timer(self, key, now):
        if key.startswith("validate:"):
            _, gw_flow, relay_flow = key.split(":")
            ctx = self.clients_ctx.get((int(gw_flow), int(relay_flow)))
            if ctx is None or ctx.channel is None:
                return []
            if ctx.pending_nonce is not None and not ctx.validated:
                return self._revoke(ctx, "validation-timeout", now)
            ctx.pending_nonce = self.rng.randbytes(16)
            ctx.validated = False
            return [
                self._client_send(ctx, Kind.DEVICE_VALIDATE, [(F.NONCE, ctx.pending_nonce)]),
                SetTimer(key, ctx.record.validation_interval),
            ]
        if key.startswith("ahack:"):
            token = int(key.split(":")[1])
            pending = self._pending_auth.pop(token, None)
            if pending is None:
                return []
            ctx = pending["ctx"]
            return [
                self._log(event="authorize", verdict="denied", reason="GatewayUnavailable"),
                self._client_send(
                    ctx,
                    Kind.CONNECTION_RESPONSE,
                    [
                        (F.REQUEST_ID, u32(pending["request_id"])),
                        (F.OK, u8(0)),
                        (F.REASON, text("GatewayUnavailable")),
                    ],
                ),
            ]
        return []

    def _revoke(self, ctx, reason, now):
        key = (ctx.gw.flow, ctx.relay_flow)
        self.clients_ctx.pop(key, None)
        if ctx.session_id is not None and ctx.session_id in self.sessions:
            self.sessions[ctx.session_id].phase = "revoked"
            del self.sessions[ctx.session_id]
        actions = [self._log(event="revoke", client=ctx.client_id.hex(), reason=reason)]
        for link in self.by_gateway.values():
            actions.append(self._gw_send(link, Kind.AH_REVOKE, [(F.SUBJECT_ID, ctx.client_id)]))
        return actions
