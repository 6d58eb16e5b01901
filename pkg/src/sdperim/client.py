"""Client node: the initiating host.

Authentication walks SPA -> relay stream -> channel handshake -> login ->
service list, all through the gateway relay; nothing is ever sent to a
service port before that completes. Opening a service sends a gateway-bound
SPA followed by a connection request, and exposes the granted tunnel as raw
streams to the gateway's public port.

On any verification failure the far side stays silent, so failure here is
always a timeout: the SPA phase retries up to ``MAX_SPA_ATTEMPTS`` times and
then gives up.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from . import spa
from .credentials import CredentialError, HandshakeInitiator, Identity, PeerRole, sign_validation
from .transport.base import FRAMED, RAW, CancelTimer, Close, Log, Node, OpenStream, Send, SendDatagram, SetTimer
from .wire import F, Fields, Kind, WireError, decode_frame, encode_fields, encode_frame, parse_service_entry, text, u32

SPA_TIMEOUT = 5.0
MAX_SPA_ATTEMPTS = 3
REQUEST_TIMEOUT = 5.0


class Phase(enum.Enum):
    IDLE = "idle"
    SPA_SENT = "spa-sent"
    CHANNEL_UP = "channel-up"
    AUTHENTICATED = "authenticated"
    SERVICE_CONNECTED = "service-connected"
    REVOKED = "revoked"


_ORDER = [Phase.IDLE, Phase.SPA_SENT, Phase.CHANNEL_UP, Phase.AUTHENTICATED, Phase.SERVICE_CONNECTED]


@dataclass
class ClientSession:
    client_id: bytes
    phase: Phase = Phase.IDLE
    session_id: bytes | None = None
    services: list[tuple[str, str, int]] = field(default_factory=list)
    validation_interval: float = 0.0

    def advance(self, phase: Phase) -> None:
        if self.phase == Phase.REVOKED:
            return
        if phase == Phase.REVOKED or _ORDER.index(phase) > _ORDER.index(self.phase):
            self.phase = phase


@dataclass
class Tunnel:
    service_id: str
    endpoint: tuple[str, int]
    flow: int | None = None
    established: bool = False
    closed: bool = False
    rx: bytearray = field(default_factory=bytearray)
    tx_backlog: list = field(default_factory=list)


@dataclass
class ServiceRequest:
    request_id: int
    service_id: str
    state: str = "pending"  # pending | granted | denied | timeout
    reason: str = ""


class ClientNode(Node):
    # validation_mode is a test hook: "answer" (normal), "silent", "tamper"
    def __init__(
        self,
        name: str,
        identity: Identity,
        ca_public: bytes,
        spa_key: spa.SpaKey,
        gateway_host: str,
        rng,
        spa_port: int = 62201,
        relay_port: int = 5000,
        validation_mode: str = "answer",
    ):
        super().__init__(name)
        self.identity = identity
        self.ca_public = ca_public
        self.spa_key = spa_key
        self.gateway_host = gateway_host
        self.spa_port = spa_port
        self.relay_port = relay_port
        self.rng = rng
        self.validation_mode = validation_mode
        self.spa_timeout = SPA_TIMEOUT
        self.max_spa_attempts = MAX_SPA_ATTEMPTS
        self.request_timeout = REQUEST_TIMEOUT
        self.session = ClientSession(client_id=spa_key.client_id)
        self.ready = False  # gateway confirmed the authorization material
        self.failed = False
        self.failure = ""
        self._counter = spa.SpaCounterSource()
        self._initiator: HandshakeInitiator | None = None
        self.channel = None
        self._relay_flow: int | None = None
        self._attempts = 0
        self._next_request = 1
        self.requests: dict[int, ServiceRequest] = {}
        self.tunnels: dict[str, Tunnel] = {}
        self._flow_tunnel: dict[int, Tunnel] = {}

    # -- authentication ------------------------------------------------------

    def start(self, now):
        return self._attempt_connect(now)

    def _attempt_connect(self, now):
        self._attempts += 1
        nonce = self.rng.randbytes(spa.NONCE_LEN)
        packet = spa.build_spa(self.spa_key, self._counter.next(now), spa.TargetRole.CONTROLLER, now, nonce)
        self._initiator = HandshakeInitiator(self.identity, self.ca_public, nonce, self.rng.randbytes(32))
        actions = []
        if self._relay_flow is not None:
            actions.append(Close(self._relay_flow))
        self._relay_flow = self.new_flow()
        self.session.advance(Phase.SPA_SENT)
        actions.extend(
            [
                SendDatagram((self.gateway_host, self.spa_port), packet.encode()),
                OpenStream(self._relay_flow, (self.gateway_host, self.relay_port), FRAMED),
                SetTimer("spa-timeout", self.spa_timeout),
            ]
        )
        return actions

    def on_connected(self, flow, now):
        if flow == self._relay_flow:
            return [Send(flow, encode_frame(Kind.CHANNEL_HELLO, [(F.SUBJECT_ID, self.session.client_id)]))]
        tunnel = self._flow_tunnel.get(flow)
        if tunnel is not None:
            tunnel.established = True
            self.session.advance(Phase.SERVICE_CONNECTED)
            out = [Send(flow, chunk) for chunk in tunnel.tx_backlog]
            tunnel.tx_backlog.clear()
            return out
        return []

    def on_connect_failed(self, flow, reason, now):
        if flow == self._relay_flow:
            return self._retry_or_fail(now, f"connect-failed:{reason}")
        tunnel = self._flow_tunnel.pop(flow, None)
        if tunnel is not None:
            tunnel.closed = True
        return []

    def on_timer(self, key, now):
        if key == "spa-timeout":
            if self.ready:
                return []
            return self._retry_or_fail(now, "timeout")
        if key.startswith("svc-timeout:"):
            request_id = int(key.split(":")[1])
            req = self.requests.get(request_id)
            if req is not None and req.state == "pending":
                req.state = "timeout"
                req.reason = "gateway-timeout"
            return []
        return []

    def _retry_or_fail(self, now, reason):
        if self.ready:
            return []
        if self._attempts >= self.max_spa_attempts:
            self.failed = True
            self.failure = reason
            return [Log({"event": "connect", "verdict": "failed", "reason": reason})]
        return self._attempt_connect(now)

    def on_data(self, flow, data, now):
        if flow == self._relay_flow:
            return self._on_relay_frame(data, now)
        tunnel = self._flow_tunnel.get(flow)
        if tunnel is not None:
            tunnel.rx.extend(data)
            return []
        return []

    def _on_relay_frame(self, data, now):
        try:
            kind, fields = decode_frame(data)
        except WireError:
            return []
        if kind == Kind.RELAY_READY:
            return []
        if kind == Kind.CHANNEL_ACCEPT and self.channel is None:
            try:
                _, confirm, channel = self._initiator.process_accept(fields, PeerRole.CONTROLLER)
            except CredentialError:
                # an imposter controller: go dark and let the timeout handle it
                return [Log({"event": "channel", "verdict": "rejected-accept"})]
            self.channel = channel
            self.session.advance(Phase.CHANNEL_UP)
            body = channel.seal(Kind.LOGIN_REQUEST, encode_fields([(F.SUBJECT_ID, self.session.client_id)]))
            return [Send(self._relay_flow, encode_frame(Kind.LOGIN_REQUEST, confirm + [(F.BODY, body)]))]
        if kind == Kind.SECURE and self.channel is not None:
            try:
                inner_kind, payload = self.channel.open_blob(fields.need(F.DATA))
            except CredentialError:
                return []
            return self._on_controller_message(inner_kind, Fields.decode(payload), now)
        if kind == Kind.GATEWAY_READY:
            self.ready = True
            return [CancelTimer("spa-timeout"), Log({"event": "connect", "verdict": "ok"})]
        return []

    def _on_controller_message(self, kind, fields, now):
        if kind == Kind.LOGIN_RESPONSE:
            self.session.session_id = fields.need(F.SESSION)
            self.session.validation_interval = fields.u32(F.INTERVAL_MS) / 1000.0
            self.session.advance(Phase.AUTHENTICATED)
            return []
        if kind == Kind.IH_SERVICES:
            self.session.services = [parse_service_entry(e) for e in fields.all(F.ENTRY)]
            return []
        if kind == Kind.CONNECTION_RESPONSE:
            return self._on_connection_response(fields, now)
        if kind == Kind.DEVICE_VALIDATE:
            return self._on_validate(fields, now)
        return []

    def _on_connection_response(self, fields, now):
        request_id = fields.u32(F.REQUEST_ID)
        req = self.requests.get(request_id)
        if req is None or req.state != "pending":
            return []
        if not fields.need(F.OK)[0]:
            req.state = "denied"
            req.reason = (fields.get(F.REASON) or b"").decode("utf-8", "replace")
            return [CancelTimer(f"svc-timeout:{request_id}"), Log({"event": "service", "verdict": "denied", "reason": req.reason})]
        req.state = "granted"
        endpoint = (fields.text(F.HOST), fields.u16(F.PORT))
        self.tunnels[req.service_id] = Tunnel(service_id=req.service_id, endpoint=endpoint)
        return [CancelTimer(f"svc-timeout:{request_id}"), Log({"event": "service", "verdict": "granted", "service": req.service_id})]

    def _on_validate(self, fields, now):
        if self.validation_mode == "silent":
            return []
        nonce = fields.need(F.NONCE)
        if self.validation_mode == "tamper":
            sig = bytes(64)
        else:
            sig = sign_validation(self.identity, nonce)
        blob = self.channel.seal(Kind.DEVICE_VALIDATE_ACK, encode_fields([(F.NONCE, nonce), (F.SIG, sig)]))
        return [Send(self._relay_flow, encode_frame(Kind.SECURE, [(F.DATA, blob)]))]

    def on_closed(self, flow, now):
        if flow == self._relay_flow:
            if self.ready:
                self.session.advance(Phase.REVOKED)
                out = []
                for tunnel in self.tunnels.values():
                    if tunnel.flow is not None and not tunnel.closed:
                        tunnel.closed = True
                        out.append(Close(tunnel.flow))
                return out
            return self._retry_or_fail(now, "closed")
        tunnel = self._flow_tunnel.pop(flow, None)
        if tunnel is not None:
            tunnel.closed = True
        return []

    # -- service access (driver/harness entry points) ---------------------------

    def open_service(self, service_id: str, now: float):
        """Request access to one authorized service. Precondition: the session
        is authenticated and the service is in the cached list; violating it
        raises before anything touches the wire."""
        if self.session.phase not in (Phase.AUTHENTICATED, Phase.SERVICE_CONNECTED):
            raise ValueError("session not authenticated")
        if service_id not in [sid for sid, _, _ in self.session.services]:
            raise ValueError(f"service {service_id!r} not in the authorized list")
        packet = spa.build_spa(
            self.spa_key, self._counter.next(now), spa.TargetRole.GATEWAY, now, self.rng.randbytes(spa.NONCE_LEN)
        )
        request_id = self._next_request
        self._next_request += 1
        self.requests[request_id] = ServiceRequest(request_id, service_id)
        blob = self.channel.seal(
            Kind.CONNECTION_REQUEST,
            encode_fields([(F.SERVICE_ID, text(service_id)), (F.REQUEST_ID, u32(request_id))]),
        )
        return [
            SendDatagram((self.gateway_host, self.spa_port), packet.encode()),
            Send(self._relay_flow, encode_frame(Kind.SECURE, [(F.DATA, blob)])),
            SetTimer(f"svc-timeout:{request_id}", self.request_timeout),
        ]

    def open_tunnel_stream(self, service_id: str):
        """Open one raw stream through a granted tunnel; bytes flow via
        ``tunnel_send`` and accumulate in ``Tunnel.rx``."""
        tunnel = self.tunnels.get(service_id)
        if tunnel is None:
            raise ValueError(f"no granted tunnel for {service_id!r}")
        flow = self.new_flow()
        tunnel.flow = flow
        tunnel.established = False
        tunnel.closed = False
        self._flow_tunnel[flow] = tunnel
        return [OpenStream(flow, tunnel.endpoint, RAW)]

    def tunnel_send(self, service_id: str, data: bytes):
        tunnel = self.tunnels.get(service_id)
        if tunnel is None or tunnel.flow is None or tunnel.closed:
            raise ValueError("tunnel not open")
        if not tunnel.established:
            tunnel.tx_backlog.append(data)
            return []
        return [Send(tunnel.flow, data)]
