"""Node/driver contract shared by the simulated and real-socket backends.

Protocol roles are written sans-io: a node consumes events (datagrams,
stream lifecycle, frames, timers) and returns a list of actions. Drivers own
all sockets and clocks. Because the same node classes run under both
backends, the protocol state machines cannot diverge between them.

Stream modes: ``framed`` streams carry length-prefixed control frames (the
driver splits them, the simulator preserves boundaries); ``raw`` streams
carry opaque application bytes (the forwarded-service data plane).
"""

from __future__ import annotations

from dataclasses import dataclass

Address = tuple[str, int]

FRAMED = "framed"
RAW = "raw"


@dataclass(frozen=True)
class SendDatagram:
    dst: Address
    data: bytes


@dataclass(frozen=True)
class OpenStream:
    flow: int
    dst: Address
    mode: str = FRAMED


@dataclass(frozen=True)
class AcceptStream:
    flow: int


@dataclass(frozen=True)
class Send:
    flow: int
    data: bytes


@dataclass(frozen=True)
class Close:
    flow: int


@dataclass(frozen=True)
class SetTimer:
    key: str
    delay: float


@dataclass(frozen=True)
class CancelTimer:
    key: str


@dataclass(frozen=True)
class Log:
    record: dict


Action = SendDatagram | OpenStream | AcceptStream | Send | Close | SetTimer | CancelTimer | Log


class Node:
    """Base protocol node. Subclasses override the ``on_*`` hooks they need;
    every hook returns a list of actions (default none).

    ``udp_ports`` and ``tcp_ports`` declare listeners; drivers bind them.
    ``tcp_ports`` maps port -> stream mode.
    """

    def __init__(self, name: str):
        self.name = name
        self.udp_ports: list[int] = []
        self.tcp_ports: dict[int, str] = {}
        self._next_flow = 1

    def new_flow(self) -> int:
        flow = self._next_flow
        self._next_flow += 1
        return flow

    # -- lifecycle ---------------------------------------------------------

    def start(self, now: float) -> list[Action]:
        return []

    # -- events ------------------------------------------------------------

    def on_datagram(self, port: int, src: Address, data: bytes, now: float) -> list[Action]:
        return []

    def on_stream_request(self, flow: int, port: int, src: Address, now: float) -> list[Action]:
        """Inbound initiation. Return an AcceptStream action to take the flow;
        returning nothing declines it silently."""
        return []

    def on_connected(self, flow: int, now: float) -> list[Action]:
        return []

    def on_connect_failed(self, flow: int, reason: str, now: float) -> list[Action]:
        return []

    def on_data(self, flow: int, data: bytes, now: float) -> list[Action]:
        return []

    def on_closed(self, flow: int, now: float) -> list[Action]:
        return []

    def on_timer(self, key: str, now: float) -> list[Action]:
        return []
