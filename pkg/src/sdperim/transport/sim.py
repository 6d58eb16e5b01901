"""Event-driven simulated backend with a virtual clock.

Each directed link delivers a payload of n bytes after

    delay = bits / rate + length / speed        (+ any extra stages)

where bits is 8*n, or the link's fixed accounting size when one is
configured (used by experiments that want uniform per-hop packet sizes).
Processing and queuing delays are not modeled; delivery on a link is
in-order. Every delivery is recorded in a trace; runs with identical seeds
and configs produce byte-identical traces.

Streams carry a minimal three-segment handshake (initiation, accept, ack) so
half-open state is observable: an acceptor that answers an initiation whose
source never acks keeps a pending entry until the handshake timeout. A node
that declines an initiation emits nothing at all.
"""

from __future__ import annotations

import heapq
import json
import random
from dataclasses import dataclass

from .base import (
    FRAMED,
    RAW,
    AcceptStream,
    Address,
    CancelTimer,
    Close,
    Log,
    Node,
    OpenStream,
    Send,
    SendDatagram,
    SetTimer,
)

SEGMENT_OVERHEAD_BYTES = 64  # accounting size of handshake/close segments (options included)

CLS_DATAGRAM = "datagram"
CLS_SYN = "syn"
CLS_ACCEPT = "accept"
CLS_ACK = "ack"
CLS_DATA = "data"
CLS_CLOSE = "close"

PROTOCOL_CLASSES = (CLS_DATAGRAM, CLS_DATA)


@dataclass
class LinkSpec:
    """One directed link. ``alpha_default_bits`` pins the accounting size of
    every payload on the link; ``extra_stages`` appends (bits, meters) delay
    terms for path segments not modeled as nodes."""

    src: str
    dst: str
    rate_bps: float
    speed_mps: float
    beta_m: float = 0.0
    alpha_default_bits: int | None = None
    loss_rate: float = 0.0
    extra_stages: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        if self.rate_bps <= 0 or self.speed_mps <= 0:
            raise ValueError("rate and speed must be positive")
        if self.beta_m < 0:
            raise ValueError("link length must be non-negative")
        if not 0.0 <= self.loss_rate <= 1.0:
            raise ValueError("loss_rate must be in [0, 1]")

    def delay(self, nbytes: int) -> float:
        bits = float(self.alpha_default_bits) if self.alpha_default_bits is not None else nbytes * 8.0
        d = bits / self.rate_bps + self.beta_m / self.speed_mps
        for stage_bits, stage_m in self.extra_stages:
            d += stage_bits / self.rate_bps + stage_m / self.speed_mps
        return d


class Topology:
    def __init__(self, links: list[LinkSpec]):
        self.links: dict[tuple[str, str], LinkSpec] = {}
        self.nodes: set[str] = set()
        for spec in links:
            self.links[(spec.src, spec.dst)] = spec
            self.nodes.add(spec.src)
            self.nodes.add(spec.dst)

    def link(self, src: str, dst: str) -> LinkSpec | None:
        return self.links.get((src, dst))

    def require_chain(self, client: str, gateway: str, controller: str, cloud: str) -> None:
        """Check the standard deployment chain is connected both ways."""
        for a, b in ((client, gateway), (gateway, controller), (gateway, cloud)):
            if (a, b) not in self.links or (b, a) not in self.links:
                raise ValueError(f"topology missing link {a} <-> {b}")


def two_way(src: str, dst: str, rate_bps: float = 1e9, speed_mps: float = 2e8, beta_m: float = 1.0, **kw) -> list[LinkSpec]:
    return [LinkSpec(src, dst, rate_bps, speed_mps, beta_m, **kw), LinkSpec(dst, src, rate_bps, speed_mps, beta_m, **kw)]


@dataclass
class TraceRecord:
    seq: int
    cls: str
    src: str
    dst: str
    src_port: int
    dst_port: int
    size: int
    kind: int | None
    sent: float
    delivered: float | None
    link_delay: float | None = None  # pure link cost, before in-order clamping
    dropped: bool = False

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "cls": self.cls,
                "src": self.src,
                "dst": self.dst,
                "src_port": self.src_port,
                "dst_port": self.dst_port,
                "size": self.size,
                "kind": self.kind,
                "sent": self.sent,
                "delivered": self.delivered,
                "link_delay": self.link_delay,
                "dropped": self.dropped,
            },
            sort_keys=True,
        )


@dataclass
class _Flow:
    fid: int
    mode: str
    init_node: str
    init_local: int
    init_port: int  # synthetic source port
    acc_addr: Address
    acc_node: str | None = None
    acc_local: int | None = None
    state: str = "syn-sent"  # syn-sent | pending-ack | established | closed
    spoofed_src: Address | None = None


class SimNet:
    """The virtual-clock driver. Nodes are added by name; harness code can
    schedule callbacks with ``call_at``/``call_in`` and execute node API
    results with ``act``."""

    def __init__(self, topology: Topology, seed: int = 0, handshake_timeout: float = 60.0):
        self.topology = topology
        self.seed = seed
        self.handshake_timeout = handshake_timeout
        self.clock = 0.0
        self.rng = random.Random(f"simnet:{seed}")
        self._heap: list[tuple[float, int, tuple]] = []
        self._seq = 0
        self.trace: list[TraceRecord] = []
        self.nodes: dict[str, Node] = {}
        self.logs: dict[str, list[dict]] = {}
        self._flows: dict[int, _Flow] = {}
        self._by_local: dict[tuple[str, int], int] = {}  # (node, local flow) -> fid
        self._next_fid = 1
        self._next_port = 33000  # synthetic ephemeral source ports
        self._timer_version: dict[tuple[str, str], int] = {}
        self._pending_accepts: dict[str, dict[int, float]] = {}  # node -> fid -> since
        self._last_delivery: dict[tuple[str, str], float] = {}

    # -- setup -------------------------------------------------------------

    def add_node(self, node: Node) -> None:
        if node.name in self.nodes:
            raise ValueError(f"duplicate node {node.name}")
        self.nodes[node.name] = node
        self.logs[node.name] = []
        self._pending_accepts[node.name] = {}
        self._push(self.clock, ("start", node.name))

    def node_rng(self, name: str) -> random.Random:
        return random.Random(f"simnet:{self.seed}:{name}")

    # -- scheduling ----------------------------------------------------------

    def _push(self, when: float, item: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (when, self._seq, item))

    def call_at(self, when: float, fn) -> None:
        self._push(when, ("call", fn))

    def call_in(self, delay: float, fn) -> None:
        self.call_at(self.clock + delay, fn)

    # -- running -------------------------------------------------------------

    def run(self, until: float | None = None, max_events: int = 5_000_000) -> None:
        events = 0
        while self._heap:
            when, _, item = self._heap[0]
            if until is not None and when > until:
                break
            heapq.heappop(self._heap)
            self.clock = max(self.clock, when)
            self._dispatch(item)
            events += 1
            if events > max_events:
                raise RuntimeError("event budget exhausted")
        if until is not None:
            self.clock = max(self.clock, until)

    # -- link transmission ----------------------------------------------------

    def _transmit(self, cls: str, src: str, dst: str, src_port: int, dst_port: int, size: int, kind: int | None, deliver_item: tuple | None) -> TraceRecord:
        link = self.topology.link(src, dst)
        rec = TraceRecord(
            seq=self._seq + 1, cls=cls, src=src, dst=dst, src_port=src_port, dst_port=dst_port,
            size=size, kind=kind, sent=self.clock, delivered=None,
        )
        self.trace.append(rec)
        if link is None:
            rec.dropped = True
            return rec
        if link.loss_rate and self.rng.random() < link.loss_rate:
            rec.dropped = True
            return rec
        delay = link.delay(size)
        rec.link_delay = delay
        delivery = self.clock + delay
        last = self._last_delivery.get((src, dst))
        if last is not None and delivery < last:
            delivery = last  # in-order per link
        self._last_delivery[(src, dst)] = delivery
        rec.delivered = delivery
        if deliver_item is not None:
            self._push(delivery, deliver_item)
        return rec

    # -- action execution -------------------------------------------------------

    def act(self, node: Node | str, actions) -> None:
        name = node if isinstance(node, str) else node.name
        for action in actions or ():
            self._do(name, action)

    def _do(self, name: str, action) -> None:
        if isinstance(action, SendDatagram):
            host, port = action.dst
            self._transmit(CLS_DATAGRAM, name, host, 0, port, len(action.data), None,
                           ("datagram", host, port, (name, 0), action.data))
        elif isinstance(action, OpenStream):
            fid = self._next_fid
            self._next_fid += 1
            self._next_port += 1
            flow = _Flow(fid=fid, mode=action.mode, init_node=name, init_local=action.flow,
                         init_port=self._next_port, acc_addr=action.dst)
            self._flows[fid] = flow
            self._by_local[(name, action.flow)] = fid
            host, port = action.dst
            self._transmit(CLS_SYN, name, host, flow.init_port, port, SEGMENT_OVERHEAD_BYTES, None,
                           ("syn", fid))
        elif isinstance(action, AcceptStream):
            self._accept(name, action.flow)
        elif isinstance(action, Send):
            self._send_data(name, action.flow, action.data)
        elif isinstance(action, Close):
            self._close(name, action.flow)
        elif isinstance(action, SetTimer):
            version = self._timer_version.get((name, action.key), 0) + 1
            self._timer_version[(name, action.key)] = version
            self._push(self.clock + action.delay, ("timer", name, action.key, version))
        elif isinstance(action, CancelTimer):
            self._timer_version[(name, action.key)] = self._timer_version.get((name, action.key), 0) + 1
        elif isinstance(action, Log):
            self.logs[name].append({"ts": self.clock, **action.record})
        else:
            raise TypeError(f"unknown action {action!r}")

    def _flow_for(self, name: str, local: int) -> _Flow | None:
        fid = self._by_local.get((name, local))
        return self._flows.get(fid) if fid is not None else None

    def _peer(self, flow: _Flow, name: str) -> tuple[str, int, int] | None:
        """Returns (peer node, peer local id, dst port for tracing)."""
        if name == flow.init_node:
            if flow.acc_node is None:
                return None
            return flow.acc_node, flow.acc_local, flow.acc_addr[1]
        return flow.init_node, flow.init_local, flow.init_port

    def _accept(self, name: str, local: int) -> None:
        flow = self._flow_for(name, local)
        if flow is None or flow.state != "syn-sent":
            return
        flow.state = "pending-ack"
        self._pending_accepts[name][flow.fid] = self.clock
        self._push(self.clock + self.handshake_timeout, ("handshake-timeout", name, flow.fid))
        src = flow.spoofed_src[0] if flow.spoofed_src else flow.init_node
        self._transmit(CLS_ACCEPT, name, src, flow.acc_addr[1], flow.init_port, SEGMENT_OVERHEAD_BYTES, None,
                       ("accept", flow.fid))

    def _send_data(self, name: str, local: int, data: bytes) -> None:
        flow = self._flow_for(name, local)
        if flow is None or flow.state == "closed":
            return
        peer = self._peer(flow, name)
        if peer is None:
            return
        peer_node, _, dst_port = peer
        src_port = flow.init_port if name == flow.init_node else flow.acc_addr[1]
        kind = data[4] if flow.mode == FRAMED and len(data) >= 5 else None
        self._transmit(CLS_DATA, name, peer_node, src_port, dst_port, len(data), kind,
                       ("data", flow.fid, name, data))

    def _close(self, name: str, local: int) -> None:
        flow = self._flow_for(name, local)
        if flow is None or flow.state == "closed":
            return
        peer = self._peer(flow, name)
        flow.state = "closed"
        self._pending_accepts.get(name, {}).pop(flow.fid, None)
        if peer is None:
            return
        peer_node, _, dst_port = peer
        src_port = flow.init_port if name == flow.init_node else flow.acc_addr[1]
        self._transmit(CLS_CLOSE, name, peer_node, src_port, dst_port, SEGMENT_OVERHEAD_BYTES, None,
                       ("close", flow.fid, name))

    # -- attack injection ---------------------------------------------------

    def inject_syn(self, src: Address, dst: Address, size: int = SEGMENT_OVERHEAD_BYTES, attacker: str | None = None) -> None:
        """A connection-initiation segment with an arbitrary (possibly spoofed)
        source address. ``attacker`` names the link the segment physically
        traverses; defaults to the spoofed source host."""
        fid = self._next_fid
        self._next_fid += 1
        flow = _Flow(fid=fid, mode=RAW, init_node=attacker or src[0], init_local=-1,
                     init_port=src[1], acc_addr=dst, spoofed_src=src)
        self._flows[fid] = flow
        origin = attacker or src[0]
        self._transmit(CLS_SYN, origin, dst[0], src[1], dst[1], size, None, ("syn", fid))

    def half_open_count(self, node: str) -> int:
        return len(self._pending_accepts.get(node, {}))

    # -- event dispatch --------------------------------------------------------

    def _dispatch(self, item: tuple) -> None:
        op = item[0]
        if op == "start":
            node = self.nodes[item[1]]
            self.act(node, node.start(self.clock))
        elif op == "call":
            item[1]()
        elif op == "datagram":
            _, host, port, src, data = item
            node = self.nodes.get(host)
            if node is not None and port in node.udp_ports:
                src_addr = (src[0], src[1])
                self.act(node, node.on_datagram(port, src_addr, data, self.clock))
        elif op == "syn":
            self._on_syn(self._flows[item[1]])
        elif op == "accept":
            self._on_accept(self._flows[item[1]])
        elif op == "ack":
            self._on_ack(self._flows[item[1]])
        elif op == "data":
            self._on_data(self._flows[item[1]], item[2], item[3])
        elif op == "close":
            self._on_close(self._flows[item[1]], item[2])
        elif op == "timer":
            _, name, key, version = item
            if self._timer_version.get((name, key)) == version:
                node = self.nodes.get(name)  # the node may have been torn down
                if node is not None:
                    self.act(node, node.on_timer(key, self.clock))
        elif op == "handshake-timeout":
            _, name, fid = item
            pending = self._pending_accepts.get(name, {})
            if fid in pending:
                del pending[fid]
                self._flows[fid].state = "closed"
        elif op == "connect-failed":
            flow = self._flows[item[1]]
            node = self.nodes.get(flow.init_node)
            if node is not None and flow.state == "syn-sent":
                flow.state = "closed"
                self.act(node, node.on_connect_failed(flow.init_local, "refused", self.clock))

    def _on_syn(self, flow: _Flow) -> None:
        host, port = flow.acc_addr
        node = self.nodes.get(host)
        if node is None:
            return
        if port not in node.tcp_ports:
            # nothing bound: refuse (the dark case is a bound port whose node declines)
            if flow.spoofed_src is None:
                self._transmit(CLS_CLOSE, host, flow.init_node, port, flow.init_port, SEGMENT_OVERHEAD_BYTES, None,
                               ("connect-failed", flow.fid))
            return
        flow.acc_node = host
        flow.acc_local = node.new_flow()
        self._by_local[(host, flow.acc_local)] = flow.fid
        src = flow.spoofed_src or (flow.init_node, flow.init_port)
        self.act(node, node.on_stream_request(flow.acc_local, port, src, self.clock))

    def _on_accept(self, flow: _Flow) -> None:
        # accept segment arrives at the initiator
        if flow.spoofed_src is not None:
            return  # no real endpoint: the handshake never completes
        node = self.nodes.get(flow.init_node)
        if node is None or flow.state != "pending-ack":
            return
        flow.state = "established"
        self._transmit(CLS_ACK, flow.init_node, flow.acc_node, flow.init_port, flow.acc_addr[1],
                       SEGMENT_OVERHEAD_BYTES, None, ("ack", flow.fid))
        self.act(node, node.on_connected(flow.init_local, self.clock))

    def _on_ack(self, flow: _Flow) -> None:
        if flow.acc_node is None:
            return
        self._pending_accepts[flow.acc_node].pop(flow.fid, None)
        node = self.nodes[flow.acc_node]
        self.act(node, node.on_connected(flow.acc_local, self.clock))

    def _on_data(self, flow: _Flow, sender: str, data: bytes) -> None:
        if flow.state == "closed":
            return
        peer = self._peer(flow, sender)
        if peer is None:
            return
        peer_node, peer_local, _ = peer
        node = self.nodes.get(peer_node)
        if node is not None and peer_local is not None and peer_local >= 0:
            self.act(node, node.on_data(peer_local, data, self.clock))

    def _on_close(self, flow: _Flow, sender: str) -> None:
        peer = self._peer(flow, sender)
        if peer is None:
            return
        peer_node, peer_local, _ = peer
        if flow.state == "closed":
            pass
        flow.state = "closed"
        node = self.nodes.get(peer_node)
        if node is not None and peer_local is not None and peer_local >= 0:
            self.act(node, node.on_closed(peer_local, self.clock))

    # -- trace utilities ----------------------------------------------------

    def protocol_frames(self, src: str | None = None, dst: str | None = None) -> list[TraceRecord]:
        out = []
        for rec in self.trace:
            if rec.cls not in PROTOCOL_CLASSES or rec.dropped:
                continue
            if src is not None and rec.src != src:
                continue
            if dst is not None and rec.dst != dst:
                continue
            out.append(rec)
        return out

    def count_frames(self, src: str, dst: str) -> int:
        return len(self.protocol_frames(src, dst))

    def export_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rec in self.trace:
                fh.write(rec.to_json() + "\n")

    def trace_jsonl(self) -> str:
        return "".join(rec.to_json() + "\n" for rec in self.trace)
