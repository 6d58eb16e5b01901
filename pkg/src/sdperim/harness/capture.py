"""Per-interval capture series for the adversarial experiments."""

from __future__ import annotations

import io
from dataclasses import dataclass, field

ATTACK_FRAME_LIMIT = 60  # labeling only, never used for filtering decisions


@dataclass
class CaptureSeries:
    """One row per observation second: legitimate acknowledged traffic,
    attack segments seen and forwarded, the filter-work proxy, and the
    target's half-open backlog."""

    start: float
    interval: float = 1.0
    acked_segments: list[int] = field(default_factory=list)
    attack_segments_seen: list[int] = field(default_factory=list)
    attack_segments_forwarded: list[int] = field(default_factory=list)
    cpu_proxy: list[int] = field(default_factory=list)
    half_open: list[int] = field(default_factory=list)

    def __post_init__(self):
        self._check()

    def _check(self):
        for seen, fwd in zip(self.attack_segments_seen, self.attack_segments_forwarded):
            if fwd > seen:
                raise ValueError("forwarded attack segments cannot exceed those seen")

    def append(self, acked: int, attack_seen: int, attack_forwarded: int, cpu: int, half_open: int):
        if attack_forwarded > attack_seen:
            raise ValueError("forwarded attack segments cannot exceed those seen")
        self.acked_segments.append(acked)
        self.attack_segments_seen.append(attack_seen)
        self.attack_segments_forwarded.append(attack_forwarded)
        self.cpu_proxy.append(cpu)
        self.half_open.append(half_open)

    def __len__(self):
        return len(self.acked_segments)

    def rows(self):
        for i in range(len(self)):
            yield {
                "t": self.start + i * self.interval,
                "acked_segments": self.acked_segments[i],
                "attack_segments_seen": self.attack_segments_seen[i],
                "attack_segments_forwarded": self.attack_segments_forwarded[i],
                "cpu_proxy": self.cpu_proxy[i],
                "half_open": self.half_open[i],
            }

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("t,acked_segments,attack_segments_seen,attack_segments_forwarded,cpu_proxy,half_open\n")
        for row in self.rows():
            buf.write(
                f"{row['t']},{row['acked_segments']},{row['attack_segments_seen']},"
                f"{row['attack_segments_forwarded']},{row['cpu_proxy']},{row['half_open']}\n"
            )
        return buf.getvalue()


def label_attack_segments(trace_records, dst: str, dst_port: int) -> list:
    """Initiation segments at the target whose frame length is under the
    attack-labeling threshold; returns the records (reporting only)."""
    out = []
    for rec in trace_records:
        cls = rec["cls"] if isinstance(rec, dict) else rec.cls
        if cls != "syn":
            continue
        r_dst = rec["dst"] if isinstance(rec, dict) else rec.dst
        r_port = rec["dst_port"] if isinstance(rec, dict) else rec.dst_port
        size = rec["size"] if isinstance(rec, dict) else rec.size
        if r_dst == dst and r_port == dst_port and size < ATTACK_FRAME_LIMIT:
            out.append(rec)
    return out
