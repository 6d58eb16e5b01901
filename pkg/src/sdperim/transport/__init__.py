from .base import FRAMED, RAW, Address, Node
from .sim import LinkSpec, SimNet, Topology, TraceRecord, two_way

__all__ = ["FRAMED", "RAW", "Address", "Node", "LinkSpec", "SimNet", "Topology", "TraceRecord", "two_way"]
