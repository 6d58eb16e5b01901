from .filtering import BACKEND, DROP, FORWARD, FilterEngine, available_engines
from .node import GatewayNode, ServiceBinding

__all__ = ["BACKEND", "DROP", "FORWARD", "FilterEngine", "available_engines", "GatewayNode", "ServiceBinding"]
