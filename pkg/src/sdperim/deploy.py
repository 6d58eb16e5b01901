"""Materialize a deployment config into live nodes on either backend."""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from .client import ClientNode
from .config import DeploymentConfig, Material, build_topology, generate_material
from .controller import ControllerNode
from .gateway.node import GatewayNode, ServiceBinding
from .services import EchoNode
from .transport.sim import SimNet


@dataclass
class SimDeployment:
    net: SimNet
    cfg: DeploymentConfig
    material: Material
    controller: ControllerNode
    gateways: dict[str, GatewayNode] = field(default_factory=dict)
    clients: dict[str, ClientNode] = field(default_factory=dict)
    services: dict[str, EchoNode] = field(default_factory=dict)

    def gateway(self) -> GatewayNode:
        return next(iter(self.gateways.values()))

    def client(self) -> ClientNode:
        return next(iter(self.clients.values()))


def build_controller(cfg: DeploymentConfig, material: Material, rng) -> ControllerNode:
    clients, services, gateways = material.records(cfg)
    return ControllerNode(
        cfg.controller.host,
        material.identities[cfg.controller.id],
        material.ca.public_bytes,
        clients=clients,
        services=services,
        gateways=gateways,
        rng=rng,
        control_port=cfg.ports.control,
        spa_port=cfg.ports.spa,
        rule_ttl=cfg.timing.rule_ttl,
        skew_window=cfg.timing.skew_window,
    )


def build_gateway(cfg: DeploymentConfig, material: Material, gw_id: str, rng, controller_host: str | None = None) -> GatewayNode:
    entry = next(g for g in cfg.gateways if g.id == gw_id)
    bindings = [
        ServiceBinding(s.service_id, s.public_port, s.protected_host, s.protected_port)
        for s in cfg.services
        if s.gateway == gw_id
    ]
    return GatewayNode(
        entry.host,
        material.identities[gw_id],
        material.ca.public_bytes,
        material.spa_keys[gw_id],
        (controller_host or cfg.controller.host, cfg.ports.control),
        bindings,
        rng=rng,
        spa_port=cfg.ports.spa,
        relay_port=cfg.ports.control,
        sweep_tick=cfg.timing.sweep_tick,
        conntrack_idle=cfg.timing.conntrack_idle,
        skew_window=cfg.timing.skew_window,
    )


def build_client(cfg: DeploymentConfig, material: Material, client_id: str, rng, gateway_host: str | None = None, **kw) -> ClientNode:
    entry = next(c for c in cfg.clients if c.id == client_id)
    gw_host = gateway_host or (cfg.gateways[0].host if cfg.gateways else "gateway")
    return ClientNode(
        entry.host,
        material.identities[client_id],
        material.ca.public_bytes,
        material.spa_keys[client_id],
        gw_host,
        rng=rng,
        spa_port=cfg.ports.spa,
        relay_port=cfg.ports.control,
        **kw,
    )


def build_sim(cfg: DeploymentConfig, seed: int | None = None, start_clients: bool = True) -> SimDeployment:
    """A whole simulated deployment: controller, gateways, protected echo
    services, and (optionally deferred) clients. Material is derived from the
    seed, so identical seeds give identical runs."""
    seed = cfg.seed if seed is None else seed
    material = generate_material(cfg, random.Random(f"material:{seed}"))
    net = SimNet(build_topology(cfg), seed=seed)
    controller = build_controller(cfg, material, net.node_rng(cfg.controller.host))
    dep = SimDeployment(net=net, cfg=cfg, material=material, controller=controller)
    net.add_node(controller)
    for g in cfg.gateways:
        node = build_gateway(cfg, material, g.id, net.node_rng(g.host))
        dep.gateways[g.id] = node
        net.add_node(node)
    by_host: dict[str, list] = {}
    for s in cfg.services:
        by_host.setdefault(s.protected_host, []).append(s)
    for host, entries in by_host.items():
        ports = sorted({s.protected_port for s in entries})
        echo = EchoNode(host, ports[0], extra_ports=ports[1:])
        net.add_node(echo)
        for s in entries:
            dep.services[s.service_id] = echo
    for c in cfg.clients:
        node = build_client(cfg, material, c.id, net.node_rng(c.host))
        dep.clients[c.id] = node
        if start_clients:
            net.add_node(node)
    return dep


def default_config(**overrides) -> DeploymentConfig:
    """The single-gateway reference deployment used by tests and scenarios."""
    from .config import config_from_dict

    raw = {
        "seed": 42,
        "ports": {"spa": 62201, "control": 5000},
        "controller": {"id": "cc" * 16, "host": "controller"},
        "gateways": [{"id": "bb" * 16, "host": "gateway"}],
        "clients": [{"id": "aa" * 16, "host": "client", "services": ["echo-cloud"]}],
        "services": [
            {
                "service_id": "echo-cloud",
                "gateway": "bb" * 16,
                "protected_host": "cloud",
                "protected_port": 7777,
                "public_port": 4444,
            }
        ],
    }
    raw.update(overrides)
    return config_from_dict(raw)
