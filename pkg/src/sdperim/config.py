"""Deployment configuration, key provisioning, and the record store.

One YAML document describes a whole deployment; every binary reads the same
file and uses only its role section. Secrets never live in the YAML: they
are provisioned into a material directory, and the controller's authorized
hosts live in an append-only records file there.

Example::

    seed: 42
    ports: {spa: 62201, control: 5000}
    timing:
      rule_ttl: 60.0
      validation_interval: 30.0
      skew_window: 30.0
      conntrack_idle: 300.0
      sweep_tick: 1.0
    material_dir: material
    controller: {id: <32 hex>, host: controller}
    gateways:
      - {id: <32 hex>, host: gateway}
    clients:
      - {id: <32 hex>, host: client, services: [echo-cloud]}
    services:
      - {service_id: echo-cloud, gateway: <gw id>, protected_host: cloud,
         protected_port: 7777, public_port: 4444}
    topology:
      links:
        - {src: client, dst: gateway, rate_bps: 1.0e9, speed_mps: 2.0e8, beta_m: 1.0}
        ...

Topology links are directed; omit the section to get a default full chain.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import asdict, dataclass, field

import yaml
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey

from . import spa
from .controller import ClientRecord, GatewayRecord, ServiceDescriptor
from .credentials import CertificateAuthority, Identity, PeerRole
from .transport.sim import LinkSpec, Topology, two_way


class ConfigError(ValueError):
    pass


@dataclass
class PortConfig:
    spa: int = 62201
    control: int = 5000


@dataclass
class TimingConfig:
    rule_ttl: float = 60.0
    validation_interval: float = 30.0
    skew_window: float = 30.0
    conntrack_idle: float = 300.0
    sweep_tick: float = 1.0


@dataclass
class HostEntry:
    id: str  # 32 hex chars
    host: str
    services: list[str] = field(default_factory=list)

    @property
    def id_bytes(self) -> bytes:
        return bytes.fromhex(self.id)


@dataclass
class ServiceEntry:
    service_id: str
    gateway: str
    protected_host: str
    protected_port: int
    public_port: int


@dataclass
class DeploymentConfig:
    seed: int = 42
    ports: PortConfig = field(default_factory=PortConfig)
    timing: TimingConfig = field(default_factory=TimingConfig)
    material_dir: str = "material"
    controller: HostEntry = field(default_factory=lambda: HostEntry(id="00" * 16, host="controller"))
    gateways: list[HostEntry] = field(default_factory=list)
    clients: list[HostEntry] = field(default_factory=list)
    services: list[ServiceEntry] = field(default_factory=list)
    topology_links: list[dict] | None = None

    def to_dict(self) -> dict:
        out = {
            "seed": self.seed,
            "ports": asdict(self.ports),
            "timing": asdict(self.timing),
            "material_dir": self.material_dir,
            "controller": {"id": self.controller.id, "host": self.controller.host},
            "gateways": [{"id": g.id, "host": g.host} for g in self.gateways],
            "clients": [{"id": c.id, "host": c.host, "services": list(c.services)} for c in self.clients],
            "services": [asdict(s) for s in self.services],
        }
        if self.topology_links is not None:
            out["topology"] = {"links": self.topology_links}
        return out

    def validate(self) -> None:
        ids = set()
        for entry in [self.controller, *self.gateways, *self.clients]:
            if len(entry.id) != 32:
                raise ConfigError(f"id {entry.id!r} must be 32 hex chars")
            bytes.fromhex(entry.id)
            if entry.id in ids:
                raise ConfigError(f"duplicate id {entry.id}")
            ids.add(entry.id)
        gw_ids = {g.id for g in self.gateways}
        svc_ids = {s.service_id for s in self.services}
        if len(svc_ids) != len(self.services):
            raise ConfigError("duplicate service_id")
        public = set()
        for s in self.services:
            if s.gateway not in gw_ids:
                raise ConfigError(f"service {s.service_id} references unknown gateway {s.gateway}")
            if (s.gateway, s.public_port) in public:
                raise ConfigError(f"duplicate public port {s.public_port} on gateway {s.gateway}")
            public.add((s.gateway, s.public_port))
        for c in self.clients:
            for sid in c.services:
                if sid not in svc_ids:
                    raise ConfigError(f"client {c.id} references unknown service {sid}")
        # per-host port collisions
        used: dict[tuple[str, int], str] = {}

        def claim(host, port, what):
            key = (host, port)
            if key in used and used[key] != what:
                raise ConfigError(f"port collision on {host}:{port} ({used[key]} vs {what})")
            used[key] = what

        claim(self.controller.host, self.ports.control, "controller-control")
        claim(self.controller.host, self.ports.spa, "controller-spa")
        for g in self.gateways:
            claim(g.host, self.ports.control, f"gateway-relay:{g.id}")
            claim(g.host, self.ports.spa, f"gateway-spa:{g.id}")
        by_gw = {g.id: g for g in self.gateways}
        for s in self.services:
            claim(by_gw[s.gateway].host, s.public_port, f"public:{s.service_id}")
            claim(s.protected_host, s.protected_port, f"protected:{s.service_id}")


def config_from_dict(raw: dict) -> DeploymentConfig:
    try:
        cfg = DeploymentConfig(
            seed=int(raw.get("seed", 42)),
            ports=PortConfig(**raw.get("ports", {})),
            timing=TimingConfig(**raw.get("timing", {})),
            material_dir=raw.get("material_dir", "material"),
            controller=HostEntry(**raw["controller"]),
            gateways=[HostEntry(**g) for g in raw.get("gateways", [])],
            clients=[HostEntry(**c) for c in raw.get("clients", [])],
            services=[ServiceEntry(**s) for s in raw.get("services", [])],
            topology_links=(raw.get("topology") or {}).get("links") if "topology" in raw else None,
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"bad config: {exc}") from exc
    cfg.validate()
    return cfg


def load_config(path) -> DeploymentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    return config_from_dict(raw)


def dump_config(cfg: DeploymentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def build_topology(cfg: DeploymentConfig) -> Topology:
    if cfg.topology_links is not None:
        links = [LinkSpec(**{**spec, "extra_stages": tuple(map(tuple, spec.get("extra_stages", ())))}) for spec in cfg.topology_links]
        return Topology(links)
    links = []
    hosts = {cfg.controller.host} | {g.host for g in cfg.gateways}
    for g in cfg.gateways:
        links += two_way(g.host, cfg.controller.host)
    for c in cfg.clients:
        for g in cfg.gateways:
            links += two_way(c.host, g.host)
    for s in cfg.services:
        gw_host = next(g.host for g in cfg.gateways if g.id == s.gateway)
        if s.protected_host not in hosts:
            links += two_way(gw_host, s.protected_host)
    return Topology(links)


# -- material -----------------------------------------------------------------


@dataclass
class Material:
    """Everything secret for one deployment: the issuing authority, per-host
    identities and first-contact keys."""

    ca: CertificateAuthority
    identities: dict[str, Identity]  # hex id -> identity
    spa_keys: dict[str, spa.SpaKey]

    def records(self, cfg: DeploymentConfig) -> tuple[list[ClientRecord], list[ServiceDescriptor], list[GatewayRecord]]:
        clients = [
            ClientRecord(
                client_id=c.id_bytes,
                spa_key=self.spa_keys[c.id],
                certificate=self.identities[c.id].cert.encode(),
                authorized_services=list(c.services),
                validation_interval=cfg.timing.validation_interval,
            )
            for c in cfg.clients
        ]
        services = [
            ServiceDescriptor(s.service_id, bytes.fromhex(s.gateway), s.protected_host, s.protected_port, s.public_port)
            for s in cfg.services
        ]
        gateways = [
            GatewayRecord(g.id_bytes, self.spa_keys[g.id], self.identities[g.id].cert.encode())
            for g in cfg.gateways
        ]
        return clients, services, gateways


def generate_material(cfg: DeploymentConfig, rng: random.Random | None = None) -> Material:
    """Fresh material; a seeded RNG makes it reproducible (simulated runs)."""
    rand = rng or random.Random(os.urandom(16).hex())
    ca = CertificateAuthority.from_seed(rand.randbytes(32))
    identities: dict[str, Identity] = {}
    keys: dict[str, spa.SpaKey] = {}
    roles = [(cfg.controller, PeerRole.CONTROLLER)]
    roles += [(g, PeerRole.GATEWAY) for g in cfg.gateways]
    roles += [(c, PeerRole.CLIENT) for c in cfg.clients]
    for entry, role in roles:
        seed = rand.randbytes(32)
        key = Ed25519PrivateKey.from_private_bytes(seed)
        pub = key.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        cert = ca.issue(entry.id_bytes, role, pub)
        identities[entry.id] = Identity(cert, key)
        if role != PeerRole.CONTROLLER:
            keys[entry.id] = spa.SpaKey(entry.id_bytes, rand.randbytes(spa.SECRET_LEN))
    return Material(ca, identities, keys)


# -- provisioning to disk -------------------------------------------------------

_RECORDS = "records.jsonl"


def provision(cfg: DeploymentConfig, base_dir, force: bool = False) -> str:
    """Generate and write key and certificate files for every host, plus the
    controller's append-only records file. Refuses to overwrite existing
    material unless ``force``."""
    material_dir = os.path.join(base_dir, cfg.material_dir)
    if os.path.exists(material_dir) and os.listdir(material_dir) and not force:
        raise ConfigError(f"material already exists in {material_dir}; use force to replace")
    os.makedirs(material_dir, exist_ok=True)
    material = generate_material(cfg)
    _write(material_dir, "ca.pub", material.ca.public_bytes.hex())
    _write(material_dir, "ca.key", material.ca.private_bytes().hex())
    for hex_id, identity in material.identities.items():
        _write(material_dir, f"{hex_id}.cert", identity.cert.encode().hex())
        _write(material_dir, f"{hex_id}.key", identity.signing_seed().hex())
    store = RecordStore(os.path.join(material_dir, _RECORDS))
    for g in cfg.gateways:
        store.append(
            {
                "type": "gateway",
                "id": g.id,
                "secret": material.spa_keys[g.id].secret.hex(),
                "cert": material.identities[g.id].cert.encode().hex(),
            }
        )
        _write(material_dir, f"{g.id}.spa", material.spa_keys[g.id].secret.hex())
    for c in cfg.clients:
        store.append(
            {
                "type": "client",
                "id": c.id,
                "secret": material.spa_keys[c.id].secret.hex(),
                "cert": material.identities[c.id].cert.encode().hex(),
                "services": list(c.services),
                "validation_interval": cfg.timing.validation_interval,
            }
        )
        _write(material_dir, f"{c.id}.spa", material.spa_keys[c.id].secret.hex())
    return material_dir


def _write(d, name, content):
    with open(os.path.join(d, name), "w", encoding="utf-8") as fh:
        fh.write(content + "\n")


def _read(d, name) -> str:
    with open(os.path.join(d, name), "r", encoding="utf-8") as fh:
        return fh.read().strip()


def load_material(cfg: DeploymentConfig, base_dir) -> Material:
    material_dir = os.path.join(base_dir, cfg.material_dir)
    ca = CertificateAuthority.from_seed(bytes.fromhex(_read(material_dir, "ca.key")))
    identities = {}
    keys = {}
    for entry in [cfg.controller, *cfg.gateways, *cfg.clients]:
        identities[entry.id] = Identity.from_material(
            bytes.fromhex(_read(material_dir, f"{entry.id}.cert")),
            bytes.fromhex(_read(material_dir, f"{entry.id}.key")),
        )
        if entry is not cfg.controller:
            keys[entry.id] = spa.SpaKey(entry.id_bytes, bytes.fromhex(_read(material_dir, f"{entry.id}.spa")))
    return Material(ca, identities, keys)


def ca_public(cfg: DeploymentConfig, base_dir) -> bytes:
    return bytes.fromhex(_read(os.path.join(base_dir, cfg.material_dir), "ca.pub"))


class RecordStore:
    """Append-only JSON-lines store of authorized hosts and their material."""

    def __init__(self, path):
        self.path = path

    def append(self, record: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    def load(self) -> list[dict]:
        if not os.path.exists(self.path):
            return []
        out = []
        with open(self.path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    out.append(json.loads(line))
        return out

    def client_records(self, default_interval: float = 30.0) -> list[ClientRecord]:
        out = []
        for rec in self.load():
            if rec.get("type") != "client":
                continue
            out.append(
                ClientRecord(
                    client_id=bytes.fromhex(rec["id"]),
                    spa_key=spa.SpaKey(bytes.fromhex(rec["id"]), bytes.fromhex(rec["secret"])),
                    certificate=bytes.fromhex(rec["cert"]),
                    authorized_services=list(rec.get("services", [])),
                    validation_interval=float(rec.get("validation_interval", default_interval)),
                )
            )
        return out

    def gateway_records(self) -> list[GatewayRecord]:
        out = []
        for rec in self.load():
            if rec.get("type") != "gateway":
                continue
            out.append(
                GatewayRecord(
                    gateway_id=bytes.fromhex(rec["id"]),
                    spa_key=spa.SpaKey(bytes.fromhex(rec["id"]), bytes.fromhex(rec["secret"])),
                    certificate=bytes.fromhex(rec["cert"]),
                )
            )
        return out
