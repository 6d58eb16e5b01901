"""Deployment config: round trip, validation, provisioning, record store."""

import os

import pytest
import yaml

from sdperim.config import (
    ConfigError,
    RecordStore,
    config_from_dict,
    dump_config,
    load_config,
    load_material,
    provision,
)
from sdperim.deploy import default_config


def test_round_trip_is_identity(tmp_path):
    cfg = default_config()
    text = dump_config(cfg)
    again = config_from_dict(yaml.safe_load(text))
    assert dump_config(again) == text
    assert again.to_dict() == cfg.to_dict()


def test_load_from_file(tmp_path):
    path = tmp_path / "deploy.yaml"
    path.write_text(dump_config(default_config()))
    cfg = load_config(path)
    assert cfg.services[0].public_port == 4444


@pytest.mark.parametrize(
    "mutate,message",
    [
        (lambda d: d["services"].append(dict(d["services"][0])), "duplicate"),
        (lambda d: d["services"][0].update(gateway="ee" * 16), "unknown gateway"),
        (lambda d: d["clients"][0]["services"].append("ghost"), "unknown service"),
        (lambda d: d["clients"][0].update(id="zz"), "hex"),
        (lambda d: d["gateways"].append({"id": "bb" * 16, "host": "gateway2"}), "duplicate id"),
    ],
)
def test_validation_rejects_bad_configs(mutate, message):
    raw = default_config().to_dict()
    mutate(raw)
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_port_collision_rejected():
    raw = default_config().to_dict()
    # protected service landing on the controller's control port and host
    raw["services"][0].update(protected_host="controller", protected_port=5000)
    with pytest.raises(ConfigError, match="collision"):
        config_from_dict(raw)


def test_provision_writes_material_and_refuses_overwrite(tmp_path):
    cfg = default_config()
    (tmp_path / "deploy.yaml").write_text(dump_config(cfg))
    material_dir = provision(cfg, tmp_path)
    names = sorted(os.listdir(material_dir))
    assert "ca.pub" in names and "records.jsonl" in names
    assert f"{cfg.clients[0].id}.spa" in names
    assert f"{cfg.gateways[0].id}.cert" in names
    with pytest.raises(ConfigError, match="force"):
        provision(cfg, tmp_path)
    provision(cfg, tmp_path, force=True)  # explicit override allowed


def test_provisioned_material_loads_and_matches_records(tmp_path):
    cfg = default_config()
    material_dir = provision(cfg, tmp_path)
    material = load_material(cfg, tmp_path)
    store = RecordStore(os.path.join(material_dir, "records.jsonl"))
    clients = store.client_records()
    assert len(clients) == 1
    record = clients[0]
    assert record.client_id == cfg.clients[0].id_bytes
    assert record.spa_key.secret == material.spa_keys[cfg.clients[0].id].secret
    assert record.authorized_services == ["echo-cloud"]
    gateways = store.gateway_records()
    assert len(gateways) == 1
    assert gateways[0].gateway_id == cfg.gateways[0].id_bytes


def test_record_store_is_append_only(tmp_path):
    store = RecordStore(tmp_path / "records.jsonl")
    store.append({"type": "client", "id": "aa" * 16, "secret": "00" * 32, "cert": "", "services": []})
    store.append({"type": "gateway", "id": "bb" * 16, "secret": "01" * 32, "cert": ""})
    lines = (tmp_path / "records.jsonl").read_text().strip().splitlines()
    assert len(lines) == 2
    assert len(store.client_records()) == 1
    assert len(store.gateway_records()) == 1
