import json
from pathlib import Path

import numpy as np
import pytest

from gaprune.artifacts import (canonical_json, file_sha256, fnv1a64, fnv1a64_hex, read_arrays, read_envelope,
                               write_arrays, write_envelope)
from gaprune.config import ExperimentConfig, build_config, config_from_dict, load_config
from gaprune.errors import ConfigError, IntegrityError


# --- artifacts --------------------------------------------------------------------


@pytest.mark.parametrize("data, expected", [
    (b"", 0xCBF29CE484222325),
    (b"a", 0xAF63DC4C8601EC8C),
    (b"foobar", 0x85944171F73967E8),
])
def test_fnv1a64_reference_vectors(data, expected):
    assert fnv1a64(data) == expected
    assert fnv1a64_hex(data) == f"{expected:016x}"


def test_canonical_json_is_order_independent():
    assert canonical_json({"b": 1, "a": [1, 2]}) == canonical_json({"a": [1, 2], "b": 1})


def test_envelope_round_trip_and_tamper(tmp_path):
    path = tmp_path / "x.bin"
    write_envelope(path, {"kind": "test", "n": 3}, b"\x00\x01\x02")
    header, payload = read_envelope(path)
    assert header == {"kind": "test", "n": 3} and payload == b"\x00\x01\x02"
    raw = path.read_bytes()
    path.write_bytes(raw.replace(b'"n":3', b'"n":4'))
    with pytest.raises(IntegrityError, match="fingerprint"):
        read_envelope(path)
    path.write_bytes(raw[:4] + b"\x09" + raw[5:])
    with pytest.raises(IntegrityError, match="version"):
        read_envelope(path)


def test_arrays_round_trip(tmp_path):
    path = tmp_path / "a.bin"
    arrays = {"x": np.arange(6.0).reshape(2, 3), "y": np.array([np.pi])}
    write_arrays(path, {"kind": "probe"}, arrays)
    header, back = read_arrays(path, "probe")
    assert [t["name"] for t in header["tensors"]] == ["x", "y"]
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes()
    with pytest.raises(IntegrityError):
        read_arrays(path, "scores")
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(IntegrityError, match="truncated"):
        read_arrays(path, "probe")


def test_file_sha256(tmp_path):
    path = tmp_path / "f"
    path.write_bytes(b"abc")
    assert file_sha256(path) == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


# --- config -----------------------------------------------------------------------


def test_defaults_are_materialized():
    cfg = build_config({})
    d = cfg.to_dict()
    assert d["train"]["learning_rate"] == 1e-2
    assert d["retrain"]["steps"] == 100 and d["retrain"]["seed"] == 1
    assert d["sampling"]["k"] == 768
    assert d["nce"]["temperature"] == 0.05
    assert d["dai"] == {"alpha": 0.2, "beta": 1.0, "gamma": 0.5, "epsilon": 1e-8, "alignment_granularity": "row"}
    assert d["experiment"]["sparsities"] == [0.3, 0.5]
    assert cfg == ExperimentConfig()
    json.dumps(d)


def test_round_trip_through_dict():
    cfg = build_config({"train": {"steps": 7}, "experiment": {"sparsities": [0.9]}})
    assert config_from_dict(cfg.to_dict()) == cfg


def test_seed_derivation():
    cfg = build_config({"experiment": {"seed": 3}})
    assert cfg.world.seed == 3 and cfg.encoder.seed == 3 and cfg.retrain.seed == 4
    assert cfg.data.pool_seed == 53 and cfg.data.eval_seed == 103
    # a command-line seed overrides section seeds given in the document
    over = build_config({"encoder": {"seed": 9}, "experiment": {"seed": 3}}, seed=5)
    assert over.encoder.seed == 5 and over.experiment.seed == 5
    assert build_config({"encoder": {"seed": 9}}).encoder.seed == 9


@pytest.mark.parametrize("doc, match", [
    ({"modle": {}}, "unknown config section"),
    ({"train": {"stepz": 3}}, "unknown key"),
    ({"train": {"steps": "3"}}, "integer"),
    ({"train": {"steps": True}}, "integer"),
    ({"train": {"steps": 0}}, "steps"),
    ({"dai": {"alpha": "high"}}, "number"),
    ({"experiment": {"sparsities": [1.0]}}, "sparsity"),
    ({"experiment": {"sparsities": 0.5}}, "list"),
    ({"experiment": {"methods": ["dai", "wanda"]}}, "methods"),
    ({"experiment": {"seed": -1}}, "seed"),
    ({"train": 3}, "table"),
])
def test_strict_validation(doc, match):
    with pytest.raises(ConfigError, match=match):
        build_config(doc)


def test_int_accepted_for_float_fields():
    assert build_config({"dai": {"alpha": 1}}).dai.alpha == 1.0


def test_load_config_file(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[experiment]\nseed = 2\nsparsities = [0.5]\n\n[train]\nsteps = 5\n")
    cfg = load_config(path)
    assert cfg.experiment.sparsities == (0.5,) and cfg.train.steps == 5 and cfg.train.seed == 2
    path.write_text("[train\n")
    with pytest.raises(ConfigError):
        load_config(path)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.toml")


def test_shipped_fixture_config_matches_defaults():
    path = Path(__file__).resolve().parents[1] / "configs" / "fixture.toml"
    assert load_config(path) == build_config({})
