import json

import pytest

from configreader import DEFAULTS
from configreader import SEARCH_SECTIONS
from configreader import apply_env_overrides
from configreader import config_hash
from configreader import deep_merge
from configreader import get_config_path
from configreader import load_config
from configreader import save_config
from configreader import validate_config
from errors import ConfigError


def _write(tmp_path, data):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(data))
    return path


class TestLoading:
    def test_bundled_default(self, monkeypatch):
        monkeypatch.delenv("UDC_CONFIG", raising=False)
        assert get_config_path().name == "toy_cnn.json"
        cfg = load_config(environ={})
        assert cfg["search"]["samples"] >= 1

    def test_file_is_merged_over_defaults(self, tmp_path):
        cfg = load_config(str(_write(tmp_path, {"search": {"samples": 2}})), environ={})
        assert cfg["search"]["samples"] == 2
        assert cfg["search"]["batch_size"] == DEFAULTS["search"]["batch_size"]

    def test_env_path_and_overrides(self, tmp_path, monkeypatch):
        monkeypatch.setenv("UDC_CONFIG", str(_write(tmp_path, {"seed": 4})))
        env = {"UDC_SEARCH_LAMBDA": "0.5", "UDC_CODEC_MASK_CODEC": "rle", "UDC_SEED": "9", "UDC_NOPE_X": "1"}
        cfg = load_config(environ=env)
        assert cfg["seed"] == 9
        assert cfg["search"]["lambda"] == 0.5
        assert cfg["codec"]["mask_codec"] == "rle"

    def test_missing_and_malformed_files(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.json"), environ={})
        bad = tmp_path / "bad.json"
        bad.write_text("{\"seed\": ")
        with pytest.raises(ConfigError) as err:
            load_config(str(bad), environ={})
        assert "line 1" in str(err.value)

    def test_save_round_trip(self, tmp_path):
        save_config(DEFAULTS, tmp_path / "out" / "config.json")
        assert json.loads((tmp_path / "out" / "config.json").read_text()) == DEFAULTS


def test_deep_merge_does_not_alias():
    merged = deep_merge(DEFAULTS, {"space": {"width": [1.0]}})
    merged["search"]["samples"] = 99
    assert DEFAULTS["search"]["samples"] != 99
    assert merged["space"]["operators"] == DEFAULTS["space"]["operators"]


def test_env_overrides_leave_input_alone():
    cfg = apply_env_overrides(DEFAULTS, {"UDC_SEARCH_SAMPLES": "8"})
    assert cfg["search"]["samples"] == 8
    assert DEFAULTS["search"]["samples"] == 4


@pytest.mark.parametrize("section,key,value,path", [
    ("search", "samples", 0, "search.samples"),
    ("search", "regularizer", "hinge", "search.regularizer"),
    ("search", "tau", {"kind": "exponential", "start": 0.0}, "search.tau"),
    ("finetune", "deploy_bits", 32, "finetune.deploy_bits"),
    ("finetune", "epochs", [1, 2], "finetune.epochs"),
    ("codec", "value_codec", "huffman", "codec.value_codec"),
    ("space", "bitwidth", [2, 40], "space.bitwidth[1]"),
    ("space", "operators", ["conv7x7"], "space.operators[0]"),
    ("space", "sparsity", [], "space.sparsity"),
])
def test_validation_names_the_key(section, key, value, path):
    cfg = deep_merge(DEFAULTS, {section: {key: value}})
    with pytest.raises(ConfigError) as err:
        validate_config(cfg)
    assert err.value.path == path


def test_target_needs_exactly_one_unit():
    cfg = deep_merge(DEFAULTS, {"target": {"bytes": 100}})
    with pytest.raises(ConfigError) as err:
        validate_config(cfg)
    assert err.value.path == "target"
    cfg["target"] = {"bytes": -1}
    with pytest.raises(ConfigError) as err:
        validate_config(cfg)
    assert err.value.path == "target.bytes"


class TestHash:
    def test_stable_under_key_order(self):
        a = {"seed": 1, "search": {"samples": 2, "epochs": 3}}
        b = {"search": {"epochs": 3, "samples": 2}, "seed": 1}
        assert config_hash(a) == config_hash(b)

    def test_search_sections_ignore_later_stages(self):
        other = deep_merge(DEFAULTS, {"codec": {"mask_codec": "rle"}, "finetune": {"deploy_bits": 4}})
        assert config_hash(other, SEARCH_SECTIONS) == config_hash(DEFAULTS, SEARCH_SECTIONS)
        assert config_hash(other) != config_hash(DEFAULTS)

    def test_search_sections_see_the_space(self):
        other = deep_merge(DEFAULTS, {"space": {"bitwidth": [2, 4]}})
        assert config_hash(other, SEARCH_SECTIONS) != config_hash(DEFAULTS, SEARCH_SECTIONS)
