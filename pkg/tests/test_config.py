import pytest
import yaml

from wavmtl.config import (SEED_ENV, ConfigError, dump_config, load_config, parse_config)
from wavmtl.data import KWS, SV


def test_defaults():
    cfg = parse_config(None, env={})
    assert cfg.seed == 7
    assert cfg.sre.d_model == 64 and cfg.sre.conv_channels == 64
    assert cfg.train.lr_head == 1e-4 and cfg.train.lr_sre == 1e-5
    assert cfg.train.freeze_iters == 1000 and cfg.train.tasks == [KWS, SV]
    assert cfg.head_for(SV).head.n_out == 256
    assert cfg.head_for(SV).angular_softmax.margin == 4
    assert cfg.data.source == "synthetic"


def test_partial_sections_merge_with_defaults():
    cfg = parse_config({"train": {"batch_sizes": {"kws": 3}, "lr_head": "1e-3"},
                        "sre": {"n_layers": 1}}, env={})
    assert cfg.train.batch_sizes == {KWS: 3, SV: 8}
    assert cfg.train.lr_head == 1e-3
    assert cfg.sre.n_layers == 1 and cfg.sre.d_model == 64


@pytest.mark.parametrize("doc, message", [
    ({"optimizer": {}}, "unknown key 'optimizer'"),
    ({"sre": {"d_modle": 32}}, "unknown key 'sre.d_modle'"),
    ({"heads": [{"task": "kws", "dropout": 0.1}]}, "unknown key 'heads\\[0\\].dropout'"),
    ({"data": {"synthetic": {"speakers": 3}}}, "unknown key 'data.synthetic.speakers'"),
    ({"sre": {"n_layers": 1.5}}, "sre.n_layers must be an integer"),
    ({"train": {"lr_head": "fast"}}, "train.lr_head must be a number"),
    ({"sre": {"d_model": 30}}, "divisible"),
    ({"train": {"lr_sre": 1e-3}}, "lr_sre"),
    ({"heads": [{"task": "asr"}]}, "task must be 'kws' or 'sv'"),
    ({"heads": [{"task": "kws"}, {"task": "kws"}]}, "once"),
    ({"heads": [{"task": "kws", "n_out": 5}], "train": {"tasks": ["kws"]}}, "n_keywords"),
    ({"data": {"source": "folders"}}, "data.kws_train is required"),
    ({"seed": "abc"}, "seed must be an integer"),
])
def test_invalid_documents(doc, message):
    with pytest.raises(ConfigError, match=message):
        parse_config(doc, env={})


def test_missing_head_for_a_trained_task():
    with pytest.raises(ConfigError, match="no head configured for task 'sv'"):
        parse_config({"heads": [{"task": "kws"}]}, env={})


def test_seed_environment_override():
    assert parse_config({"seed": 3}, env={SEED_ENV: "11"}).seed == 11
    assert parse_config({"seed": 3}, env={SEED_ENV: ""}).seed == 3
    with pytest.raises(ConfigError, match=SEED_ENV):
        parse_config(None, env={SEED_ENV: "x"})


def test_hash_is_stable_and_sensitive():
    a = parse_config({"seed": 1}, env={})
    b = parse_config({"seed": 1}, env={})
    c = parse_config({"seed": 2}, env={})
    assert a.hash == b.hash != c.hash
    assert len(a.hash) == 64


def test_dump_round_trip(tmp_path):
    cfg = parse_config({"sre": {"n_layers": 1}, "train": {"max_iterations": 9},
                        "heads": [{"task": "kws"}, {"task": "sv", "output": "embedding",
                                                    "input_seconds": 2,
                                                    "angular_softmax": {"margin": 2}}]},
                       env={})
    path = tmp_path / "run.yaml"
    path.write_text(dump_config(cfg))
    again = load_config(path, env={})
    assert again.to_dict() == cfg.to_dict() and again.hash == cfg.hash


def test_load_errors(tmp_path):
    with pytest.raises(OSError):
        load_config(tmp_path / "missing.yaml", env={})
    bad = tmp_path / "bad.yaml"
    bad.write_text("sre: [unclosed")
    with pytest.raises(ConfigError, match="YAML"):
        load_config(bad, env={})
    listy = tmp_path / "list.yaml"
    listy.write_text(yaml.safe_dump([1, 2]))
    with pytest.raises(ConfigError, match="mapping"):
        load_config(listy, env={})
