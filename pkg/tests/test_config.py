import pytest
import tomli_w
from hypothesis import given, settings
from hypothesis import strategies as st

from ogan.config import ConfigError, ExperimentConfig, dump_config, load_config

from conftest import ROOT


@pytest.mark.parametrize("name", ["default", "desk", "tiny"])
def test_shipped_configs_load(name):
    cfg = load_config(ROOT / "configs" / f"{name}.toml")
    assert cfg.resolve(cfg.paths.ontology).exists()


def test_round_trip_is_lossless(tmp_path):
    cfg = load_config(ROOT / "configs" / "desk.toml")
    path = tmp_path / "c.toml"
    path.write_text(dump_config(cfg), encoding="utf-8")
    again = load_config(path)
    assert again.to_dict() == cfg.to_dict()
    assert again.config_hash() == cfg.config_hash()


def test_defaults_match_schema():
    cfg = ExperimentConfig.from_dict({})
    sch = cfg.train_schedule()
    assert sch.n_critic == 5 and sch.num_stages is None and sch.max_steps is None
    assert cfg.text.dim == 50 and cfg.metrics.n_real == 1000


@pytest.mark.parametrize("doc,msg", [
    ({"gan": {"chanels": [1]}}, "unknown keys"),
    ({"wat": 1}, "unknown top-level"),
    ({"seed": "zero"}, "expected int"),
    ({"schedule": {"n_critic": 0}}, "n_critic"),
    ({"gan": {"max_resolution": 24}}, "power of two"),
    ({"labelnet": {"dropout": 1.5}}, "dropout"),
    ({"data": "x"}, "must be a table"),
])
def test_invalid(doc, msg):
    with pytest.raises(ConfigError, match=msg):
        ExperimentConfig.from_dict(doc)


def test_seed_flows_to_components():
    cfg = ExperimentConfig.from_dict({"seed": 7})
    from ogan.ontology import Ontology

    assert cfg.train_schedule().seed == 7
    assert cfg.gan_config(Ontology(("A",), (("a", 0),))).init_seed == 7
    assert cfg.labelnet_config(3).seed == 7


def test_word_vector_dim_check(tmp_path):
    (tmp_path / "v.txt").write_text("a 1 2 3\n")
    cfg = ExperimentConfig.from_dict({"paths": {"word_vectors": "v.txt"}, "text": {"dim": 4}}, base_dir=tmp_path)
    with pytest.raises(ConfigError, match="dimension 3"):
        cfg.word_table()
    ok = ExperimentConfig.from_dict({"paths": {"word_vectors": "v.txt"}, "text": {"dim": 3}}, base_dir=tmp_path)
    assert ok.word_table().dim == 3


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31), n_critic=st.integers(1, 9), lr=st.floats(1e-5, 1e-1),
       dim=st.integers(1, 300), channels=st.lists(st.integers(1, 256), min_size=4, max_size=4))
def test_round_trip_property(tmp_path_factory, seed, n_critic, lr, dim, channels):
    doc = {"seed": seed, "schedule": {"n_critic": n_critic, "lr": lr}, "text": {"dim": dim},
           "gan": {"channels": channels}}
    cfg = ExperimentConfig.from_dict(doc)
    path = tmp_path_factory.mktemp("c") / "c.toml"
    path.write_text(tomli_w.dumps(cfg.to_dict()), encoding="utf-8")
    assert load_config(path).to_dict() == cfg.to_dict()
