from pathlib import Path

import pytest

from neuromas.config import (
    ConfigError,
    ModelSpec,
    TaskSpec,
    build_model,
    config_from_dict,
    load_config,
    topology_from_text,
)
from neuromas.topology import Topology, parse_topology

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


@pytest.mark.parametrize("text,layers", [("[]", ()), ("single", ()), ("2-2", (2, 2)), ([1, 3], (1, 3)), ("[1,2]", (1, 2))])
def test_topology_from_text(text, layers):
    assert topology_from_text(text) == Topology(layers)


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_committed_configs_load(name):
    cfg = load_config(CONFIGS / name)
    assert cfg.task is not None and cfg.source.endswith(name)
    train, dev = cfg.splits()
    assert len(dev) == cfg.trainer.dev_size
    assert not {t.input for t in train} & {t.input for t in dev}


def test_defaults_propagate_into_trainer():
    cfg = config_from_dict({"seed": 7, "task": {"stages": ["reverse"], "length": 3, "base": 2}})
    assert cfg.trainer.seed == 7
    assert cfg.trainer.max_tokens == cfg.task.family().output_length
    assert cfg.topology == parse_topology("1-1")


def test_explicit_trainer_seed_wins():
    cfg = config_from_dict({"seed": 7, "trainer": {"seed": 3}})
    assert cfg.seed == 7 and cfg.trainer.seed == 3


@pytest.mark.parametrize("data", [
    {"seeds": 1},
    {"model": {"ranks": 2}},
    {"task": {"stages": ["add-1"], "length": 2, "digits": 3}},
    {"task": {"stages": ["add-1"]}},
    {"trainer": {"learning_rate": 0.1}},
    {"topology": "2-0"},
    [1, 2],
])
def test_bad_configs_rejected(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_bad_yaml(tmp_path):
    path = tmp_path / "x.yaml"
    path.write_text("seed: [1,\n")
    with pytest.raises(ConfigError, match="invalid YAML"):
        load_config(path)


def test_empty_file_is_all_defaults(tmp_path):
    path = tmp_path / "empty.yaml"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.task is None and cfg.seed == 0
    with pytest.raises(ConfigError):
        cfg.require_task()


def test_model_sizes_for_schedule():
    cfg = config_from_dict({"topology": "1-1", "task": {"stages": ["add-1"], "length": 2, "base": 2},
                            "schedule": {"topologies": ["1-1", "2-2-2", "5-5-5-5-5"]}})
    model = cfg.build_model()
    assert model.features.max_depth >= 5 and model.features.max_width >= 5
    model.init(parse_topology("5-5-5-5-5"), 0)


@pytest.mark.parametrize("length,window,offset_used", [(4, None, True), (4, 5, True), (4, 4, False), (6, 15, True)])
def test_copy_prior_respects_window(length, window, offset_used):
    task = TaskSpec(("identity",), length, 2)
    model = build_model(task, ModelSpec(window=window))
    assert model.features.window == (window or length + 2)
    # the copy prior lives on the window slot at offset length+1; without it the base is bias-only
    assert (abs(model.base).sum() > abs(model.base[:, -1]).sum()) == offset_used
