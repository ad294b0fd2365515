import json
import math

import numpy as np
import pytest

from genesnn.config import ConfigError, ExperimentConfig, default_config, from_dict, load_config
from genesnn.genome import Genotype, save_genotype


def test_defaults_round_trip():
    cfg = default_config()
    assert from_dict(cfg.to_dict()) == cfg
    net = cfg.network_spec()
    assert net.g == 4 and net.T == 4 and net.n_classes == 10


def test_partial_config_fills_defaults():
    cfg = from_dict({"g": 2, "training": {"lr": 0.1}})
    assert cfg.g == 2 and cfg.training.lr == 0.1 and cfg.training.epochs == 100


@pytest.mark.parametrize("raw,path", [
    ({"trainig": {}}, "trainig"),
    ({"training": {"lr": 0.1, "epoch": 3}}, "training.epoch"),
    ({"network": {"layers": [{"kind": "fc", "out": 3}, {"kind": "fc", "out": 2, "kernal": 3}]}},
     r"network.layers\[1\].kernal"),
])
def test_unknown_keys_are_rejected_with_path(raw, path):
    with pytest.raises(ConfigError, match=f"{path}: unknown key"):
        from_dict(raw)


@pytest.mark.parametrize("raw,match", [
    ({"evolution": {"popsize": "8"}}, "evolution.popsize: expected int"),
    ({"training": {"lr": True}}, "training.lr: expected float"),
    ({"g": 0}, "^g:"),
    ({"evolution": {"lambda1": 0.5}}, "evolution.lambda1"),
    ({"evolution": {"ablation": "best"}}, "evolution.ablation"),
    ({"dataset": {"source": "cifar"}}, "dataset.source"),
    ({"network": {"layers": []}}, "network.layers"),
    ({"network": {"layers": [{"kind": "rnn", "out": 2}]}}, r"network.layers\[0\].kind"),
    ({"network": {"input_shape": [16], "layers": [{"kind": "conv", "out": 2, "kernel": 3}]}}, "network"),
    ({"training": "fast"}, "training: expected an object"),
])
def test_invalid_values(raw, match):
    with pytest.raises(ConfigError, match=match):
        from_dict(raw)


def test_int_is_accepted_for_float_fields():
    assert from_dict({"training": {"lr": 1}}).training.lr == 1.0


def test_null_schedule_exponent_disables_term():
    cfg = from_dict({"evolution": {"lambda1": None}})
    assert cfg.lambdas() == (-math.inf, -0.2)


def test_hash_is_stable_and_sensitive():
    a, b = default_config(), default_config()
    assert a.hash() == b.hash() and len(a.hash()) == 16
    b.training.lr = 0.02
    assert a.hash() != b.hash()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="No such file"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")


def test_initial_genotype_sources(tmp_path):
    cfg = default_config()
    s = cfg.initial_genotype()
    assert s == Genotype(0.4, 1.2, np.eye(4))
    save_genotype(tmp_path / "s.json", Genotype(0.7, 2.0, np.full((4, 4), 0.5)))
    cfg.genotype.G = str(tmp_path / "s.json")
    assert cfg.initial_genotype().beta1 == 0.7


def test_dataset_sources(tmp_path):
    cfg = from_dict({"dataset": {"n_classes": 3, "n_per_class": 10, "dim": 4}})
    ds = cfg.load_dataset()
    assert ds.samples.shape == (30, 4)
    (tmp_path / "d.csv").write_text("label,a,b,c,d\n" + "".join(f"{i % 2},1,2,3,{i}\n" for i in range(10)))
    cfg = from_dict({"dataset": {"source": "csv", "path": str(tmp_path / "d.csv"), "shape": [2, 2]}})
    assert cfg.load_dataset().sample_shape == (2, 2)


def test_config_file_round_trip(tmp_path):
    cfg = default_config()
    cfg.evolution.lambda2 = None
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_config(tmp_path / "c.json") == cfg
    assert isinstance(cfg, ExperimentConfig)


def test_output_dir_does_not_change_hash():
    a, b = default_config(), default_config()
    b.output_dir = "elsewhere"
    assert a.hash() == b.hash()
