"""Experiment configuration: nested dataclasses loaded from JSON with strict keys.

Unknown keys and wrong types are rejected with the dotted path of the
offending field, e.g. ``evolution.popsize: expected int, got str``.
Disabled regularizers are written as ``null`` schedule exponents.
"""
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import data as datamod
from .genome import Genotype
from .snn import Layer, LifConfig, NetworkSpec


class ConfigError(ValueError):
    def __init__(self, path, msg):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


@dataclass
class LayerConfig:
    kind: str = "fc"
    out: int = 10
    kernel: int = 1
    stride: int = 1
    padding: int = 0


@dataclass
class LifBlock:
    tau: float = 0.5
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_width: float = 0.5


@dataclass
class NetworkConfig:
    input_shape: list = field(default_factory=lambda: [16])
    layers: list = field(default_factory=lambda: [LayerConfig("fc", 64), LayerConfig("fc", 10)])
    T: int = 4
    lif: LifBlock = field(default_factory=LifBlock)


@dataclass
class DatasetConfig:
    source: str = "blobs"          # blobs | idx | csv
    n_classes: int = 10
    n_per_class: int = 100
    dim: int = 16
    separation: float = 6.0
    images: str = ""
    labels: str = ""
    path: str = ""
    shape: Optional[list] = None   # per-sample shape for csv
    max_value: Optional[float] = None
    encoding: str = "constant"     # constant | poisson


@dataclass
class GenotypeConfig:
    beta1: float = 0.4
    beta2: float = 1.2
    G: str = "identity"            # identity | zeros | path to a genotype file


@dataclass
class EvolutionBlock:
    generations: int = 20
    popsize: Optional[int] = 8
    sigma0: float = 0.1
    lambda1: Optional[float] = -0.2
    lambda2: Optional[float] = -0.2
    n_eval: int = 3
    ablation: str = "ste"          # random | baseline | baseline_r1 | baseline_r2 | ste
    workers: int = 1


@dataclass
class TrainingBlock:
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "sgd"
    momentum: float = 0.9
    input_noise: float = 0.0


@dataclass
class EnergyBlock:
    e_mac: float = 4.6
    e_ac: float = 0.9


@dataclass
class Seeds:
    data: int = 0
    evolution: int = 0
    training: int = 0
    init: int = 0


@dataclass
class ExperimentConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    g: int = 4
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    genotype: GenotypeConfig = field(default_factory=GenotypeConfig)
    evolution: EvolutionBlock = field(default_factory=EvolutionBlock)
    training: TrainingBlock = field(default_factory=TrainingBlock)
    energy: EnergyBlock = field(default_factory=EnergyBlock)
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs/default"

    # ------------------------------------------------------------------
    def to_dict(self):
        return dataclasses.asdict(self)

    def hash(self):
        """Short digest of every setting that can change a result (not ``output_dir``)."""
        d = self.to_dict()
        d.pop("output_dir")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def network_spec(self):
        n = self.network
        lif = LifConfig(**dataclasses.asdict(n.lif))
        layers = [Layer(l.kind, l.out, l.kernel, l.stride, l.padding) for l in n.layers]
        return NetworkSpec(tuple(n.input_shape), layers, self.g, n.T, lif)

    def load_dataset(self):
        d = self.dataset
        if d.source == "blobs":
            return datamod.make_blobs(d.n_classes, d.n_per_class, d.dim, d.separation, self.seeds.data)
        if d.source == "idx":
            return datamod.load_idx(d.images, d.labels, split_seed=self.seeds.data)
        schema = {}
        if d.shape is not None:
            schema["shape"] = d.shape
        if d.max_value is not None:
            schema["max_value"] = d.max_value
        return datamod.load_csv(d.path, schema, split_seed=self.seeds.data)

    def initial_genotype(self):
        from .genome import load_genotype
        gcfg = self.genotype
        if gcfg.G == "identity":
            G = np.eye(self.g)
        elif gcfg.G == "zeros":
            G = np.zeros((self.g, self.g))
        else:
            return load_genotype(gcfg.G)
        return Genotype(gcfg.beta1, gcfg.beta2, G)

    def lambdas(self):
        e = self.evolution
        return (-math.inf if e.lambda1 is None else e.lambda1,
                -math.inf if e.lambda2 is None else e.lambda2)


ABLATIONS = ("random", "baseline", "baseline_r1", "baseline_r2", "ste")


def _check_type(path, value, tp):
    origin = getattr(tp, "__origin__", None)
    if origin is not None:  # Optional[X]
        if value is None:
            return None
        tp = [a for a in tp.__args__ if a is not type(None)][0]
    if tp is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if tp is list:
        if not isinstance(value, list):
            raise ConfigError(path, f"expected list, got {type(value).__name__}")
        return value
    if tp in (int, float, str) and (not isinstance(value, tp) or isinstance(value, bool)):
        raise ConfigError(path, f"expected {tp.__name__}, got {type(value).__name__}")
    return value


def _build(cls, raw, path):
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(where, "unknown key")
    kwargs = {}
    for name, value in raw.items():
        sub = f"{path}.{name}" if path else name
        tp = fields[name].type
        if isinstance(tp, str):
            tp = eval(tp, globals())  # resolved against this module
        if dataclasses.is_dataclass(tp):
            kwargs[name] = _build(tp, value, sub)
        elif cls is NetworkConfig and name == "layers":
            if not isinstance(value, list) or not value:
                raise ConfigError(sub, "expected a non-empty list of layers")
            kwargs[name] = [_build(LayerConfig, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        else:
            kwargs[name] = _check_type(sub, value, tp)
    return cls(**kwargs)


def validate(cfg: ExperimentConfig):
    """Semantic checks beyond types; raises :class:`ConfigError`."""
    if cfg.g < 1:
        raise ConfigError("g", "must be >= 1")
    if cfg.dataset.source not in ("blobs", "idx", "csv"):
        raise ConfigError("dataset.source", f"unknown source {cfg.dataset.source!r}")
    if cfg.dataset.encoding not in ("constant", "poisson"):
        raise ConfigError("dataset.encoding", f"unknown encoding {cfg.dataset.encoding!r}")
    if cfg.evolution.ablation not in ABLATIONS:
        raise ConfigError("evolution.ablation", f"must be one of {', '.join(ABLATIONS)}")
    for name in ("lambda1", "lambda2"):
        v = getattr(cfg.evolution, name)
        if v is not None and v > 0:
            raise ConfigError(f"evolution.{name}", "must be <= 0 (or null to disable)")
    if cfg.evolution.popsize is not None and cfg.evolution.popsize < 2:
        raise ConfigError("evolution.popsize", "must be >= 2")
    for name in ("generations", "workers"):
        if getattr(cfg.evolution, name) < 1:
            raise ConfigError(f"evolution.{name}", "must be >= 1")
    if cfg.training.lr <= 0:
        raise ConfigError("training.lr", "must be positive")
    if cfg.training.batch_size < 1:
        raise ConfigError("training.batch_size", "must be >= 1")
    if cfg.training.epochs < 0:
        raise ConfigError("training.epochs", "must be >= 0")
    if cfg.training.optimizer not in ("sgd", "momentum", "adam"):
        raise ConfigError("training.optimizer", "must be sgd, momentum or adam")
    if cfg.genotype.beta1 <= 0 or cfg.genotype.beta2 <= 0:
        raise ConfigError("genotype", "beta1 and beta2 must be positive")
    for i, l in enumerate(cfg.network.layers):
        if l.kind not in ("conv", "fc"):
            raise ConfigError(f"network.layers[{i}].kind", "must be 'conv' or 'fc'")
    try:
        cfg.network_spec()
    except ValueError as exc:
        raise ConfigError("network", str(exc)) from exc
    return cfg


def from_dict(raw):
    return validate(_build(ExperimentConfig, raw, ""))


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON ({exc})") from exc
    except OSError as exc:
        raise ConfigError("", f"{path}: {exc.strerror}") from exc
    return from_dict(raw)


def default_config():
    return ExperimentConfig()
