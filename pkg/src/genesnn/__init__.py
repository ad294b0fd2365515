"""Spiking networks whose weights are grown from per-layer gene encodings and one shared
gene-interaction matrix, with the wiring genotype tuned by CMA-ES."""
from .config import ExperimentConfig, load_config
from .data import Dataset, encode_spikes, load_csv, load_idx, make_blobs
from .evolution import CMAES, EvolutionConfig, fmin, run_evolution
from .fitness import FitnessConfig, evaluate_candidate, fitness, spatial_entropy_reg, temporal_diff_reg
from .genome import (Genome, Genotype, load_genotype, materialize_weights, param_count,
                     sample_encoding, save_genotype, svd_construct)
from .snn import Layer, LifConfig, NetworkSpec, conv, energy_report, fc, forward
from .training import TrainConfig, evaluate, grad_check, train

__version__ = "0.1.0"
