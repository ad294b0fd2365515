"""End-to-end pipelines shared by the CLI and the scripts: evolve, post-train, ablate."""
import copy
import csv
import functools
import math
import os
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig
from .evolution import CANDIDATE_CSV_HEADER, EVOLUTION_CSV_HEADER, EvolutionConfig, run_evolution
from .fitness import FitnessConfig, WORST_FITNESS, evaluate_candidate, fitness
from .genome import Genome
from .training import TrainConfig, TrainingDiverged, evaluate, train

# schedule exponents per ablation preset; None means "use the config's values"
ABLATION_LAMBDAS = {
    "baseline": (-math.inf, -math.inf),
    "baseline_r1": (None, -math.inf),
    "baseline_r2": (-math.inf, None),
    "ste": (None, None),
}

ABLATION_CSV_HEADER = ("variant", "seed", "best_f", "best_generation", "val_loss", "val_accuracy",
                       "test_accuracy", "diverged")
TOY_CSV_HEADER = ("seed", "epoch", "loss", "accuracy")


def fitness_config(cfg: ExperimentConfig, ablation=None):
    ablation = ablation or cfg.evolution.ablation
    l1, l2 = cfg.lambdas()
    o1, o2 = ABLATION_LAMBDAS.get(ablation, (None, None))
    return FitnessConfig(l1 if o1 is None else o1, l2 if o2 is None else o2, cfg.evolution.n_eval)


def train_config(cfg: ExperimentConfig, seed=None):
    t = cfg.training
    return TrainConfig(lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, n_eval=cfg.evolution.n_eval,
                       seed=cfg.seeds.training if seed is None else seed, optimizer=t.optimizer,
                       momentum=t.momentum, encoding=cfg.dataset.encoding, input_noise=t.input_noise)


class GenotypeProblem:
    """Picklable fitness callable ``(genotype, generation, seed) -> CandidateEval``."""

    def __init__(self, net, dataset, fcfg: FitnessConfig, tcfg: TrainConfig):
        self.net, self.dataset, self.fcfg, self.tcfg = net, dataset, fcfg, tcfg

    def __call__(self, genotype, t, seed):
        return evaluate_candidate(genotype, self.net, self.dataset, t, self.fcfg, self.tcfg, seed)


def _rescore(fcfg, ev, t):
    if ev is None or getattr(ev, "diverged", False):
        return WORST_FITNESS
    return fitness(ev.L, ev.r1, ev.r2, t, fcfg)


def make_rescore(fcfg):
    return functools.partial(_rescore, fcfg)


def random_genome(net, seed):
    """Encodings and ``G`` drawn from an unclamped standard normal."""
    shapes, _ = net.encoding_plan()
    rng = np.random.default_rng([seed, 7])
    return Genome([rng.normal(size=s) for s in shapes], rng.normal(size=(net.g, net.g)))


def evolve(cfg: ExperimentConfig, ablation=None, dataset=None, on_generation=None):
    net = cfg.network_spec()
    dataset = cfg.load_dataset() if dataset is None else dataset
    fcfg = fitness_config(cfg, ablation)
    problem = GenotypeProblem(net, dataset, fcfg, train_config(cfg))
    ecfg = EvolutionConfig(cfg.evolution.generations, cfg.evolution.popsize, cfg.evolution.sigma0,
                           cfg.seeds.evolution, cfg.evolution.workers)
    return run_evolution(problem, cfg.initial_genotype(), ecfg, rescore=make_rescore(fcfg),
                         on_generation=on_generation)


@dataclass
class PostTrainResult:
    genome: Genome
    val_loss: float
    val_accuracy: float
    test_accuracy: float
    diverged: bool
    loss_history: list
    accuracy_history: list


def post_train(cfg: ExperimentConfig, genome: Genome, dataset, epochs, seed):
    """Train ``genome`` on the train split, then score the validation and test splits."""
    net = cfg.network_spec()
    tcfg = train_config(cfg, seed)
    try:
        res = train(net, genome, *dataset.split("train"), tcfg, epochs=epochs)
        val = evaluate(net, res.genome, *dataset.split("val"), encoding=tcfg.encoding, seed=seed)
        test = evaluate(net, res.genome, *dataset.split("test"), encoding=tcfg.encoding, seed=seed)
    except TrainingDiverged:
        return PostTrainResult(genome, math.inf, 0.0, 0.0, True, [], [])
    diverged = not np.isfinite(val.loss)
    return PostTrainResult(res.genome, val.loss, val.accuracy, test.accuracy, diverged,
                           res.loss_history, res.accuracy_history)


def ablation_run(cfg: ExperimentConfig, variant, seed, post_epochs, dataset=None, log_dir=None):
    """One row of the ablation table: evolve under ``variant`` (unless random), then post-train.

    With ``log_dir`` the evolution and candidate logs of the run are written
    there as ``<variant>_<seed>_evolution.csv`` and ``..._candidates.csv``.
    """
    dataset = cfg.load_dataset() if dataset is None else dataset
    cfg = _with_seed(cfg, seed)
    net = cfg.network_spec()
    if variant == "random":
        genome, best_f, best_gen = random_genome(net, seed), math.nan, -1
    else:
        res = evolve(cfg, variant, dataset)
        genome = net.init_genome(res.best, cfg.seeds.init)
        best_f, best_gen = res.best_f, res.best_generation
        if log_dir is not None:
            stem = os.path.join(log_dir, f"{variant}_{seed}")
            write_csv(stem + "_evolution.csv", EVOLUTION_CSV_HEADER, res.history)
            write_csv(stem + "_candidates.csv", CANDIDATE_CSV_HEADER, res.candidates)
    post = post_train(cfg, genome, dataset, post_epochs, cfg.seeds.training)
    return (variant, seed, best_f, best_gen, post.val_loss, post.val_accuracy, post.test_accuracy,
            int(post.diverged))


def run_ablation(cfg: ExperimentConfig, variants, seeds, post_epochs, log_dir=None, progress=None):
    """Every variant over ``seeds``; returns the rows and per-variant median validation loss."""
    dataset = cfg.load_dataset()
    if log_dir is not None:
        os.makedirs(log_dir, exist_ok=True)
    rows = []
    for variant in variants:
        for seed in seeds:
            rows.append(ablation_run(cfg, variant, seed, post_epochs, dataset, log_dir))
            if progress is not None:
                progress(rows[-1])
    medians = {v: float(np.median([r[4] for r in rows if r[0] == v])) for v in variants}
    if log_dir is not None:
        write_csv(os.path.join(log_dir, "ablation.csv"), ABLATION_CSV_HEADER, rows)
    return rows, medians


def toy_regression(cfg: ExperimentConfig, seed, epochs=None):
    """Train the config's network from its initial genotype on blobs drawn with ``seed``.

    Every seed (data, init, training) is set to ``seed``. Returns the
    post-training result and per-epoch rows ``(seed, epoch, loss, accuracy)``.
    """
    cfg = _with_seed(cfg, seed)
    cfg.seeds.data = seed
    net = cfg.network_spec()
    dataset = cfg.load_dataset()
    genome = net.init_genome(cfg.initial_genotype(), seed)
    epochs = cfg.training.epochs if epochs is None else epochs
    post = post_train(cfg, genome, dataset, epochs, seed)
    rows = [(seed, e, loss, acc)
            for e, (loss, acc) in enumerate(zip(post.loss_history, post.accuracy_history))]
    return post, rows


def _with_seed(cfg, seed):
    cfg = copy.deepcopy(cfg)
    cfg.seeds.evolution = cfg.seeds.training = cfg.seeds.init = seed
    return cfg


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return "%.17g" % v
    return v
