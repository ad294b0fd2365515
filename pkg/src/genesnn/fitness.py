"""Generation-scheduled fitness: held-out loss minus decaying regularizers.

    f = L - exp(lambda1 * t) * r1 - exp(lambda2 * t) * r2

``r1`` rewards readouts that move between consecutive time steps, ``r2``
rewards an interaction matrix whose magnitudes are spread out. Both fade as
the generation counter ``t`` grows, leaving the loss. Lower ``f`` is better.
"""
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeMismatchError
from .training import TrainConfig, evaluate, train

WORST_FITNESS = math.inf


@dataclass(frozen=True)
class FitnessConfig:
    lambda1: float = -0.2
    lambda2: float = -0.2
    n_eval: int = 3
    entropy_epsilon: float = 1e-12

    def __post_init__(self):
        if self.lambda1 > 0 or self.lambda2 > 0:
            raise ValueError("schedule exponents must be <= 0 so the regularizers decay")
        if not self.entropy_epsilon > 0:
            raise ValueError("entropy_epsilon must be positive")
        if self.n_eval < 0:
            raise ValueError("n_eval must be >= 0")


def schedule_weight(lam, t):
    """``exp(lam * t)``; ``lam = -inf`` switches the term off for every ``t``."""
    if lam == -math.inf:
        return 0.0
    return math.exp(lam * t)


def temporal_diff_reg(outputs):
    """Sum of squared Frobenius norms of ``Y[t+1] - Y[t]`` over consecutive steps."""
    steps = [np.asarray(y, dtype=np.float64) for y in outputs]
    if not steps:
        raise ValueError("need at least one time step")
    if any(s.shape != steps[0].shape for s in steps):
        raise ShapeMismatchError(f"output shapes differ across steps: {[s.shape for s in steps]}")
    Y = np.stack(steps)
    return float(np.sum(np.diff(Y, axis=0) ** 2))


def spatial_entropy_reg(G, eps=1e-12):
    """Shannon entropy (nats) of ``|G|`` normalized to a distribution.

    Entries below ``eps`` are floored inside the log, which keeps the value
    in ``[0, ln(g^2)]``.
    """
    A = np.abs(np.asarray(G, dtype=np.float64))
    total = A.sum()
    if total == 0:
        warnings.warn("spatial entropy of an all-zero interaction matrix is defined as 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    P = A / total
    return float(-np.sum(P * np.log(np.maximum(P, eps))))


def fitness(L, r1, r2, t, cfg: FitnessConfig):
    if t < 0:
        raise ValueError(f"generation must be >= 0, got {t}")
    return L - schedule_weight(cfg.lambda1, t) * r1 - schedule_weight(cfg.lambda2, t) * r2


@dataclass
class CandidateEval:
    f: float
    L: float
    r1: float
    r2: float
    seed: int
    diverged: bool = False
    extra: dict = field(default_factory=dict)


def evaluate_candidate(genotype, net, dataset, t, cfg: FitnessConfig, train_cfg: TrainConfig, seed,
                       genome=None):
    """Sample encodings, train ``n_eval`` epochs, score on the validation split.

    ``genome`` overrides sampling from the genotype (used by the random
    ablation, whose encodings are not clamped).
    """
    if genome is None:
        genome = net.init_genome(genotype, seed)
    x_train, y_train = dataset.split("train")
    x_val, y_val = dataset.split("val")
    r2 = spatial_entropy_reg(genotype.G, cfg.entropy_epsilon)
    tcfg = TrainConfig(**{**train_cfg.__dict__, "seed": seed})
    try:
        trained = train(net, genome, x_train, y_train, tcfg, epochs=cfg.n_eval)
        ev = evaluate(net, trained.genome, x_val, y_val, encoding=tcfg.encoding, seed=seed)
        if not (np.isfinite(ev.loss) and np.isfinite(ev.r1)):
            raise NumericalError("non-finite validation metrics")
    except NumericalError as exc:
        return CandidateEval(WORST_FITNESS, math.nan, math.nan, r2, seed, True, {"error": str(exc)})
    f = fitness(ev.loss, ev.r1, r2, t, cfg)
    return CandidateEval(f, ev.loss, ev.r1, r2, seed, False, {"val_accuracy": ev.accuracy})
