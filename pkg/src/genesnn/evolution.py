"""CMA-ES on flat vectors, and the generation loop that evolves genotypes with it.

The strategy follows the standard (mu/mu_w, lambda) formulation with
cumulative step-size adaptation, rank-one and rank-mu covariance updates,
log-rank recombination weights and the usual default learning rates.
Fitness is minimized.
"""
import concurrent.futures
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import serialization
from .errors import ShapeMismatchError, StateError
from .genome import genotype_flatten, genotype_unflatten

MAX_CONDITION = 1e14
SIGMA_FLOOR = np.finfo(np.float64).tiny


class CMAES:
    """Covariance matrix adaptation evolution strategy.

    Strategy constants can be overridden by keyword (``c1``, ``cmu``, ``cs``,
    ``damps``, ``cc``); anything left as ``None`` gets its default.
    """

    def __init__(self, m0, sigma0, popsize=None, c1=None, cmu=None, cs=None, damps=None, cc=None):
        m0 = np.asarray(m0, dtype=np.float64).ravel()
        n = m0.size
        if n < 1:
            raise ValueError("dimension must be >= 1")
        if not sigma0 > 0:
            raise ValueError(f"sigma0 must be positive, got {sigma0}")
        self.dim = n
        self.lam = int(popsize) if popsize else 4 + int(math.floor(3 * math.log(n)))
        if self.lam < 2:
            raise ValueError("population size must be >= 2")
        self.mu = self.lam // 2
        w = math.log((self.lam + 1) / 2) - np.log(np.arange(1, self.mu + 1))
        self.weights = w / w.sum()
        self.mueff = 1.0 / np.sum(self.weights ** 2)
        mueff = self.mueff
        self.cc = (4 + mueff / n) / (n + 4 + 2 * mueff / n) if cc is None else cc
        self.cs = (mueff + 2) / (n + mueff + 5) if cs is None else cs
        self.c1 = 2 / ((n + 1.3) ** 2 + mueff) if c1 is None else c1
        self.cmu = (min(1 - self.c1, 2 * (mueff - 2 + 1 / mueff) / ((n + 2) ** 2 + mueff))
                    if cmu is None else cmu)
        self.damps = (1 + 2 * max(0.0, math.sqrt((mueff - 1) / (n + 1)) - 1) + self.cs
                      if damps is None else damps)
        self.chiN = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n ** 2))
        rate = self.c1 + self.cmu
        self.eigen_gap = max(1, math.ceil(1 / (10 * n * rate))) if rate > 0 else 1

        self.mean = m0.copy()
        self.sigma = float(sigma0)
        self.C = np.eye(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.invsqrtC = np.eye(n)
        self.p_sigma = np.zeros(n)
        self.p_c = np.zeros(n)
        self.generation = 0
        self.evaluations = 0
        self._eigen_generation = 0
        self._pending = None

    # ------------------------------------------------------------------
    def ask(self, rng):
        """Sample ``lam`` candidates ``m + sigma * B D z``; rows of the returned array."""
        if self._pending is not None:
            raise StateError("ask() called twice without tell()")
        z = rng.standard_normal((self.lam, self.dim))
        X = self.mean + self.sigma * (z * self.D) @ self.B.T
        self._pending = X.copy()
        return X

    def tell(self, candidates, fitnesses):
        if self._pending is None:
            raise StateError("tell() without a preceding ask()")
        X = np.asarray(candidates, dtype=np.float64)
        f = np.asarray(fitnesses, dtype=np.float64)
        if X.shape != (self.lam, self.dim) or f.shape != (self.lam,):
            raise ShapeMismatchError(
                f"expected {self.lam} candidates of dim {self.dim} and as many fitnesses, "
                f"got {X.shape} and {f.shape}")
        if np.isnan(f).any():
            warnings.warn(f"{int(np.isnan(f).sum())} NaN fitness value(s) ranked worst",
                          RuntimeWarning, stacklevel=2)
            f = np.where(np.isnan(f), np.inf, f)
        self._pending = None
        self.evaluations += self.lam
        n = self.dim

        # ties keep candidate order
        order = np.argsort(f, kind="stable")
        # steps in sigma units; moving the mean by sigma * y_w (rather than
        # recombining the raw points) keeps y exactly zero when sigma is tiny
        y_sel = (X[order[:self.mu]] - self.mean) / self.sigma
        y_w = self.weights @ y_sel
        self.mean = self.mean + self.sigma * y_w

        self.p_sigma = ((1 - self.cs) * self.p_sigma
                        + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * (self.invsqrtC @ y_w))
        norm_ps = np.linalg.norm(self.p_sigma)
        h_sigma = (norm_ps / math.sqrt(1 - (1 - self.cs) ** (2 * (self.generation + 1)))
                   < (1.4 + 2 / (n + 1)) * self.chiN)
        self.p_c = ((1 - self.cc) * self.p_c
                    + h_sigma * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * y_w)

        delta_h = (1 - h_sigma) * self.cc * (2 - self.cc)
        rank_one = np.outer(self.p_c, self.p_c) + delta_h * self.C
        rank_mu = (y_sel.T * self.weights) @ y_sel
        self.C = ((1 - self.c1 - self.cmu * self.weights.sum()) * self.C
                  + self.c1 * rank_one + self.cmu * rank_mu)
        self.C = (self.C + self.C.T) / 2

        # floored at the smallest normal double so (x - m) / sigma never divides by zero
        self.sigma = max(self.sigma * math.exp((self.cs / self.damps) * (norm_ps / self.chiN - 1)),
                         SIGMA_FLOOR)
        self.generation += 1
        if self.generation - self._eigen_generation >= self.eigen_gap:
            self.update_eigensystem()
        else:
            try:
                np.linalg.cholesky(self.C)
            except np.linalg.LinAlgError:
                self.update_eigensystem()
        return self

    def update_eigensystem(self):
        """Refresh ``B``, ``D`` and ``C^-1/2``; recondition ``C`` if it is near-singular."""
        self._eigen_generation = self.generation
        evals, B = np.linalg.eigh(self.C)
        if evals.min() <= 0 or evals.max() > MAX_CONDITION * evals.min():
            shift = max(evals.max() / MAX_CONDITION - evals.min(), 0.0)
            # also lifts non-positive eigenvalues produced by rounding
            shift = max(shift, -evals.min() + abs(evals.max()) * 1e-14)
            self.C = self.C + shift * np.eye(self.dim)
            evals, B = np.linalg.eigh(self.C)
        if not evals.min() > 0:
            raise StateError(f"covariance lost positive definiteness (min eigenvalue {evals.min()})")
        self.B, self.D = B, np.sqrt(evals)
        self.invsqrtC = (B / self.D) @ B.T

    @property
    def eigenvalues(self):
        return self.D ** 2

    def to_dict(self):
        return {
            "dim": self.dim, "lam": self.lam, "mean": self.mean, "sigma": self.sigma,
            "C": self.C, "B": self.B, "D": self.D, "p_sigma": self.p_sigma, "p_c": self.p_c,
            "generation": self.generation, "evaluations": self.evaluations,
            "eigen_generation": self._eigen_generation,
            "constants": {"c1": self.c1, "cmu": self.cmu, "cs": self.cs,
                          "damps": self.damps, "cc": self.cc},
        }

    @classmethod
    def from_dict(cls, d):
        es = cls(np.asarray(d["mean"]), d["sigma"], d["lam"], **d["constants"])
        es.C = np.asarray(d["C"], dtype=np.float64)
        es.B = np.asarray(d["B"], dtype=np.float64)
        es.D = np.asarray(d["D"], dtype=np.float64)
        es.invsqrtC = (es.B / es.D) @ es.B.T
        es.p_sigma = np.asarray(d["p_sigma"], dtype=np.float64)
        es.p_c = np.asarray(d["p_c"], dtype=np.float64)
        es.generation = int(d["generation"])
        es.evaluations = int(d["evaluations"])
        es._eigen_generation = int(d["eigen_generation"])
        return es

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(serialization.dumps(self.to_dict()))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(serialization.loads(fh.read()))


def cma_init(dim, m0, sigma0, popsize=None):
    m0 = np.asarray(m0, dtype=np.float64)
    if m0.size != dim:
        raise ShapeMismatchError(f"m0 has {m0.size} entries, dim is {dim}")
    return CMAES(m0, sigma0, popsize)


def fmin(objective, m0, sigma0, max_evals, ftarget=-np.inf, seed=0, popsize=None, callback=None):
    """Minimize ``objective`` over real vectors. Returns ``(x_best, f_best, es)``."""
    es = CMAES(m0, sigma0, popsize)
    rng = np.random.default_rng(seed)
    best_x, best_f = None, np.inf
    while es.evaluations < max_evals:
        X = es.ask(rng)
        f = np.array([objective(x) for x in X])
        i = int(np.nanargmin(np.where(np.isnan(f), np.inf, f)))
        if f[i] < best_f:
            best_x, best_f = X[i].copy(), float(f[i])
        es.tell(X, f)
        if callback is not None:
            callback(es)
        if best_f <= ftarget or es.sigma * es.D.max() < 1e-300:
            break
    return best_x, best_f, es


# ---------------------------------------------------------------- genotype evolution

@dataclass(frozen=True)
class EvolutionConfig:
    generations: int = 20
    popsize: int = None
    sigma0: float = 0.2
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.generations < 1:
            raise ValueError("generations must be >= 1")
        if not self.sigma0 > 0:
            raise ValueError("sigma0 must be positive")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


EVOLUTION_CSV_HEADER = ("generation", "best_f", "median_f", "sigma", "min_eig_C", "max_eig_C",
                        "beta1_mean", "beta2_mean")
CANDIDATE_CSV_HEADER = ("generation", "candidate", "L", "r1", "r2", "f", "seed")


@dataclass
class EvolutionResult:
    best: object                       # Genotype
    best_f: float
    best_generation: int
    best_eval: object
    history: list = field(default_factory=list)      # rows matching EVOLUTION_CSV_HEADER
    candidates: list = field(default_factory=list)   # rows matching CANDIDATE_CSV_HEADER
    state: CMAES = None


def candidate_seed(seed, generation, index):
    return int(np.random.SeedSequence([seed, generation, index]).generate_state(1)[0])


def _call(problem, args):
    return problem(*args)


def run_evolution(problem, m0_genotype, cfg: EvolutionConfig, rescore=None, on_generation=None):
    """Ask, decode, evaluate, tell for ``cfg.generations`` generations.

    ``problem(genotype, generation, seed)`` returns either a float or an
    object with an ``f`` attribute (extra attributes ``L``, ``r1``, ``r2`` go
    into the candidate log). A candidate whose evaluation raises gets
    ``inf``.

    With a stationary fitness the incumbent is simply the lowest ``f`` seen.
    When fitness depends on the generation, ``rescore(eval, generation)``
    re-expresses the incumbent's stored evaluation under the current
    generation's schedule before comparing, so early and late candidates are
    judged by the same rule.
    """
    g = m0_genotype.g
    es = CMAES(genotype_flatten(m0_genotype), cfg.sigma0, cfg.popsize)
    rng = np.random.default_rng([cfg.seed, 0])
    best = best_eval = None
    best_f, best_gen = math.inf, -1
    result = EvolutionResult(None, math.inf, -1, None, state=es)
    pool = (concurrent.futures.ProcessPoolExecutor(cfg.workers) if cfg.workers > 1 else None)
    try:
        for t in range(cfg.generations):
            X = es.ask(rng)
            genotypes = [genotype_unflatten(x, g) for x in X]
            seeds = [candidate_seed(cfg.seed, t, j) for j in range(len(X))]
            args = [(s, t, seed) for s, seed in zip(genotypes, seeds)]
            if pool is None:
                outcomes = []
                for a in args:
                    try:
                        outcomes.append(problem(*a))
                    except Exception as exc:  # candidate failure must not stop the run
                        warnings.warn(f"candidate evaluation failed: {exc}", RuntimeWarning)
                        outcomes.append(None)
            else:
                futures = [pool.submit(_call, problem, a) for a in args]
                outcomes = []
                for fut in futures:  # index order, not completion order
                    try:
                        outcomes.append(fut.result())
                    except Exception as exc:
                        warnings.warn(f"candidate evaluation failed: {exc}", RuntimeWarning)
                        outcomes.append(None)
            fs = np.array([math.inf if o is None else float(getattr(o, "f", o)) for o in outcomes])
            fs = np.where(np.isnan(fs), math.inf, fs)
            es.tell(X, fs)

            if best_eval is not None and rescore is not None:
                best_f = rescore(best_eval, t)
            j = int(np.argmin(fs))
            if fs[j] < best_f or best is None:
                best, best_f, best_gen, best_eval = genotypes[j], float(fs[j]), t, outcomes[j]
            for idx, (o, seed) in enumerate(zip(outcomes, seeds)):
                result.candidates.append((t, idx, getattr(o, "L", math.nan), getattr(o, "r1", math.nan),
                                          getattr(o, "r2", math.nan), float(fs[idx]), seed))
            evals = np.linalg.eigvalsh(es.C)
            result.history.append((t, best_f, float(np.median(fs)), es.sigma, float(evals.min()),
                                   float(evals.max()),
                                   float(np.mean([s.beta1 for s in genotypes])),
                                   float(np.mean([s.beta2 for s in genotypes]))))
            if on_generation is not None:
                on_generation(t, es, result)
    finally:
        if pool is not None:
            pool.shutdown()
    result.best, result.best_f, result.best_generation, result.best_eval = best, best_f, best_gen, best_eval
    return result
