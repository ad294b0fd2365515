"""Surrogate-gradient training of a genetically encoded SNN.

Gradients are taken with respect to the encodings and ``G`` directly. The
weight gradient of each layer is accumulated through time first and then
pushed onto its factors with :func:`genesnn.genome.factor_gradients`;
encodings shared by two layers collect both contributions.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import data as datamod
from .errors import NumericalError, ShapeMismatchError
from .genome import Genome, factor_gradients
from .snn import ForwardResult, NetworkSpec, forward, linear_grad_input, linear_grad_weight, ramp_is_stable, surrogate_grad

log = logging.getLogger(__name__)


class TrainingDiverged(NumericalError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    epochs: int = 100
    batch_size: int = 32
    n_eval: int = 3
    seed: int = 0
    optimizer: str = "sgd"       # sgd | momentum | adam
    momentum: float = 0.9
    encoding: str = "constant"   # constant | poisson
    input_noise: float = 0.0     # relative L2 norm of Gaussian input noise

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.n_eval < 0 or self.epochs < 0:
            raise ValueError(f"invalid training config {self}")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient with respect to ``logits``."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(f"logits {logits.shape} and labels {labels.shape} disagree")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1))
    logp = z - logsumexp[:, None]
    value = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(value), grad / n


def loss(logits, labels):
    return cross_entropy(logits, labels)[0]


@dataclass
class GradientBundle:
    dE: list
    dG: np.ndarray

    def flat(self):
        return np.concatenate([d.ravel() for d in self.dE] + [self.dG.ravel()])


FAULTS = ("transpose", "surrogate")


def _spiking_backward(cache, dS, cfg, surrogate_scale=1.0):
    dI = np.empty_like(cache.u_pre)
    g_u = np.zeros(dS.shape[1:])
    for t in range(dS.shape[0] - 1, -1, -1):
        up, s = cache.u_pre[t], cache.spikes[t]
        # u_next = up * (1 - s) + v_reset * s, with s = spike(up)
        ds = dS[t] + g_u * (cfg.v_reset - up)
        dup = g_u * (1.0 - s) + ds * surrogate_scale * surrogate_grad(up, cfg)
        dI[t] = dup
        g_u = cfg.tau * dup
    return dI


def backward_outputs(net: NetworkSpec, genome: Genome, result: ForwardResult, dY, fault=None):
    """Gradients given ``dY = dLoss/dY[t]`` for every readout step, shape ``(T, B, K)``.

    ``fault`` plants a known bug for testing the gradient checker:
    ``"transpose"`` uses ``G.T`` in the input-encoding gradient (invisible
    when ``G`` is symmetric), ``"surrogate"`` doubles the surrogate height.
    """
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; choose from {FAULTS}")
    scale = 2.0 if fault == "surrogate" else 1.0
    T, B = result.T, result.batch
    geos = net.geometry()
    _, pairs = net.encoding_plan()
    dE = [np.zeros_like(E) for E in genome.encodings]
    dG = np.zeros_like(genome.G)

    # Y[t] = sum_{s<=t} I[s]  =>  dI[t] = sum_{s>=t} dY[s]
    dI = np.flip(np.cumsum(np.flip(dY, axis=0), axis=0), axis=0)
    for i in range(len(geos) - 1, -1, -1):
        geo, cache, W = geos[i], result.caches[i], result.weights[i]
        if i < len(geos) - 1:
            dI = _spiking_backward(cache, dS, net.lif[i], scale)
        x_flat = cache.x.reshape((T * B,) + cache.x.shape[2:])
        dI_flat = dI.reshape((T * B,) + geo.out_shape)
        dW = linear_grad_weight(geo.layer, x_flat, dI_flat)
        if not np.all(np.isfinite(dW)):
            raise NumericalError(f"non-finite weight gradient in layer {i}")
        a, b = pairs[i]
        dEa, dGi, dEb = factor_gradients(dW, genome.encodings[a], genome.G, genome.encodings[b],
                                         transpose_fault=fault == "transpose")
        dE[a] += dEa
        dE[b] += dEb
        dG += dGi
        if i > 0:
            dx = linear_grad_input(geo.layer, W, dI_flat, x_flat.shape)
            dS = dx.reshape((T, B) + geos[i - 1].out_shape)
    return GradientBundle(dE, dG)


def backward(net, genome, result, labels, fault=None):
    """Loss gradient for the mean cross-entropy of time-averaged logits."""
    _, dlogits = cross_entropy(result.logits, labels)
    dY = np.broadcast_to(dlogits / result.T, result.outputs.shape)
    return backward_outputs(net, genome, result, dY, fault)


def sgd_step(genome: Genome, grads: GradientBundle, lr):
    if len(grads.dE) != len(genome.encodings) or grads.dG.shape != genome.G.shape:
        raise ShapeMismatchError("gradient bundle does not match genome")
    return Genome([E - lr * d for E, d in zip(genome.encodings, grads.dE)],
                  genome.G - lr * grads.dG)


class _Optimizer:
    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.state = None
        self.t = 0

    def step(self, genome, grads):
        cfg = self.cfg
        if cfg.optimizer == "sgd":
            return sgd_step(genome, grads, cfg.lr)
        flat_g = grads.flat()
        self.t += 1
        if cfg.optimizer == "momentum":
            self.state = flat_g if self.state is None else cfg.momentum * self.state + flat_g
            update = self.state
        else:
            b1, b2, eps = 0.9, 0.999, 1e-8
            if self.state is None:
                self.state = (np.zeros_like(flat_g), np.zeros_like(flat_g))
            m, v = self.state
            m = b1 * m + (1 - b1) * flat_g
            v = b2 * v + (1 - b2) * flat_g ** 2
            self.state = (m, v)
            update = (m / (1 - b1 ** self.t)) / (np.sqrt(v / (1 - b2 ** self.t)) + eps)
        return sgd_step(genome, _unflatten_like(update, genome), cfg.lr)

    def state_dict(self):
        if self.state is None:
            return {"t": self.t}
        arrays = self.state if isinstance(self.state, tuple) else (self.state,)
        return {"t": self.t, **{f"s{i}": a for i, a in enumerate(arrays)}}

    def load_state_dict(self, d):
        self.t = int(d["t"])
        arrays = [np.asarray(d[k]) for k in sorted(k for k in d if k != "t")]
        if not arrays:
            self.state = None
        elif self.cfg.optimizer == "adam":
            self.state = tuple(arrays)
        else:
            self.state = arrays[0]


def _unflatten_like(vec, genome):
    out, pos = [], 0
    for E in genome.encodings:
        out.append(vec[pos:pos + E.size].reshape(E.shape))
        pos += E.size
    return GradientBundle(out, vec[pos:].reshape(genome.G.shape))


@dataclass
class Evaluation:
    loss: float
    accuracy: float
    r1: float
    spike_counts: list
    n: int


def evaluate(net, genome, samples, labels, batch_size=256, encoding="constant", seed=0):
    """Loss, accuracy and per-sample temporal difference of the readout on a dataset."""
    from .fitness import temporal_diff_reg

    n = len(labels)
    if n == 0:
        raise ValueError("cannot evaluate on an empty set")
    total_loss = correct = r1 = 0.0
    counts = None
    for j, start in enumerate(range(0, n, batch_size)):
        xb, yb = samples[start:start + batch_size], labels[start:start + batch_size]
        inputs = datamod.encode_spikes(xb, net.T, encoding, [seed, j])
        res = forward(net, genome, inputs)
        total_loss += cross_entropy(res.logits, yb)[0] * len(yb)
        correct += int((res.logits.argmax(axis=1) == yb).sum())
        # Frobenius norm over the batch = sum of per-sample terms
        r1 += temporal_diff_reg(res.outputs)
        counts = res.spike_counts if counts is None else [a + b for a, b in zip(counts, res.spike_counts)]
    return Evaluation(total_loss / n, correct / n, r1 / n, counts, n)


@dataclass
class TrainResult:
    genome: Genome
    loss_history: list = field(default_factory=list)
    accuracy_history: list = field(default_factory=list)
    optimizer_state: dict = field(default_factory=dict)


def train(net, genome, samples, labels, cfg: TrainConfig, epochs=None, start_epoch=0,
          callback=None, optimizer_state=None):
    """Mini-batch training for ``epochs`` (default ``cfg.epochs``) epochs.

    Shuffling and input noise for epoch ``e`` are seeded from ``(cfg.seed, e)``,
    so a run resumed at ``start_epoch`` replays exactly what an uninterrupted
    run would have done, provided ``optimizer_state`` (from
    ``TrainResult.optimizer_state``) is passed back for stateful optimizers.
    """
    epochs = cfg.epochs if epochs is None else epochs
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("training data is empty")
    net.check_genome(genome)
    genome = genome.copy()
    opt = _Optimizer(cfg)
    if optimizer_state:
        opt.load_state_dict(optimizer_state)
    result = TrainResult(genome)
    n = len(labels)
    for epoch in range(start_epoch, start_epoch + epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        x_epoch = samples
        if cfg.input_noise > 0:
            x_epoch = datamod.add_gaussian_noise(samples, cfg.input_noise, [cfg.seed, epoch, 1])
        ep_loss = ep_correct = 0.0
        for j, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            inputs = datamod.encode_spikes(x_epoch[idx], net.T, cfg.encoding, [cfg.seed, epoch, 2, j])
            try:
                res = forward(net, genome, inputs)
                value, _ = cross_entropy(res.logits, labels[idx])
                if not np.isfinite(value):
                    raise NumericalError("loss is not finite")
                grads = backward(net, genome, res, labels[idx])
            except NumericalError as exc:
                raise TrainingDiverged(f"training diverged at epoch {epoch}, batch {j}: {exc}") from exc
            genome = opt.step(genome, grads)
            ep_loss += value * len(idx)
            ep_correct += int((res.logits.argmax(axis=1) == labels[idx]).sum())
        result.loss_history.append(ep_loss / n)
        result.accuracy_history.append(ep_correct / n)
        log.debug("epoch %d loss %.6f acc %.4f", epoch, ep_loss / n, ep_correct / n)
        if callback is not None:
            callback(epoch, genome, ep_loss / n, ep_correct / n, opt.state_dict())
    result.genome = genome
    result.optimizer_state = opt.state_dict()
    return result


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    max_abs_error: float
    n_checked: int
    n_skipped: int
    worst: tuple            # (coordinate name, analytic, numeric)
    tolerance: float
    coordinates: list

    @property
    def passed(self):
        return self.n_checked > 0 and self.max_rel_error < self.tolerance

    def summary(self):
        name, a, num = self.worst
        return (f"{'PASS' if self.passed else 'FAIL'} max_rel={self.max_rel_error:.3e} "
                f"mean_rel={self.mean_rel_error:.3e} max_abs={self.max_abs_error:.3e} "
                f"checked={self.n_checked} skipped={self.n_skipped} "
                f"worst={name} analytic={a:.6e} numeric={num:.6e}")


def _coord_name(genome, k):
    for j, E in enumerate(genome.encodings):
        if k < E.size:
            return f"E{j}{[int(i) for i in np.unravel_index(k, E.shape)]}"
        k -= E.size
    return f"G{[int(i) for i in np.unravel_index(k, genome.G.shape)]}"


def _perturbed(genome, k, delta):
    g = genome.copy()
    for E in g.encodings:
        if k < E.size:
            E.flat[k] += delta
            return g
        k -= E.size
    g.G.flat[k] += delta
    return g


def grad_check(net, genome, inputs, labels, step=3e-3, tolerance=1e-4, n_coords=200,
               seed=0, fault=None, rel_floor=1e-7):
    """Compare analytic gradients with finite differences of the loss.

    The check runs with the piecewise-linear spike relaxation, whose exact
    derivative is the rectangular surrogate, so the backward pass should
    agree with finite differences to rounding error. Coordinates whose
    stencil crosses a kink of the relaxation are not differentiable there;
    they are skipped and counted.

    The five-point central stencil has O(step**4) truncation error, which
    allows a step large enough that rounding in the loss (about 1e-15
    absolute) does not swamp gradients of order 1e-8 from quiet neurons.
    Relative error is ``|a - n| / max(|a|, |n|, rel_floor)``.
    """
    total = genome.n_params()
    if total >= 10_000:
        raise ValueError(f"gradient check wants < 1e4 parameters, network has {total}")
    base = forward(net, genome, inputs, spike_mode="ramp")
    analytic = backward(net, genome, base, labels, fault=fault).flat()
    rng = np.random.default_rng(seed)
    candidates = np.arange(total) if n_coords is None or n_coords >= total else rng.permutation(total)
    target = total if n_coords is None else min(n_coords, total)

    rels, abss, coords = [], [], []
    skipped = 0
    worst = ("-", 0.0, 0.0)
    for k in candidates:
        if len(rels) >= target:
            break
        runs = [forward(net, _perturbed(genome, k, m * step), inputs, spike_mode="ramp")
                for m in (2, 1, -1, -2)]
        if not all(ramp_is_stable(base, r, net.lif) for r in runs):
            skipped += 1
            continue
        l2, l1, m1, m2 = (cross_entropy(r.logits, labels)[0] for r in runs)
        numeric = (-l2 + 8 * l1 - 8 * m1 + m2) / (12 * step)
        a = analytic[k]
        err = abs(a - numeric)
        rel = err / max(abs(a), abs(numeric), rel_floor)
        if not rels or rel > max(rels):
            worst = (_coord_name(genome, k), float(a), float(numeric))
        rels.append(rel)
        abss.append(err)
        coords.append(_coord_name(genome, k))
    if not rels:
        return GradCheckReport(np.inf, np.inf, np.inf, 0, skipped, worst, tolerance, coords)
    return GradCheckReport(float(max(rels)), float(np.mean(rels)), float(max(abss)),
                           len(rels), skipped, worst, tolerance, coords)
