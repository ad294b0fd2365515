"""Spiking network core: LIF dynamics, the forward pass, spike and energy accounting.

Every layer except the last is a hard-reset LIF population. The last layer
is a non-spiking readout that integrates its input current without leak or
reset; its membrane trace ``Y[t]`` is what the temporal-difference
regularizer sees, and its time average is the classification logit.
"""
import csv
import io
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ShapeMismatchError, StateError
from .genome import Genome, dense_param_count, materialize_weights, param_count, sample_encoding

E_MAC_PJ = 4.6
E_AC_PJ = 0.9


@dataclass(frozen=True)
class LifConfig:
    tau: float = 0.5
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_width: float = 0.5

    def __post_init__(self):
        if not 0 < self.tau <= 1:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        if not self.v_threshold > 0:
            raise ValueError(f"v_threshold must be positive, got {self.v_threshold}")
        if not self.surrogate_width > 0:
            raise ValueError(f"surrogate_width must be positive, got {self.surrogate_width}")


def lif_step(u, current, cfg: LifConfig):
    """One step of the hard-reset LIF recurrence. Returns ``(spikes, new_u)``."""
    u = np.asarray(u, dtype=np.float64)
    current = np.asarray(current, dtype=np.float64)
    if u.shape != current.shape:
        raise ShapeMismatchError(f"membrane {u.shape} and current {current.shape} differ")
    u_pre = cfg.tau * u + current
    spikes = (u_pre >= cfg.v_threshold).astype(np.float64)
    return spikes, np.where(spikes > 0, cfg.v_reset, u_pre)


def surrogate_grad(u_pre, cfg: LifConfig):
    """Rectangular pseudo-derivative of the spike function, unit area."""
    w = cfg.surrogate_width
    inside = np.abs(np.asarray(u_pre) - cfg.v_threshold) < w
    return inside / (2.0 * w)


def _ramp(u_pre, cfg):
    # piecewise-linear relaxation whose derivative is exactly surrogate_grad
    w = cfg.surrogate_width
    return np.clip((u_pre - cfg.v_threshold + w) / (2.0 * w), 0.0, 1.0)


def spike_fn(u_pre, cfg, mode):
    if mode == "heaviside":
        return (u_pre >= cfg.v_threshold).astype(np.float64)
    if mode == "ramp":
        return _ramp(u_pre, cfg)
    raise ValueError(f"unknown spike mode {mode!r}")


@dataclass(frozen=True)
class Layer:
    kind: str
    out: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise ValueError(f"layer kind must be 'conv' or 'fc', got {self.kind!r}")
        if self.kind == "fc" and (self.kernel, self.stride, self.padding) != (1, 1, 0):
            raise ValueError("fc layers take no kernel/stride/padding")
        if self.out < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ValueError(f"invalid layer geometry {self}")


def conv(out, kernel=3, stride=1, padding=1):
    return Layer("conv", out, kernel, stride, padding)


def fc(out):
    return Layer("fc", out)


@dataclass(frozen=True)
class LayerGeometry:
    layer: Layer
    in_shape: tuple
    out_shape: tuple

    @property
    def c_in(self):
        return self.in_shape[0] if self.layer.kind == "conv" else int(np.prod(self.in_shape))

    @property
    def flops(self):
        """Multiply-accumulates for one sample at one time step."""
        k = self.layer.kernel
        return self.c_in * k * k * int(np.prod(self.out_shape))

    @property
    def neurons(self):
        return int(np.prod(self.out_shape))


@dataclass(frozen=True)
class NetworkSpec:
    """Layer stack plus neuron constants.

    ``input_shape`` is ``(C, H, W)`` for convolutional inputs or ``(features,)``.
    ``lif`` is either one :class:`LifConfig` shared by every spiking layer or
    one per layer (the readout's entry is ignored).
    """

    input_shape: tuple
    layers: tuple
    g: int
    T: int = 4
    lif: object = field(default_factory=LifConfig)

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        if not self.layers:
            raise ValueError("network needs at least one layer")
        if self.g < 1 or self.T < 1:
            raise ValueError(f"g and T must be >= 1, got g={self.g}, T={self.T}")
        kernels = {l.kernel for l in self.layers if l.kind == "conv"}
        if len(kernels) > 1:
            raise ValueError(f"conv layers must share one kernel size, got {sorted(kernels)}")
        if isinstance(self.lif, LifConfig):
            object.__setattr__(self, "lif", tuple(self.lif for _ in self.layers))
        else:
            object.__setattr__(self, "lif", tuple(self.lif))
            if len(self.lif) != len(self.layers):
                raise ValueError("need one LifConfig per layer")
        self.geometry()  # validates shape composition

    def geometry(self):
        out = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(shape) != 3:
                    raise ShapeMismatchError(f"layer {i}: conv needs (C, H, W) input, got {shape}")
                c, h, w = shape
                k, s, p = layer.kernel, layer.stride, layer.padding
                ho, wo = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
                if ho < 1 or wo < 1:
                    raise ShapeMismatchError(f"layer {i}: kernel {k} does not fit input {shape}")
                new = (layer.out, ho, wo)
            else:
                new = (layer.out,)
            out.append(LayerGeometry(layer, shape, new))
            shape = new
        return out

    @property
    def n_classes(self):
        return self.layers[-1].out

    def encoding_plan(self):
        """Encoding shapes and, per layer, the ``(in, out)`` encoding indices.

        Adjacent layers share the encoding of the neuron group between them
        whenever its shape agrees on both sides (same channel count and
        kernel). At a conv-to-fc flatten the fc layer gets its own input
        encoding.
        """
        shapes, pairs = [], []
        for i, geo in enumerate(self.geometry()):
            k = geo.layer.kernel
            want_in = (geo.c_in, k, k, self.g)
            if i > 0 and shapes[pairs[-1][1]] == want_in:
                in_idx = pairs[-1][1]
            else:
                shapes.append(want_in)
                in_idx = len(shapes) - 1
            shapes.append((geo.layer.out, k, k, self.g))
            pairs.append((in_idx, len(shapes) - 1))
        return shapes, pairs

    def layer_param_counts(self):
        rows = []
        for geo in self.geometry():
            k = geo.layer.kernel
            rows.append((param_count(self.g, geo.c_in, geo.layer.out, k),
                         dense_param_count(geo.c_in, geo.layer.out, k)))
        return rows

    def init_genome(self, genotype, seed):
        """Sample every encoding from ``(beta1, beta2)``; ``G`` comes from the genotype."""
        if genotype.g != self.g:
            raise ShapeMismatchError(f"genotype has g={genotype.g}, network expects g={self.g}")
        shapes, _ = self.encoding_plan()
        encs = [sample_encoding(genotype.beta1, genotype.beta2, c, k, g, [seed, j])
                for j, (c, k, _, g) in enumerate(shapes)]
        return Genome(encs, np.array(genotype.G, dtype=np.float64))

    def check_genome(self, genome):
        shapes, _ = self.encoding_plan()
        got = [E.shape for E in genome.encodings]
        if got != shapes or genome.G.shape != (self.g, self.g):
            raise ShapeMismatchError(
                f"genome does not match network: encodings {got} vs {shapes}, G {genome.G.shape}")


# ---------------------------------------------------------------- linear ops

def _windows(x, k, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def linear_forward(layer, W, x):
    """Input current for a batch ``x``; ``W`` is ``(C_out, C_in, k, k)``."""
    if layer.kind == "fc":
        return x @ W[:, :, 0, 0].T
    win = _windows(x, layer.kernel, layer.stride, layer.padding)
    return np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)


def linear_grad_weight(layer, x, dI):
    if layer.kind == "fc":
        return (dI.T @ x)[:, :, None, None]
    win = _windows(x, layer.kernel, layer.stride, layer.padding)
    return np.tensordot(dI, win, axes=([0, 2, 3], [0, 2, 3]))


def linear_grad_input(layer, W, dI, x_shape):
    if layer.kind == "fc":
        return dI @ W[:, :, 0, 0]
    k, s, p = layer.kernel, layer.stride, layer.padding
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    ho, wo = dI.shape[2], dI.shape[3]
    for u in range(k):
        for v in range(k):
            dxp[:, :, u:u + s * ho:s, v:v + s * wo:s] += np.einsum(
                "bohw,oc->bchw", dI, W[:, :, u, v])
    return dxp[:, :, p:p + h, p:p + w]


# ---------------------------------------------------------------- forward

@dataclass
class LayerCache:
    x: np.ndarray          # (T, B, *in_shape) input spikes/currents
    u_pre: np.ndarray      # (T, B, *out_shape), None for the readout
    spikes: np.ndarray     # (T, B, *out_shape), None for the readout


@dataclass
class ForwardResult:
    outputs: np.ndarray    # (T, B, n_classes) readout membrane Y[t]
    spike_counts: list     # total spikes per spiking layer
    weights: list
    caches: list
    spike_mode: str
    T: int
    batch: int

    @property
    def logits(self):
        return self.outputs.mean(axis=0)


def _first_bad_step(arr):
    bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1)
    return int(np.argmax(bad))


def forward(net: NetworkSpec, genome: Genome, inputs, spike_mode="heaviside"):
    """Run ``net`` for ``T`` steps on ``inputs`` of shape ``(T, B, *input_shape)``.

    ``spike_mode="ramp"`` swaps the Heaviside for its piecewise-linear
    relaxation; the backward pass is then the exact gradient, which is what
    the finite-difference checker relies on.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim < 2 or inputs.shape[0] != net.T or inputs.shape[2:] != net.input_shape:
        raise ShapeMismatchError(
            f"inputs must be (T={net.T}, B, *{net.input_shape}), got {inputs.shape}")
    net.check_genome(genome)
    T, B = inputs.shape[:2]
    _, pairs = net.encoding_plan()
    weights = [materialize_weights(genome.encodings[a], genome.G, genome.encodings[b])
               for a, b in pairs]

    caches, counts = [], []
    x = inputs
    last = len(net.layers) - 1
    for i, (geo, W) in enumerate(zip(net.geometry(), weights)):
        layer = geo.layer
        if layer.kind == "fc":
            x = x.reshape(T, B, -1)
        flat = x.reshape((T * B,) + x.shape[2:])
        current = linear_forward(layer, W, flat).reshape((T, B) + geo.out_shape)
        if not np.all(np.isfinite(current)):
            raise NumericalError(f"non-finite input current in layer {i} at step {_first_bad_step(current)}")
        if i == last:
            outputs = np.cumsum(current, axis=0)
            caches.append(LayerCache(x, None, None))
            break
        cfg = net.lif[i]
        u = np.full(current.shape[1:], cfg.v_reset)
        u_pre = np.empty_like(current)
        spikes = np.empty_like(current)
        for t in range(T):
            up = cfg.tau * u + current[t]
            s = spike_fn(up, cfg, spike_mode)
            u = up * (1.0 - s) + cfg.v_reset * s
            u_pre[t], spikes[t] = up, s
        if not np.all(np.isfinite(u_pre)):
            raise NumericalError(f"non-finite membrane in layer {i} at step {_first_bad_step(u_pre)}")
        caches.append(LayerCache(x, u_pre, spikes))
        counts.append(float(spikes.sum()))
        x = spikes
    return ForwardResult(outputs, counts, weights, caches, spike_mode, T, B)


def dense_forward(net: NetworkSpec, weights, inputs):
    """Forward pass with explicit weight tensors and plain Python loops over time.

    Reference path for tests; no factorization involved.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    T, B = inputs.shape[:2]
    geos = net.geometry()
    states = [np.full((B,) + g.out_shape, net.lif[i].v_reset) for i, g in enumerate(geos)]
    acc = np.zeros((B, net.n_classes))
    outputs = []
    for t in range(T):
        x = inputs[t]
        for i, (geo, W) in enumerate(zip(geos, weights)):
            if geo.layer.kind == "fc":
                x = x.reshape(B, -1)
            current = linear_forward(geo.layer, W, x)
            if i == len(geos) - 1:
                acc = acc + current
                outputs.append(acc.copy())
            else:
                x, states[i] = lif_step(states[i], current, net.lif[i])
    return np.stack(outputs)


# ---------------------------------------------------------------- spikes & energy

def count_spikes(train):
    return int(np.asarray(train).sum())


def firing_rate(train):
    """Fraction of neuron-steps that fire. ``train`` is ``(T, ...)``."""
    train = np.asarray(train)
    return count_spikes(train) / train.size if train.size else 0.0


@dataclass
class EnergyReport:
    """Per-sample energy breakdown. Spike counts are averaged over samples."""

    layer_flops: list
    layer_spikes: list
    firing_rates: list     # output rate of each spiking layer
    layer_energy_pj: list
    neuron_steps: list     # neurons * T of each spiking layer
    flops_first_conv: int
    sops: float
    energy_pj: float
    spike_total: float
    T: int

    @property
    def energy_mj(self):
        return self.energy_pj * 1e-9

    def csv_rows(self):
        rows = []
        n_spiking = len(self.firing_rates)
        for i, (fl, en) in enumerate(zip(self.layer_flops, self.layer_energy_pj)):
            spikes = self.layer_spikes[i] if i < n_spiking else 0.0
            rate = self.firing_rates[i] if i < n_spiking else 0.0
            rows.append((str(i), fl, spikes, rate, en))
        total_rate = self.spike_total / sum(self.neuron_steps) if self.neuron_steps else 0.0
        rows.append(("total", sum(self.layer_flops), self.spike_total, total_rate, self.energy_pj))
        return rows

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(ENERGY_CSV_HEADER)
        for layer, fl, sp, rate, en in self.csv_rows():
            w.writerow([layer, fl, "%.17g" % sp, "%.17g" % rate, "%.17g" % en])
        return buf.getvalue()


ENERGY_CSV_HEADER = ("layer", "flops", "spikes", "rate", "energy_pj")


def energy_report(net: NetworkSpec, spike_counts, n_samples, T=None, e_mac=E_MAC_PJ, e_ac=E_AC_PJ):
    """Theoretical inference energy per sample.

    The first layer sees real-valued input and is billed one MAC per
    operation. Every later layer is driven by spikes, so its synaptic
    operations are its FLOPs times the firing rate of the layer feeding it,
    billed at one accumulate per operation per time step:

        E = e_mac * FL_1 + e_ac * T * sum_{i>=2} FL_i * fr_{i-1}
    """
    T = net.T if T is None else T
    geos = net.geometry()
    if spike_counts is None or len(spike_counts) != len(geos) - 1:
        raise StateError(f"need spike counts for {len(geos) - 1} spiking layers, got "
                         f"{None if spike_counts is None else len(spike_counts)}")
    if n_samples < 1 or T < 1:
        raise ValueError("n_samples and T must be >= 1")
    neuron_steps = [g.neurons * T * n_samples for g in geos[:-1]]
    rates = [c / n for c, n in zip(spike_counts, neuron_steps)]
    if any(r < 0 or r > 1 for r in rates):
        raise ValueError(f"firing rates outside [0, 1]: {rates}")
    flops = [g.flops for g in geos]
    energies = [e_mac * flops[0]]
    sops = 0.0
    for i in range(1, len(geos)):
        layer_sops = flops[i] * rates[i - 1]
        sops += layer_sops
        energies.append(e_ac * T * layer_sops)
    energy = e_mac * flops[0] + e_ac * T * sops
    return EnergyReport(flops, [c / n_samples for c in spike_counts], rates, energies,
                        [g.neurons * T for g in geos[:-1]], flops[0], sops, energy,
                        sum(spike_counts) / n_samples, T)


def ramp_is_stable(res_a, res_b, cfg_list):
    """True when two ramp-mode forward passes sit on the same linear pieces.

    Used by the gradient checker to skip coordinates whose finite-difference
    stencil straddles a kink of the relaxation.
    """
    for ca, cb, cfg in zip(res_a.caches, res_b.caches, cfg_list):
        if ca.u_pre is None:
            continue
        w = cfg.surrogate_width
        za = np.digitize(ca.u_pre - cfg.v_threshold, [-w, w])
        zb = np.digitize(cb.u_pre - cfg.v_threshold, [-w, w])
        if not np.array_equal(za, zb):
            return False
    return True

