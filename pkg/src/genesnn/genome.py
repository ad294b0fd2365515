"""Gene encodings, the shared gene-interaction matrix, and weight materialization.

A layer's weight tensor is never stored. It is rebuilt from the encoding of
its input neurons ``E_in`` (shape ``(C_in, k, k, g)``), the encoding of its
output neurons ``E_out`` (shape ``(C_out, k, k, g)``) and the network-wide
``g x g`` interaction matrix ``G``::

    W[o, i, u, v] = sum_ab E_in[i, u, v, a] * G[a, b] * E_out[o, u, v, b]

Only the gene axis is contracted; each kernel position is an independent
bilinear form. That is what makes the stored-parameter count come out to
``g * (C_in k^2 + g + C_out k^2)``.
"""
import re
from dataclasses import dataclass

import numpy as np

from . import serialization
from .errors import NumericalError, ParseError, ShapeMismatchError

BETA_FLOOR = 1e-6


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"{what} contains non-finite entries")


@dataclass(frozen=True, eq=False)
class Genotype:
    """The evolvable triple: wiring std ``beta1``, clamp bound ``beta2``, interaction ``G``."""

    beta1: float
    beta2: float
    G: np.ndarray

    def __post_init__(self):
        G = np.array(self.G, dtype=np.float64)
        if G.ndim != 2 or G.shape[0] != G.shape[1] or G.shape[0] < 1:
            raise ShapeMismatchError(f"G must be a non-empty square matrix, got shape {G.shape}")
        _check_finite(G, "G")
        if not (self.beta1 > 0 and self.beta2 > 0):
            raise ValueError(f"beta1 and beta2 must be positive, got {self.beta1}, {self.beta2}")
        G.setflags(write=False)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "beta1", float(self.beta1))
        object.__setattr__(self, "beta2", float(self.beta2))

    @property
    def g(self):
        return self.G.shape[0]

    def __eq__(self, other):
        if not isinstance(other, Genotype):
            return NotImplemented
        return (self.beta1 == other.beta1 and self.beta2 == other.beta2
                and self.G.shape == other.G.shape and bool(np.all(self.G == other.G)))

    def to_dict(self):
        return {"g": self.g, "beta1": self.beta1, "beta2": self.beta2,
                "G": self.G.ravel().tolist()}

    @classmethod
    def from_dict(cls, d):
        try:
            g = int(d["g"])
            flat = np.asarray(d["G"], dtype=np.float64)
            beta1, beta2 = float(d["beta1"]), float(d["beta2"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed genotype document: {exc}") from exc
        if flat.size != g * g:
            raise ParseError(f"genotype G has {flat.size} entries, expected g*g = {g * g}")
        return cls(beta1, beta2, flat.reshape(g, g))


def save_genotype(path, s: Genotype):
    with open(path, "w") as fh:
        fh.write(serialization.dumps(s.to_dict()))


def load_genotype(path):
    with open(path) as fh:
        try:
            d = serialization.loads(fh.read())
        except ValueError as exc:
            raise ParseError(f"{path}: {exc}") from exc
    return Genotype.from_dict(d)


def genotype_flatten(s: Genotype):
    """Layout ``[beta1, beta2, G row-major]``, length ``2 + g**2``."""
    return np.concatenate([[s.beta1, s.beta2], s.G.ravel()])


def repair_beta(x):
    return max(abs(float(x)), BETA_FLOOR)


def genotype_unflatten(v, g):
    """Inverse of :func:`genotype_flatten`.

    CMA-ES proposals are unconstrained, so the beta slots go through
    :func:`repair_beta` (absolute value, floored at ``BETA_FLOOR``).
    Already-valid vectors are untouched, which keeps the round trip exact.
    """
    v = np.asarray(v, dtype=np.float64).ravel()
    if g < 1:
        raise ValueError(f"gene count must be >= 1, got {g}")
    if v.size != 2 + g * g:
        raise ShapeMismatchError(f"genotype vector has length {v.size}, expected {2 + g * g}")
    return Genotype(repair_beta(v[0]), repair_beta(v[1]), v[2:].reshape(g, g).copy())


def sample_encoding(beta1, beta2, channels, kernel, g, seed):
    """Draw ``A ~ N(0, beta1^2)`` per entry and clamp it to ``[-beta2, beta2]``.

    Clamping (not rejection) puts probability atoms at the bounds.
    ``seed`` may be anything ``np.random.default_rng`` accepts.
    """
    if not (beta1 > 0 and beta2 > 0):
        raise ValueError(f"beta1 and beta2 must be positive, got {beta1}, {beta2}")
    for name, val in (("channels", channels), ("kernel", kernel), ("g", g)):
        if int(val) != val or val < 1:
            raise ValueError(f"{name} must be a positive integer, got {val}")
    rng = np.random.default_rng(seed)
    A = rng.normal(0.0, beta1, size=(channels, kernel, kernel, g))
    return np.clip(A, -beta2, beta2)


def _check_pair(E_in, G, E_out):
    if E_in.ndim != 4 or E_out.ndim != 4:
        raise ShapeMismatchError(
            f"encodings must be 4-D (channels, k, k, g), got {E_in.shape} and {E_out.shape}")
    g = G.shape[0]
    if G.shape != (g, g) or E_in.shape[3] != g or E_out.shape[3] != g:
        raise ShapeMismatchError(
            f"gene axis mismatch: E_in {E_in.shape}, G {G.shape}, E_out {E_out.shape}")
    if E_in.shape[1:3] != E_out.shape[1:3]:
        raise ShapeMismatchError(
            f"kernel mismatch: E_in {E_in.shape[1:3]} vs E_out {E_out.shape[1:3]}")


def materialize_weights(E_in, G, E_out):
    """Return the ``(C_out, C_in, k, k)`` weight encoded by ``(E_in, G, E_out)``."""
    E_in, G, E_out = np.asarray(E_in), np.asarray(G), np.asarray(E_out)
    _check_pair(E_in, G, E_out)
    # (C_in, k, k, g) @ G -> per-position mixed input genes
    mixed = E_in @ G
    return np.einsum("iuva,ouva->oiuv", mixed, E_out, optimize=True)


def factor_gradients(dW, E_in, G, E_out, transpose_fault=False):
    """Push a weight gradient back onto ``(E_in, G, E_out)``.

    Exact adjoint of :func:`materialize_weights`. ``transpose_fault`` swaps
    ``G`` for ``G.T`` in the ``E_in`` term; it exists only so the gradient
    checker can be shown to catch that mistake.
    """
    Gm = G.T if transpose_fault else G
    dE_in = np.einsum("oiuv,ouvb,ab->iuva", dW, E_out, Gm, optimize=True)
    dE_out = np.einsum("oiuv,iuva,ab->ouvb", dW, E_in, G, optimize=True)
    dG = np.einsum("oiuv,iuva,ouvb->ab", dW, E_in, E_out, optimize=True)
    return dE_in, dG, dE_out


def param_count(g, C_in, C_out, k):
    """Stored reals for one genetic layer: ``g * (C_in k^2 + g + C_out k^2)``."""
    for name, val in (("g", g), ("C_in", C_in), ("C_out", C_out), ("k", k)):
        if int(val) != val or val < 1:
            raise ValueError(f"{name} must be a positive integer, got {val}")
    return g * (C_in * k * k + g + C_out * k * k)


def dense_param_count(C_in, C_out, k):
    return C_out * C_in * k * k


def compression_ratio(g, C_in, C_out, k):
    """Genetic / dense parameter ratio. Below 1 means the encoding is smaller."""
    return param_count(g, C_in, C_out, k) / dense_param_count(C_in, C_out, k)


def svd_construct(W, g):
    """Factor a 2-D ``W`` as ``E1 @ G @ E2.T`` from its top ``g`` singular triplets.

    ``E1 = U' S'^(1/2)``, ``E2 = V' S'^(1/2)`` and ``G`` is the identity, so the
    product is the best rank-``g`` Frobenius approximation of ``W``.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeMismatchError(f"W must be 2-D, got shape {W.shape}")
    m, n = W.shape
    if not (1 <= g <= min(m, n)):
        raise ValueError(f"g must be in [1, min(m, n)] = [1, {min(m, n)}], got {g}")
    try:
        U, S, Vt = np.linalg.svd(W, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD failed: {exc}") from exc
    root = np.sqrt(S[:g])
    E1 = U[:, :g] * root
    E2 = Vt[:g].T * root
    return E1, np.eye(g), E2


@dataclass
class Genome:
    """Phenotype parameters: one encoding per neuron group plus the shared ``G``.

    Which encodings a layer uses is decided by the network layout
    (:meth:`genesnn.snn.NetworkSpec.encoding_plan`), not by the genome.
    """

    encodings: list
    G: np.ndarray

    @property
    def g(self):
        return self.G.shape[0]

    def copy(self):
        return Genome([E.copy() for E in self.encodings], self.G.copy())

    def n_params(self):
        return sum(E.size for E in self.encodings) + self.G.size

    def save(self, path, **extra):
        arrays = {f"E{i}": E for i, E in enumerate(self.encodings)}
        np.savez(path, G=self.G, n_enc=len(self.encodings), **arrays, **extra)

    @classmethod
    def load(cls, path):
        try:
            with np.load(path) as z:
                n = int(z["n_enc"])
                encs = [z[f"E{i}"].astype(np.float64) for i in range(n)]
                extra = {k: z[k] for k in z.files if k not in {"G", "n_enc"} and not re.fullmatch(r"E\d+", k)}
                return cls(encs, z["G"].astype(np.float64)), extra
        except (KeyError, ValueError, OSError) as exc:
            raise ParseError(f"{path}: not a genome checkpoint ({exc})") from exc
