"""Desk-scale datasets: synthetic blobs, IDX and CSV ingestion, input coding."""
import csv
import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParseError

SPLITS = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.1, 0.1)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Samples in ``[0, 1]`` with integer labels and a fixed train/val/test split."""

    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    split_index: dict

    def __post_init__(self):
        if len(self.samples) != len(self.labels):
            raise ValueError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")

    @property
    def sample_shape(self):
        return self.samples.shape[1:]

    def split(self, name):
        idx = self.split_index[name]
        return self.samples[idx], self.labels[idx]


def stratified_split(labels, seed, fractions=SPLIT_FRACTIONS):
    """Per-class shuffled 80/10/10 split; each class is split separately."""
    rng = np.random.default_rng(seed)
    parts = {name: [] for name in SPLITS}
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_train = int(round(fractions[0] * len(idx)))
        n_val = int(round(fractions[1] * len(idx)))
        parts["train"].append(idx[:n_train])
        parts["val"].append(idx[n_train:n_train + n_val])
        parts["test"].append(idx[n_train + n_val:])
    return {k: np.sort(np.concatenate(v)) if v else np.array([], dtype=int) for k, v in parts.items()}


def make_blobs(n_classes, n_per_class, dim, separation, seed):
    """Unit-variance Gaussian clusters around centres drawn uniformly from
    ``[-separation, separation]^dim`` (the usual blob-generator convention).

    Features are then min-max scaled to ``[0, 1]`` and split 80/10/10 per class.
    """
    for name, v in (("n_classes", n_classes), ("n_per_class", n_per_class), ("dim", dim)):
        if v < 1:
            raise ValueError(f"{name} must be >= 1, got {v}")
    rng = np.random.default_rng(seed)
    means = rng.uniform(-separation, separation, size=(n_classes, dim))
    labels = np.repeat(np.arange(n_classes), n_per_class)
    x = means[labels] + rng.normal(size=(len(labels), dim))
    lo, hi = x.min(axis=0), x.max(axis=0)
    x = (x - lo) / np.where(hi > lo, hi - lo, 1.0)
    return Dataset(x, labels, n_classes, stratified_split(labels, [seed, 1]))


# ---------------------------------------------------------------- IDX

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_IDX_CODES = {np.dtype(v).newbyteorder("=").str: k for k, v in _IDX_TYPES.items()}


def _open(path, mode="rb"):
    return gzip.open(path, mode) if str(path).endswith(".gz") else open(path, mode)


def read_idx(path):
    """Parse an IDX file (big-endian, magic ``0x0000TTNN``) into an array."""
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated magic number at byte offset {len(raw)}")
    zero, code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or code not in _IDX_TYPES or ndim < 1:
        raise ParseError(f"{path}: bad IDX magic 0x{raw[:4].hex()} at byte offset 0")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise ParseError(f"{path}: truncated dimension header at byte offset {len(raw)}")
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    dtype = np.dtype(_IDX_TYPES[code])
    need = header + int(np.prod(dims)) * dtype.itemsize
    if len(raw) != need:
        raise ParseError(f"{path}: expected {need} bytes for dims {dims}, file ends at byte offset {len(raw)}")
    return np.frombuffer(raw, dtype=dtype, offset=header).reshape(dims)


def write_idx(path, arr):
    arr = np.asarray(arr)
    key = arr.dtype.newbyteorder("=").str
    if key not in _IDX_CODES:
        raise ValueError(f"dtype {arr.dtype} has no IDX code")
    code = _IDX_CODES[key]
    with _open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, code, arr.ndim))
        fh.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        fh.write(arr.astype(_IDX_TYPES[code]).tobytes())


def _to_unit_range(x):
    if np.issubdtype(x.dtype, np.unsignedinteger):
        return x.astype(np.float64) / np.iinfo(x.dtype).max
    x = x.astype(np.float64)
    if x.size and (x.min() < 0 or x.max() > 1):
        lo, hi = x.min(), x.max()
        x = (x - lo) / (hi - lo if hi > lo else 1.0)
    return x


def load_idx(images_path, labels_path, split_seed=0, n_classes=None):
    """Images and labels from a pair of IDX files (e.g. an MNIST subset)."""
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if labels.ndim != 1 or len(labels) != len(images):
        raise ParseError(f"label file has shape {labels.shape}, images have {len(images)} samples")
    x = _to_unit_range(images)
    if x.ndim == 3:
        x = x[:, None]  # (N, 1, H, W)
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    return Dataset(x, labels, k, stratified_split(labels, split_seed))


# ---------------------------------------------------------------- CSV

def save_csv(path, dataset: Dataset):
    flat = dataset.samples.reshape(len(dataset.samples), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"x{i}" for i in range(flat.shape[1])])
        for y, row in zip(dataset.labels, flat):
            w.writerow([int(y)] + ["%.17g" % v for v in row])


def load_csv(path, schema=None, split_seed=0):
    """Headered CSV with a ``label`` column; every other column is a feature.

    ``schema`` may give ``shape`` (per-sample array shape), ``n_classes``
    and ``max_value`` (divide features by it; otherwise values outside
    ``[0, 1]`` are min-max scaled).
    """
    schema = schema or {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file, line 1") from None
        if "label" not in header:
            raise ParseError(f"{path}: header on line 1 has no 'label' column")
        li = header.index("label")
        rows, labels = [], []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}: line {line_no} has {len(row)} fields, header has {len(header)}")
            try:
                labels.append(int(row[li]))
                rows.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError as exc:
                raise ParseError(f"{path}: line {line_no}: {exc}") from exc
    x = np.asarray(rows, dtype=np.float64).reshape(len(rows), -1)
    if "max_value" in schema:
        x = x / float(schema["max_value"])
    else:
        x = _to_unit_range(x)
    if "shape" in schema:
        x = x.reshape((len(rows),) + tuple(schema["shape"]))
    y = np.asarray(labels, dtype=np.int64)
    k = schema.get("n_classes", int(y.max()) + 1 if len(y) else 0)
    return Dataset(x, y, k, stratified_split(y, split_seed))


# ---------------------------------------------------------------- coding

def encode_spikes(samples, T, mode="constant", seed=0):
    """Stack ``T`` copies (constant current) or Bernoulli draws (poisson) along a new axis 0."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    x = np.asarray(samples, dtype=np.float64)
    if mode == "constant":
        return np.broadcast_to(x, (T,) + x.shape).copy()
    if mode == "poisson":
        if x.size and (x.min() < 0 or x.max() > 1):
            raise ValueError("poisson coding needs values in [0, 1]")
        rng = np.random.default_rng(seed)
        return (rng.random((T,) + x.shape) < x).astype(np.float64)
    raise ValueError(f"unknown encoding mode {mode!r}")


def add_gaussian_noise(samples, relative_l2, seed):
    """Add per-sample Gaussian noise with ``||noise|| = relative_l2 * ||x||``."""
    if relative_l2 < 0:
        raise ValueError(f"relative_l2 must be >= 0, got {relative_l2}")
    x = np.asarray(samples, dtype=np.float64)
    if relative_l2 == 0:
        return x.copy()
    rng = np.random.default_rng(seed)
    flat = x.reshape(len(x), -1)
    noise = rng.normal(size=flat.shape)
    scale = relative_l2 * np.linalg.norm(flat, axis=1) / np.linalg.norm(noise, axis=1)
    return (flat + noise * scale[:, None]).reshape(x.shape)
