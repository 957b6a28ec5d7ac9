"""Flow-series ingestion, sliding windows, z-score normalization,
chronological splits and synthetic generators."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import DataError
from .numerics import ConfigError

INTERVAL_MINUTES = 5
STEPS_PER_DAY = 24 * 60 // INTERVAL_MINUTES
FLOW_MAGIC = b"STFLOW01"
_FLOW_HEADER = struct.Struct("<8sII")  # magic, T, N -> 16 bytes


@dataclass(frozen=True)
class FlowSeries:
    values: np.ndarray  # (T, N)
    interval_minutes: int = INTERVAL_MINUTES

    def __post_init__(self):
        if self.values.ndim != 2:
            raise DataError(f"flow values must be (T, N), got {self.values.shape}")
        if np.isnan(self.values).any():
            raise DataError("flow values contain NaN")

    @property
    def n_steps(self):
        return self.values.shape[0]

    @property
    def n_nodes(self):
        return self.values.shape[1]


def _impute(values):
    # carry the last observation forward per sensor, then back-fill the start
    out = values.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        bad = np.isnan(col)
        if bad.all():
            raise DataError(f"sensor {j} has no observations")
        idx = np.where(~bad, np.arange(len(col)), 0)
        np.maximum.accumulate(idx, out=idx)
        col[:] = col[idx]
        first = np.argmax(~bad)
        col[:first] = col[first]
    return out


def load_flow(path, format="auto", impute=False):
    """Read a (T, N) flow matrix from text, the raw binary format, or a PEMS npz.

    Text: one comma-separated row per time step, one column per sensor.
    Binary: 16-byte header (magic, T, N as little-endian uint32) followed by
    T*N little-endian float64 values in row-major order.
    Npz: the ``data`` array, first feature channel if 3-D.
    """
    path = Path(path)
    if format == "auto":
        with open(path, "rb") as fh:
            head = fh.read(8)
        if head == FLOW_MAGIC:
            format = "bin"
        elif path.suffix == ".npz":
            format = "npz"
        else:
            format = "text"
    if format == "bin":
        values = _read_flow_bin(path)
    elif format == "npz":
        with np.load(path) as z:
            values = z["data"]
        if values.ndim == 3:
            values = values[:, :, 0]
        values = np.asarray(values, dtype=np.float64)
    elif format == "text":
        values = _read_flow_text(path)
    else:
        raise ConfigError(f"unknown flow format {format!r}")
    if np.isnan(values).any():
        if not impute:
            t, n = np.argwhere(np.isnan(values))[0]
            raise DataError(f"{path}: NaN at time step {t}, sensor {n}")
        values = _impute(values)
    return FlowSeries(values)


def _read_flow_text(path):
    rows, width = [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = [float(t) for t in line.split(",")]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric value") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, found {len(row)}")
            rows.append(row)
    if not rows:
        raise DataError(f"{path}: no data rows")
    return np.array(rows, dtype=np.float64)


def _read_flow_bin(path):
    raw = Path(path).read_bytes()
    if len(raw) < _FLOW_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, t, n = _FLOW_HEADER.unpack_from(raw)
    if magic != FLOW_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    body = raw[_FLOW_HEADER.size:]
    if len(body) != 8 * t * n:
        raise DataError(f"{path}: expected {t}x{n} values, file holds {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(t, n).astype(np.float64)


def save_flow(path, series, format="text"):
    values = series.values if isinstance(series, FlowSeries) else np.asarray(series)
    if format == "bin":
        t, n = values.shape
        with open(path, "wb") as fh:
            fh.write(_FLOW_HEADER.pack(FLOW_MAGIC, t, n))
            fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())
    elif format == "text":
        with open(path, "w") as fh:
            for row in values:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
    else:
        raise ConfigError(f"unknown flow format {format!r}")


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float

    def apply(self, x):
        return (np.asarray(x) - self.mean) / self.std

    def invert(self, x):
        return np.asarray(x) * self.std + self.mean


def zscore_fit(values):
    values = np.asarray(values, dtype=np.float64)
    mu, sd = float(values.mean()), float(values.std())
    if not sd > 0:
        raise ConfigError("cannot normalize: training data has zero standard deviation")
    return Normalizer(mu, sd)


def zscore_apply(normalizer, x):
    return normalizer.apply(x)


def zscore_invert(normalizer, x):
    return normalizer.invert(x)


@dataclass
class WindowedDataset:
    """Supervised samples; ``starts[i]`` is the series index of sample i's
    first input step. Inputs and targets are kept in original flow units."""

    inputs: np.ndarray  # (S, N, p, 1)
    targets: np.ndarray  # (S, N, q, 1)
    starts: np.ndarray
    p: int
    q: int
    split: str = "all"
    normalizer: Normalizer | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.inputs.shape[0]

    @property
    def n_nodes(self):
        return self.inputs.shape[1]

    def subset(self, lo, hi, split):
        return WindowedDataset(self.inputs[lo:hi], self.targets[lo:hi], self.starts[lo:hi],
                               self.p, self.q, split, self.normalizer, dict(self.meta))


def make_windows(series, p, q):
    """Stride-1 sliding windows: inputs t-p+1..t, targets t+1..t+q."""
    values = series.values if isinstance(series, FlowSeries) else np.asarray(series, dtype=np.float64)
    t_len = values.shape[0]
    if p < 1 or q < 1:
        raise ConfigError("p and q must be >= 1")
    if t_len < p + q:
        raise DataError(f"series of length {t_len} is shorter than p + q = {p + q}")
    count = t_len - p - q + 1
    starts = np.arange(count)
    idx_in = starts[:, None] + np.arange(p)[None, :]
    idx_out = starts[:, None] + p + np.arange(q)[None, :]
    # (S, p, N) -> (S, N, p, 1)
    inputs = values[idx_in].transpose(0, 2, 1)[..., None]
    targets = values[idx_out].transpose(0, 2, 1)[..., None]
    return WindowedDataset(np.ascontiguousarray(inputs), np.ascontiguousarray(targets), starts, p, q)


def split_sizes(count, ratio=(3, 1, 1)):
    """Train takes floor(count * a / total); the rest is divided b:c, rounding
    the middle split down."""
    a, b, c = ratio
    n_train = count * a // (a + b + c)
    rest = count - n_train
    n_mid = rest * b // (b + c)
    return n_train, n_mid, rest - n_mid


def split_3_1_1(dataset, ratio=(3, 1, 1), order=("train", "val", "test")):
    """Chronological contiguous splits; returns (train, val, test)."""
    if len(dataset) < 5:
        raise DataError(f"need at least 5 samples to split, got {len(dataset)}")
    if sorted(order) != ["test", "train", "val"] or order[0] != "train":
        raise ConfigError(f"split order must start with train and name val/test once, got {order}")
    sizes = split_sizes(len(dataset), ratio)
    parts, lo = {}, 0
    for name, size in zip(order, sizes):
        parts[name] = dataset.subset(lo, lo + size, name)
        lo += size
    if min(len(v) for v in parts.values()) == 0:
        raise DataError(f"split of {len(dataset)} samples leaves an empty part: {sizes}")
    return parts["train"], parts["val"], parts["test"]


def fit_normalizer(series, train):
    """Z-score statistics over the series steps covered by the train split."""
    values = series.values if isinstance(series, FlowSeries) else np.asarray(series)
    last = int(train.starts[-1]) + train.p + train.q
    return zscore_fit(values[:last])


def prepare(series, p, q, ratio=(3, 1, 1), order=("train", "val", "test")):
    """Window, split and attach a train-only normalizer to every split."""
    windows = make_windows(series, p, q)
    train, val, test = split_3_1_1(windows, ratio, order)
    norm = fit_normalizer(series, train)
    for part in (train, val, test):
        part.normalizer = norm
    return train, val, test


# ---------------------------------------------------------------------------
# synthetic data


def ring_distances(n_nodes, rng):
    """Directed ring ``i -> i+1`` (traffic flows downstream) with random costs."""
    if n_nodes < 2:
        return []
    return [(i, (i + 1) % n_nodes, float(rng.uniform(1.0, 3.0))) for i in range(n_nodes)]


def synthetic_series(n_nodes, n_steps, seed, kind="sine", coupling=0.6, noise=None):
    """Reproducible flow matrix and ring distance list.

    ``sine``: phase-shifted daily sinusoid per node plus small noise.
    ``diffusion``: AR(1) process driven by the upstream ring neighbour,
    offset to a positive flow level.
    ``constant``: a distinct constant level per node.
    """
    rng = np.random.default_rng(seed)
    distances = ring_distances(n_nodes, rng)
    t = np.arange(n_steps)[:, None]
    nodes = np.arange(n_nodes)[None, :]
    if kind == "sine":
        base = rng.uniform(150.0, 250.0, size=n_nodes)
        amp = rng.uniform(60.0, 100.0, size=n_nodes)
        phase = 2 * np.pi * nodes / max(n_nodes, 1)
        sd = 2.0 if noise is None else noise
        values = base + amp * np.sin(2 * np.pi * t / STEPS_PER_DAY + phase) + rng.normal(0.0, sd, (n_steps, n_nodes))
    elif kind == "diffusion":
        sd = 1.0 if noise is None else noise
        z = np.zeros((n_steps, n_nodes))
        z[0] = rng.normal(0.0, sd, n_nodes)
        keep = 0.95 - coupling
        for k in range(1, n_steps):
            upstream = np.roll(z[k - 1], 1)
            z[k] = keep * z[k - 1] + coupling * upstream + rng.normal(0.0, sd, n_nodes)
        values = 200.0 + 20.0 * z
    elif kind == "constant":
        values = np.broadcast_to(100.0 + 10.0 * nodes, (n_steps, n_nodes)).astype(np.float64)
    else:
        raise ConfigError(f"unknown synthetic kind {kind!r}")
    return FlowSeries(np.ascontiguousarray(values, dtype=np.float64)), distances
