"""Road-sensor graph: distance kernel, transition matrices, static GCN and
the learned adaptive adjacency."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import DimensionError, Tensor


class DataError(ValueError):
    pass


DEFAULT_KAPPA = 0.1
DEFAULT_EMBED_WIDTH = 10


@dataclass(frozen=True)
class RoadGraph:
    n_nodes: int
    adjacency: np.ndarray
    a_fwd: np.ndarray
    a_bwd: np.ndarray

    @classmethod
    def from_adjacency(cls, adjacency):
        adjacency = np.asarray(adjacency, dtype=np.float64)
        if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
            raise DimensionError(f"adjacency must be square, got {adjacency.shape}")
        if (adjacency < 0).any():
            raise DataError("adjacency entries must be nonnegative")
        a_fwd, a_bwd = transition_matrices(adjacency)
        return cls(adjacency.shape[0], adjacency, a_fwd, a_bwd)

    @classmethod
    def from_distances(cls, distances, n_nodes, sigma=None, kappa=DEFAULT_KAPPA):
        return cls.from_adjacency(build_adjacency(distances, n_nodes, sigma, kappa))


def read_distances(path):
    """Read ``from,to,cost`` records; a non-numeric first line is a header."""
    records = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        parts = [t.strip() for t in line.split(",")]
        try:
            if len(parts) != 3:
                raise ValueError
            records.append((int(parts[0]), int(parts[1]), float(parts[2])))
        except ValueError:
            if lineno == 1 and not records:
                continue
            raise DataError(f"{path}:{lineno}: expected 'from,to,cost', got {line!r}") from None
    return records


def write_distances(path, distances):
    with open(Path(path), "w") as fh:
        fh.write("from,to,cost\n")
        for i, j, c in distances:
            fh.write(f"{int(i)},{int(j)},{float(c)!r}\n")


def build_adjacency(distances, n_nodes, sigma=None, kappa=DEFAULT_KAPPA):
    """Thresholded Gaussian kernel ``exp(-d^2 / sigma^2)`` over listed pairs.

    ``sigma`` defaults to the standard deviation of the listed costs; weights
    below ``kappa`` are dropped. Unlisted pairs and the diagonal stay zero.
    """
    adj = np.zeros((n_nodes, n_nodes))
    if not distances:
        return adj
    costs = []
    for i, j, c in distances:
        if not (0 <= i < n_nodes and 0 <= j < n_nodes):
            raise DataError(f"edge ({i}, {j}) outside node range [0, {n_nodes})")
        if not c > 0:
            raise DataError(f"edge ({i}, {j}) has non-positive cost {c}")
        costs.append(c)
    if sigma is None:
        sigma = float(np.std(costs))
        if sigma == 0.0:
            sigma = float(np.mean(costs))
    for i, j, c in distances:
        if i == j:
            continue
        w = np.exp(-(c * c) / (sigma * sigma))
        adj[i, j] = w if w >= kappa else 0.0
    return adj


def _row_normalize(m):
    rows = m.sum(axis=1, keepdims=True)
    safe = np.where(rows > 0, rows, 1.0)
    return np.where(rows > 0, m / safe, 0.0)


def transition_matrices(adjacency):
    """Forward (row-normalized A) and backward (row-normalized A^T) operators."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    return _row_normalize(adjacency), _row_normalize(adjacency.T)


@dataclass
class AdaptiveEmbedding:
    e1: Tensor
    e2: Tensor

    def __post_init__(self):
        if self.e1.shape != self.e2.shape:
            raise DimensionError(f"embedding shapes differ: {self.e1.shape} vs {self.e2.shape}")

    @property
    def c(self):
        return self.e1.shape[1]


def adaptive_adjacency(emb):
    """Row-stochastic ``softmax(relu(E1 E2^T))``."""
    return nx.softmax_rows(nx.relu(nx.matmul(emb.e1, nx.swapaxes(emb.e2, 0, 1))))


def node_mix(a, x):
    """Apply an N x N operator along the node axis of ``x`` shaped (..., N, p, d)."""
    x = nx.as_tensor(x)
    n, p, d = x.shape[-3:]
    if a.shape[-1] != n:
        raise DimensionError(f"operator {a.shape} does not match {n} nodes in {x.shape}")
    lead = x.shape[:-3]
    flat = nx.reshape(x, lead + (n, p * d))
    return nx.reshape(nx.matmul(a, flat), lead + (n, p, d))


def gcn_forward(x, a_fwd, a_bwd, w1, w2):
    """Two directed diffusion passes: ``relu(A_f X W1)`` and ``relu(A_b X W2)``.

    ``x`` is (..., N, p, d); the weights act on the feature axis and may carry
    extra leading (per-head) axes that broadcast against ``x``.
    """
    x = nx.as_tensor(x)
    for w in (w1, w2):
        if w.shape[-2:] != (x.shape[-1], x.shape[-1]):
            raise DimensionError(f"GCN weight {w.shape} does not match width {x.shape[-1]}")
    h1 = nx.relu(node_mix(a_fwd, nx.matmul(x, w1)))
    h2 = nx.relu(node_mix(a_bwd, nx.matmul(x, w2)))
    return h1, h2
