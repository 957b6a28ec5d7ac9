"""Retention primitives shared by the spatial and temporal sublayers.

Rotary phases treat each adjacent feature pair ``(x[2j], x[2j+1])`` as one
complex number. Queries are multiplied by ``exp(i n theta_j)``, keys by the
conjugate phase, and scores are the real part of the (non-conjugating)
product ``Q K^T``, so a query at ``n`` and a key at ``m`` interact through
``n - m`` only.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ConfigError, DimensionError, Tensor

ROTARY_BASE = 10000.0


def gamma_vector(h):
    """Per-head decay rates ``1 - 2^(-5-i)`` for ``i = 0..h-1``."""
    if h < 1:
        raise ConfigError("head count must be at least 1")
    return [1.0 - 2.0 ** (-5 - i) for i in range(h)]


@dataclass(frozen=True)
class DecayMatrix:
    p: int
    gamma: float
    d: np.ndarray


@functools.lru_cache(maxsize=None)
def _decay_table(p, gamma):
    d = np.zeros((p, p))
    for n in range(p):
        for m in range(n + 1):
            d[n, m] = gamma ** (n - m)
    d.setflags(write=False)
    return d


def decay_matrix(p, gamma):
    """Causal mask fused with exponential decay: ``gamma^(n-m)`` for ``n >= m``."""
    if p < 1:
        raise ConfigError(f"window length must be >= 1, got {p}")
    if not 0.0 < gamma < 1.0:
        raise ConfigError(f"decay rate must lie in (0, 1), got {gamma}")
    return DecayMatrix(p, float(gamma), _decay_table(int(p), float(gamma)))


@dataclass(frozen=True)
class RotaryPhases:
    """Per-pair rotation frequencies and their cos/sin tables for positions 0..L-1.

    Tables repeat each pair's value twice so they align with the feature axis.
    """

    thetas: tuple
    cos: np.ndarray
    sin: np.ndarray

    @property
    def length(self):
        return self.cos.shape[0]

    @property
    def width(self):
        return 2 * len(self.thetas)

    @classmethod
    def build(cls, length, d, thetas=None, base=ROTARY_BASE):
        if d % 2:
            raise ConfigError(f"rotary width must be even, got {d}")
        if thetas is None:
            thetas = tuple(base ** (-2.0 * j / d) for j in range(d // 2))
        thetas = tuple(float(t) for t in thetas)
        if len(thetas) != d // 2:
            raise ConfigError(f"need {d // 2} rotation frequencies, got {len(thetas)}")
        return _phases(int(length), thetas)

    def at(self, positions):
        """cos/sin tables for arbitrary (possibly negative) integer positions."""
        ang = np.asarray(positions, dtype=np.float64)[:, None] * np.repeat(self.thetas, 2)[None, :]
        return np.cos(ang), np.sin(ang)


@functools.lru_cache(maxsize=None)
def _phases(length, thetas):
    ang = np.arange(length)[:, None] * np.repeat(np.asarray(thetas), 2)[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    cos.setflags(write=False)
    sin.setflags(write=False)
    return RotaryPhases(thetas, cos, sin)


@functools.lru_cache(maxsize=None)
def _pair_sign(d):
    s = np.ones(d)
    s[1::2] = -1.0
    return s


def apply_rotation(x, phases, conjugate=False, positions=None):
    """Rotate each feature pair at sequence position n by ``+/- n theta_j``.

    ``x`` is (..., L, d) with positions along axis -2, numbered 0..L-1 unless
    ``positions`` gives them explicitly.
    """
    x = nx.as_tensor(x)
    length, d = x.shape[-2:]
    if d % 2:
        raise ConfigError(f"rotary width must be even, got {d}")
    if positions is not None:
        if len(positions) != length or phases.width != d:
            raise DimensionError(f"positions/phases do not fit input {x.shape}")
        cos, sin = phases.at(positions)
    else:
        if phases.width != d or phases.length < length:
            raise DimensionError(f"phases {phases.cos.shape} cannot rotate input {x.shape}")
        cos, sin = phases.cos[:length], phases.sin[:length]
    if conjugate:
        sin = -sin
    return nx.rotate_pairs(x, cos, sin)


def pair_scores(q, k):
    """Real part of ``Q K^T`` with feature pairs read as complex numbers."""
    k = nx.as_tensor(k)
    return nx.matmul(q, nx.swapaxes(nx.mul(k, _pair_sign(k.shape[-1])), -1, -2))


def parallel_retention(q, k, v, mask, complex_pairs=True):
    """``(scores(Q, K) * mask) V`` along axis -2.

    With ``complex_pairs=False`` the score is the plain real ``Q K^T``; that
    form is meant for unrotated inputs (any width).
    """
    q, k, v = nx.as_tensor(q), nx.as_tensor(k), nx.as_tensor(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"retention shapes q={q.shape} k={k.shape} v={v.shape}")
    if complex_pairs:
        scores = pair_scores(q, k)
    else:
        scores = nx.matmul(q, nx.swapaxes(k, -1, -2))
    mask = np.asarray(mask) if not isinstance(mask, Tensor) else mask
    if mask.shape[-2:] != scores.shape[-2:]:
        raise DimensionError(f"mask {mask.shape} does not match scores {scores.shape}")
    return nx.matmul(nx.mul(scores, mask), v)


@dataclass
class RetentionHead:
    """Feature-axis projections for one head.

    The matrices may carry leading axes (e.g. ``(h, 1, d, d)``) to evaluate
    several heads at once against inputs shaped ``(..., h, L_outer, L, d)``.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor

    def __post_init__(self):
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1 or self.w_q.shape[-1] != self.w_q.shape[-2]:
            raise DimensionError(f"retention projections must be equal square matrices, got {shapes}")

    @property
    def width(self):
        return self.w_q.shape[-1]

    def project(self, x, phases, positions=None):
        q = nx.matmul(x, self.w_q)
        k = nx.matmul(x, self.w_k)
        v = nx.matmul(x, self.w_v)
        if phases is not None:
            q = apply_rotation(q, phases, positions=positions)
            k = apply_rotation(k, phases, conjugate=True, positions=positions)
        return q, k, v


def _check_width(x, head):
    if x.shape[-1] != head.width:
        raise DimensionError(f"input width {x.shape[-1]} does not match head width {head.width}")


def temporal_retention(x, head, gamma, phases="auto"):
    """Causal decayed retention over the time axis of ``x`` (..., N, p, d).

    ``gamma`` is a scalar rate, a :class:`DecayMatrix`, or an array of decay
    matrices broadcastable against the per-node scores (one per head).
    ``phases=None`` disables the rotary phases.
    """
    x = nx.as_tensor(x)
    _check_width(x, head)
    p = x.shape[-2]
    if isinstance(gamma, DecayMatrix):
        mask = gamma.d
    elif np.ndim(gamma) == 0:
        mask = decay_matrix(p, float(gamma)).d
    else:
        mask = np.asarray(gamma)
    if isinstance(phases, str):
        phases = RotaryPhases.build(p, head.width)
    q, k, v = head.project(x, phases)
    return parallel_retention(q, k, v, mask, complex_pairs=phases is not None)


def spatial_retention(x, head, a_adp, phases="auto", positions=None):
    """Retention across sensors, masked by the adaptive adjacency.

    ``x`` is (..., N, p, d); every time step is mixed over the node axis
    independently. Rotary positions follow node order unless ``positions``
    assigns each node its index explicitly.
    """
    x = nx.as_tensor(x)
    _check_width(x, head)
    n = x.shape[-3]
    if a_adp.shape[-2:] != (n, n):
        raise DimensionError(f"adaptive adjacency {a_adp.shape} does not match {n} nodes")
    if isinstance(phases, str):
        phases = RotaryPhases.build(n, head.width)
    xt = nx.swapaxes(x, -3, -2)
    q, k, v = head.project(xt, phases, positions)
    out = parallel_retention(q, k, v, a_adp, complex_pairs=phases is not None)
    return nx.swapaxes(out, -3, -2)


def spatial_head_aggregate(x, h1, h2, srm, w_agg, b_agg=None):
    """Fuse input, static GCN and dynamic retention features per head.

    ``h1``/``h2`` may be ``None`` when the GCN is ablated; the map then
    consumes ``2 d`` features instead of ``4 d``.
    """
    parts = [nx.as_tensor(t) for t in [x] + ([] if h1 is None else [h1, h2]) + [srm]]
    if len({t.shape for t in parts}) != 1:
        raise DimensionError(f"aggregated features disagree in shape: {[t.shape for t in parts]}")
    total = len(parts) * parts[0].shape[-1]
    if w_agg.shape[-2] != total:
        raise DimensionError(f"aggregation weight {w_agg.shape} expects {w_agg.shape[-2]} features, got {total}")
    return nx.pointwise_linear(nx.concat(parts, axis=-1), w_agg, b_agg)


@dataclass
class GatedAggregation:
    w_g: Tensor
    w_o: Tensor
    gn_gain: Tensor
    gn_bias: Tensor


def gated_multiscale(x, heads, gate, groups):
    """``(silu(X W_G) * GN(concat(heads))) W_O + X``.

    ``heads`` is a list of per-head tensors or their concatenation.
    """
    x = nx.as_tensor(x)
    merged = nx.concat(heads, axis=-1) if isinstance(heads, (list, tuple)) else heads
    if merged.shape != x.shape:
        raise DimensionError(f"merged heads {merged.shape} do not match input {x.shape}")
    normed = nx.group_norm(merged, groups, gate.gn_gain, gate.gn_bias)
    gated = nx.mul(nx.silu(nx.matmul(x, gate.w_g)), normed)
    return nx.add(nx.matmul(gated, gate.w_o), x)


@dataclass
class FfnParams:
    w0: Tensor
    w1: Tensor

    def __post_init__(self):
        if self.w0.shape[1] != self.w1.shape[0] or self.w0.shape[0] != self.w1.shape[1]:
            raise DimensionError(f"ffn widths disagree: {self.w0.shape} and {self.w1.shape}")


def ffn(msr, params):
    """``silu(MSR W0) W1 + MSR``."""
    msr = nx.as_tensor(msr)
    return nx.add(nx.matmul(nx.silu(nx.matmul(msr, params.w0)), params.w1), msr)


def split_heads(x, h):
    """(..., f) -> list of h tensors (..., f/h), in feature order."""
    x = nx.as_tensor(x)
    f = x.shape[-1]
    if f % h:
        raise ConfigError(f"feature width {f} not divisible by {h} heads")
    d = f // h
    return [nx.narrow(x, i * d, (i + 1) * d) for i in range(h)]


def rotation_score(q, k, n, m, phases):
    """Score of a query at position ``n`` against a key at position ``m``."""
    qr = apply_rotation(np.asarray(q, dtype=np.float64)[None, :], phases, positions=[n])
    kr = apply_rotation(np.asarray(k, dtype=np.float64)[None, :], phases, conjugate=True, positions=[m])
    return float(pair_scores(qr, kr).data[0, 0])
