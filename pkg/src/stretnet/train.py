"""L1 training with RMSprop, early stopping, and a binary checkpoint format."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .data import Normalizer
from .graph import RoadGraph
from .model import ModelConfig, STRetNet
from .numerics import ConfigError, DimensionError

log = logging.getLogger(__name__)


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.001
    max_epochs: int = 200
    patience: int = 15
    rho: float = 0.99
    eps: float = 1e-8
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ConfigError(f"patience {self.patience} exceeds max_epochs {self.max_epochs}")
        if self.learning_rate < 0 or not 0 <= self.rho < 1 or self.eps < 0:
            raise ConfigError("learning_rate, rho and eps are out of range")


def l1_loss(pred, target):
    pred, target = nx.as_tensor(pred), nx.as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"loss shapes differ: {pred.shape} vs {target.shape}")
    return nx.mean(nx.absolute(nx.sub(pred, target)))


@dataclass
class RmspropState:
    v: dict = field(default_factory=dict)


def rmsprop_step(params, state, lr, rho=0.99, eps=1e-8):
    """``v <- rho v + (1 - rho) g^2``; ``theta <- theta - lr g / (sqrt(v) + eps)``.

    ``params`` maps names to tensors whose ``grad`` is populated; a missing
    gradient counts as zero.
    """
    for name, t in params.items():
        g = t.grad if t.grad is not None else np.zeros_like(t.data)
        v = state.v.get(name)
        v = (1.0 - rho) * g * g if v is None else rho * v + (1.0 - rho) * g * g
        state.v[name] = v
        t.data = t.data - lr * g / (np.sqrt(v) + eps)


def _clip(params, max_norm):
    total = np.sqrt(sum(float((t.grad * t.grad).sum()) for t in params.values() if t.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for t in params.values():
            if t.grad is not None:
                t.grad = t.grad * scale


def predict(model, inputs, normalizer, batch_size=256):
    """Forecast raw-unit windows (S, N, p, 1) -> raw-unit (S, N, q, 1)."""
    out = []
    with nx.no_grad():
        for lo in range(0, len(inputs), batch_size):
            x = normalizer.apply(inputs[lo:lo + batch_size])
            out.append(normalizer.invert(model(x).data))
    return np.concatenate(out, axis=0) if out else np.zeros((0, inputs.shape[1], model.cfg.q, 1))


def evaluate_l1(model, dataset, normalizer, batch_size=256):
    pred = predict(model, dataset.inputs, normalizer, batch_size)
    return float(np.abs(pred - dataset.targets).mean())


@dataclass
class EarlyStopState:
    best_loss: float = float("inf")
    best_epoch: int = 0
    since_improvement: int = 0
    best_state: dict | None = None

    def update(self, epoch, loss, model):
        """Record one validation result; True when it strictly improves."""
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.since_improvement = loss, epoch, 0
            self.best_state = model.state()
            return True
        self.since_improvement += 1
        return False


@dataclass
class TrainResult:
    history: list  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val: float
    stopped_early: bool
    diverged: bool = False

    def history_table(self):
        lines = ["epoch\ttrain_loss\tval_loss"]
        lines += [f"{e}\t{tr!r}\t{va!r}" for e, tr, va in self.history]
        return "\n".join(lines) + "\n"


def train_loop(model, train, val, cfg, normalizer=None, on_epoch=None):
    """Mini-batch L1 training on de-normalized predictions.

    The model sees z-scored inputs; its outputs are inverted back to flow
    units before the loss, so losses are reported in original units. The
    model is left holding the best-validation parameters. ``on_epoch`` is
    called as ``on_epoch(epoch, train_loss, val_loss)``; a true return value
    ends training after that epoch.
    """
    if len(train) == 0 or len(val) == 0:
        raise ConfigError("training needs nonempty train and validation splits")
    normalizer = normalizer or train.normalizer
    if normalizer is None:
        raise ConfigError("no normalizer attached to the training split")
    rng = np.random.default_rng(cfg.seed)
    x_train = normalizer.apply(train.inputs)
    y_train = train.targets
    state = RmspropState()
    stop = EarlyStopState(best_state=model.state())
    history, diverged, stopped = [], False, False

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            model.zero_grad()
            pred = model(x_train[idx])
            pred = nx.add(nx.mul(pred, normalizer.std), normalizer.mean)
            loss = l1_loss(pred, y_train[idx])
            value = loss.item()
            if not np.isfinite(value):
                diverged = True
                break
            nx.backward(loss)
            if cfg.clip_norm is not None:
                _clip(model.params, cfg.clip_norm)
            rmsprop_step(model.params, state, cfg.learning_rate, cfg.rho, cfg.eps)
            total += value * len(idx)
            seen += len(idx)
        if diverged:
            log.warning("non-finite loss in epoch %d; restoring best checkpoint", epoch)
            break
        val_loss = evaluate_l1(model, val, normalizer)
        if not np.isfinite(val_loss):
            diverged = True
            log.warning("non-finite validation loss in epoch %d; restoring best checkpoint", epoch)
            break
        history.append((epoch, total / seen, val_loss))
        stop.update(epoch, val_loss, model)
        log.info("epoch %d train %.4f val %.4f", epoch, total / seen, val_loss)
        if on_epoch is not None and on_epoch(epoch, total / seen, val_loss):
            stopped = True
            break
        if stop.since_improvement >= cfg.patience:
            stopped = True
            break

    model.load_state(stop.best_state)
    return TrainResult(history, stop.best_epoch, stop.best_loss, stopped, diverged)


# ---------------------------------------------------------------------------
# checkpoints
#
# Layout (little-endian):
#   8 bytes  magic b"STRNCKPT"
#   4 bytes  uint32 format version
#   8 bytes  uint64 header length H
#   H bytes  UTF-8 JSON header: config, normalizer, and an ordered tensor
#            table [[name, shape], ...]
#   tensors  float64 payloads in table order: graph.a_fwd, graph.a_bwd,
#            graph.adjacency, then model parameters in construction order

CKPT_MAGIC = b"STRNCKPT"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")


def save_checkpoint(model, path, normalizer=None):
    tensors = [("graph.a_fwd", model.graph.a_fwd), ("graph.a_bwd", model.graph.a_bwd),
               ("graph.adjacency", model.graph.adjacency)]
    tensors += [(k, t.data) for k, t in model.params.items()]
    header = {
        "config": model.cfg.to_dict(),
        "normalizer": None if normalizer is None else asdict(normalizer),
        "tensors": [[k, list(v.shape)] for k, v in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(blob)))
        fh.write(blob)
        for _, v in tensors:
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Returns (model, normalizer or None)."""
    raw = Path(path).read_bytes()
    if len(raw) < _PREFIX.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    start = _PREFIX.size + hlen
    if len(raw) < start:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(raw[_PREFIX.size:start].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header") from exc
    arrays, pos = {}, start
    for name, shape in header["tensors"]:
        n = int(np.prod(shape, dtype=np.int64)) * 8
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated at tensor {name}")
        arrays[name] = np.frombuffer(raw[pos:pos + n], dtype="<f8").reshape(shape).astype(np.float64)
        pos += n
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    cfg = ModelConfig.from_dict(header["config"])
    adj = arrays.pop("graph.adjacency")
    graph = RoadGraph(adj.shape[0], adj, arrays.pop("graph.a_fwd"), arrays.pop("graph.a_bwd"))
    params = {k: nx.Tensor(v, requires_grad=True) for k, v in arrays.items()}
    model = STRetNet(cfg, graph, params=params)
    norm = header.get("normalizer")
    return model, None if norm is None else Normalizer(**norm)
