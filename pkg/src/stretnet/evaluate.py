"""Forecast metrics, the historical-average baseline, and horizon reports."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .data import INTERVAL_MINUTES

DEFAULT_MAPE_FLOOR = 1.0
HORIZON_STEPS = (3, 6, 12)


def _pair(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} differ")
    if pred.size == 0:
        raise ValueError("metrics need at least one value")
    return pred, target


def mae(pred, target):
    pred, target = _pair(pred, target)
    return float(np.abs(pred - target).mean())


def rmse(pred, target):
    pred, target = _pair(pred, target)
    return float(np.sqrt(((pred - target) ** 2).mean()))


def mape(pred, target, floor=DEFAULT_MAPE_FLOOR):
    """Percentage error over entries with ``|target| >= floor``.

    Returns ``None`` when every entry is masked.
    """
    pred, target = _pair(pred, target)
    keep = np.abs(target) >= floor
    if not keep.any():
        return None
    return float(np.abs((pred[keep] - target[keep]) / target[keep]).mean() * 100.0)


def masked_count(target, floor=DEFAULT_MAPE_FLOOR):
    return int((np.abs(np.asarray(target)) < floor).sum())


def ha_forecast(window, q):
    """Every horizon step repeats the per-node mean of the input window.

    Accepts (N, p, 1) or batched (S, N, p, 1) windows.
    """
    window = np.asarray(window, dtype=np.float64)
    if window.shape[-2] < 1:
        raise ValueError("historical average needs at least one input step")
    avg = window.mean(axis=-2, keepdims=True)
    return np.repeat(avg, q, axis=-2)


def _num(x):
    return None if x is None or not math.isfinite(x) else x


@dataclass
class MetricsReport:
    model: str
    mae: list
    mape: list
    rmse: list
    horizons: dict
    overall: dict
    samples: int
    mape_floor: float
    masked: int
    notices: list = field(default_factory=list)
    horizon_rule: str = "single-step metrics at each named horizon"

    def to_dict(self):
        return {
            "model": self.model,
            "samples": self.samples,
            "interval_minutes": INTERVAL_MINUTES,
            "horizon_rule": self.horizon_rule,
            "mape_floor": self.mape_floor,
            "mape_masked_entries": self.masked,
            "horizons": self.horizons,
            "overall": self.overall,
            "per_step": [
                {"step": i + 1, "mae": a, "mape": _num(b), "rmse": c}
                for i, (a, b, c) in enumerate(zip(self.mae, self.mape, self.rmse))
            ],
            "notices": self.notices,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self):
        lines = ["step,mae,mape,rmse"]
        for i, (a, b, c) in enumerate(zip(self.mae, self.mape, self.rmse)):
            lines.append(f"{i + 1},{a!r},{'' if b is None else repr(b)},{c!r}")
        return "\n".join(lines) + "\n"


def horizon_report(pred, target, model="model", floor=DEFAULT_MAPE_FLOOR, steps=HORIZON_STEPS):
    """Per-step metrics over de-normalized (S, N, q, 1) forecasts."""
    pred, target = _pair(pred, target)
    q = pred.shape[2]
    per = {"mae": [], "mape": [], "rmse": []}
    for s in range(q):
        p_s, t_s = pred[:, :, s], target[:, :, s]
        per["mae"].append(mae(p_s, t_s))
        per["mape"].append(mape(p_s, t_s, floor))
        per["rmse"].append(rmse(p_s, t_s))
    horizons, notices = {}, []
    for step in steps:
        label = f"{step * INTERVAL_MINUTES}min"
        if step > q:
            notices.append(f"horizon {label} omitted: forecast covers only {q} steps")
            continue
        i = step - 1
        horizons[label] = {"step": step, "mae": per["mae"][i], "mape": _num(per["mape"][i]), "rmse": per["rmse"][i]}
    overall = {"mae": mae(pred, target), "mape": _num(mape(pred, target, floor)), "rmse": rmse(pred, target)}
    return MetricsReport(model, per["mae"], per["mape"], per["rmse"], horizons, overall,
                         int(pred.shape[0]), floor, masked_count(target, floor), notices)


def ha_report(dataset, floor=DEFAULT_MAPE_FLOOR):
    return horizon_report(ha_forecast(dataset.inputs, dataset.q), dataset.targets, "HA", floor)
