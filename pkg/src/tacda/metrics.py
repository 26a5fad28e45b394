"""RUL evaluation metrics: RMSE and the asymmetric prognostics score."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

EARLY_DIVISOR = 13.0
LATE_DIVISOR = 10.0


def _pair(y_true, y_pred):
    y_true = np.asarray(y_true, dtype=np.float64).reshape(-1)
    y_pred = np.asarray(y_pred, dtype=np.float64).reshape(-1)
    if len(y_true) != len(y_pred):
        raise ValueError(f"length mismatch: {len(y_true)} true vs {len(y_pred)} predicted")
    if len(y_true) == 0:
        raise ValueError("empty input")
    return y_true, y_pred


def rmse(y_true, y_pred) -> float:
    y_true, y_pred = _pair(y_true, y_pred)
    return float(np.sqrt(np.mean((y_pred - y_true) ** 2)))


def score_terms(y_true, y_pred) -> np.ndarray:
    """Per-window penalty; late predictions (y_pred > y_true) cost more.

    Inputs are RULs in cycles.  An exact prediction scores 0.
    """
    y_true, y_pred = _pair(y_true, y_pred)
    d = y_pred - y_true
    out = np.zeros_like(d)
    early, late = d < 0, d > 0
    out[early] = np.expm1(-d[early] / EARLY_DIVISOR)
    out[late] = np.expm1(d[late] / LATE_DIVISOR)
    return out


def score(y_true, y_pred) -> float:
    return float(score_terms(y_true, y_pred).sum())


@dataclass
class EvalReport:
    rmse: float
    score: float
    n: int
    residuals: list
    rul_cap: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(y_true, y_pred, rul_cap: Optional[float] = None) -> EvalReport:
    """Evaluate normalized predictions; with ``rul_cap`` both sides are scaled to cycles first."""
    y_true, y_pred = _pair(y_true, y_pred)
    if rul_cap is not None:
        y_true, y_pred = y_true * rul_cap, y_pred * rul_cap
    return EvalReport(rmse(y_true, y_pred), score(y_true, y_pred), len(y_true),
                      (y_pred - y_true).tolist(), rul_cap)
