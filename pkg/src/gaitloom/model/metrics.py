"""Prediction quality metrics: RMSE, range-normalized RMSE, R^2."""

from __future__ import annotations

import numpy as np


class DegenerateLabelsError(ValueError):
    """Zero label range/variance: NRMSE or R^2 undefined."""


def rmse(preds, labels) -> float:
    preds, labels = _check(preds, labels)
    d = preds - labels
    return float(np.sqrt(np.mean(d * d)))


def nrmse(preds, labels) -> float:
    preds, labels = _check(preds, labels)
    span = labels.max() - labels.min()
    if span <= 0:
        raise DegenerateLabelsError("label range is zero")
    return rmse(preds, labels) / float(span)


def r2(preds, labels) -> float:
    preds, labels = _check(preds, labels)
    ss_res = np.sum((labels - preds) ** 2)
    ss_tot = np.sum((labels - labels.mean()) ** 2)
    if ss_tot <= 0:
        raise DegenerateLabelsError("label variance is zero")
    return float(1.0 - ss_res / ss_tot)


def metrics(preds, labels) -> dict[str, float]:
    return {"rmse": rmse(preds, labels), "nrmse": nrmse(preds, labels),
            "r2": r2(preds, labels)}


def circular_mae(pred_phase, true_phase) -> float:
    """Mean absolute phase error on the unit circle (cycles)."""
    d = np.abs((np.asarray(pred_phase) - np.asarray(true_phase) + 0.5) % 1.0 - 0.5)
    return float(d.mean())


def _check(preds, labels):
    preds = np.asarray(preds, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if preds.shape != labels.shape or preds.size < 2:
        raise ValueError("preds/labels must have equal length >= 2")
    return preds, labels
