"""Loss assembly for the timing predictor and the multi-task main model."""

from __future__ import annotations

import numpy as np

from ..autodiff import Tensor, mse
from .networks import AblationFlags, MainOutputs


def timing_loss(pred: Tensor, target: np.ndarray, mode: str = "symmetric") -> Tensor:
    """Squared-error loss on (start, end) gait timing.

    "symmetric" averages both terms by 1/n; "as_printed" keeps the end term as
    a plain sum (n times the mean), reproducing the asymmetric published form.
    """
    t = np.asarray(target, dtype=pred.data.dtype)
    start = mse(pred[:, 0:1], t[:, 0:1])
    end = mse(pred[:, 1:2], t[:, 1:2])
    if mode == "symmetric":
        return start + end
    if mode == "as_printed":
        return start + float(t.shape[0]) * end
    raise ValueError(f"unknown timing loss mode {mode!r}")


def main_loss(
    out: MainOutputs,
    labels: dict[str, np.ndarray],
    alpha: float,
    flags: AblationFlags,
) -> tuple[Tensor, dict[str, float]]:
    """Total = pattern (or direct-angle) MSE + amplitude MSE + alpha * mask MSE.

    The amplitude term averages over both outputs and the activation term over
    all 100 x C mask cells, so each part is a plain elementwise mean.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    parts: dict[str, float] = {}
    if flags.decoupling:
        l1 = mse(out.pattern, labels["pattern"])
        l2 = mse(out.amplitude, labels["amplitude"])
        total = l1 + l2
        parts["pattern"] = l1.item()
        parts["amplitude"] = l2.item()
    else:
        l1 = mse(out.angle, labels["angle"])
        total = l1
        parts["angle"] = l1.item()
    if flags.activation_aux:
        l3 = mse(out.activation, labels["mask"])
        total = total + alpha * l3
        parts["activation"] = l3.item()
    return total, parts
