"""Muscle activation detection and principal-activation masks.

A double-threshold detector turns the sEMG envelope into binary activation:
the signal is tiled into observation windows of ``l`` 5 ms units, and a window
is active when at least ``r`` samples exceed the per-channel amplitude
threshold (half of a channel statistic: Q1, mean, or Q3). Runs shorter than a
duration floor are flipped. Per-stride masks resampled to 100 phase bins are
averaged into the principal activation mask; because gait-unrelated activity
is not phase-locked, averaging suppresses it. Mask intervals cut at a window's
gait timing, interpolated to window resolution and L2-normalized per channel,
act as multiplicative filter weights on the input.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .gait import GaitCycle

MASK_BINS = 100
MASK_MAGIC = b"GLMK"

_EPS_RULES = ("q1", "mean", "q3")


@dataclass(frozen=True)
class DetectorParams:
    """Double-threshold detector parameters.

    l: observation window length in 5 ms units (1..6).
    epsilon_rule: channel statistic halved to get the amplitude threshold.
    r: minimum samples above threshold per window.
    min_duration_ms: runs shorter than this are flipped in postprocessing.
    """

    l: int = 6
    epsilon_rule: str = "mean"
    r: int = 1
    min_duration_ms: float = 30.0

    def __post_init__(self):
        if not 1 <= self.l <= 6:
            raise ValueError("l must be in 1..6 (5 ms units)")
        if self.epsilon_rule not in _EPS_RULES:
            raise ValueError(f"epsilon_rule must be one of {_EPS_RULES}")
        if self.r < 1:
            raise ValueError("r must be >= 1")
        if self.min_duration_ms < 0:
            raise ValueError("min_duration_ms must be >= 0")


@dataclass
class ActivationMask:
    """Principal activation probability map, 100 phase bins x channels."""

    values: np.ndarray
    n_cycles: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != MASK_BINS:
            raise ValueError(f"mask must be [{MASK_BINS} x C]")
        if self.n_cycles < 1:
            raise ValueError("n_cycles must be >= 1")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("mask values must lie in [0, 1]")


def channel_thresholds(envelope: np.ndarray, rule: str) -> np.ndarray:
    """Per-channel epsilon = 0.5 * statistic(channel)."""
    env = np.asarray(envelope, dtype=np.float64)
    if rule == "q1":
        stat = np.quantile(env, 0.25, axis=0, method="linear")
    elif rule == "mean":
        stat = env.mean(axis=0)
    elif rule == "q3":
        stat = np.quantile(env, 0.75, axis=0, method="linear")
    else:
        raise ValueError(f"unknown epsilon rule {rule!r}")
    return 0.5 * stat


def detect_activation(
    envelope: np.ndarray, params: DetectorParams, fs: float = 1200.0
) -> np.ndarray:
    """Binary activation per sample via the windowed double-threshold rule.

    The envelope is tiled into consecutive non-overlapping windows of
    l * (5 ms worth of samples); a window is active iff >= r samples strictly
    exceed the channel threshold. All samples in a window share its state; a
    trailing partial window inherits the last full window's state.
    """
    env = np.asarray(envelope, dtype=np.float64)
    if env.ndim != 2:
        raise ValueError("envelope must be [T x C]")
    unit = int(round(0.005 * fs))
    win = params.l * unit
    t, c = env.shape
    n_win = t // win
    if n_win < 1:
        raise ValueError(f"signal shorter than one observation window ({win} samples)")

    eps = channel_thresholds(env, params.epsilon_rule)
    above = env > eps[None, :]
    counts = above[: n_win * win].reshape(n_win, win, c).sum(axis=1)
    win_state = (counts >= params.r).astype(np.uint8)
    mask = np.repeat(win_state, win, axis=0)
    if t > n_win * win:  # partial tail keeps the last full window's state
        tail = np.repeat(win_state[-1:], t - n_win * win, axis=0)
        mask = np.concatenate([mask, tail], axis=0)
    return mask


def _runs(x: np.ndarray) -> list[tuple[int, int, int]]:
    """Maximal runs of a 1-D binary array as (start, stop, value)."""
    edges = np.flatnonzero(np.diff(x)) + 1
    starts = np.concatenate([[0], edges])
    stops = np.concatenate([edges, [x.size]])
    return [(int(a), int(b), int(x[a])) for a, b in zip(starts, stops)]


def enforce_min_duration(
    mask: np.ndarray, min_duration_ms: float, fs: float = 1200.0
) -> np.ndarray:
    """Flip runs shorter than the duration floor, re-scanning to a fixed point.

    Each pass flips every too-short maximal run of the pass's input snapshot.
    If the sequence of states ever repeats (alternating patterns oscillate
    under this rule), the channel collapses to the majority value of the state
    after the first pass (ties resolve to inactive).
    """
    mask = np.asarray(mask)
    floor = int(round(min_duration_ms * fs / 1000.0))
    if floor <= 1:
        return mask.astype(np.uint8).copy()
    out = np.empty_like(mask, dtype=np.uint8)
    for ch in range(mask.shape[1]):
        out[:, ch] = _stabilize_channel(mask[:, ch].astype(np.uint8), floor)
    return out


def _stabilize_channel(x: np.ndarray, floor: int) -> np.ndarray:
    seen = {x.tobytes()}
    first_pass = None
    cur = x
    for _ in range(x.size + 1):
        nxt = cur.copy()
        changed = False
        for a, b, v in _runs(cur):
            if b - a < floor:
                nxt[a:b] = 1 - v
                changed = True
        if first_pass is None:
            first_pass = nxt
        if not changed:
            return cur
        key = nxt.tobytes()
        if key in seen:  # oscillation: collapse to first-pass majority
            majority = 1 if first_pass.sum() * 2 > first_pass.size else 0
            return np.full_like(x, majority)
        seen.add(key)
        cur = nxt
    return cur


def shortest_run(mask: np.ndarray) -> int:
    """Length of the shortest maximal run over all channels (for assertions)."""
    best = int(mask.shape[0])
    for ch in range(mask.shape[1]):
        for a, b, _ in _runs(np.asarray(mask[:, ch], dtype=np.uint8)):
            best = min(best, b - a)
    return best


def per_cycle_masks(mask: np.ndarray, cycles: list[GaitCycle]) -> list[np.ndarray]:
    """Resample the binary mask of each stride to MASK_BINS phase points per
    channel with nearest-neighbor sampling (stays binary)."""
    if not cycles:
        raise ValueError("no cycles given")
    mask = np.asarray(mask)
    out = []
    for cyc in cycles:
        length = cyc.length
        idx = cyc.start_idx + np.minimum(
            np.round(np.arange(MASK_BINS) * length / MASK_BINS).astype(np.int64),
            length - 1,
        )
        out.append(mask[idx].astype(np.uint8))
    return out


def principal_mask(cycle_masks: list[np.ndarray]) -> ActivationMask:
    """Elementwise mean of per-stride masks: activation probability per bin."""
    if not cycle_masks:
        raise ValueError("need at least one cycle mask")
    stack = np.stack([np.asarray(m, dtype=np.float64) for m in cycle_masks])
    return ActivationMask(values=stack.mean(axis=0), n_cycles=len(cycle_masks))


def cut_interval(mask: ActivationMask, t_s: float, t_e: float) -> np.ndarray:
    """Circular slice of mask bins from floor(100*t_s) through floor(100*t_e)
    inclusive; t_e < t_s wraps through bin 99 -> 0."""
    if not (0.0 <= t_s < 1.0 and 0.0 <= t_e < 1.0):
        raise ValueError("phases must lie in [0, 1)")
    b0 = int(np.floor(t_s * MASK_BINS))
    b1 = int(np.floor(t_e * MASK_BINS))
    if b1 >= b0:
        bins = np.arange(b0, b1 + 1)
    else:
        bins = np.concatenate([np.arange(b0, MASK_BINS), np.arange(0, b1 + 1)])
    return mask.values[bins]


def resample_interval(interval: np.ndarray, n_bins: int = MASK_BINS) -> np.ndarray:
    """Per-channel linear interpolation of an interval onto n_bins points."""
    interval = np.asarray(interval, dtype=np.float64)
    b = interval.shape[0]
    if b == n_bins:
        return interval.copy()
    x = np.linspace(0.0, b - 1.0, n_bins)
    xp = np.arange(b, dtype=np.float64)
    return np.stack([np.interp(x, xp, interval[:, c]) for c in range(interval.shape[1])], axis=1)


def interval_to_weights(interval: np.ndarray, target_len: int = 1200) -> np.ndarray:
    """Interpolate an interval to window resolution and L2-normalize per
    channel; an all-zero channel falls back to uniform 1/sqrt(target_len)."""
    interval = np.asarray(interval, dtype=np.float64)
    if interval.shape[0] < 2:
        raise ValueError("interval needs at least 2 bins")
    up = resample_interval(interval, target_len)
    norms = np.linalg.norm(up, axis=0)
    weights = np.empty_like(up)
    for c in range(up.shape[1]):
        if norms[c] == 0.0:
            weights[:, c] = 1.0 / np.sqrt(target_len)
        else:
            weights[:, c] = up[:, c] / norms[c]
    return weights


def apply_mask_filter(window: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Elementwise product of an input window with its filter weights."""
    window = np.asarray(window)
    if window.shape != weights.shape:
        raise ValueError(f"shape mismatch {window.shape} vs {weights.shape}")
    return window * weights


def _window_bins(t_s: float, t_e: float) -> np.ndarray:
    """Mask bins spanned by a window with (possibly unwrapped) phases.

    A span of one cycle or more covers every bin, rolled to start at the
    window's start phase; shorter spans use the circular cut. Degenerate
    spans (e.g. from a bad timing prediction) are widened to two bins so
    interpolation stays defined.
    """
    b0 = int(np.floor((t_s % 1.0) * MASK_BINS))
    if t_e - t_s >= 1.0:
        return (b0 + np.arange(MASK_BINS)) % MASK_BINS
    b1 = int(np.floor((t_e % 1.0) * MASK_BINS))
    if b1 >= b0:
        bins = np.arange(b0, b1 + 1)
    else:
        bins = np.concatenate([np.arange(b0, MASK_BINS), np.arange(0, b1 + 1)])
    if bins.size < 2:
        bins = (b0 + np.arange(2)) % MASK_BINS
    return bins


def window_weights(mask: ActivationMask, t_s: float, t_e: float, length: int = 1200) -> np.ndarray:
    """Filter weights for a window spanning phases t_s..t_e."""
    return interval_to_weights(mask.values[_window_bins(t_s, t_e)], length)


def window_mask_target(mask: ActivationMask, t_s: float, t_e: float) -> np.ndarray:
    """Auxiliary-prediction target: the spanned interval at 100 bins."""
    return resample_interval(mask.values[_window_bins(t_s, t_e)], MASK_BINS)


def save_mask_csv(path, mask: ActivationMask) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        for row in mask.values:
            w.writerow([repr(float(v)) for v in row])


def load_mask_csv(path, n_cycles: int = 1) -> ActivationMask:
    rows = []
    with open(path, newline="") as f:
        for row in csv.reader(f):
            if row:
                rows.append([float(v) for v in row])
    return ActivationMask(values=np.asarray(rows), n_cycles=n_cycles)


def save_mask_binary(path, mask: ActivationMask) -> None:
    """Binary mask file: magic GLMK, u32 version, u32 bins, u32 channels,
    u32 n_cycles, f32 little-endian values row-major."""
    values = mask.values.astype("<f4")
    with open(path, "wb") as f:
        f.write(MASK_MAGIC)
        f.write(struct.pack("<IIII", 1, values.shape[0], values.shape[1], mask.n_cycles))
        f.write(values.tobytes())


def load_mask_binary(path) -> ActivationMask:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MASK_MAGIC:
            raise ValueError(f"bad mask magic {magic!r}")
        _, bins, channels, n_cycles = struct.unpack("<IIII", f.read(16))
        data = np.frombuffer(f.read(4 * bins * channels), dtype="<f4")
    return ActivationMask(values=data.reshape(bins, channels).astype(np.float64), n_cycles=n_cycles)
