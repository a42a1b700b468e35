"""Gait-cycle segmentation and kinematic decoupling of the knee-angle series.

A stride runs peak to peak. Within each stride the angle is factored into a
normalized pattern in [-1, 1] plus per-stride amplitude/offset:

    angle(t) = mu * pattern(t) + sigma
    mu = (theta_peak - theta_valley) / 2
    sigma = (theta_peak + theta_valley) / 2

where theta_peak/theta_valley are the max/min angle over the whole stride.
The pattern sequence is invariant under positive affine maps of the angle,
which is what makes it comparable across subjects.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks


class NoCompleteCycleError(ValueError):
    """Fewer than two peaks: no peak-to-peak stride exists."""


class FlatCycleError(ValueError):
    """theta_peak == theta_valley within a stride (mu would be 0)."""


@dataclass(frozen=True)
class GaitCycle:
    start_idx: int
    end_idx: int
    theta_peak: float
    theta_valley: float
    mu: float
    sigma: float

    @property
    def length(self) -> int:
        return self.end_idx - self.start_idx


@dataclass
class DecoupledSeries:
    """Per-sample pattern/phase plus per-cycle amplitudes.

    ``pattern`` and ``phase`` are full-length arrays, NaN outside the labeled
    region (before the first peak / after the last peak). ``cycle_index`` maps
    each sample to its enclosing cycle (-1 outside).
    """

    pattern: np.ndarray
    phase: np.ndarray
    cycle_index: np.ndarray
    cycles: list[GaitCycle]

    @property
    def labeled(self) -> np.ndarray:
        return self.cycle_index >= 0

    def mu_at(self, t: int) -> float:
        return self.cycles[self._cycle(t)].mu

    def sigma_at(self, t: int) -> float:
        return self.cycles[self._cycle(t)].sigma

    def _cycle(self, t: int) -> int:
        c = int(self.cycle_index[t])
        if c < 0:
            raise ValueError(f"sample {t} lies outside all labeled cycles")
        return c


def detect_extrema(
    angle: np.ndarray,
    min_prominence: float = 10.0,
    min_distance: int = 600,
) -> tuple[np.ndarray, np.ndarray]:
    """Find alternating peak/valley indices of the angle series.

    Peaks and valleys are detected separately with the given prominence and
    spacing, then merged so the sequence strictly alternates; where two
    same-kind extrema are adjacent, the more extreme one wins.

    Raises :class:`NoCompleteCycleError` when fewer than two peaks remain.
    """
    angle = np.asarray(angle, dtype=np.float64)
    if angle.ndim != 1 or angle.size < 3:
        raise ValueError("angle must be a 1-D series of length >= 3")
    min_distance = max(1, int(min_distance))
    peaks, _ = find_peaks(angle, prominence=min_prominence, distance=min_distance)
    valleys, _ = find_peaks(-angle, prominence=min_prominence, distance=min_distance)

    events = sorted([(int(i), "p") for i in peaks] + [(int(i), "v") for i in valleys])
    kept: list[tuple[int, str]] = []
    for idx, kind in events:
        if kept and kept[-1][1] == kind:
            prev_idx = kept[-1][0]
            if kind == "p":
                better = idx if angle[idx] > angle[prev_idx] else prev_idx
            else:
                better = idx if angle[idx] < angle[prev_idx] else prev_idx
            kept[-1] = (better, kind)
        else:
            kept.append((idx, kind))

    out_peaks = np.array([i for i, k in kept if k == "p"], dtype=np.int64)
    out_valleys = np.array([i for i, k in kept if k == "v"], dtype=np.int64)
    if out_peaks.size < 2:
        raise NoCompleteCycleError("need at least two peaks for a complete cycle")
    return out_peaks, out_valleys


def segment_cycles(angle: np.ndarray, peaks: np.ndarray) -> list[GaitCycle]:
    """One GaitCycle per consecutive peak pair, extrema taken over the whole
    stride (both boundary peaks included)."""
    angle = np.asarray(angle, dtype=np.float64)
    peaks = np.asarray(peaks, dtype=np.int64)
    if peaks.size < 2:
        raise NoCompleteCycleError("need at least two peaks")
    cycles = []
    for a, b in zip(peaks[:-1], peaks[1:]):
        span = angle[a : b + 1]
        th_peak = float(span.max())
        th_valley = float(span.min())
        if th_peak == th_valley:
            raise FlatCycleError(f"flat cycle at samples [{a}, {b}]")
        cycles.append(
            GaitCycle(
                start_idx=int(a),
                end_idx=int(b),
                theta_peak=th_peak,
                theta_valley=th_valley,
                mu=(th_peak - th_valley) / 2.0,
                sigma=(th_peak + th_valley) / 2.0,
            )
        )
    return cycles


def _cycle_index_map(n: int, cycles: list[GaitCycle]) -> np.ndarray:
    idx = np.full(n, -1, dtype=np.int64)
    for c, cyc in enumerate(cycles):
        idx[cyc.start_idx : cyc.end_idx] = c
    return idx


def decouple(angle: np.ndarray, cycles: list[GaitCycle]) -> DecoupledSeries:
    """Factor the angle into pattern/phase given segmented cycles.

    Samples are owned by the cycle with start <= t < end; samples outside all
    cycles get NaN pattern/phase and cycle_index -1.
    """
    angle = np.asarray(angle, dtype=np.float64)
    n = angle.shape[0]
    cycle_index = _cycle_index_map(n, cycles)
    pattern = np.full(n, np.nan)
    phase = np.full(n, np.nan)
    for c, cyc in enumerate(cycles):
        sl = slice(cyc.start_idx, cyc.end_idx)
        pattern[sl] = (angle[sl] - cyc.sigma) / cyc.mu
        phase[sl] = (np.arange(cyc.start_idx, cyc.end_idx) - cyc.start_idx) / cyc.length
    return DecoupledSeries(pattern=pattern, phase=phase, cycle_index=cycle_index, cycles=cycles)


def recouple(pattern, mu, sigma):
    """Inverse of decoupling: angle = mu * pattern + sigma. Requires mu > 0."""
    if np.any(np.asarray(mu) <= 0):
        raise ValueError("mu must be positive")
    return np.asarray(mu) * np.asarray(pattern) + np.asarray(sigma)


def phase_at(cycles: list[GaitCycle], t: int) -> float:
    """Linear gait phase in [0, 1) of sample t within its enclosing cycle."""
    for cyc in cycles:
        if cyc.start_idx <= t < cyc.end_idx:
            return (t - cyc.start_idx) / cyc.length
    raise ValueError(f"sample {t} lies outside all cycles")


def unwrapped_phase_at(cycles: list[GaitCycle], t: int) -> float:
    """Phase of sample t counted from the first cycle's start (cycle count +
    fractional phase), so spans across strides stay monotone."""
    for c, cyc in enumerate(cycles):
        if cyc.start_idx <= t < cyc.end_idx:
            return c + (t - cyc.start_idx) / cyc.length
    # the exclusive end of the last cycle is a valid window endpoint
    if cycles and t == cycles[-1].end_idx:
        return float(len(cycles))
    raise ValueError(f"sample {t} lies outside all cycles")


def save_cycles_csv(path, cycles: list[GaitCycle]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["start_idx", "end_idx", "theta_peak", "theta_valley", "mu", "sigma"])
        for c in cycles:
            w.writerow([c.start_idx, c.end_idx, repr(c.theta_peak), repr(c.theta_valley), repr(c.mu), repr(c.sigma)])


def load_cycles_csv(path) -> list[GaitCycle]:
    cycles = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            cycles.append(
                GaitCycle(
                    start_idx=int(row["start_idx"]),
                    end_idx=int(row["end_idx"]),
                    theta_peak=float(row["theta_peak"]),
                    theta_valley=float(row["theta_valley"]),
                    mu=float(row["mu"]),
                    sigma=float(row["sigma"]),
                )
            )
    return cycles
