"""sEMG preprocessing: rectification, Butterworth/notch filtering, normalization.

The offline pipeline is rectify -> low-pass envelope -> 50 Hz notch -> per-channel
z-score. An optional high-pass stage can be applied to the raw signal before
rectification (``hp_hz``). Filters are realized as cascades of second-order
sections and applied causally (direct-form II transposed, zero initial state);
streaming use keeps persistent per-channel state across chunks.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import signal as _sig


class DegenerateChannelError(ValueError):
    """A channel has zero spread and cannot be z-score normalized."""


@dataclass(frozen=True)
class FilterSpec:
    """Specification of one filter stage.

    kind: "lowpass", "highpass" or "notch"; cutoff_hz is the corner (or notch
    center) frequency. Order must be even (biquad-cascade realization); it is
    ignored for notch, which is a single biquad.
    """

    kind: str
    order: int
    cutoff_hz: float
    fs: float
    q: float = 30.0

    def __post_init__(self):
        if self.kind not in ("lowpass", "highpass", "notch"):
            raise ValueError(f"unknown filter kind: {self.kind!r}")
        if not 0.0 < self.cutoff_hz < self.fs / 2.0:
            raise ValueError(
                f"cutoff {self.cutoff_hz} Hz outside (0, fs/2) for fs={self.fs}"
            )
        if self.kind != "notch" and (self.order <= 0 or self.order % 2 != 0):
            raise ValueError(f"order must be a positive even integer, got {self.order}")


@dataclass(frozen=True)
class ChannelStats:
    """Per-channel mean/std/quartiles used for normalization and thresholds."""

    mean: np.ndarray
    std: np.ndarray
    q1: np.ndarray
    q3: np.ndarray

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "q1": self.q1.tolist(),
            "q3": self.q3.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelStats":
        return cls(
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            q1=np.asarray(d["q1"], dtype=np.float64),
            q3=np.asarray(d["q3"], dtype=np.float64),
        )


@dataclass
class BiquadCascade:
    """Cascade of second-order sections, scipy ``sos`` layout [n_sections, 6]."""

    sos: np.ndarray
    fs: float

    def __post_init__(self):
        self.sos = np.atleast_2d(np.asarray(self.sos, dtype=np.float64))
        if self.sos.shape[1] != 6:
            raise ValueError("sos sections must have 6 coefficients")

    @property
    def n_sections(self) -> int:
        return self.sos.shape[0]

    def poles(self) -> np.ndarray:
        """All poles of the cascade (roots of each section's denominator)."""
        ps = [np.roots(sec[3:]) for sec in self.sos]
        return np.concatenate(ps) if ps else np.array([])

    def is_stable(self) -> bool:
        poles = self.poles()
        return bool(np.all(np.abs(poles) < 1.0)) if poles.size else True

    def response(self, freqs_hz: np.ndarray) -> np.ndarray:
        """Complex frequency response H(e^{j 2 pi f / fs}) evaluated from the
        coefficients directly (polynomial evaluation on the unit circle)."""
        f = np.atleast_1d(np.asarray(freqs_hz, dtype=np.float64))
        z = np.exp(-1j * 2.0 * np.pi * f / self.fs)
        h = np.ones_like(z, dtype=np.complex128)
        for sec in self.sos:
            num = sec[0] + sec[1] * z + sec[2] * z**2
            den = sec[3] + sec[4] * z + sec[5] * z**2
            h *= num / den
        return h

    def magnitude_db(self, freqs_hz: np.ndarray) -> np.ndarray:
        mag = np.abs(self.response(freqs_hz))
        return 20.0 * np.log10(np.maximum(mag, 1e-300))


def identity_cascade(fs: float) -> BiquadCascade:
    return BiquadCascade(np.array([[1.0, 0, 0, 1.0, 0, 0]]), fs)


def design_butterworth(spec: FilterSpec) -> BiquadCascade:
    """Design a Butterworth low/high-pass as order/2 biquads.

    Analog prototype poles are mapped through the bilinear transform with
    cutoff prewarping (scipy's sos design). Odd orders and cutoffs at or above
    Nyquist are rejected.
    """
    if spec.kind not in ("lowpass", "highpass"):
        raise ValueError("design_butterworth handles lowpass/highpass only")
    sos = _sig.butter(spec.order, spec.cutoff_hz, btype=spec.kind, fs=spec.fs, output="sos")
    return BiquadCascade(sos, spec.fs)


def design_notch(f0: float, fs: float, q: float = 30.0) -> BiquadCascade:
    """Single-biquad notch: unit gain at DC and Nyquist, zero at f0."""
    if not 0.0 < f0 < fs / 2.0:
        raise ValueError(f"notch frequency {f0} Hz outside (0, fs/2)")
    b, a = _sig.iirnotch(f0, q, fs=fs)
    sos = np.hstack([b, a])[None, :]
    return BiquadCascade(sos, fs)


def rectify(emg: np.ndarray) -> np.ndarray:
    """Full-wave rectification (elementwise absolute value)."""
    return np.abs(np.asarray(emg))


def apply_filter(cascade: BiquadCascade, x: np.ndarray, zi: Optional[np.ndarray] = None):
    """Causal filtering along axis 0, sections in sequence.

    With ``zi`` given (shape [n_sections, 2] or [n_sections, 2, C]), filtering
    continues from that state and the updated state is returned as well.
    """
    x = np.asarray(x, dtype=np.float64)
    if zi is None:
        return _sig.sosfilt(cascade.sos, x, axis=0)
    y, zf = _sig.sosfilt(cascade.sos, x, axis=0, zi=zi)
    return y, zf


def zero_state(cascade: BiquadCascade, n_channels: int) -> np.ndarray:
    return np.zeros((cascade.n_sections, 2, n_channels))


def compute_stats(emg: np.ndarray) -> ChannelStats:
    """Per-channel mean, population std and linear-interpolation quartiles."""
    emg = np.asarray(emg, dtype=np.float64)
    if emg.ndim != 2 or emg.shape[0] < 2:
        raise ValueError("need a [T x C] matrix with T >= 2")
    return ChannelStats(
        mean=emg.mean(axis=0),
        std=emg.std(axis=0),
        q1=np.quantile(emg, 0.25, axis=0, method="linear"),
        q3=np.quantile(emg, 0.75, axis=0, method="linear"),
    )


def normalize(emg: np.ndarray, stats: ChannelStats) -> np.ndarray:
    """Per-channel z-score using externally supplied stats."""
    if np.any(stats.std <= 0):
        bad = np.where(stats.std <= 0)[0].tolist()
        raise DegenerateChannelError(f"zero-std channels {bad} cannot be normalized")
    return (np.asarray(emg, dtype=np.float64) - stats.mean) / stats.std


@dataclass
class PreprocessConfig:
    """Filter-stage parameters of the preprocessing pipeline."""

    fs: float = 1200.0
    lowpass_hz: float = 20.0
    lowpass_order: int = 8
    notch_hz: float = 50.0
    notch_q: float = 30.0
    hp_hz: Optional[float] = None  # optional high-pass on raw signal, off by default
    hp_order: int = 8

    def to_dict(self) -> dict:
        return {
            "fs": self.fs,
            "lowpass_hz": self.lowpass_hz,
            "lowpass_order": self.lowpass_order,
            "notch_hz": self.notch_hz,
            "notch_q": self.notch_q,
            "hp_hz": self.hp_hz,
            "hp_order": self.hp_order,
        }


def build_cascades(config: PreprocessConfig) -> list[tuple[str, BiquadCascade]]:
    """Ordered filter stages of the pipeline. Rectification happens between
    the optional raw high-pass and the envelope low-pass."""
    stages: list[tuple[str, BiquadCascade]] = []
    if config.hp_hz is not None:
        stages.append((
            "highpass",
            design_butterworth(FilterSpec("highpass", config.hp_order, config.hp_hz, config.fs)),
        ))
    stages.append((
        "lowpass",
        design_butterworth(FilterSpec("lowpass", config.lowpass_order, config.lowpass_hz, config.fs)),
    ))
    stages.append(("notch", design_notch(config.notch_hz, config.fs, config.notch_q)))
    return stages


def filter_emg(emg: np.ndarray, config: PreprocessConfig) -> np.ndarray:
    """Rectify + filter to the (non-negative scale) envelope, no normalization.

    Activation detection operates on this output; normalization for the model
    input happens separately with split-safe stats.
    """
    x = np.asarray(emg, dtype=np.float64)
    for name, cascade in build_cascades(config):
        if name == "lowpass":
            x = rectify(x)
        x = apply_filter(cascade, x)
    return x


def preprocess(emg: np.ndarray, config: PreprocessConfig, stats: ChannelStats) -> np.ndarray:
    """Full pipeline: envelope extraction followed by z-score normalization."""
    out = normalize(filter_emg(emg, config), stats)
    if not np.all(np.isfinite(out)):
        raise ValueError("preprocessing produced non-finite values")
    return out


class StreamingPreprocessor:
    """Stateful variant of :func:`preprocess` for sample streams.

    Filter state persists across chunks, so feeding a recording chunk by chunk
    reproduces the offline output bit for bit (single owner at a time).
    """

    def __init__(self, config: PreprocessConfig, stats: ChannelStats, n_channels: int = 8):
        self.config = config
        self.stats = stats
        self.stages = build_cascades(config)
        self._state = [zero_state(c, n_channels) for _, c in self.stages]
        if np.any(stats.std <= 0):
            raise DegenerateChannelError("zero-std channel in streaming stats")

    def process(self, chunk: np.ndarray) -> np.ndarray:
        x = np.asarray(chunk, dtype=np.float64)
        for i, (name, cascade) in enumerate(self.stages):
            if name == "lowpass":
                x = rectify(x)
            x, self._state[i] = apply_filter(cascade, x, zi=self._state[i])
        return (x - self.stats.mean) / self.stats.std

    def reset(self):
        for i, (_, c) in enumerate(self.stages):
            self._state[i] = zero_state(c, self._state[i].shape[2])
