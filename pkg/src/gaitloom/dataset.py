"""Window dataset construction, splits, and the synthetic gait generator.

Sliding windows of 1 s (1200 samples) advance by 50 ms (60 samples); each
window is labeled with the angle 50 ms past its end, the decoupled pattern and
amplitudes of the cycle containing that horizon instant, the gait phases of
the window endpoints, and the activation-mask interval spanned by the window.

The synthetic generator builds recordings with known cycles, phases, muscle
activation profiles and injected gait-unrelated bursts; it is the ground-truth
oracle the rest of the pipeline is validated against.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import gait
from .activation import (
    ActivationMask,
    DetectorParams,
    MASK_BINS,
    detect_activation,
    enforce_min_duration,
    per_cycle_masks,
    principal_mask,
    window_mask_target,
)
from .sigproc import ChannelStats, PreprocessConfig, compute_stats, filter_emg, normalize

N_CHANNELS = 8
RECORDING_MAGIC = b"GLRC"
SHARD_MAGIC = b"GLWS"


# ---------------------------------------------------------------------------
# recordings


@dataclass
class Recording:
    """Multichannel sEMG paired with an aligned knee-angle series."""

    emg: np.ndarray          # [T x 8]
    angle: np.ndarray        # [T], degrees, resampled to fs on load
    fs: float = 1200.0
    subject_id: str = ""
    trial_id: int = 0
    speed: float = 0.0

    def __post_init__(self):
        self.emg = np.asarray(self.emg, dtype=np.float64)
        self.angle = np.asarray(self.angle, dtype=np.float64)
        if self.emg.ndim != 2 or self.emg.shape[1] != N_CHANNELS:
            raise ValueError(f"emg must be [T x {N_CHANNELS}]")
        if self.emg.shape[0] < 1200:
            raise ValueError("recording shorter than one window (1200 samples)")
        if self.angle.shape[0] != self.emg.shape[0]:
            raise ValueError("angle and emg must be aligned to the same length")
        if not (np.all(np.isfinite(self.emg)) and np.all(np.isfinite(self.angle))):
            raise ValueError("recording contains NaN/Inf")

    @property
    def n_samples(self) -> int:
        return self.emg.shape[0]

    def key(self) -> tuple[str, int]:
        return (self.subject_id, self.trial_id)


def save_recording_csv(path, rec: Recording) -> None:
    header = "t," + ",".join(f"emg{i}" for i in range(N_CHANNELS)) + ",angle"
    t = np.arange(rec.n_samples) / rec.fs
    body = np.column_stack([t, rec.emg, rec.angle])
    np.savetxt(path, body, delimiter=",", header=header, comments="")


def load_recording_csv(path, fs: float = 1200.0, subject_id: str = "",
                       trial_id: int = 0, speed: float = 0.0) -> Recording:
    data = np.genfromtxt(path, delimiter=",", names=True)
    emg = np.column_stack([data[f"emg{i}"] for i in range(N_CHANNELS)])
    return Recording(emg=emg, angle=np.asarray(data["angle"], dtype=np.float64),
                     fs=fs, subject_id=subject_id, trial_id=trial_id, speed=speed)


def save_recording_binary(path, rec: Recording) -> None:
    """Binary layout: magic GLRC, u32 version, u32 T, u32 channels, f32 LE
    samples row-major, then the f32 angle series."""
    with open(path, "wb") as f:
        f.write(RECORDING_MAGIC)
        f.write(struct.pack("<III", 1, rec.n_samples, N_CHANNELS))
        f.write(rec.emg.astype("<f4").tobytes())
        f.write(rec.angle.astype("<f4").tobytes())


def load_recording_binary(path, fs: float = 1200.0, subject_id: str = "",
                          trial_id: int = 0, speed: float = 0.0) -> Recording:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != RECORDING_MAGIC:
            raise ValueError(f"bad recording magic {magic!r}")
        _, t, c = struct.unpack("<III", f.read(12))
        emg = np.frombuffer(f.read(4 * t * c), dtype="<f4").reshape(t, c)
        angle = np.frombuffer(f.read(), dtype="<f4").astype(np.float64)
    if angle.shape[0] != t:  # native low-rate angle: resample onto the emg clock
        src = np.linspace(0.0, 1.0, angle.shape[0])
        dst = np.linspace(0.0, 1.0, t)
        angle = np.interp(dst, src, angle)
    return Recording(emg=emg.astype(np.float64), angle=angle, fs=fs,
                     subject_id=subject_id, trial_id=trial_id, speed=speed)


def load_recording(path, **meta) -> Recording:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return load_recording_csv(path, **meta)
    return load_recording_binary(path, **meta)


# ---------------------------------------------------------------------------
# window samples


@dataclass
class WindowConfig:
    win: int = 1200
    stride: int = 60
    horizon: int = 60


@dataclass
class WindowSample:
    """One supervised example: an input window plus all five label kinds."""

    input: np.ndarray                 # [win x 8] preprocessed sEMG
    angle_label: float                # degrees at the horizon instant
    pattern_label: float              # decoupled pattern at the horizon
    amp_label: tuple[float, float]    # (mu, sigma) of the horizon's cycle
    timing_label: tuple[float, float]  # (t_s, t_e); t_e unwrapped, may exceed 1
    mask_target: np.ndarray           # [100 x 8] activation interval
    cut_phases: tuple[float, float]   # phases actually used to cut the mask
    subject_id: str = ""
    trial_id: int = 0
    speed: float = 0.0


@dataclass
class WindowSet:
    samples: list[WindowSample]
    n_dropped: int = 0

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def build_windows(
    rec: Recording,
    cycles: list[gait.GaitCycle],
    mask: Optional[ActivationMask],
    config: WindowConfig = WindowConfig(),
) -> WindowSet:
    """Slide over a preprocessed recording and emit labeled windows.

    ``rec.emg`` must already be preprocessed. Windows whose start, end, or
    horizon instant falls outside the labeled (peak-to-peak) region are
    dropped and counted. ``mask`` may be None when no activation labels are
    needed; mask targets are then zero.
    """
    t_total = rec.n_samples
    dec = gait.decouple(rec.angle, cycles)
    samples: list[WindowSample] = []
    dropped = 0
    for o in range(0, t_total - config.win - config.horizon, config.stride):
        h = o + config.win + config.horizon
        if dec.cycle_index[o] < 0 or dec.cycle_index[h] < 0:
            dropped += 1
            continue
        cyc = cycles[int(dec.cycle_index[h])]
        t_s_u = gait.unwrapped_phase_at(cycles, o)
        t_e_u = gait.unwrapped_phase_at(cycles, o + config.win)
        t_s = t_s_u % 1.0
        t_e = t_s + (t_e_u - t_s_u)
        if mask is not None:
            target = window_mask_target(mask, t_s, t_e)
        else:
            target = np.zeros((MASK_BINS, N_CHANNELS))
        samples.append(
            WindowSample(
                input=rec.emg[o : o + config.win],
                angle_label=float(rec.angle[h]),
                pattern_label=float(dec.pattern[h]),
                amp_label=(cyc.mu, cyc.sigma),
                timing_label=(t_s, t_e),
                mask_target=target,
                cut_phases=(t_s, t_e),
                subject_id=rec.subject_id,
                trial_id=rec.trial_id,
                speed=rec.speed,
            )
        )
    return WindowSet(samples=samples, n_dropped=dropped)


def augment_timing(
    sample: WindowSample,
    mask: ActivationMask,
    jitter_sd: float,
    rng: np.random.Generator,
) -> WindowSample:
    """Recut the mask interval at jittered phases (training augmentation).

    Gaussian perturbations are added to the start/end phases used for cutting;
    the timing labels themselves stay untouched. jitter_sd = 0 reproduces the
    clean target exactly.
    """
    if jitter_sd < 0:
        raise ValueError("jitter_sd must be >= 0")
    t_s, t_e = sample.timing_label
    if jitter_sd > 0:
        d_s, d_e = rng.normal(0.0, jitter_sd, size=2)
    else:
        d_s = d_e = 0.0
    ts_j = (t_s + d_s) % 1.0
    te_j = ts_j + (t_e - t_s) + (d_e - d_s)
    return replace(
        sample,
        mask_target=window_mask_target(mask, ts_j, te_j),
        cut_phases=(ts_j, te_j),
    )


def split_loso(
    samples: Sequence[WindowSample],
    subjects: Iterable[str],
    target: str,
    n_target_trials: int = 0,
) -> tuple[list[WindowSample], list[WindowSample]]:
    """Leave-one-subject-out partition, optionally moving the target's first
    ``n_target_trials`` trial ids (sorted) into the training side."""
    subjects = set(subjects)
    if target not in subjects:
        raise ValueError(f"unknown subject {target!r}")
    target_trials = sorted({s.trial_id for s in samples if s.subject_id == target})
    promoted = set(target_trials[:n_target_trials])
    train, test = [], []
    for s in samples:
        if s.subject_id != target:
            train.append(s)
        elif s.trial_id in promoted:
            train.append(s)
        else:
            test.append(s)
    return train, test


# ---------------------------------------------------------------------------
# synthetic gait generator (ground-truth oracle)


CANONICAL_BUMPS: tuple[tuple[tuple[float, float, float], ...], ...] = (
    ((0.92, 0.07, 1.0),),                      # rectus femoris: brief late-swing burst
    ((0.12, 0.07, 1.0),),                      # vastus lateralis: early stance
    ((0.15, 0.10, 0.9),),                      # vastus medialis
    ((0.85, 0.05, 1.0), (0.02, 0.05, 0.7)),    # tibialis anterior: sharp double burst
    ((0.55, 0.08, 1.0), (0.03, 0.06, 0.5)),    # biceps femoris
    ((0.60, 0.10, 0.9),),                      # semitendinosus
    ((0.35, 0.09, 1.0),),                      # gastrocnemius medialis: stance
    ((0.42, 0.12, 0.95),),                     # gastrocnemius lateralis
)

# broad-burst profile set: every half-max region comfortably wider than the
# envelope filter's group delay, for mask-averaging experiments
WIDE_BUMPS: tuple[tuple[tuple[float, float, float], ...], ...] = (
    ((0.92, 0.14, 1.0),),
    ((0.12, 0.13, 1.0),),
    ((0.15, 0.12, 0.9),),
    ((0.85, 0.14, 1.0),),
    ((0.55, 0.12, 1.0), (0.03, 0.08, 0.5)),
    ((0.60, 0.12, 0.9),),
    ((0.35, 0.14, 1.0),),
    ((0.38, 0.14, 0.95),),
)


def eval_bumps(bumps: Sequence[tuple[float, float, float]], phase: np.ndarray) -> np.ndarray:
    """Sum of circular raised-cosine bumps (center, half_width, amp) at phase."""
    phase = np.asarray(phase, dtype=np.float64)
    out = np.zeros_like(phase)
    for c, w, a in bumps:
        d = np.abs((phase - c + 0.5) % 1.0 - 0.5)
        m = d < w
        out[m] += a * 0.5 * (1.0 + np.cos(np.pi * d[m] / w))
    return out


@dataclass
class SubjectParams:
    """Generator parameters for one synthetic subject."""

    stride_period_s: float = 1.1
    mu_base: float = 30.0
    sigma_base: float = 30.0
    period_jitter: float = 0.0       # relative sd of per-stride period
    mu_jitter: float = 0.0           # relative sd of per-stride amplitude
    sigma_jitter: float = 0.0        # relative sd of per-stride offset
    channel_bumps: tuple = CANONICAL_BUMPS
    burst_gain: float = 1.0          # envelope amplitude of gait bursts
    spurious_rate: float = 0.0       # expected spurious bursts per stride per channel
    spurious_width: float = 0.05     # phase half-width of spurious bursts
    spurious_gain: float = 1.0
    noise_floor: float = 0.02        # additive envelope floor
    carrier_noise: bool = True       # modulate envelopes with white noise
    carrier_mix: float = 0.0         # deterministic fraction of the carrier
    fs: float = 1200.0

    def __post_init__(self):
        if not 0.8 <= self.stride_period_s <= 1.6:
            raise ValueError("stride_period_s must lie in [0.8, 1.6]")
        if self.mu_base <= 0:
            raise ValueError("mu_base must be positive")


@dataclass
class SynthTruth:
    """Everything the generator knows, for use as a test oracle."""

    peak_indices: np.ndarray         # cycle-boundary samples (includes both ends)
    mu_per_cycle: np.ndarray
    sigma_per_cycle: np.ndarray
    period_per_cycle: np.ndarray
    phase: np.ndarray                # [T] in [0, 1)
    cycle_of: np.ndarray             # [T] cycle index or -1
    pattern: np.ndarray              # [T] template value in [-1, 1]
    gait_envelope: np.ndarray        # [T x 8] noise-free gait-locked envelope
    profiles: np.ndarray             # [100 x 8] activation profile on the phase grid
    spurious_events: list[tuple[int, int, float]]  # (channel, sample, phase)
    params: SubjectParams
    seed: int


def _angle_template(phase: np.ndarray) -> np.ndarray:
    """Smooth two-bump stride template before per-cycle normalization: a main
    flexion peak at the cycle boundary and a shallow mid-stance bump whose
    prominence stays below the default peak-detection threshold."""
    d0 = np.abs((phase + 0.5) % 1.0 - 0.5)
    d1 = np.abs((phase - 0.45 + 0.5) % 1.0 - 0.5)
    return np.exp(-0.5 * (d0 / 0.09) ** 2) + 0.10 * np.exp(-0.5 * (d1 / 0.10) ** 2)


def synth_generate(
    params: SubjectParams, duration_s: float, seed: int,
    subject_id: str = "synth", trial_id: int = 0, speed: float = 3.0,
) -> tuple[Recording, SynthTruth]:
    """Generate one synthetic recording plus its ground truth.

    The knee angle is sigma + mu * g(phase) with the template normalized on
    each cycle's own sample grid, so the sampled extrema hit +-1 exactly and
    decoupling recovers (mu, sigma) to machine precision when jitter is zero.
    Each sEMG channel is a gait-locked envelope (profile bumps scaled by the
    stride amplitude) plus a noise floor and Poisson-arriving spurious bursts,
    optionally modulating a white-noise carrier.
    """
    rng = np.random.default_rng(seed)
    fs = params.fs
    t_total = int(round(duration_s * fs))
    base_period = int(round(params.stride_period_s * fs))

    # per-cycle draws, enough to cover the duration even at the jitter floor
    shortest = max(0.3, 1.0 - 2.0 * params.period_jitter)
    n_cycles_max = int(np.ceil(t_total / (base_period * shortest))) + 4
    jit = lambda scale: np.clip(rng.normal(0.0, 1.0, n_cycles_max), -2.0, 2.0) * scale
    periods = np.maximum(
        (base_period * (1.0 + jit(params.period_jitter))).round().astype(int), 12
    )
    mus = params.mu_base * np.maximum(1.0 + jit(params.mu_jitter), 0.2)
    sigmas = params.sigma_base * (1.0 + jit(params.sigma_jitter))

    lead = periods[0] // 2
    angle = np.empty(t_total)
    phase = np.empty(t_total)
    pattern = np.empty(t_total)
    cycle_of = np.full(t_total, -1, dtype=np.int64)
    mu_t = np.empty(t_total)

    def cycle_grid(period: int) -> np.ndarray:
        p = np.arange(period) / period
        raw = _angle_template(p)
        lo, hi = raw.min(), raw.max()
        return 2.0 * (raw - lo) / (hi - lo) - 1.0

    # lead-in: tail of a phantom cycle ending at the first peak
    g0 = cycle_grid(periods[0])
    angle[:lead] = sigmas[0] + mus[0] * g0[periods[0] - lead :]
    phase[:lead] = (np.arange(periods[0] - lead, periods[0])) / periods[0]
    pattern[:lead] = g0[periods[0] - lead :]
    mu_t[:lead] = mus[0]

    peaks = [lead]
    pos = lead
    c = 0
    while pos < t_total and c < n_cycles_max:
        period = int(periods[c])
        g = cycle_grid(period)
        n = min(period, t_total - pos)
        sl = slice(pos, pos + n)
        angle[sl] = sigmas[c] + mus[c] * g[:n]
        phase[sl] = np.arange(n) / period
        pattern[sl] = g[:n]
        mu_t[sl] = mus[c]
        if n == period:
            cycle_of[sl] = c
            peaks.append(pos + period)
        pos += n
        c += 1
    if pos < t_total:
        raise AssertionError("cycle budget exhausted before filling the recording")
    peak_arr = np.array([p for p in peaks if p < t_total], dtype=np.int64)
    # a cycle whose closing peak is out of range is not segmentable: unlabel it
    cycle_of[peak_arr[-1] :] = -1

    # gait-locked envelopes: profile bumps scale with the absolute stride
    # amplitude (stronger activity moves the joint further), which is what
    # lets amplitude decoding generalize across subjects
    gain_t = params.burst_gain * (mu_t / 30.0)
    env = np.empty((t_total, N_CHANNELS))
    for k in range(N_CHANNELS):
        env[:, k] = gain_t * eval_bumps(params.channel_bumps[k], phase)
    gait_env = env.copy()

    # spurious (gait-unrelated) bursts at random phases
    spurious: list[tuple[int, int, float]] = []
    for ci in range(len(peak_arr) - 1):
        a, b = peak_arr[ci], peak_arr[ci + 1]
        period = b - a
        for k in range(N_CHANNELS):
            for _ in range(rng.poisson(params.spurious_rate)):
                ph = rng.uniform()
                center = a + int(ph * period)
                half = max(3, int(params.spurious_width * period))
                lo, hi = max(0, center - half), min(t_total, center + half)
                d = (np.arange(lo, hi) - center) / half
                env[lo:hi, k] += params.spurious_gain * 0.5 * (1.0 + np.cos(np.pi * d))
                spurious.append((k, center, ph))

    env += params.noise_floor
    if params.carrier_noise:
        mix = float(np.clip(params.carrier_mix, 0.0, 1.0))
        carrier = mix + (1.0 - mix) * rng.standard_normal((t_total, N_CHANNELS))
        emg = env * carrier
    else:
        emg = env

    grid = (np.arange(MASK_BINS) + 0.5) / MASK_BINS
    profiles = np.stack(
        [eval_bumps(params.channel_bumps[k], grid) for k in range(N_CHANNELS)], axis=1
    )

    rec = Recording(emg=emg, angle=angle, fs=fs, subject_id=subject_id,
                    trial_id=trial_id, speed=speed)
    truth = SynthTruth(
        peak_indices=peak_arr,
        mu_per_cycle=mus[: len(peak_arr) - 1],
        sigma_per_cycle=sigmas[: len(peak_arr) - 1],
        period_per_cycle=periods[: len(peak_arr) - 1].astype(np.float64),
        phase=phase,
        cycle_of=cycle_of,
        pattern=pattern,
        gait_envelope=gait_env,
        profiles=profiles,
        spurious_events=spurious,
        params=params,
        seed=seed,
    )
    return rec, truth


def make_subject_params(
    rng: np.random.Generator,
    speed: float = 3.0,
    spurious_rate: float = 0.3,
    noisy: bool = True,
    spurious_gain: float | None = None,
    carrier_mix: float = 0.0,
) -> SubjectParams:
    """Randomized per-subject generator parameters with a plausible spread of
    stride amplitudes/offsets and slightly perturbed activation timing."""
    mu_base = rng.uniform(20.0, 40.0)
    sigma_base = mu_base * rng.uniform(0.9, 1.25)
    period = float(np.clip(1.1 * (3.0 / speed) ** 0.4, 0.85, 1.5))
    bumps = []
    for ch in CANONICAL_BUMPS:
        bumps.append(tuple(
            (float((c + rng.normal(0.0, 0.02)) % 1.0), float(np.clip(w * rng.uniform(0.9, 1.1), 0.05, 0.2)), a)
            for c, w, a in ch
        ))
    return SubjectParams(
        stride_period_s=period,
        mu_base=float(mu_base),
        sigma_base=float(sigma_base),
        period_jitter=0.03 if noisy else 0.0,
        mu_jitter=0.05 if noisy else 0.0,
        sigma_jitter=0.03 if noisy else 0.0,
        channel_bumps=tuple(bumps),
        burst_gain=float(rng.uniform(0.8, 1.4)),
        spurious_rate=spurious_rate if noisy else 0.0,
        spurious_gain=float(spurious_gain if spurious_gain is not None else rng.uniform(0.9, 1.3)),
        noise_floor=0.02 if noisy else 0.0,
        carrier_noise=noisy,
        carrier_mix=carrier_mix if noisy else 0.0,
    )


def synth_corpus(
    n_subjects: int,
    trials_per_subject: int,
    duration_s: float,
    seed: int,
    speeds: Sequence[float] = (2.5, 3.0, 3.5, 4.0),
    noisy: bool = True,
    spurious_rate: float = 0.3,
    spurious_gain: float | None = None,
    carrier_mix: float = 0.0,
) -> list[tuple[Recording, SynthTruth]]:
    """A deterministic multi-subject corpus; trial speeds cycle through
    ``speeds`` and each subject keeps one parameter set across trials."""
    master = np.random.default_rng(seed)
    out = []
    for s in range(n_subjects):
        subj_rng = np.random.default_rng(master.integers(2**63))
        speed0 = speeds[s % len(speeds)]
        params = make_subject_params(subj_rng, speed=speed0,
                                     spurious_rate=spurious_rate, noisy=noisy,
                                     spurious_gain=spurious_gain,
                                     carrier_mix=carrier_mix)
        for t in range(trials_per_subject):
            speed = speeds[t % len(speeds)]
            p = replace(params, stride_period_s=float(np.clip(
                params.stride_period_s * (speed0 / speed) ** 0.4, 0.8, 1.6)))
            rec, truth = synth_generate(
                p, duration_s, seed=seed + 9973 * s + 101 * t,
                subject_id=f"S{s:02d}", trial_id=t, speed=speed,
            )
            out.append((rec, truth))
    return out


# ---------------------------------------------------------------------------
# split-safe corpus preparation


@dataclass
class PipelineConfig:
    """All knobs of the labeling pipeline in one place."""

    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    detector: DetectorParams = field(default_factory=DetectorParams)
    window: WindowConfig = field(default_factory=WindowConfig)
    min_prominence: float = 10.0
    min_distance_s: float = 0.5

    def min_distance(self, fs: float) -> int:
        return int(round(self.min_distance_s * fs))


@dataclass
class SplitData:
    train: list[WindowSample]
    test: list[WindowSample]
    stats: ChannelStats
    masks: dict[str, ActivationMask]
    dropped: int


def subject_mask_from_recordings(
    recs: list[Recording], cfg: PipelineConfig
) -> ActivationMask:
    """Principal activation mask of one subject from (training) recordings."""
    cycle_masks = []
    for rec in recs:
        env = filter_emg(rec.emg, cfg.preprocess)
        peaks, _ = gait.detect_extrema(rec.angle, cfg.min_prominence, cfg.min_distance(rec.fs))
        cycles = gait.segment_cycles(rec.angle, peaks)
        binary = enforce_min_duration(
            detect_activation(env, cfg.detector, fs=rec.fs),
            cfg.detector.min_duration_ms, fs=rec.fs)
        cycle_masks.extend(per_cycle_masks(binary, cycles))
    return principal_mask(cycle_masks)


def prepare_split(
    recordings: list[Recording],
    test_keys: set[tuple[str, int]],
    cfg: PipelineConfig = PipelineConfig(),
    allow_missing_masks: bool = False,
) -> SplitData:
    """Build train/test windows with no leakage: normalization stats and
    per-subject masks come from training recordings only. Test windows of a
    subject use that subject's training-side mask.

    A subject with no training-side recordings has no mask; that is an error
    unless ``allow_missing_masks`` is set (mask targets are then zero), which
    only makes sense for runs that use neither activation strategy.
    """
    train_recs = [r for r in recordings if r.key() not in test_keys]
    test_recs = [r for r in recordings if r.key() in test_keys]
    if not train_recs:
        raise ValueError("empty training split")

    envs = {r.key(): filter_emg(r.emg, cfg.preprocess) for r in recordings}
    stats = compute_stats(np.concatenate([envs[r.key()] for r in train_recs], axis=0))

    masks: dict[str, ActivationMask] = {}
    for subject in {r.subject_id for r in recordings}:
        subj_train = [r for r in train_recs if r.subject_id == subject]
        if subj_train:
            masks[subject] = subject_mask_from_recordings(subj_train, cfg)

    def windows_for(rec: Recording) -> WindowSet:
        mask = masks.get(rec.subject_id)
        if mask is None and not allow_missing_masks:
            raise ValueError(
                f"no training-side mask for subject {rec.subject_id!r}; "
                "include at least one of their trials in the training split")
        peaks, _ = gait.detect_extrema(rec.angle, cfg.min_prominence, cfg.min_distance(rec.fs))
        cycles = gait.segment_cycles(rec.angle, peaks)
        norm = Recording(emg=normalize(envs[rec.key()], stats), angle=rec.angle, fs=rec.fs,
                         subject_id=rec.subject_id, trial_id=rec.trial_id, speed=rec.speed)
        return build_windows(norm, cycles, mask, cfg.window)

    train, test, dropped = [], [], 0
    for rec in train_recs:
        ws = windows_for(rec)
        train.extend(ws.samples)
        dropped += ws.n_dropped
    for rec in test_recs:
        ws = windows_for(rec)
        test.extend(ws.samples)
        dropped += ws.n_dropped
    return SplitData(train=train, test=test, stats=stats, masks=masks, dropped=dropped)


# ---------------------------------------------------------------------------
# shard + manifest serialization

_SAMPLE_FLOATS = 1200 * N_CHANNELS + 1 + 1 + 2 + 2 + MASK_BINS * N_CHANNELS


def save_windows(path, samples: Sequence[WindowSample]) -> None:
    """Window shard: magic GLWS, u32 version, u32 count, then per sample the
    f32 fields input[1200x8], angle, pattern, (mu, sigma), (t_s, t_e),
    mask_target[100x8] followed by u16 subject-id bytes + u32 trial + f32 speed."""
    with open(path, "wb") as f:
        f.write(SHARD_MAGIC)
        f.write(struct.pack("<II", 1, len(samples)))
        for s in samples:
            block = np.concatenate([
                np.asarray(s.input, dtype="<f4").ravel(),
                np.array([s.angle_label, s.pattern_label, *s.amp_label, *s.timing_label], dtype="<f4"),
                np.asarray(s.mask_target, dtype="<f4").ravel(),
            ])
            assert block.size == _SAMPLE_FLOATS
            f.write(block.tobytes())
            sid = s.subject_id.encode()
            f.write(struct.pack("<H", len(sid)))
            f.write(sid)
            f.write(struct.pack("<If", s.trial_id, s.speed))


def load_windows(path) -> list[WindowSample]:
    samples = []
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != SHARD_MAGIC:
            raise ValueError(f"bad shard magic {magic!r}")
        _, count = struct.unpack("<II", f.read(8))
        for _ in range(count):
            block = np.frombuffer(f.read(4 * _SAMPLE_FLOATS), dtype="<f4").astype(np.float64)
            inp = block[: 1200 * N_CHANNELS].reshape(1200, N_CHANNELS)
            angle, pat, mu, sg, ts, te = block[1200 * N_CHANNELS : 1200 * N_CHANNELS + 6]
            target = block[1200 * N_CHANNELS + 6 :].reshape(MASK_BINS, N_CHANNELS)
            (slen,) = struct.unpack("<H", f.read(2))
            sid = f.read(slen).decode()
            trial, speed = struct.unpack("<If", f.read(8))
            samples.append(WindowSample(
                input=inp, angle_label=float(angle), pattern_label=float(pat),
                amp_label=(float(mu), float(sg)), timing_label=(float(ts), float(te)),
                mask_target=target, cut_phases=(float(ts), float(te)),
                subject_id=sid, trial_id=trial, speed=float(speed)))
    return samples


def save_manifest(path, entries: list[dict], extra: Optional[dict] = None) -> None:
    doc = {"recordings": entries}
    if extra:
        doc.update(extra)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)


def load_manifest(path) -> dict:
    with open(path) as f:
        return json.load(f)


def load_manifest_recordings(path) -> list[Recording]:
    doc = load_manifest(path)
    base = Path(path).parent
    recs = []
    for e in doc["recordings"]:
        p = Path(e["path"])
        if not p.is_absolute():
            p = base / p
        recs.append(load_recording(
            p, subject_id=e.get("subject", ""), trial_id=int(e.get("trial", 0)),
            speed=float(e.get("speed", 0.0)), fs=float(e.get("fs", 1200.0))))
    return recs
