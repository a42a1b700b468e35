import numpy as np
import pytest

from gaitloom import gait
from gaitloom.gait import (
    FlatCycleError,
    NoCompleteCycleError,
    decouple,
    detect_extrema,
    load_cycles_csv,
    phase_at,
    recouple,
    save_cycles_csv,
    segment_cycles,
    unwrapped_phase_at,
)

FS = 1200.0


def sine_angle(periods=10, period_s=1.0, amp=30.0, offset=30.0, fs=FS):
    n = int(periods * period_s * fs)
    t = np.arange(n) / fs
    return offset + amp * np.sin(2 * np.pi * t / period_s)


class TestDetectExtrema:
    def test_sine_extrema_at_analytic_positions(self):
        angle = sine_angle()
        peaks, valleys = detect_extrema(angle, 10.0, 600)
        assert len(peaks) == 10 and len(valleys) == 10
        # analytic peak positions: t = period/4 + k*period
        expected_peaks = (0.25 + np.arange(10)) * FS
        expected_valleys = (0.75 + np.arange(10)) * FS
        assert np.max(np.abs(peaks - expected_peaks)) <= 1
        assert np.max(np.abs(valleys - expected_valleys)) <= 1

    def test_monotone_ramp_has_no_cycle(self):
        with pytest.raises(NoCompleteCycleError):
            detect_extrema(np.linspace(0, 60, 5000), 10.0, 600)

    def test_small_ripple_rejected(self):
        angle = sine_angle()
        t = np.arange(angle.size) / FS
        rippled = angle + 2.0 * np.sin(2 * np.pi * 7.3 * t)  # below prominence
        peaks, _ = detect_extrema(rippled, 10.0, 600)
        clean_peaks, _ = detect_extrema(angle, 10.0, 600)
        assert len(peaks) == len(clean_peaks)  # no extra peaks from the ripple
        assert np.max(np.abs(peaks - clean_peaks)) <= 120  # maxima only nudged

    def test_alternation(self):
        rng = np.random.default_rng(0)
        angle = sine_angle() + 0.5 * rng.standard_normal(12000)
        peaks, valleys = detect_extrema(angle, 10.0, 600)
        events = sorted([(p, "p") for p in peaks] + [(v, "v") for v in valleys])
        kinds = [k for _, k in events]
        assert all(a != b for a, b in zip(kinds, kinds[1:]))


class TestSegmentCycles:
    def test_amplitude_arithmetic(self):
        angle = np.array([60.0, 30.0, 0.0, 30.0, 60.0])
        cycles = segment_cycles(angle, np.array([0, 4]))
        c = cycles[0]
        assert c.theta_peak == 60.0 and c.theta_valley == 0.0
        assert c.mu == 30.0 and c.sigma == 30.0

    def test_flat_cycle_rejected(self):
        with pytest.raises(FlatCycleError):
            segment_cycles(np.full(10, 5.0), np.array([0, 9]))

    def test_sampled_wave_amplitudes(self):
        angle = 60.0 * (1 + np.sin(2 * np.pi * np.arange(12000) / 1200)) / 2
        peaks, _ = detect_extrema(angle, 10.0, 600)
        cycles = segment_cycles(angle, peaks)
        for c in cycles:
            assert abs(c.mu - 30.0) < 0.01  # sampling error only
            assert abs(c.sigma - 30.0) < 0.01

    def test_requires_two_peaks(self):
        with pytest.raises(NoCompleteCycleError):
            segment_cycles(np.arange(10.0), np.array([3]))


class TestDecoupleRecouple:
    def _cycles(self, angle):
        peaks, _ = detect_extrema(angle, 10.0, 600)
        return segment_cycles(angle, peaks)

    def test_midline_maps_to_zero(self):
        angle = sine_angle()
        dec = decouple(angle, self._cycles(angle))
        for c in dec.cycles:
            sl = dec.pattern[c.start_idx : c.end_idx]
            near_mid = np.abs(angle[c.start_idx : c.end_idx] - c.sigma) < 1e-6
            assert np.all(np.abs(sl[near_mid]) < 1e-6)

    def test_extrema_map_to_unit_values(self):
        angle = sine_angle()
        dec = decouple(angle, self._cycles(angle))
        for c in dec.cycles:
            span = (angle[c.start_idx : c.end_idx + 1] - c.sigma) / c.mu
            assert abs(span.max() - 1.0) < 1e-12
            assert abs(span.min() + 1.0) < 1e-12

    def test_pattern_range(self):
        rng = np.random.default_rng(1)
        angle = sine_angle() + 1.5 * rng.standard_normal(12000)
        dec = decouple(angle, self._cycles(angle))
        labeled = dec.pattern[dec.labeled]
        assert np.all(labeled <= 1.0 + 1e-12) and np.all(labeled >= -1.0 - 1e-12)

    def test_round_trip_exact(self):
        rng = np.random.default_rng(2)
        angle = sine_angle() + 2.0 * rng.standard_normal(12000)
        cycles = self._cycles(angle)
        dec = decouple(angle, cycles)
        idx = np.flatnonzero(dec.labeled)
        mu = np.array([c.mu for c in cycles])[dec.cycle_index[idx]]
        sg = np.array([c.sigma for c in cycles])[dec.cycle_index[idx]]
        rebuilt = recouple(dec.pattern[idx], mu, sg)
        assert np.max(np.abs(rebuilt - angle[idx])) < 1e-9

    def test_recouple_examples(self):
        assert recouple(1.0, 30.0, 30.0) == 60.0
        assert recouple(0.0, 17.0, 42.5) == 42.5
        with pytest.raises(ValueError):
            recouple(0.5, -1.0, 0.0)

    def test_outside_cycles_unlabeled(self):
        angle = sine_angle()
        dec = decouple(angle, self._cycles(angle))
        assert dec.cycle_index[0] == -1  # before the first peak
        assert np.isnan(dec.pattern[0])


class TestAmplitudeInvariance:
    def test_bitwise_pattern_invariance_dyadic(self):
        # dyadic affine maps are exact in IEEE754, so the pattern sequence
        # must be IDENTICAL bit for bit (the subject-invariance property)
        rng = np.random.default_rng(3)
        base = sine_angle() + 2.0 * rng.standard_normal(12000)
        angle = np.round(base * 2**16) / 2**16  # dyadic grid keeps sums exact
        peaks, _ = detect_extrema(angle, 10.0, 600)
        cycles = segment_cycles(angle, peaks)
        ref = decouple(angle, cycles).pattern
        for _ in range(50):
            a = float(2.0 ** rng.integers(-3, 4))
            b = float(rng.integers(-2**10, 2**10)) / 2**16
            mapped = a * angle + b
            p2, _ = detect_extrema(mapped, a * 10.0, 600)
            assert np.array_equal(p2, peaks)
            got = decouple(mapped, segment_cycles(mapped, p2)).pattern
            assert np.array_equal(ref[~np.isnan(ref)], got[~np.isnan(got)])

    def test_near_invariance_arbitrary_affine(self):
        rng = np.random.default_rng(4)
        angle = sine_angle() + 2.0 * rng.standard_normal(12000)
        peaks, _ = detect_extrema(angle, 10.0, 600)
        ref = decouple(angle, segment_cycles(angle, peaks)).pattern
        for _ in range(10):
            a = float(rng.uniform(0.1, 8.0))
            b = float(rng.uniform(-50, 50))
            mapped = a * angle + b
            p2, _ = detect_extrema(mapped, a * 10.0, 600)
            got = decouple(mapped, segment_cycles(mapped, p2)).pattern
            m = ~np.isnan(ref)
            assert np.max(np.abs(ref[m] - got[m])) < 1e-12


class TestPhase:
    def test_boundaries_and_midpoint(self):
        cycles = segment_cycles(np.array([10.0, 5.0, 0.0, 5.0, 10.0]), np.array([0, 4]))
        assert phase_at(cycles, 0) == 0.0
        assert phase_at(cycles, 2) == 0.5
        with pytest.raises(ValueError):
            phase_at(cycles, 4)  # exclusive end

    def test_uniform_grid_fractions(self):
        angle = sine_angle(periods=3)
        peaks, _ = detect_extrema(angle, 10.0, 600)
        cycles = segment_cycles(angle, peaks)
        c = cycles[0]
        for k in range(0, c.length, 100):
            assert phase_at(cycles, c.start_idx + k) == k / c.length

    def test_monotone_within_cycle(self):
        angle = sine_angle(periods=4)
        peaks, _ = detect_extrema(angle, 10.0, 600)
        dec = decouple(angle, segment_cycles(angle, peaks))
        for c in dec.cycles:
            ph = dec.phase[c.start_idx : c.end_idx]
            assert np.all(np.diff(ph) > 0)
            assert ph[0] == 0.0

    def test_unwrapped_phase_spans_cycles(self):
        angle = sine_angle(periods=4)
        peaks, _ = detect_extrema(angle, 10.0, 600)
        cycles = segment_cycles(angle, peaks)
        t0 = cycles[0].start_idx
        t1 = cycles[1].start_idx + cycles[1].length // 2
        assert unwrapped_phase_at(cycles, t0) == 0.0
        assert abs(unwrapped_phase_at(cycles, t1) - 1.5) < 1e-9
        assert unwrapped_phase_at(cycles, cycles[-1].end_idx) == len(cycles)


class TestCycleIO:
    def test_round_trip(self, tmp_path):
        angle = sine_angle(periods=3)
        peaks, _ = detect_extrema(angle, 10.0, 600)
        cycles = segment_cycles(angle, peaks)
        path = tmp_path / "cycles.csv"
        save_cycles_csv(path, cycles)
        loaded = load_cycles_csv(path)
        assert loaded == cycles
