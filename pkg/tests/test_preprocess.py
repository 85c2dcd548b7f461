"""Resampling, filtering, quality scoring, normalization, and patching."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from beat.preprocess import (
    Segment,
    clean,
    normalize,
    patchify,
    quality_score,
    resample,
    select_window,
    unpatchify,
)
from beat.signal_io import EcgRecord
from beat.synth import SynthConfig, synth_record


class TestResample:
    def test_identity_rates(self):
        x = np.random.default_rng(0).normal(size=(100, 3))
        out = resample(x, 250.0, 250.0)
        np.testing.assert_array_equal(out, x)
        assert out is not x

    def test_constant_signal(self):
        x = np.full((80, 2), 3.5)
        out = resample(x, 500.0, 360.0)
        assert np.allclose(out, 3.5)

    def test_sine_oracle(self):
        # 5 Hz sine downsampled 500 -> 250 against the analytic waveform
        fs0, fs1 = 500.0, 250.0
        t0 = np.arange(1000) / fs0
        x = np.sin(2 * np.pi * 5.0 * t0)[:, None]
        out = resample(x, fs0, fs1)
        t1 = np.arange(out.shape[0]) / fs1
        ref = np.sin(2 * np.pi * 5.0 * t1)[:, None]
        rms = np.sqrt(np.mean((out - ref) ** 2))
        assert rms < 1e-3

    def test_sine_oracle_non_integer_ratio(self):
        fs0, fs1 = 360.0, 250.0
        t0 = np.arange(720) / fs0
        x = np.sin(2 * np.pi * 5.0 * t0)[:, None]
        out = resample(x, fs0, fs1)
        t1 = np.arange(out.shape[0]) / fs1
        ref = np.sin(2 * np.pi * 5.0 * t1)[:, None]
        rms = np.sqrt(np.mean((out - ref) ** 2))
        assert rms < 1e-3

    def test_too_short(self):
        with pytest.raises(ValueError, match="at least 2 samples"):
            resample(np.zeros((1, 1)), 500.0, 250.0)

    @settings(max_examples=100, deadline=None)
    @given(
        length=st.integers(min_value=2, max_value=500),
        from_fs=st.integers(min_value=50, max_value=1000),
        to_fs=st.integers(min_value=50, max_value=1000),
    )
    def test_length_law(self, length, from_fs, to_fs):
        x = np.zeros((length, 1))
        out = resample(x, float(from_fs), float(to_fs))
        assert out.shape[0] == int(round(length * to_fs / from_fs))


class TestClean:
    def test_zero_in_zero_out(self):
        out = clean(np.zeros((1000, 2)), 250.0)
        np.testing.assert_allclose(out, 0.0, atol=1e-12)

    def test_dc_removed(self):
        out = clean(np.full((1000, 1), 2.0), 250.0)
        # moving-median trend equals the DC level everywhere
        assert np.max(np.abs(out)) <= 1e-2

    def test_drift_attenuated_band_preserved(self):
        # 20 s so both components land on exact FFT bins
        fs = 250.0
        n = 5000
        t = np.arange(n) / fs
        x = (np.sin(2 * np.pi * 0.2 * t) + np.sin(2 * np.pi * 10.0 * t))[:, None]
        out = clean(x, fs)
        freqs = np.fft.rfftfreq(n, d=1.0 / fs)

        def magnitude(sig, f):
            spectrum = np.abs(np.fft.rfft(sig[:, 0]))
            return spectrum[np.argmin(np.abs(freqs - f))]

        drift_db = 20 * np.log10(magnitude(out, 0.2) / magnitude(x, 0.2))
        band_db = 20 * np.log10(magnitude(out, 10.0) / magnitude(x, 10.0))
        assert drift_db <= -20.0
        assert band_db >= -1.0

    def test_rejects_non_finite(self):
        bad = np.zeros((300, 1))
        bad[5, 0] = np.inf
        with pytest.raises(ValueError, match="finite"):
            clean(bad, 250.0)

    def test_notch_skipped_when_above_nyquist(self):
        out = clean(np.zeros((400, 1)), fs=80.0, notch_hz=50.0)
        assert out.shape == (400, 1)


def quality_components_oracle(window, fs):
    """Independent recount of the three quality fractions."""
    t, c = window.shape
    min_run = int(np.ceil(0.2 * fs))
    flat = 0
    clip = 0
    drift = 0.0
    for lead in range(c):
        x = window[:, lead]
        # greedy runs, recounted with an O(n^2) max/min scan
        start = 0
        while start < t:
            end = start + 1
            while end < t and (x[start:end + 1].max() - x[start:end + 1].min()) < 1e-4:
                end += 1
            if end - start >= min_run:
                flat += end - start
            start = end
        if x.max() == x.min():
            clip += t
        else:
            clip += int((x == x.max()).sum() + (x == x.min()).sum())
        spectrum = np.abs(np.fft.rfft(x)) ** 2
        freqs = np.fft.rfftfreq(t, d=1.0 / fs)
        ac = spectrum[freqs > 0].sum()
        if ac > 0:
            drift += spectrum[(freqs > 0) & (freqs < 0.5)].sum() / ac
    return flat / (t * c), clip / (t * c), drift / c


class TestQualityScore:
    def test_all_zero_window(self):
        assert quality_score(np.zeros((500, 3)), 250.0) == 0.0

    def test_clean_beat_window(self):
        config = SynthConfig(duration=4.0, fs=250.0, noise_std=0.01,
                             drift_amplitude=0.05, seed=3)
        window = clean(synth_record(config).samples, 250.0)[200:700]
        score = quality_score(window, 250.0)
        flat, clip, drift = quality_components_oracle(window, 250.0)
        assert score == pytest.approx(1.0 - max(flat, clip, drift))
        assert score >= 0.8

    def test_half_flatline(self):
        half = np.concatenate([np.zeros(250), np.sin(np.linspace(0.0, 20.0, 250))])
        score = quality_score(half[:, None], 250.0)
        assert score <= 0.5

    def test_matches_oracle_on_random_windows(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            window = rng.normal(size=(rng.integers(100, 400), rng.integers(1, 4)))
            if rng.random() < 0.5:  # inject a flat stretch
                k = int(rng.integers(30, 80))
                window[: k, 0] = window[0, 0]
            flat, clip, drift = quality_components_oracle(window, 250.0)
            expected = min(1.0, max(0.0, 1.0 - max(flat, clip, drift)))
            assert quality_score(window, 250.0) == pytest.approx(expected)

    def test_too_short(self):
        with pytest.raises(ValueError, match="at least 2"):
            quality_score(np.zeros((1, 1)), 250.0)


class TestSelectWindow:
    def test_exact_length_record(self):
        config = SynthConfig(duration=2.0, fs=250.0, n_leads=2, seed=0)
        record = synth_record(config)
        segment = select_window(record, 500)
        assert segment.source_offset == 0
        assert segment.n_samples == 500
        np.testing.assert_array_equal(segment.samples, record.samples[:500])

    def test_flatlined_first_half_avoided(self):
        n = 2000
        good = synth_record(
            SynthConfig(duration=n / 2 / 250.0, fs=250.0, n_leads=2, noise_std=0.01, seed=5)
        ).samples
        record = EcgRecord(np.concatenate([np.zeros((n // 2, 2)), good]), 250.0, ["a", "b"])
        segment = select_window(record, 500)
        assert segment.source_offset >= n // 2 - 500
        # exhaustive recheck: no stride-aligned window scores higher
        best = quality_score(segment.samples, 250.0)
        for offset in range(0, n - 500 + 1, 125):
            assert quality_score(record.samples[offset:offset + 500], 250.0) <= best

    def test_tie_goes_to_earliest(self):
        block = np.sin(np.linspace(0.0, 30.0, 500))[:, None]
        record = EcgRecord(np.concatenate([block, block]), 250.0, ["a"])
        segment = select_window(record, 500)
        assert segment.source_offset == 0

    def test_record_too_short(self):
        record = EcgRecord(np.zeros((100, 1)), 250.0, ["a"])
        with pytest.raises(ValueError, match="need at least 500"):
            select_window(record, 500)


class TestNormalize:
    def test_idempotent(self):
        rng = np.random.default_rng(0)
        segment = Segment(samples=rng.normal(2.0, 3.0, size=(400, 3)), fs=250.0)
        once = normalize(segment)
        twice = normalize(once)
        np.testing.assert_allclose(twice.samples, once.samples, atol=1e-6)

    def test_constant_lead(self):
        samples = np.column_stack([np.full(100, 7.0), np.sin(np.arange(100.0))])
        out = normalize(Segment(samples=samples, fs=250.0))
        assert np.all(out.samples[:, 0] == 0.0)
        assert out.norm_stats[0] == (7.0, 0.0)

    def test_two_point_lead(self):
        out = normalize(Segment(samples=np.array([[0.0], [2.0]]), fs=250.0))
        np.testing.assert_allclose(out.samples[:, 0], [-1.0, 1.0], atol=1e-7)
        mean, std = out.norm_stats[0]
        assert mean == pytest.approx(1.0)
        assert std == pytest.approx(1.0)  # population std of {0, 2}

    def test_invariant_mean_and_std(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            segment = Segment(samples=rng.normal(5.0, 4.0, size=(500, 4)), fs=250.0)
            out = normalize(segment)
            means = out.samples.mean(axis=0)
            stds = out.samples.std(axis=0)
            assert np.all(np.abs(means) <= 1e-6)
            assert np.all(np.abs(stds - 1.0) <= 1e-4)


class TestPatchify:
    def test_default_shape(self):
        x = np.zeros((500, 12))
        assert patchify(x, 10).shape == (50, 120)

    def test_single_patch(self):
        x = np.random.default_rng(0).normal(size=(40, 3))
        patches = patchify(x, 40)
        assert patches.shape == (1, 120)

    def test_time_major_layout(self):
        # patch row = [row_i for i in frame] concatenated, leads adjacent
        x = np.arange(12.0).reshape(6, 2)
        patches = patchify(x, 3)
        np.testing.assert_array_equal(patches[0], [0, 1, 2, 3, 4, 5])
        np.testing.assert_array_equal(patches[1], [6, 7, 8, 9, 10, 11])

    def test_error_names_sizes(self):
        with pytest.raises(ValueError, match="500.*not divisible.*7"):
            patchify(np.zeros((500, 2)), 7)

    @settings(max_examples=100, deadline=None)
    @given(
        frame=st.integers(min_value=1, max_value=25),
        n_patches=st.integers(min_value=1, max_value=20),
        leads=st.integers(min_value=1, max_value=6),
    )
    def test_round_trip(self, frame, n_patches, leads):
        rng = np.random.default_rng(frame * 1000 + n_patches * 10 + leads)
        x = rng.normal(size=(frame * n_patches, leads))
        np.testing.assert_array_equal(unpatchify(patchify(x, frame), frame), x)
