"""Segment preparation: resampling, filtering, quality-based window selection,
per-lead normalization, and the patch reshape used by the model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from .signal_io import EcgRecord

TARGET_FS = 250.0
SEGMENT_LEN = 500
PRED_LEN = 250

NORM_EPS = 1e-8
FLATLINE_RANGE = 1e-4
FLATLINE_MIN_SECONDS = 0.2
DRIFT_CUTOFF_HZ = 0.5
BASELINE_WINDOW_SECONDS = 0.8
NOTCH_Q = 30.0
SMOOTH_TAPS = 3


@dataclass
class Segment:
    """Normalized fixed-length window, shape (T, C).

    ``norm_stats`` holds the per-lead (mean, std) of the raw window in
    physical units; ``source_offset`` is the window's start index in the
    record it was cut from.
    """

    samples: np.ndarray
    fs: float
    norm_stats: list[tuple[float, float]] = field(default_factory=list)
    source_offset: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise ValueError(f"segment samples must be (T, C) with T > 0, got {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("segment contains non-finite samples")
        if not self.norm_stats:
            self.norm_stats = [(0.0, 1.0)] * self.samples.shape[1]
        if len(self.norm_stats) != self.samples.shape[1]:
            raise ValueError("norm_stats length must equal the number of leads")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_leads(self) -> int:
        return self.samples.shape[1]


@dataclass
class SegmentPair:
    """A context window plus the immediately following samples, both in the
    context's normalized coordinates."""

    context: Segment
    future: np.ndarray

    def __post_init__(self):
        self.future = np.asarray(self.future, dtype=np.float64)
        if self.future.ndim != 2 or self.future.shape[0] < 1:
            raise ValueError(f"future must be (P, C) with P > 0, got {self.future.shape}")
        if self.future.shape[1] != self.context.n_leads:
            raise ValueError("future and context lead counts differ")


def resample(samples: np.ndarray, from_fs: float, to_fs: float) -> np.ndarray:
    """Linear-interpolation resampling onto a uniform grid.

    Output length is round(L * to_fs / from_fs). Equal rates return a copy.
    """
    if from_fs <= 0 or to_fs <= 0:
        raise ValueError(f"sampling rates must be positive, got {from_fs} -> {to_fs}")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    length = samples.shape[0]
    if from_fs == to_fs:
        return samples.copy()
    if length < 2:
        raise ValueError(f"need at least 2 samples to resample, got {length}")
    out_len = int(round(length * to_fs / from_fs))
    t_in = np.arange(length) / from_fs
    t_out = np.arange(out_len) / to_fs
    out = np.empty((out_len, samples.shape[1]), dtype=np.float64)
    for lead in range(samples.shape[1]):
        out[:, lead] = np.interp(t_out, t_in, samples[:, lead])
    return out


def clean(samples: np.ndarray, fs: float, notch_hz: float = 50.0) -> np.ndarray:
    """Three-stage per-lead conditioning.

    1. baseline removal: subtract a moving-median trend (0.8 s window),
    2. power-line suppression: second-order IIR notch at ``notch_hz``, Q=30,
       applied forward-backward,
    3. smoothing: zero-phase 3-tap moving average.

    The notch stage is skipped when ``notch_hz`` is not below the Nyquist
    frequency.
    """
    if fs <= 0:
        raise ValueError(f"fs must be positive, got {fs}")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if not np.all(np.isfinite(samples)):
        raise ValueError("clean() requires finite input")

    win = int(round(BASELINE_WINDOW_SECONDS * fs))
    win = max(3, win + (win % 2 == 0))  # odd-length window keeps the trend centered
    out = np.empty_like(samples)
    for lead in range(samples.shape[1]):
        trend = ndimage.median_filter(samples[:, lead], size=win, mode="nearest")
        out[:, lead] = samples[:, lead] - trend

    if notch_hz < fs / 2:
        b, a = signal.iirnotch(notch_hz, NOTCH_Q, fs=fs)
        padlen = min(3 * max(len(a), len(b)), samples.shape[0] - 1)
        out = signal.filtfilt(b, a, out, axis=0, padlen=padlen)

    return ndimage.uniform_filter1d(out, size=SMOOTH_TAPS, axis=0, mode="nearest")


def quality_score(window: np.ndarray, fs: float = TARGET_FS) -> float:
    """Score a window in [0, 1]: 1 - max(flatline, clipping, drift) fractions.

    flatline: fraction of samples lying in runs of at least 0.2 s whose
    amplitude range stays below 1e-4 (per lead, greedy left-to-right runs).
    clipping: fraction of samples sitting exactly at a lead's extreme values.
    drift: spectral power below 0.5 Hz over total power, averaged over leads;
    the DC bin is excluded on both sides so a window's mean does not count
    as wander (flatline handles constant content).
    """
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 1:
        window = window[:, None]
    t, c = window.shape
    if t < 2:
        raise ValueError(f"window needs at least 2 samples, got {t}")

    min_run = int(np.ceil(FLATLINE_MIN_SECONDS * fs))
    flat_samples = 0
    clip_samples = 0
    drift_sum = 0.0
    for lead in range(c):
        x = window[:, lead]
        flat_samples += _flatline_samples(x, min_run)
        if x.max() == x.min():
            clip_samples += t  # constant lead: every sample sits at the extreme
        else:
            clip_samples += int(np.sum(x == x.max()) + np.sum(x == x.min()))
        spectrum = np.abs(np.fft.rfft(x)) ** 2
        freqs = np.fft.rfftfreq(t, d=1.0 / fs)
        total = spectrum[freqs > 0].sum()
        if total > 0:
            low = (freqs > 0) & (freqs < DRIFT_CUTOFF_HZ)
            drift_sum += spectrum[low].sum() / total

    flatline_fraction = flat_samples / (t * c)
    clip_fraction = clip_samples / (t * c)
    drift_ratio = drift_sum / c
    score = 1.0 - max(flatline_fraction, clip_fraction, drift_ratio)
    return float(min(1.0, max(0.0, score)))


def _flatline_samples(x: np.ndarray, min_run: int) -> int:
    """Count samples in maximal low-range runs of length >= min_run."""
    n = len(x)
    count = 0
    start = 0
    while start < n:
        lo = hi = x[start]
        end = start + 1
        while end < n:
            lo = min(lo, x[end])
            hi = max(hi, x[end])
            if hi - lo >= FLATLINE_RANGE:
                break
            end += 1
        if end - start >= min_run:
            count += end - start
        start = end
    return count


def select_window(record: EcgRecord, length: int = SEGMENT_LEN) -> Segment:
    """Pick the highest-quality window of ``length`` samples.

    Candidate offsets advance by length // 4; ties go to the earliest offset.
    The returned segment is unnormalized (identity stats) and remembers its
    offset in the record.
    """
    total = record.n_samples
    if total < length:
        raise ValueError(f"record has {total} samples, need at least {length}")
    stride = max(1, length // 4)
    best_offset = 0
    best_score = -np.inf
    for offset in range(0, total - length + 1, stride):
        score = quality_score(record.samples[offset : offset + length], fs=record.fs)
        if score > best_score:
            best_score = score
            best_offset = offset
    window = record.samples[best_offset : best_offset + length]
    return Segment(samples=window.copy(), fs=record.fs, source_offset=best_offset)


def normalize(segment: Segment) -> Segment:
    """Per-lead z-score with population std and eps = 1e-8.

    A constant lead maps to all zeros and records std 0 in its stats.
    """
    x = segment.samples
    means = x.mean(axis=0)
    stds = x.std(axis=0)
    normed = (x - means) / (stds + NORM_EPS)
    constant = stds == 0.0
    if np.any(constant):
        normed = normed.copy()
        normed[:, constant] = 0.0
    stats = [(float(m), float(s)) for m, s in zip(means, stds)]
    return Segment(
        samples=normed,
        fs=segment.fs,
        norm_stats=stats,
        source_offset=segment.source_offset,
    )


def apply_norm_stats(samples: np.ndarray, norm_stats: list[tuple[float, float]]) -> np.ndarray:
    """Map raw samples into the coordinates defined by existing stats."""
    samples = np.asarray(samples, dtype=np.float64)
    means = np.array([m for m, _ in norm_stats])
    stds = np.array([s for _, s in norm_stats])
    out = (samples - means) / (stds + NORM_EPS)
    out[:, stds == 0.0] = 0.0
    return out


def patchify(samples: np.ndarray, frame: int) -> np.ndarray:
    """Reshape (T, C) into (T/frame, frame*C) non-overlapping patches.

    Row i concatenates samples [i*frame, (i+1)*frame) in time-major order:
    all leads at each time step stay adjacent.
    """
    samples = np.asarray(samples)
    t_total, c = samples.shape
    if frame <= 0 or t_total % frame != 0:
        raise ValueError(f"segment length {t_total} is not divisible by patch frame {frame}")
    return samples.reshape(t_total // frame, frame * c)


def unpatchify(patches: np.ndarray, frame: int) -> np.ndarray:
    """Inverse of :func:`patchify`."""
    patches = np.asarray(patches)
    n_patches, width = patches.shape
    if width % frame != 0:
        raise ValueError(f"patch width {width} is not divisible by frame {frame}")
    c = width // frame
    return patches.reshape(n_patches * frame, c)
