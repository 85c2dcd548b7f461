"""Synthetic multi-lead ECG generation for desk-scale training and tests.

One beat is a sum of five Gaussian bumps (P, Q, R, S, T). Records tile the
beat to the requested duration, scale it per lead, and add sinusoidal
baseline drift plus seeded Gaussian noise.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .preprocess import (
    SEGMENT_LEN,
    PRED_LEN,
    TARGET_FS,
    Segment,
    SegmentPair,
    apply_norm_stats,
    clean,
    normalize,
    resample,
    select_window,
)
from .signal_io import EcgRecord

# (amplitude [mV], center as fraction of the beat interval, width sigma [s])
DEFAULT_WAVES = {
    "P": (0.15, 0.18, 0.025),
    "Q": (-0.10, 0.42, 0.010),
    "R": (1.00, 0.45, 0.012),
    "S": (-0.25, 0.48, 0.010),
    "T": (0.35, 0.65, 0.040),
}


@dataclass
class SynthConfig:
    heart_rate: float = 75.0
    fs: float = 500.0
    duration: float = 10.0
    n_leads: int = 12
    waves: dict = field(default_factory=lambda: dict(DEFAULT_WAVES))
    noise_std: float = 0.02
    drift_amplitude: float = 0.1
    drift_freq: float = 0.3
    lead_mix: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        if self.heart_rate <= 0:
            raise ValueError(f"heart_rate must be positive, got {self.heart_rate}")
        if self.fs <= 0:
            raise ValueError(f"fs must be positive, got {self.fs}")
        if self.duration <= 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        if self.n_leads < 1:
            raise ValueError(f"n_leads must be >= 1, got {self.n_leads}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        for name, (_, _, width) in self.waves.items():
            if width <= 0:
                raise ValueError(f"wave {name} width must be positive, got {width}")
        if self.lead_mix is None:
            # default: mild per-lead scaling spread around 1
            self.lead_mix = 1.0 + 0.1 * np.arange(self.n_leads) / max(1, self.n_leads - 1)
        self.lead_mix = np.asarray(self.lead_mix, dtype=np.float64).reshape(-1)
        if len(self.lead_mix) != self.n_leads:
            raise ValueError("lead_mix length must equal n_leads")


def synth_beat_template(config: SynthConfig) -> np.ndarray:
    """One noiseless beat: five Gaussians over fs * 60 / heart_rate samples."""
    beat_len = int(round(config.fs * 60.0 / config.heart_rate))
    t = np.arange(beat_len) / config.fs
    beat_seconds = beat_len / config.fs
    wave = np.zeros(beat_len)
    for amp, center_frac, width in config.waves.values():
        center = center_frac * beat_seconds
        wave += amp * np.exp(-((t - center) ** 2) / (2.0 * width**2))
    return wave


def synth_record(config: SynthConfig) -> EcgRecord:
    """Tile the beat template to duration, mix per lead, add drift and noise.

    The same seed always yields a bit-identical record.
    """
    beat = synth_beat_template(config)
    n = int(round(config.fs * config.duration))
    reps = int(np.ceil(n / len(beat)))
    base = np.tile(beat, reps)[:n]

    t = np.arange(n) / config.fs
    drift = config.drift_amplitude * np.sin(2.0 * np.pi * config.drift_freq * t)

    rng = np.random.default_rng(config.seed)
    samples = np.empty((n, config.n_leads), dtype=np.float64)
    for lead in range(config.n_leads):
        noise = rng.normal(0.0, config.noise_std, size=n) if config.noise_std > 0 else 0.0
        samples[:, lead] = config.lead_mix[lead] * base + drift + noise
    lead_names = [f"LEAD{i + 1}" for i in range(config.n_leads)]
    return EcgRecord(samples, config.fs, lead_names)


def make_dataset(
    n: int,
    config: SynthConfig,
    context_len: int = SEGMENT_LEN,
    pred_len: int = PRED_LEN,
    seed: int = 0,
) -> list[SegmentPair]:
    """Generate ``n`` preprocessed context/future pairs.

    Each item jitters heart rate and noise from a seeded stream, synthesizes
    a record, resamples it to 250 Hz, cleans it, picks the best-quality
    (context_len + pred_len) window, and splits it. The future part is
    normalized with the context's statistics so both live in one coordinate
    frame.
    """
    if n < 0:
        raise ValueError(f"n must be >= 0, got {n}")
    if pred_len < 1 or context_len < 1:
        raise ValueError("context_len and pred_len must be positive")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n):
        hr_scale = rng.uniform(0.85, 1.15)
        noise_scale = rng.uniform(0.5, 1.5)
        item_seed = int(rng.integers(0, 2**31 - 1))
        item_config = replace(
            config,
            heart_rate=config.heart_rate * hr_scale,
            noise_std=config.noise_std * noise_scale,
            waves=dict(config.waves),
            lead_mix=config.lead_mix.copy(),
            seed=item_seed,
        )
        record = synth_record(item_config)
        pairs.append(preprocess_record(record, context_len, pred_len))
    return pairs


def preprocess_record(
    record: EcgRecord,
    context_len: int = SEGMENT_LEN,
    pred_len: int = PRED_LEN,
    target_fs: float = TARGET_FS,
    notch_hz: float = 50.0,
) -> SegmentPair:
    """Standard pipeline from a raw record to one normalized pair."""
    samples = resample(record.samples, record.fs, target_fs)
    samples = clean(samples, target_fs, notch_hz=notch_hz)
    cleaned = EcgRecord(samples, target_fs, record.lead_names, meta=record.meta)

    total = context_len + pred_len
    if cleaned.n_samples < total:
        raise ValueError(
            f"record has {cleaned.n_samples} samples after preprocessing,"
            f" need {total} for context + future"
        )
    window = select_window(cleaned, total)
    context_raw = Segment(
        samples=window.samples[:context_len],
        fs=target_fs,
        source_offset=window.source_offset,
    )
    context = normalize(context_raw)
    future = apply_norm_stats(window.samples[context_len:], context.norm_stats)
    return SegmentPair(context=context, future=future)
