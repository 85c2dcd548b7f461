"""Record and segment I/O.

Readers for a subset of the PhysioNet waveform format (text ``.hea`` header
plus format-16 ``.dat`` signal file), a plain CSV ingestion path, and the
"BSEG" binary segment container used to persist preprocessed segments
bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import FormatError, ParseError

SUPPORTED_DAT_FORMAT = 16
DEFAULT_GAIN = 200.0
DEFAULT_BASELINE = 0

BSEG_MAGIC = b"BSEG"
BSEG_VERSION = 1


@dataclass
class SignalSpec:
    """Per-signal line of a header file."""

    file_name: str
    format_code: int
    gain: float = DEFAULT_GAIN
    baseline: int = DEFAULT_BASELINE
    units: str = "mV"
    description: str = ""


@dataclass
class RecordHeader:
    """Parsed record header: record line plus one :class:`SignalSpec` per signal."""

    record_name: str
    n_signals: int
    fs: float
    n_samples: int
    signals: list[SignalSpec] = field(default_factory=list)

    @property
    def lead_names(self) -> list[str]:
        return [s.description for s in self.signals]


@dataclass
class EcgRecord:
    """Multi-lead signal in physical units.

    samples has shape (L, C): L sample frames, C leads. All leads share the
    sampling rate ``fs``.
    """

    samples: np.ndarray
    fs: float
    lead_names: list[str]
    meta: Optional[dict] = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be 2-D (L, C), got shape {self.samples.shape}")
        if self.samples.shape[1] < 1:
            raise ValueError("record needs at least one lead")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("record contains non-finite samples")

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_leads(self) -> int:
        return self.samples.shape[1]


def parse_wfdb_header(text: str) -> RecordHeader:
    """Parse a ``.hea`` header.

    First non-comment line: ``name n_signals fs n_samples``; then one signal
    spec line per signal: ``file_name format gain(baseline)/units ... description``.
    Missing gain defaults to 200, missing baseline to 0. Only signal format 16
    is accepted. Checksum fields are skipped without verification.
    """
    lines = [
        (i + 1, ln.strip())
        for i, ln in enumerate(text.splitlines())
        if ln.strip() and not ln.lstrip().startswith("#")
    ]
    if not lines:
        raise ParseError("empty header")

    lineno, record_line = lines[0]
    fields = record_line.split()
    if len(fields) < 4:
        raise ParseError(
            f"record line needs 'name n_signals fs n_samples', got {len(fields)} fields",
            position=f"line {lineno}",
        )
    record_name = fields[0]
    try:
        n_signals = int(fields[1])
        fs = float(fields[2])
        n_samples = int(fields[3])
    except ValueError as exc:
        raise ParseError(f"bad record line: {exc}", position=f"line {lineno}") from None
    if n_signals < 1:
        raise ParseError(f"n_signals must be >= 1, got {n_signals}", position=f"line {lineno}")
    if fs <= 0:
        raise ParseError(f"sampling rate must be positive, got {fs}", position=f"line {lineno}")

    spec_lines = lines[1:]
    if len(spec_lines) != n_signals:
        raise ParseError(
            f"header declares {n_signals} signals but has {len(spec_lines)} spec lines"
        )

    signals = []
    for lineno, line in spec_lines:
        signals.append(_parse_signal_spec(line, lineno))
    return RecordHeader(record_name, n_signals, fs, n_samples, signals)


def _parse_signal_spec(line: str, lineno: int) -> SignalSpec:
    fields = line.split()
    if len(fields) < 2:
        raise ParseError("signal spec needs at least file name and format", position=f"line {lineno}")
    file_name = fields[0]

    # Format field may carry xN / :N / +N modifiers; only the base code matters.
    fmt_field = fields[1]
    base = fmt_field
    for sep in ("x", ":", "+"):
        base = base.split(sep)[0]
    try:
        format_code = int(base)
    except ValueError:
        raise ParseError(f"bad format field {fmt_field!r}", position=f"line {lineno}") from None
    if format_code != SUPPORTED_DAT_FORMAT:
        raise ParseError(
            f"unsupported signal format {format_code} (only {SUPPORTED_DAT_FORMAT} is supported)",
            position=f"line {lineno}",
        )

    gain = DEFAULT_GAIN
    baseline = DEFAULT_BASELINE
    units = "mV"
    if len(fields) >= 3:
        gain_field = fields[2]
        if "/" in gain_field:
            gain_field, units = gain_field.split("/", 1)
        if "(" in gain_field:
            gain_part, base_part = gain_field.split("(", 1)
            if not base_part.endswith(")"):
                raise ParseError(f"unclosed baseline in {fields[2]!r}", position=f"line {lineno}")
            try:
                baseline = int(base_part[:-1])
            except ValueError:
                raise ParseError(f"bad baseline in {fields[2]!r}", position=f"line {lineno}") from None
        else:
            gain_part = gain_field
        if gain_part:
            try:
                gain = float(gain_part)
            except ValueError:
                raise ParseError(f"bad gain in {fields[2]!r}", position=f"line {lineno}") from None
            if gain == 0:
                gain = DEFAULT_GAIN

    # Optional numeric columns (adc resolution, adc zero, initial value,
    # checksum, block size) are tolerated but unused; a trailing
    # non-numeric remainder is the lead description.
    description = ""
    extra = fields[3:]
    numeric_prefix = 0
    for tok in extra:
        try:
            float(tok)
            numeric_prefix += 1
        except ValueError:
            break
    description = " ".join(extra[numeric_prefix:])
    return SignalSpec(file_name, format_code, gain, baseline, units, description)


def render_wfdb_header(header: RecordHeader) -> str:
    """Emit header text that :func:`parse_wfdb_header` reads back identically."""
    fs = int(header.fs) if float(header.fs).is_integer() else header.fs
    out = [f"{header.record_name} {header.n_signals} {fs} {header.n_samples}"]
    for sig in header.signals:
        gain = int(sig.gain) if float(sig.gain).is_integer() else sig.gain
        out.append(
            f"{sig.file_name} {sig.format_code} {gain}({sig.baseline})/{sig.units}"
            f" 16 0 0 0 0 {sig.description}"
        )
    return "\n".join(out) + "\n"


def read_wfdb_signals(header: RecordHeader, data: bytes) -> EcgRecord:
    """Decode a format-16 signal stream against its header.

    Samples are little-endian int16, interleaved by frame. Physical value of
    each sample is (adc - baseline) / gain.
    """
    expected = header.n_samples * header.n_signals * 2
    if len(data) != expected:
        raise FormatError(
            f"signal stream has {len(data)} bytes, expected {expected}"
            f" ({header.n_samples} frames x {header.n_signals} signals x 2 bytes)"
        )
    adc = np.frombuffer(data, dtype="<i2").astype(np.float64)
    adc = adc.reshape(header.n_samples, header.n_signals)
    baselines = np.array([s.baseline for s in header.signals], dtype=np.float64)
    gains = np.array([s.gain for s in header.signals], dtype=np.float64)
    physical = (adc - baselines) / gains
    return EcgRecord(physical, header.fs, header.lead_names)


def read_wfdb_record(hea_path) -> EcgRecord:
    """Read header + signal file pair. The .dat path is resolved per-signal
    relative to the header's directory; all signals must share one file."""
    hea_path = Path(hea_path)
    header = parse_wfdb_header(hea_path.read_text())
    dat_names = {s.file_name for s in header.signals}
    if len(dat_names) != 1:
        raise FormatError(f"multi-file records are not supported (files: {sorted(dat_names)})")
    dat_path = hea_path.parent / dat_names.pop()
    return read_wfdb_signals(header, dat_path.read_bytes())


def read_csv_record(text: str, fs: float, lead_names: list[str]) -> EcgRecord:
    """Parse decimal CSV text: one row per sample frame, one column per lead."""
    if fs <= 0:
        raise ValueError(f"fs must be positive, got {fs}")
    rows = []
    width = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cells = [c.strip() for c in line.split(",")]
        if width is None:
            width = len(cells)
        elif len(cells) != width:
            raise ParseError(
                f"row has {len(cells)} columns, expected {width}", position=f"row {lineno}"
            )
        values = []
        for col, cell in enumerate(cells, start=1):
            try:
                values.append(float(cell))
            except ValueError:
                raise ParseError(
                    f"non-numeric cell {cell!r}", position=f"row {lineno}, column {col}"
                ) from None
        rows.append(values)
    if not rows:
        raise ParseError("CSV record is empty")
    samples = np.array(rows, dtype=np.float64)
    if len(lead_names) != samples.shape[1]:
        raise ParseError(
            f"{len(lead_names)} lead names given for {samples.shape[1]} columns"
        )
    return EcgRecord(samples, fs, list(lead_names))


def write_csv_record(record: EcgRecord, path) -> None:
    lines = [",".join(repr(float(v)) for v in row) for row in record.samples]
    Path(path).write_text("\n".join(lines) + "\n")


def write_segment_file(segment, path) -> None:
    """Persist a segment in the BSEG container.

    Layout: magic "BSEG", version u32, T u32, C u32, fs f32, C lead means f32,
    C lead stds f32, then T*C row-major f32 samples. All fields little-endian.
    Values are stored at float32 precision.
    """
    samples = np.ascontiguousarray(segment.samples, dtype="<f4")
    t, c = samples.shape
    means = np.asarray([m for m, _ in segment.norm_stats], dtype="<f4")
    stds = np.asarray([s for _, s in segment.norm_stats], dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(BSEG_MAGIC)
        fh.write(struct.pack("<III", BSEG_VERSION, t, c))
        fh.write(struct.pack("<f", segment.fs))
        fh.write(means.tobytes())
        fh.write(stds.tobytes())
        fh.write(samples.tobytes())


def read_segment_file(path):
    """Read a BSEG container back into a Segment (source_offset is not stored
    in the container and resets to 0)."""
    from .preprocess import Segment

    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != BSEG_MAGIC:
        raise FormatError(f"not a BSEG file: bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise FormatError("BSEG file truncated in fixed header")
    version, t, c = struct.unpack_from("<III", raw, 4)
    if version != BSEG_VERSION:
        raise FormatError(f"unsupported BSEG version {version} (supported: {BSEG_VERSION})")
    (fs,) = struct.unpack_from("<f", raw, 16)
    offset = 20
    expected = offset + 2 * c * 4 + t * c * 4
    if len(raw) != expected:
        raise FormatError(f"BSEG file has {len(raw)} bytes, expected {expected}")
    means = np.frombuffer(raw, dtype="<f4", count=c, offset=offset).astype(np.float64)
    offset += c * 4
    stds = np.frombuffer(raw, dtype="<f4", count=c, offset=offset).astype(np.float64)
    offset += c * 4
    samples = np.frombuffer(raw, dtype="<f4", count=t * c, offset=offset)
    samples = samples.reshape(t, c).astype(np.float64)
    stats = [(float(m), float(s)) for m, s in zip(means, stds)]
    return Segment(samples=samples, fs=float(fs), norm_stats=stats, source_offset=0)
