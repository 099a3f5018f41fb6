"""EDF/EDF+ parsing, channel selection and hypnogram label mapping.

Only 16-bit EDF is handled. A small writer is included so tests and the
synthetic fixture generator can produce files the parser must accept; it is
not meant as a general EDF export path.
"""

from __future__ import annotations

import datetime as dt
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    AmbiguousChannel,
    ChannelNotFound,
    InconsistentSpec,
    MalformedHeader,
    TruncatedData,
    UnknownStageText,
)
from .stages import EXCLUDED, Stage

EPOCH_SECONDS = 30.0
ANNOTATION_LABEL = "EDF Annotations"

# (name, width) of the per-signal header blocks, in file order.
_SIGNAL_FIELDS = (
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefiltering", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
)


@dataclass(frozen=True)
class EdfHeader:
    version_tag: str
    patient_id: str
    recording_id: str
    start_datetime: dt.datetime
    header_bytes: int
    record_count: int
    record_duration_s: float
    signal_count: int
    reserved: str = ""

    def __post_init__(self):
        if self.header_bytes != 256 + 256 * self.signal_count:
            raise MalformedHeader(
                f"header size {self.header_bytes} does not match "
                f"{self.signal_count} signals"
            )
        if not self.record_duration_s > 0:
            raise MalformedHeader(f"record duration must be positive, got {self.record_duration_s}")
        if self.record_count < 0:
            raise MalformedHeader(f"negative record count {self.record_count}")
        if self.signal_count < 1:
            raise MalformedHeader("EDF file declares no signals")

    @property
    def is_edf_plus(self) -> bool:
        return self.reserved.startswith("EDF+")


@dataclass(frozen=True)
class SignalSpec:
    label: str
    transducer: str
    physical_dimension: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    samples_per_record: int
    prefiltering: str = ""
    reserved: str = ""

    def __post_init__(self):
        if not self.digital_min < self.digital_max:
            raise InconsistentSpec(
                f"{self.label!r}: digital_min {self.digital_min} >= digital_max {self.digital_max}"
            )
        if self.physical_min == self.physical_max:
            raise InconsistentSpec(f"{self.label!r}: physical_min == physical_max")
        if self.samples_per_record < 1:
            raise InconsistentSpec(f"{self.label!r}: samples_per_record < 1")

    @property
    def is_annotation(self) -> bool:
        return self.label.strip() == ANNOTATION_LABEL

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        digital = np.asarray(digital, dtype=np.float64)
        return (digital - self.digital_min) * self.gain + self.physical_min

    def to_digital(self, physical: np.ndarray) -> np.ndarray:
        physical = np.asarray(physical, dtype=np.float64)
        digital = np.round((physical - self.physical_min) / self.gain + self.digital_min)
        return np.clip(digital, self.digital_min, self.digital_max).astype(np.int16)


@dataclass(frozen=True)
class HypnogramAnnotation:
    onset_s: float
    duration_s: float
    stage_text: str


@dataclass(frozen=True, eq=False)
class Channel:
    spec: SignalSpec
    sampling_rate_hz: float
    digital: np.ndarray

    @property
    def label(self) -> str:
        return self.spec.label

    @property
    def samples(self) -> np.ndarray:
        """Calibrated samples in physical units."""
        return self.spec.to_physical(self.digital)


@dataclass(frozen=True, eq=False)
class Recording:
    header: EdfHeader
    signals: tuple[Channel, ...]
    annotations: tuple[HypnogramAnnotation, ...] = field(default_factory=tuple)

    @property
    def start_datetime(self) -> dt.datetime:
        return self.header.start_datetime

    @property
    def channels(self) -> tuple[Channel, ...]:
        """Data channels, i.e. every signal except EDF+ annotation signals."""
        return tuple(s for s in self.signals if not s.spec.is_annotation)


# ---------------------------------------------------------------- parsing


def _ascii(raw: bytes, what: str) -> str:
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"non-ASCII bytes in header field {what}") from exc


def _int_field(text: str, what: str) -> int:
    try:
        return int(text.strip())
    except ValueError as exc:
        raise MalformedHeader(f"header field {what} is not an integer: {text!r}") from exc


def _float_field(text: str, what: str) -> float:
    try:
        value = float(text.strip())
    except ValueError as exc:
        raise MalformedHeader(f"header field {what} is not a number: {text!r}") from exc
    if not math.isfinite(value):
        raise MalformedHeader(f"header field {what} is not finite: {text!r}")
    return value


def _parse_start(date_text: str, time_text: str) -> dt.datetime:
    m_date = re.fullmatch(r"(\d\d)\.(\d\d)\.(\d\d)", date_text.strip())
    m_time = re.fullmatch(r"(\d\d)\.(\d\d)\.(\d\d)", time_text.strip())
    if not m_date or not m_time:
        raise MalformedHeader(f"bad start date/time {date_text!r} {time_text!r}")
    day, month, yy = (int(g) for g in m_date.groups())
    # EDF clipping date: 85-99 -> 1985-1999, 00-84 -> 2000-2084
    year = 1900 + yy if yy >= 85 else 2000 + yy
    try:
        return dt.datetime(year, month, day, *(int(g) for g in m_time.groups()))
    except ValueError as exc:
        raise MalformedHeader(f"invalid start date/time {date_text!r} {time_text!r}") from exc


def parse_header(raw: bytes) -> tuple[EdfHeader, list[SignalSpec]]:
    if len(raw) < 256:
        raise MalformedHeader(f"need at least 256 header bytes, got {len(raw)}")
    fixed = _ascii(raw[:256], "fixed header")
    signal_count = _int_field(fixed[252:256], "number of signals")
    if signal_count < 1:
        raise MalformedHeader("EDF file declares no signals")
    record_count = _int_field(fixed[236:244], "number of data records")
    header_bytes = _int_field(fixed[184:192], "header bytes")
    if record_count < -1:
        raise MalformedHeader(f"invalid record count {record_count}")
    end = 256 + 256 * signal_count
    if len(raw) < end:
        raise MalformedHeader(f"signal headers truncated: need {end} bytes, got {len(raw)}")

    header = EdfHeader(
        version_tag=fixed[0:8].rstrip(),
        patient_id=fixed[8:88].rstrip(),
        recording_id=fixed[88:168].rstrip(),
        start_datetime=_parse_start(fixed[168:176], fixed[176:184]),
        header_bytes=header_bytes,
        # -1 means "unknown" while recording; resolved against the data length later
        record_count=max(record_count, 0),
        record_duration_s=_float_field(fixed[244:252], "data record duration"),
        signal_count=signal_count,
        reserved=fixed[192:236].rstrip(),
    )
    block = _ascii(raw[256:end], "signal headers")
    columns: dict[str, list[str]] = {}
    offset = 0
    for name, width in _SIGNAL_FIELDS:
        columns[name] = [
            block[offset + i * width : offset + (i + 1) * width] for i in range(signal_count)
        ]
        offset += width * signal_count

    specs = []
    for i in range(signal_count):
        label = columns["label"][i].strip()
        specs.append(
            SignalSpec(
                label=label,
                transducer=columns["transducer"][i].rstrip(),
                physical_dimension=columns["physical_dimension"][i].rstrip(),
                physical_min=_float_field(columns["physical_min"][i], f"{label} physical min"),
                physical_max=_float_field(columns["physical_max"][i], f"{label} physical max"),
                digital_min=_int_field(columns["digital_min"][i], f"{label} digital min"),
                digital_max=_int_field(columns["digital_max"][i], f"{label} digital max"),
                samples_per_record=_int_field(
                    columns["samples_per_record"][i], f"{label} samples per record"
                ),
                prefiltering=columns["prefiltering"][i].rstrip(),
                reserved=columns["reserved"][i].rstrip(),
            )
        )
    return header, specs


def parse_tal(raw: bytes) -> list[HypnogramAnnotation]:
    """Decode the time-stamped annotation lists of one annotation record.

    Timekeeping TALs (no annotation text) are skipped.
    """
    out = []
    for tal in raw.split(b"\x00"):
        if not tal:
            continue
        parts = tal.split(b"\x14")
        if len(parts) < 2:
            raise MalformedHeader(f"malformed TAL {tal!r}")
        timing = parts[0].split(b"\x15")
        try:
            onset = float(timing[0].decode("ascii"))
            duration = float(timing[1].decode("ascii")) if len(timing) > 1 and timing[1] else 0.0
        except (UnicodeDecodeError, ValueError) as exc:
            raise MalformedHeader(f"malformed TAL timing {parts[0]!r}") from exc
        for text in parts[1:]:
            if text:
                out.append(HypnogramAnnotation(onset, duration, text.decode("utf-8")))
    return out


def parse_edf(raw_bytes: bytes) -> Recording:
    header, specs = parse_header(raw_bytes)
    record_samples = sum(s.samples_per_record for s in specs)
    record_bytes = 2 * record_samples
    data = memoryview(raw_bytes)[header.header_bytes :]

    declared = int(_ascii(raw_bytes[236:244], "number of data records").strip())
    if declared == -1:
        header = replace(header, record_count=len(data) // record_bytes)
    needed = header.record_count * record_bytes
    if len(data) < needed:
        raise TruncatedData(
            f"data region has {len(data)} bytes, header promises {needed} "
            f"({header.record_count} records x {record_bytes} bytes)"
        )

    matrix = np.frombuffer(data[:needed], dtype="<i2").reshape(header.record_count, record_samples)
    signals = []
    annotations: list[HypnogramAnnotation] = []
    col = 0
    for spec in specs:
        block = matrix[:, col : col + spec.samples_per_record]
        col += spec.samples_per_record
        digital = np.ascontiguousarray(block).reshape(-1).astype(np.int16)
        digital.flags.writeable = False
        signals.append(Channel(spec, spec.samples_per_record / header.record_duration_s, digital))
        if spec.is_annotation:
            for rec in np.ascontiguousarray(block).astype("<i2"):
                annotations.extend(parse_tal(rec.tobytes()))
    return Recording(header, tuple(signals), tuple(annotations))


def read_edf(path: str | Path) -> Recording:
    return parse_edf(Path(path).read_bytes())


def attach_hypnogram(psg: Recording, hypnogram: Recording) -> Recording:
    """Combine a signal recording with annotations from a separate hypnogram file.

    Onsets are shifted so they are relative to the signal recording's start.
    """
    shift = (hypnogram.start_datetime - psg.start_datetime).total_seconds()
    anns = tuple(replace(a, onset_s=a.onset_s + shift) for a in hypnogram.annotations)
    return replace(psg, annotations=psg.annotations + anns)


# ---------------------------------------------------------------- channels


def _normalize_label(label: str) -> str:
    return " ".join(label.split()).casefold()


def select_channel(recording: Recording, label: str) -> tuple[np.ndarray, float]:
    """Return ``(samples, sampling_rate_hz)`` of the single channel matching ``label``."""
    wanted = _normalize_label(label)
    matches = [c for c in recording.channels if _normalize_label(c.label) == wanted]
    if not matches:
        available = ", ".join(repr(c.label) for c in recording.channels)
        raise ChannelNotFound(f"no channel {label!r}; available: {available}")
    if len(matches) > 1:
        raise AmbiguousChannel(f"{len(matches)} channels match {label!r}")
    return matches[0].samples, matches[0].sampling_rate_hz


# ---------------------------------------------------------------- stages

_STAGE_TABLE = {
    "w": Stage.WAKE,
    "1": Stage.N1,
    "2": Stage.N2,
    "3": Stage.N3,
    "4": Stage.N3,  # R&K stage 4 merges into AASM N3
    "r": Stage.REM,
    "n1": Stage.N1,
    "n2": Stage.N2,
    "n3": Stage.N3,
    "rem": Stage.REM,
    "?": EXCLUDED,
    "m": EXCLUDED,
    "movement time": EXCLUDED,
    "unknown": EXCLUDED,
}


def stage_from_text(text: str) -> "Stage | str":
    key = " ".join(text.split()).casefold()
    key = key.removeprefix("sleep stage ").strip()
    try:
        return _STAGE_TABLE[key]
    except KeyError:
        raise UnknownStageText(f"unrecognized stage annotation {text!r}") from None


def map_stage_labels(annotations: Iterable[HypnogramAnnotation]) -> list["Stage | str"]:
    """Expand hypnogram annotations into one label per 30-second epoch.

    Labels are ``Stage`` members or ``EXCLUDED``.
    """
    labels: list[Stage | str] = []
    expected_onset = 0.0
    for ann in sorted(annotations, key=lambda a: a.onset_s):
        stage = stage_from_text(ann.stage_text)
        if not math.isclose(ann.onset_s, expected_onset, abs_tol=1e-3):
            raise UnknownStageText(
                f"hypnogram not contiguous: annotation {ann.stage_text!r} at "
                f"{ann.onset_s}s, expected {expected_onset}s"
            )
        n = ann.duration_s / EPOCH_SECONDS
        if stage is not EXCLUDED and not math.isclose(n, round(n), abs_tol=1e-6):
            raise UnknownStageText(
                f"stage annotation {ann.stage_text!r} lasts {ann.duration_s}s, "
                "not a multiple of 30s"
            )
        labels.extend([stage] * int(round(n) if stage is not EXCLUDED else math.floor(n + 1e-6)))
        expected_onset = ann.onset_s + ann.duration_s
    return labels


# ---------------------------------------------------------------- writing


def _fmt_number(value: float, width: int = 8) -> str:
    if float(value).is_integer() and len(str(int(value))) <= width:
        return str(int(value))
    for digits in range(width, -1, -1):
        text = f"{value:.{digits}f}".rstrip("0").rstrip(".")
        if len(text) <= width:
            return text
    raise InconsistentSpec(f"{value} does not fit an {width}-character EDF field")


def _pad(text: str, width: int) -> bytes:
    raw = text.encode("ascii")
    if len(raw) > width:
        raise InconsistentSpec(f"{text!r} exceeds {width} characters")
    return raw.ljust(width, b" ")


def write_edf(recording: Recording) -> bytes:
    """Serialize a recording (header, signal specs, digital samples) to EDF bytes."""
    h = recording.header
    specs = [s.spec for s in recording.signals]
    start = h.start_datetime
    fixed = b"".join(
        [
            _pad(h.version_tag, 8),
            _pad(h.patient_id, 80),
            _pad(h.recording_id, 80),
            _pad(start.strftime("%d.%m.%y"), 8),
            _pad(start.strftime("%H.%M.%S"), 8),
            _pad(str(h.header_bytes), 8),
            _pad(h.reserved, 44),
            _pad(str(h.record_count), 8),
            _pad(_fmt_number(h.record_duration_s), 8),
            _pad(str(h.signal_count), 4),
        ]
    )
    blocks = []
    for name, width in _SIGNAL_FIELDS:
        for spec in specs:
            value = getattr(spec, name)
            text = value if isinstance(value, str) else _fmt_number(value, width)
            blocks.append(_pad(text, width))
    columns = []
    for sig in recording.signals:
        digital = np.asarray(sig.digital, dtype="<i2")
        if digital.size != h.record_count * sig.spec.samples_per_record:
            raise InconsistentSpec(
                f"{sig.label!r} has {digital.size} samples, expected "
                f"{h.record_count * sig.spec.samples_per_record}"
            )
        columns.append(digital.reshape(h.record_count, sig.spec.samples_per_record))
    data = np.concatenate(columns, axis=1) if columns else np.zeros((0, 0), "<i2")
    return fixed + b"".join(blocks) + data.astype("<i2").tobytes()


def _encode_annotation_records(
    annotations: Sequence[HypnogramAnnotation], record_count: int, record_duration_s: float
) -> tuple[list[bytes], int]:
    per_record: list[list[bytes]] = [[] for _ in range(record_count)]
    for ann in annotations:
        idx = min(int(ann.onset_s // record_duration_s), record_count - 1)
        tal = f"+{_fmt_number(ann.onset_s, 32)}\x15{_fmt_number(ann.duration_s, 32)}\x14{ann.stage_text}\x14\x00"
        per_record[idx].append(tal.encode("utf-8"))
    records = []
    for i, tals in enumerate(per_record):
        keep = f"+{_fmt_number(i * record_duration_s, 32)}\x14\x14\x00".encode("ascii")
        records.append(keep + b"".join(tals))
    nbytes = max(len(r) for r in records)
    samples = (nbytes + 1) // 2
    return [r.ljust(2 * samples, b"\x00") for r in records], samples


def build_recording(
    signals: Sequence[tuple[str, np.ndarray, float]],
    *,
    record_duration_s: float = 30.0,
    annotations: Sequence[HypnogramAnnotation] = (),
    start: dt.datetime = dt.datetime(2000, 1, 1, 0, 0, 0),
    physical_range: tuple[float, float] = (-500.0, 500.0),
    digital_range: tuple[int, int] = (-32768, 32767),
    patient_id: str = "X X X X",
    recording_id: str = "Startdate X X X X",
    physical_dimension: str = "uV",
) -> Recording:
    """Quantize physical series into a Recording suitable for :func:`write_edf`.

    ``signals`` holds ``(label, physical_samples, sampling_rate_hz)``. Series
    are truncated to whole data records. With annotations an EDF+C
    annotation signal is appended.
    """
    counts = []
    for label, samples, fs in signals:
        spr = fs * record_duration_s
        if not float(spr).is_integer():
            raise InconsistentSpec(f"{label!r}: {fs} Hz x {record_duration_s}s is not whole samples")
        counts.append(len(samples) // int(spr))
    record_count = min(counts) if counts else 1

    channels = []
    for label, samples, fs in signals:
        spr = int(fs * record_duration_s)
        spec = SignalSpec(
            label=label,
            transducer="",
            physical_dimension=physical_dimension,
            physical_min=physical_range[0],
            physical_max=physical_range[1],
            digital_min=digital_range[0],
            digital_max=digital_range[1],
            samples_per_record=spr,
        )
        digital = spec.to_digital(np.asarray(samples)[: record_count * spr])
        channels.append(Channel(spec, fs, digital))

    reserved = ""
    if annotations:
        reserved = "EDF+C"
        records, spr = _encode_annotation_records(annotations, record_count, record_duration_s)
        spec = SignalSpec(ANNOTATION_LABEL, "", "", -1.0, 1.0, -32768, 32767, spr)
        digital = np.frombuffer(b"".join(records), dtype="<i2").copy()
        channels.append(Channel(spec, spr / record_duration_s, digital))

    header = EdfHeader(
        version_tag="0",
        patient_id=patient_id,
        recording_id=recording_id,
        start_datetime=start,
        header_bytes=256 + 256 * len(channels),
        record_count=record_count,
        record_duration_s=record_duration_s,
        signal_count=len(channels),
        reserved=reserved,
    )
    return Recording(header, tuple(channels), tuple(annotations))
