"""Band-pass filtering and 30-second epoch segmentation."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy import signal as sps

from .edf import EPOCH_SECONDS
from .errors import EmptySignal, InvalidSpec, ValidationError
from .stages import EXCLUDED, Stage

Warping = Literal["center", "edges"]


@dataclass(frozen=True)
class FilterSpec:
    sampling_rate_hz: float
    low_cut_hz: float = 0.5
    high_cut_hz: float = 35.0
    analog_order: int = 1
    # "center" prewarps the geometric-mean center frequency so the digital
    # peak lands exactly on sqrt(low*high); "edges" prewarps both cutoffs.
    warping: Warping = "center"

    def validate(self) -> None:
        if self.analog_order != 1:
            raise InvalidSpec(f"only a 1st-order analog prototype is supported, got {self.analog_order}")
        nyquist = self.sampling_rate_hz / 2
        if not 0 < self.low_cut_hz < self.high_cut_hz < nyquist:
            raise InvalidSpec(
                f"need 0 < low ({self.low_cut_hz}) < high ({self.high_cut_hz}) "
                f"< Nyquist ({nyquist})"
            )
        if self.warping not in ("center", "edges"):
            raise InvalidSpec(f"unknown warping mode {self.warping!r}")

    @property
    def center_hz(self) -> float:
        return math.sqrt(self.low_cut_hz * self.high_cut_hz)


@dataclass(frozen=True)
class BiquadCoefficients:
    b: tuple[float, float, float]
    a: tuple[float, float, float]

    @property
    def poles(self) -> np.ndarray:
        return np.roots(self.a)

    @property
    def is_stable(self) -> bool:
        return bool(np.all(np.abs(self.poles) < 1.0))

    def response(self, freqs_hz: np.ndarray, fs: float) -> np.ndarray:
        """Complex frequency response at ``freqs_hz``."""
        z = np.exp(-1j * 2 * np.pi * np.asarray(freqs_hz, dtype=float) / fs)
        return np.polyval(self.b[::-1], z) / np.polyval(self.a[::-1], z)

    def time_constant_samples(self) -> float:
        r = float(np.max(np.abs(self.poles)))
        return -1.0 / math.log(r)


def design_bandpass(spec: FilterSpec) -> BiquadCoefficients:
    """Bilinear transform of the analog band-pass ``B s / (s^2 + B s + w0^2)``."""
    spec.validate()
    fs = spec.sampling_rate_hz
    k = 2.0 * fs
    if spec.warping == "edges":
        w_lo = k * math.tan(math.pi * spec.low_cut_hz / fs)
        w_hi = k * math.tan(math.pi * spec.high_cut_hz / fs)
        w0_sq = w_lo * w_hi
        bw = w_hi - w_lo
    else:
        w0 = k * math.tan(math.pi * spec.center_hz / fs)
        q = spec.center_hz / (spec.high_cut_hz - spec.low_cut_hz)
        w0_sq = w0 * w0
        bw = w0 / q

    a0 = k * k + bw * k + w0_sq
    a1 = 2.0 * (w0_sq - k * k)
    a2 = k * k - bw * k + w0_sq
    g = bw * k / a0
    coeffs = BiquadCoefficients(b=(g, 0.0, -g), a=(1.0, a1 / a0, a2 / a0))
    if not coeffs.is_stable:
        raise InvalidSpec(f"designed filter is unstable for {spec}")
    return coeffs


def _odd_extend(x: np.ndarray, n: int) -> np.ndarray:
    if n == 0:
        return x
    left = 2 * x[0] - x[n:0:-1]
    right = 2 * x[-1] - x[-2 : -n - 2 : -1]
    return np.concatenate([left, x, right])


def apply_filter(
    x: Sequence[float] | np.ndarray,
    coeffs: BiquadCoefficients,
    *,
    zero_phase: bool = True,
) -> np.ndarray:
    """Filter ``x``; zero-phase by default (forward, reverse, forward, reverse).

    The signal is odd-reflected by three time constants of the slowest pole
    and each pass starts from the steady-state filter state for its first
    sample, so constant input produces no start-up step.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise EmptySignal("cannot filter an empty signal")
    b, a = np.asarray(coeffs.b), np.asarray(coeffs.a)
    zi = sps.lfilter_zi(b, a)
    if not zero_phase:
        y, _ = sps.lfilter(b, a, x, zi=zi * x[0])
        return y

    pad = int(math.ceil(3 * coeffs.time_constant_samples()))
    pad = max(0, min(pad, x.size - 1))
    ext = _odd_extend(x, pad)
    y, _ = sps.lfilter(b, a, ext, zi=zi * ext[0])
    y = y[::-1]
    y, _ = sps.lfilter(b, a, y, zi=zi * y[0])
    y = y[::-1]
    return y[pad : pad + x.size].copy()


@dataclass(frozen=True, eq=False)
class LabeledEpoch:
    samples: np.ndarray
    sampling_rate_hz: float
    stage: Stage
    source_id: str = ""
    epoch_index: int = 0


def epoch_length(sampling_rate_hz: float) -> int:
    return int(round(EPOCH_SECONDS * sampling_rate_hz))


def segment_epochs(
    x: np.ndarray,
    sampling_rate_hz: float,
    labels: Iterable["Stage | str"],
    source_id: str = "",
) -> list[LabeledEpoch]:
    """Cut ``x`` into consecutive 30 s windows paired with ``labels``.

    Pairing stops at whichever runs out first; the incomplete tail and
    excluded epochs are dropped. ``epoch_index`` is the window position in
    the recording, so gaps remain visible after exclusion.
    """
    x = np.asarray(x, dtype=np.float64)
    n = epoch_length(sampling_rate_hz)
    if n < 1:
        raise ValidationError(f"sampling rate {sampling_rate_hz} gives empty epochs")
    out = []
    for idx, label in enumerate(labels):
        stop = (idx + 1) * n
        if stop > x.size:
            break
        if label == EXCLUDED:
            continue
        out.append(LabeledEpoch(x[idx * n : stop], sampling_rate_hz, Stage.parse(label), source_id, idx))
    return out


# ---------------------------------------------------------------- epoch store

MANIFEST = "manifest.tsv"
META = "meta.json"


@dataclass(frozen=True)
class ManifestRow:
    source_id: str
    epoch_index: int
    stage: Stage
    image_path: str = ""

    def to_line(self) -> str:
        cols = [self.source_id, str(self.epoch_index), self.stage.value]
        if self.image_path:
            cols.append(self.image_path)
        return "\t".join(cols)

    @classmethod
    def from_line(cls, line: str) -> "ManifestRow":
        cols = line.rstrip("\n").split("\t")
        if len(cols) not in (3, 4):
            raise ValidationError(f"bad manifest line {line!r}")
        return cls(cols[0], int(cols[1]), Stage.parse(cols[2]), cols[3] if len(cols) == 4 else "")


def epoch_filename(epoch_index: int) -> str:
    return f"{epoch_index:06d}.f32"


def write_epoch_store(root: str | Path, source_id: str, epochs: Sequence[LabeledEpoch], sampling_rate_hz: float) -> Path:
    """Write one recording's epochs as little-endian float32 files plus a manifest."""
    directory = Path(root) / source_id
    directory.mkdir(parents=True, exist_ok=True)
    for ep in epochs:
        ep.samples.astype("<f4").tofile(directory / epoch_filename(ep.epoch_index))
    rows = [ManifestRow(ep.source_id, ep.epoch_index, ep.stage) for ep in epochs]
    (directory / MANIFEST).write_text("".join(r.to_line() + "\n" for r in rows))
    (directory / META).write_text(json.dumps({"source_id": source_id, "sampling_rate_hz": sampling_rate_hz}))
    return directory


def read_manifest(directory: str | Path) -> list[ManifestRow]:
    text = (Path(directory) / MANIFEST).read_text()
    return [ManifestRow.from_line(line) for line in text.splitlines() if line.strip()]


def write_manifest(directory: str | Path, rows: Sequence[ManifestRow]) -> None:
    (Path(directory) / MANIFEST).write_text("".join(r.to_line() + "\n" for r in rows))


def read_epoch_store(directory: str | Path) -> list[LabeledEpoch]:
    directory = Path(directory)
    fs = json.loads((directory / META).read_text())["sampling_rate_hz"]
    out = []
    for row in read_manifest(directory):
        samples = np.fromfile(directory / epoch_filename(row.epoch_index), dtype="<f4").astype(np.float64)
        out.append(LabeledEpoch(samples, fs, row.stage, row.source_id, row.epoch_index))
    return out


def list_recordings(root: str | Path) -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(p for p in root.iterdir() if (p / MANIFEST).is_file())
