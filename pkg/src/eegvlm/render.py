"""Rasterize an epoch waveform into the RGB image consumed by the vision paths."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo

from .errors import DegenerateEpoch, ValidationError
from .preprocess import LabeledEpoch
from .stages import Stage

# Supersampling factor; the box-filtered downsample gives the anti-aliasing.
_SUPERSAMPLE = 4
DIGEST_KEY = "eegvlm-digest"


@dataclass(frozen=True)
class RenderConfig:
    width_px: int = 224
    height_px: int = 224
    amplitude_range_uv: float = 150.0
    line_width_px: int = 1
    margins_px: int = 0
    background: tuple[int, int, int] = (255, 255, 255)
    trace_color: tuple[int, int, int] = (0, 0, 0)

    def __post_init__(self):
        if self.width_px < 32 or self.height_px < 32:
            raise ValidationError("render size must be at least 32x32")
        if not self.amplitude_range_uv > 0:
            raise ValidationError("amplitude_range_uv must be positive")
        if self.line_width_px < 1:
            raise ValidationError("line_width_px must be >= 1")
        if not 0 <= 2 * self.margins_px < min(self.width_px, self.height_px):
            raise ValidationError("margins leave no drawing area")

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class EpochImage:
    pixels: np.ndarray  # (H, W, 3) uint8
    source_id: str
    epoch_index: int
    config_digest: str
    stage: Stage | None = None

    def to_float(self) -> np.ndarray:
        """Channels-first float32 array scaled to [0, 1]."""
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1), dtype=np.float32) / 255.0

    def digest(self) -> str:
        return hashlib.sha256(self.pixels.tobytes()).hexdigest()

    @property
    def filename(self) -> str:
        stage = self.stage.value if self.stage is not None else "unlabeled"
        return f"{self.source_id}_{self.epoch_index}_{stage}.png"


def trace_coordinates(samples: np.ndarray, config: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-space (x, y) of each sample; y is clipped to the drawing area."""
    n = samples.size
    m = config.margins_px
    x = m + np.arange(n) * (config.width_px - 1 - 2 * m) / (n - 1)
    amp = config.amplitude_range_uv
    clipped = np.clip(samples, -amp, amp)
    y = m + (amp - clipped) / (2 * amp) * (config.height_px - 1 - 2 * m)
    return x, y


def render_epoch(epoch: LabeledEpoch, config: RenderConfig = RenderConfig()) -> EpochImage:
    samples = np.asarray(epoch.samples, dtype=np.float64)
    if samples.size < 2:
        raise DegenerateEpoch(f"need at least 2 samples, got {samples.size}")
    x, y = trace_coordinates(samples, config)
    ss = _SUPERSAMPLE
    canvas = Image.new("L", (config.width_px * ss, config.height_px * ss), 255)
    draw = ImageDraw.Draw(canvas)
    # pixel centers of the supersampled grid
    pts = np.stack([x * ss + (ss - 1) / 2, y * ss + (ss - 1) / 2], axis=1)
    draw.line([tuple(p) for p in pts.tolist()], fill=0, width=config.line_width_px * ss)
    coverage = 1.0 - np.asarray(canvas.reduce(ss), dtype=np.float64) / 255.0

    bg = np.asarray(config.background, dtype=np.float64)
    fg = np.asarray(config.trace_color, dtype=np.float64)
    rgb = bg + coverage[..., None] * (fg - bg)
    pixels = np.rint(rgb).astype(np.uint8)
    return EpochImage(pixels, epoch.source_id, epoch.epoch_index, config.digest(), epoch.stage)


def content_digest(epoch: LabeledEpoch, config: RenderConfig) -> str:
    h = hashlib.sha256()
    h.update(np.asarray(epoch.samples, dtype="<f8").tobytes())
    h.update(config.digest().encode())
    h.update(f"{epoch.source_id}:{epoch.epoch_index}:{epoch.stage}".encode())
    return h.hexdigest()


def save_png(image: EpochImage, path: str | Path, digest: str = "") -> Path:
    path = Path(path)
    info = PngInfo()
    if digest:
        info.add_text(DIGEST_KEY, digest)
    Image.fromarray(image.pixels, "RGB").save(path, format="PNG", pnginfo=info)
    return path


def png_digest(path: str | Path) -> str | None:
    try:
        with Image.open(path) as im:
            return im.text.get(DIGEST_KEY)
    except (OSError, AttributeError):
        return None


def load_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)
