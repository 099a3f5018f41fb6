"""Specialized vision module: a modified ResNet-18 producing high-level features.

Relative to the stock ResNet-18 the last residual block of the final stage
widens its second convolution to 1024 channels, its batch norm follows, and
the block's shortcut gains a 1x1 projection (512 -> 1024). The classifier
is a fully connected layer over the flattened pre-classifier map. All
channel counts scale with ``width_scale`` for cheap tests.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint
from .errors import EmptyDataset, NonFiniteLoss, ShapeMismatch, ValidationError
from .stages import NUM_CLASSES

log = logging.getLogger(__name__)

BASE_WIDTHS = (64, 128, 256, 512)
FINAL_CHANNELS = 1024


@dataclass(frozen=True)
class VisionConfig:
    input_size: tuple[int, int, int] = (3, 224, 224)
    final_conv_out_channels: int = FINAL_CHANNELS
    num_classes: int = NUM_CLASSES
    width_scale: float = 1.0
    head: Literal["flatten", "pooled"] = "flatten"

    def __post_init__(self):
        if not 0 < self.width_scale <= 1:
            raise ValidationError(f"width_scale must be in (0, 1], got {self.width_scale}")
        if self.width_scale == 1 and self.final_conv_out_channels != FINAL_CHANNELS:
            raise ValidationError("full-width model must end in 1024 channels")
        if self.head not in ("flatten", "pooled"):
            raise ValidationError(f"unknown head {self.head!r}")

    def scaled(self, channels: int) -> int:
        return max(1, int(round(channels * self.width_scale)))

    @property
    def feature_channels(self) -> int:
        return self.scaled(self.final_conv_out_channels)

    @property
    def feature_grid(self) -> tuple[int, int]:
        # stem conv, max pool, then stride 2 in stages 2-4
        _, h, w = self.input_size
        for _ in range(5):
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w

    def digest(self) -> str:
        return checkpoint.digest_of(asdict(self))


class BasicBlock(nn.Module):
    def __init__(self, in_ch: int, mid_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, mid_ch, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(mid_ch)
        self.conv2 = nn.Conv2d(mid_ch, out_ch, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.downsample = None
        if stride != 1 or in_ch != out_ch:
            self.downsample = nn.Sequential(
                nn.Conv2d(in_ch, out_ch, 1, stride, bias=False),
                nn.BatchNorm2d(out_ch),
            )

    def forward(self, x):
        identity = x if self.downsample is None else self.downsample(x)
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + identity)


@dataclass
class SemanticFeature:
    """Pre-classifier features: pooled ``[B, C]`` and optional ``[B, C, h, w]`` map."""

    pooled: torch.Tensor
    spatial_map: torch.Tensor | None = None


class VisionModule(nn.Module):
    def __init__(self, config: VisionConfig = VisionConfig()):
        super().__init__()
        self.config = config
        c = [config.scaled(w) for w in BASE_WIDTHS]
        final = config.feature_channels
        in_ch = config.input_size[0]
        self.conv1 = nn.Conv2d(in_ch, c[0], 7, 2, 3, bias=False)
        self.bn1 = nn.BatchNorm2d(c[0])
        self.maxpool = nn.MaxPool2d(3, 2, 1)
        self.layer1 = nn.Sequential(BasicBlock(c[0], c[0], c[0]), BasicBlock(c[0], c[0], c[0]))
        self.layer2 = nn.Sequential(BasicBlock(c[0], c[1], c[1], 2), BasicBlock(c[1], c[1], c[1]))
        self.layer3 = nn.Sequential(BasicBlock(c[1], c[2], c[2], 2), BasicBlock(c[2], c[2], c[2]))
        self.layer4 = nn.Sequential(
            BasicBlock(c[2], c[3], c[3], 2),
            # widened last block: conv2/bn2 -> final channels, 1x1 shortcut projection
            BasicBlock(c[3], c[3], final),
        )
        h, w = config.feature_grid
        fc_in = final * h * w if config.head == "flatten" else final
        self.fc = nn.Linear(fc_in, config.num_classes)
        self.register_buffer("input_mean", torch.zeros(in_ch))
        self.register_buffer("input_std", torch.ones(in_ch))

    def set_normalization(self, mean: Sequence[float], std: Sequence[float]) -> None:
        self.input_mean.copy_(torch.as_tensor(mean, dtype=self.input_mean.dtype))
        self.input_std.copy_(torch.as_tensor(std, dtype=self.input_std.dtype))

    def _check(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(0)
        if tuple(x.shape[1:]) != tuple(self.config.input_size):
            raise ShapeMismatch(f"expected input {self.config.input_size}, got {tuple(x.shape[1:])}")
        return x

    def forward_features(self, x: torch.Tensor) -> SemanticFeature:
        """Pre-classifier features for images in [0, 1], shape ``[B, 3, H, W]``."""
        x = self._check(x)
        x = (x - self.input_mean[:, None, None]) / self.input_std[:, None, None]
        x = self.maxpool(F.relu(self.bn1(self.conv1(x))))
        x = self.layer4(self.layer3(self.layer2(self.layer1(x))))
        return SemanticFeature(pooled=x.mean(dim=(2, 3)), spatial_map=x)

    def classify(self, feature: SemanticFeature) -> torch.Tensor:
        if self.config.head == "flatten":
            if feature.spatial_map is None:
                raise ShapeMismatch("flatten head needs the spatial feature map")
            flat = feature.spatial_map.flatten(1)
        else:
            flat = feature.pooled
        if flat.shape[-1] != self.fc.in_features:
            raise ShapeMismatch(f"classifier expects {self.fc.in_features} features, got {flat.shape[-1]}")
        return self.fc(flat)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.classify(self.forward_features(x))


# ---------------------------------------------------------------- training


@dataclass
class TrainLogRow:
    epoch: int
    loss: float
    accuracy: float


@dataclass
class VisionTrainResult:
    model: VisionModule
    log: list[TrainLogRow]
    step_losses: list[float] = field(default_factory=list)
    seed: int = 0

    @property
    def final_loss(self) -> float:
        return self.step_losses[-1] if self.step_losses else math.nan


def channel_stats(images: torch.Tensor) -> tuple[np.ndarray, np.ndarray]:
    mean = images.mean(dim=(0, 2, 3))
    std = images.std(dim=(0, 2, 3)).clamp_min(1e-6)
    return mean.numpy(), std.numpy()


def train_vision(
    images: torch.Tensor | np.ndarray,
    labels: Sequence[int] | np.ndarray,
    *,
    config: VisionConfig = VisionConfig(),
    epochs: int = 30,
    learning_rate: float = 5e-4,
    batch_size: int = 8,
    seed: int = 0,
    max_steps: int | None = None,
    model: VisionModule | None = None,
) -> VisionTrainResult:
    """Train with cross-entropy and Adam; deterministic for a given seed.

    ``images`` is ``[N, 3, H, W]`` in [0, 1]. Input normalization statistics
    are taken from ``images``.
    """
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    if images.shape[0] == 0:
        raise EmptyDataset("no training images")
    if images.shape[0] != labels.shape[0]:
        raise ShapeMismatch("images and labels differ in length")
    if labels.min() < 0 or labels.max() >= config.num_classes:
        raise ValidationError("labels outside the class set")

    torch.manual_seed(seed)
    if model is None:
        model = VisionModule(config)
    model.set_normalization(*channel_stats(images))
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    gen = torch.Generator().manual_seed(seed)

    rows: list[TrainLogRow] = []
    step_losses: list[float] = []
    step = 0
    for epoch in range(1, epochs + 1):
        model.train()
        order = torch.randperm(images.shape[0], generator=gen)
        total, correct, loss_sum = 0, 0, 0.0
        for start in range(0, len(order), batch_size):
            if max_steps is not None and step >= max_steps:
                break
            idx = order[start : start + batch_size]
            # BatchNorm cannot train on a single sample
            if idx.numel() == 1 and len(order) > 1:
                continue
            logits = model(images[idx])
            loss = F.cross_entropy(logits, labels[idx])
            if not torch.isfinite(loss):
                raise NonFiniteLoss(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            step_losses.append(loss.item())
            loss_sum += loss.item() * idx.numel()
            correct += int((logits.argmax(1) == labels[idx]).sum())
            total += idx.numel()
        if total:
            rows.append(TrainLogRow(epoch, loss_sum / total, correct / total))
            log.info("vision epoch %d loss %.4f acc %.3f", epoch, rows[-1].loss, rows[-1].accuracy)
        if max_steps is not None and step >= max_steps:
            break
    model.eval()
    return VisionTrainResult(model, rows, step_losses, seed)


@torch.no_grad()
def predict(model: VisionModule, images: torch.Tensor | np.ndarray, batch_size: int = 32) -> np.ndarray:
    model.eval()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    out = [model(images[i : i + batch_size]).argmax(1) for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out).numpy() if out else np.zeros(0, dtype=np.int64)


@torch.no_grad()
def extract_features(model: VisionModule, images: torch.Tensor | np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Pooled pre-classifier features ``[N, C]``."""
    model.eval()
    images = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    out = [model.forward_features(images[i : i + batch_size]).pooled for i in range(0, images.shape[0], batch_size)]
    return torch.cat(out).numpy()


def write_log_csv(rows: Sequence[TrainLogRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "loss", "accuracy"])
        for r in rows:
            writer.writerow([r.epoch, f"{r.loss:.8f}", f"{r.accuracy:.6f}"])


def save_vision(model: VisionModule, path: str | Path, *, seed: int, epochs: int) -> Path:
    manifest = {
        "kind": "vision",
        "config": asdict(model.config),
        "config_digest": model.config.digest(),
        "seed": seed,
        "epochs": epochs,
    }
    return checkpoint.save_arrays(path, checkpoint.state_to_arrays(model), manifest)


def load_vision(path: str | Path) -> VisionModule:
    arrays, manifest = checkpoint.load_arrays(path)
    cfg = dict(manifest["config"])
    cfg["input_size"] = tuple(cfg["input_size"])
    model = VisionModule(VisionConfig(**cfg))
    checkpoint.load_state(model, arrays)
    model.eval()
    return model
