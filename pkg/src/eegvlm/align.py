"""Low-level patch encoder, shared projection and multi-level feature alignment.

Patch tokens ``Z_v`` come from an interchangeable encoder; both ``Z_v`` and
the pooled high-level feature ``Z_f`` go through the same two-layer
projection, and the projected high-level token is broadcast over the patch
axis and added to the projected patch tokens.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
from torch import nn

from .errors import EncoderUnavailable, InvalidP, ShapeMismatch, ValidationError
from .render import EpochImage

TOKEN_DIM = 1024


class FusionMode(str, enum.Enum):
    """Wirings of the high-level token, named after the ablation rows."""

    PATCH_ALIGNED = "patch-aligned"
    RAW_HF = "raw-hf"
    WO_FEATURE_EMBEDDING = "wo-feature-embedding"


# ---------------------------------------------------------------- encoders


class LowLevelEncoder(Protocol):
    token_dim: int

    def patch_grid(self, height: int, width: int) -> tuple[int, int]: ...

    def encode(self, image: EpochImage | np.ndarray) -> np.ndarray: ...

    def encode_batch(self, images: np.ndarray) -> np.ndarray: ...


def _as_chw(image: EpochImage | np.ndarray) -> np.ndarray:
    if isinstance(image, EpochImage):
        return image.to_float()
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        arr = arr.transpose(2, 0, 1).astype(np.float32) / 255.0
    return arr.astype(np.float32)


class ToyPatchEncoder:
    """Non-overlapping patches, each linearly embedded with fixed random weights."""

    def __init__(self, patch_size: int = 14, token_dim: int = TOKEN_DIM, channels: int = 3, seed: int = 0):
        self.patch_size = patch_size
        self.token_dim = token_dim
        self.seed = seed
        rng = np.random.default_rng(seed)
        fan_in = channels * patch_size * patch_size
        self.weight = (rng.standard_normal((fan_in, token_dim)) / np.sqrt(fan_in)).astype(np.float32)
        self.bias = (0.01 * rng.standard_normal(token_dim)).astype(np.float32)

    def patch_grid(self, height: int, width: int) -> tuple[int, int]:
        p = self.patch_size
        if height % p or width % p:
            raise ShapeMismatch(f"image {height}x{width} is not divisible into {p}-px patches")
        return height // p, width // p

    def patches(self, images: np.ndarray) -> np.ndarray:
        """``[N, C, H, W]`` -> ``[N, P, C*p*p]`` in row-major patch order."""
        n, c, h, w = images.shape
        gh, gw = self.patch_grid(h, w)
        p = self.patch_size
        x = images.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
        return x.reshape(n, gh * gw, c * p * p)

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1] * self.patch_size**2 != self.weight.shape[0]:
            raise ShapeMismatch(f"unexpected image batch shape {images.shape}")
        # ink (dark pixels) -> positive activation, white background -> 0
        return (1.0 - self.patches(images)) @ self.weight + self.bias

    def encode(self, image: EpochImage | np.ndarray) -> np.ndarray:
        return self.encode_batch(_as_chw(image)[None])[0]


class ClipVitL14Encoder:
    """Pretrained CLIP ViT-L/14 patch features (penultimate layer, CLS dropped).

    Requires ``transformers`` and locally cached weights.
    """

    model_name = "openai/clip-vit-large-patch14"
    token_dim = TOKEN_DIM

    def __init__(self, model_name: str | None = None):
        try:
            from transformers import CLIPImageProcessor, CLIPVisionModel

            name = model_name or self.model_name
            self.processor = CLIPImageProcessor.from_pretrained(name, local_files_only=True)
            self.model = CLIPVisionModel.from_pretrained(name, local_files_only=True).eval()
        except Exception as exc:  # noqa: BLE001 - any load failure means unavailable
            raise EncoderUnavailable(f"CLIP encoder could not be loaded: {exc}") from exc

    def patch_grid(self, height: int, width: int) -> tuple[int, int]:
        return 16, 16

    @torch.no_grad()
    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        imgs = [np.rint(np.asarray(im).transpose(1, 2, 0) * 255).astype(np.uint8) for im in images]
        inputs = self.processor(images=imgs, return_tensors="pt")
        out = self.model(**inputs, output_hidden_states=True)
        return out.hidden_states[-2][:, 1:, :].numpy()

    def encode(self, image: EpochImage | np.ndarray) -> np.ndarray:
        return self.encode_batch(_as_chw(image)[None])[0]


ENCODERS: dict[str, Callable[..., LowLevelEncoder]] = {
    "toy-patch": ToyPatchEncoder,
    "clip-vit-l14": ClipVitL14Encoder,
}


def get_encoder(encoder_id: str, **kwargs) -> LowLevelEncoder:
    try:
        factory = ENCODERS[encoder_id]
    except KeyError:
        raise EncoderUnavailable(f"unknown encoder {encoder_id!r}; known: {sorted(ENCODERS)}") from None
    return factory(**kwargs)


def encode_low_level(image: EpochImage | np.ndarray, encoder: LowLevelEncoder) -> np.ndarray:
    return encoder.encode(image)


# ---------------------------------------------------------------- projection


class ProjectionW(nn.Module):
    """Two affine layers with GELU between them (GELU(0) == 0)."""

    def __init__(self, out_dim: int, in_dim: int = TOKEN_DIM, hidden_dim: int | None = None):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.fc1 = nn.Linear(in_dim, hidden_dim or out_dim)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim or out_dim, out_dim)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(z)))


def project(z, w: ProjectionW):
    """Map rows ``[..., in_dim]`` through ``w``; numpy in gives numpy out."""
    if z.shape[-1] != w.in_dim:
        raise ShapeMismatch(f"projection expects trailing dim {w.in_dim}, got {z.shape[-1]}")
    if isinstance(z, torch.Tensor):
        return w(z)
    with torch.no_grad():
        return w(torch.as_tensor(np.asarray(z), dtype=w.fc1.weight.dtype)).numpy()


# ---------------------------------------------------------------- alignment


def expand(h_f, p: int):
    """Replicate the single row of ``h_f`` (``[..., 1, D]``) ``p`` times."""
    if int(p) != p or p < 1:
        raise InvalidP(f"patch count must be >= 1, got {p}")
    if h_f.shape[-2] != 1:
        raise ShapeMismatch(f"expected one high-level token, got {h_f.shape[-2]}")
    if isinstance(h_f, torch.Tensor):
        return h_f.expand(*h_f.shape[:-2], int(p), h_f.shape[-1])
    return np.repeat(np.asarray(h_f), int(p), axis=-2)


def align(h_v, h_f):
    """Patch-aligned high-level tokens: ``h_v + expand(h_f, P)``."""
    if h_v.shape[-1] != h_f.shape[-1]:
        raise ShapeMismatch(f"embedding dims differ: {h_v.shape[-1]} vs {h_f.shape[-1]}")
    if h_v.shape[:-2] != h_f.shape[:-2]:
        raise ShapeMismatch(f"batch shapes differ: {tuple(h_v.shape)} vs {tuple(h_f.shape)}")
    return h_v + expand(h_f, h_v.shape[-2])


@dataclass
class EmbeddingTokens:
    h_v: torch.Tensor
    h_f: torch.Tensor
    h_f_prime: torch.Tensor


def embed_visual(z_v, z_f, w: ProjectionW) -> EmbeddingTokens:
    """Project patch tokens ``[..., P, 1024]`` and pooled features ``[..., 1024]`` through one W."""
    h_v = project(z_v, w)
    h_f = project(z_f, w)
    h_f = h_f[..., None, :]
    return EmbeddingTokens(h_v, h_f, align(h_v, h_f))


def visual_prefix(tokens: EmbeddingTokens, mode: FusionMode | str) -> list:
    """Visual blocks placed before the text tokens for a given fusion wiring."""
    mode = FusionMode(mode)
    if mode is FusionMode.PATCH_ALIGNED:
        return [tokens.h_v, tokens.h_f_prime]
    if mode is FusionMode.RAW_HF:
        return [tokens.h_v, tokens.h_f]
    if mode is FusionMode.WO_FEATURE_EMBEDDING:
        return [tokens.h_v]
    raise ValidationError(f"unknown fusion mode {mode!r}")
