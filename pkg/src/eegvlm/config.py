"""Declarative run configuration (YAML) with ablation presets."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .align import ENCODERS, FusionMode
from .checkpoint import digest_of
from .errors import ConfigInvalid
from .lm import LANGUAGE_MODELS

PRESETS: dict[str, dict[str, Any]] = {
    "patch-aligned": {"joint": {"fusion": "patch-aligned", "use_cot": True}},
    "raw-hf": {"joint": {"fusion": "raw-hf", "use_cot": True}},
    "wo-feature-embedding": {"joint": {"fusion": "wo-feature-embedding", "use_cot": True}},
    "wo-cot": {"joint": {"fusion": "patch-aligned", "use_cot": False}},
}

COT_CLIENTS = ("mock-oracle", "mock-noisy", "mock-silent", "http")


@dataclass
class RecordingSource:
    psg: str
    hypnogram: str | None = None
    id: str | None = None

    @property
    def source_id(self) -> str:
        if self.id:
            return self.id
        name = Path(self.psg).name
        return name[: -len(".edf")] if name.lower().endswith(".edf") else name


@dataclass
class FilterSection:
    low_cut_hz: float = 0.5
    high_cut_hz: float = 35.0
    warping: str = "center"
    zero_phase: bool = True


@dataclass
class RenderSection:
    width_px: int = 224
    height_px: int = 224
    amplitude_range_uv: float = 150.0
    line_width_px: int = 1
    margins_px: int = 0


@dataclass
class VisionSection:
    width_scale: float = 1.0
    head: str = "flatten"
    epochs: int = 30
    learning_rate: float = 5e-4
    batch_size: int = 8


@dataclass
class EncoderSection:
    id: str = "toy-patch"
    patch_size: int = 14
    seed: int = 0


@dataclass
class LMSection:
    id: str = "toy-lm"
    dim: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 1024
    max_answer_tokens: int = 160


@dataclass
class JointSection:
    fusion: str = "patch-aligned"
    use_cot: bool = True
    epochs: int = 2
    learning_rate: float = 3e-4
    batch_size: int = 8


@dataclass
class CotSection:
    client: str = "mock-oracle"
    url: str = ""
    model_id: str = "gpt-4o"
    per_class_quota: int = 1300
    allow_short: bool = False
    error_rate: float = 0.1
    max_workers: int = 4
    retries: int = 3
    backoff_s: float = 1.0
    timeout_s: float = 60.0
    min_interval_s: float = 0.0


@dataclass
class SplitSection:
    test_per_class: int = 75


@dataclass
class RunConfig:
    recordings: list[RecordingSource] = field(default_factory=list)
    channel: str = "EEG Fpz-Cz"
    filter: FilterSection = field(default_factory=FilterSection)
    render: RenderSection = field(default_factory=RenderSection)
    vision: VisionSection = field(default_factory=VisionSection)
    encoder: EncoderSection = field(default_factory=EncoderSection)
    lm: LMSection = field(default_factory=LMSection)
    joint: JointSection = field(default_factory=JointSection)
    cot: CotSection = field(default_factory=CotSection)
    split: SplitSection = field(default_factory=SplitSection)
    seed: int = 0
    out: str = "runs/default"
    preset: str | None = None
    skip_bad: bool = False

    @property
    def run_name(self) -> str:
        return self.preset or FusionMode(self.joint.fusion).value + ("" if self.joint.use_cot else "-wo-cot")

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        return digest_of(self.to_dict())

    def validate(self, check_paths: bool = True) -> "RunConfig":
        if self.encoder.id not in ENCODERS:
            raise ConfigInvalid(f"unknown encoder id {self.encoder.id!r}; known: {sorted(ENCODERS)}")
        if self.lm.id not in LANGUAGE_MODELS:
            raise ConfigInvalid(f"unknown language model id {self.lm.id!r}; known: {sorted(LANGUAGE_MODELS)}")
        try:
            FusionMode(self.joint.fusion)
        except ValueError:
            raise ConfigInvalid(f"unknown fusion {self.joint.fusion!r}") from None
        if self.preset is not None and self.preset not in PRESETS:
            raise ConfigInvalid(f"unknown preset {self.preset!r}; known: {sorted(PRESETS)}")
        if self.cot.client not in COT_CLIENTS:
            raise ConfigInvalid(f"unknown CoT client {self.cot.client!r}; known: {COT_CLIENTS}")
        if self.cot.client == "http" and not self.cot.url:
            raise ConfigInvalid("cot.url is required for the http client")
        if self.filter.warping not in ("center", "edges"):
            raise ConfigInvalid(f"unknown filter warping {self.filter.warping!r}")
        if self.split.test_per_class < 1:
            raise ConfigInvalid("split.test_per_class must be >= 1")
        ids = [r.source_id for r in self.recordings]
        if len(set(ids)) != len(ids):
            raise ConfigInvalid("recording ids must be unique")
        if check_paths:
            for r in self.recordings:
                for p in (r.psg, r.hypnogram):
                    if p and not Path(p).is_file():
                        raise ConfigInvalid(f"recording file not found: {p}")
        return self


def _build(cls, data: Any, where: str):
    if not is_dataclass(cls):
        return data
    if not isinstance(data, Mapping):
        raise ConfigInvalid(f"{where}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigInvalid(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        sub = _SECTION_TYPES.get((cls, name))
        if sub is list:
            if not isinstance(value, list):
                raise ConfigInvalid(f"{where}.{name}: expected a list")
            kwargs[name] = [_build(RecordingSource, v, f"{where}.{name}[{i}]") for i, v in enumerate(value)]
        elif sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}")
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigInvalid(f"{where}: {exc}") from exc


_SECTION_TYPES = {
    (RunConfig, "recordings"): list,
    (RunConfig, "filter"): FilterSection,
    (RunConfig, "render"): RenderSection,
    (RunConfig, "vision"): VisionSection,
    (RunConfig, "encoder"): EncoderSection,
    (RunConfig, "lm"): LMSection,
    (RunConfig, "joint"): JointSection,
    (RunConfig, "cot"): CotSection,
    (RunConfig, "split"): SplitSection,
}


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def config_from_dict(data: Mapping | None, overrides: Mapping | None = None) -> RunConfig:
    merged = _merge(RunConfig().to_dict(), data or {})
    preset = (overrides or {}).get("preset") or merged.get("preset")
    if preset:
        if preset not in PRESETS:
            raise ConfigInvalid(f"unknown preset {preset!r}; known: {sorted(PRESETS)}")
        merged = _merge(merged, PRESETS[preset])
    merged = _merge(merged, overrides or {})
    return _build(RunConfig, merged, "config")


def load_config(path: str | Path | None, overrides: Mapping | None = None) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
        base = Path(path).parent
        for rec in data.get("recordings", []) or []:
            for key in ("psg", "hypnogram"):
                if isinstance(rec, dict) and rec.get(key) and not Path(rec[key]).is_absolute():
                    rec[key] = str(base / rec[key])
    return config_from_dict(data, overrides)


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)
