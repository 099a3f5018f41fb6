"""Stage profiles and per-stage sub-prompts."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

from ..errors import MissingProfile
from ..stages import CLASS_ORDER, Stage

TEMPLATE_VERSION = "v1"


@dataclass(frozen=True)
class StageProfile:
    stage: Stage
    descriptors: tuple[str, ...]
    pattern: str


PROFILES: dict[Stage, StageProfile] = {
    p.stage: p
    for p in (
        StageProfile(Stage.WAKE, ("Alpha Waves",), "sustained 8-13 Hz rhythm of moderate amplitude"),
        StageProfile(
            Stage.N1,
            ("Low Amplitude Mixed Frequency (LAMF: Alpha, Beta)", "Vertex Sharp Waves"),
            "low-amplitude 4-7 Hz activity mixed with faster components",
        ),
        StageProfile(
            Stage.N2,
            ("K-Complexes", "Sleep Spindles"),
            "11-16 Hz bursts lasting at least 0.5 s and large biphasic deflections",
        ),
        StageProfile(Stage.N3, ("Slow Waves",), "0.5-2 Hz waves above 75 uV peak-to-peak"),
        StageProfile(
            Stage.REM,
            ("Low Amplitude Mixed Frequency (LAMF: Beta, Theta)", "Sawtooth Waves"),
            "low-amplitude mixed activity with notched 2-6 Hz sawtooth trains",
        ),
    )
}

OVERALL_QUESTION = (
    "This image shows a 30-second single-channel EEG epoch. Analyze it stage by stage "
    "and decide which sleep stage it belongs to."
)
DIRECT_QUESTION = "This image shows a 30-second single-channel EEG epoch. Which sleep stage is it?"

_SUBPROMPT = (
    "You are an experienced sleep technologist. The image shows one 30-second "
    "single-channel EEG epoch band-passed to 0.5-35 Hz. Consider only whether it shows "
    "the features of stage {stage}: {descriptors}. Typical frequency-amplitude pattern: "
    "{pattern}. Describe which of these waveform features are visible and how prominent "
    "they are. Finish with exactly one line, either 'Evidence: present' or 'Evidence: absent'."
)


@dataclass(frozen=True)
class SubPrompt:
    stage: Stage
    prompt_text: str

    def digest(self) -> str:
        return hashlib.sha256(f"{TEMPLATE_VERSION}\n{self.prompt_text}".encode()).hexdigest()


def build_stage_prompts(epoch_ref: object = None, profiles: dict[Stage, StageProfile] = PROFILES) -> list[SubPrompt]:
    """One sub-prompt per stage in class order. The text does not depend on the epoch."""
    prompts = []
    for stage in CLASS_ORDER:
        profile = profiles.get(stage)
        if profile is None or not profile.descriptors:
            raise MissingProfile(f"no profile for stage {stage}")
        text = _SUBPROMPT.format(
            stage=stage.value, descriptors="; ".join(profile.descriptors), pattern=profile.pattern
        )
        prompts.append(SubPrompt(stage, text))
    return prompts
