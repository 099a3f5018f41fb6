"""Synthetic pure-rhythm EEG for fixtures and the toy end-to-end run.

Each class gets one caricature rhythm: 10 Hz alpha (Wake-like), mixed
5/15 Hz low amplitude (N1-like), 13 Hz spindle bursts (N2-like), 1 Hz
high-amplitude slow waves (N3-like) and 2-6 Hz sawtooth trains (REM-like).
"""

from __future__ import annotations

import datetime as dt
import itertools
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .edf import EPOCH_SECONDS, HypnogramAnnotation, Recording, build_recording, write_edf
from .stages import CLASS_ORDER, EXCLUDED, Stage

HYPNOGRAM_TEXT = {
    Stage.WAKE: "Sleep stage W",
    Stage.N1: "Sleep stage 1",
    Stage.N2: "Sleep stage 2",
    Stage.N3: "Sleep stage 3",
    Stage.REM: "Sleep stage R",
    EXCLUDED: "Movement time",
}


def synth_epoch(stage: Stage | str, fs: float, rng: np.random.Generator, noise_uv: float = 3.0) -> np.ndarray:
    n = int(round(EPOCH_SECONDS * fs))
    t = np.arange(n) / fs
    jitter = lambda: rng.uniform(0.8, 1.2)  # noqa: E731
    phase = lambda: rng.uniform(0, 2 * np.pi)  # noqa: E731
    if stage == Stage.WAKE:
        x = 30 * jitter() * np.sin(2 * np.pi * 10 * t + phase())
    elif stage == Stage.N1:
        x = 6 * jitter() * np.sin(2 * np.pi * 5 * t + phase()) + 4 * jitter() * np.sin(2 * np.pi * 15 * t + phase())
    elif stage == Stage.N2:
        x = 8 * np.sin(2 * np.pi * 4 * t + phase())
        period = rng.uniform(4.0, 6.0)
        for start in np.arange(rng.uniform(0.5, 3.0), EPOCH_SECONDS - 1.5, period):
            width = rng.uniform(0.8, 1.4)
            env = np.exp(-0.5 * ((t - start - width / 2) / (width / 4)) ** 2)
            x = x + 40 * jitter() * env * np.sin(2 * np.pi * 13 * t + phase())
    elif stage == Stage.N3:
        x = 100 * jitter() * np.sin(2 * np.pi * 1.0 * t + phase())
    elif stage == Stage.REM:
        x = 4 * np.sin(2 * np.pi * 6 * t + phase())
        start = rng.uniform(0.0, 4.0)
        while start < EPOCH_SECONDS - 2.0:
            length = rng.uniform(3.0, 6.0)
            on = (t >= start) & (t < start + length)
            saw = sps.sawtooth(2 * np.pi * rng.uniform(2.0, 6.0) * t + phase(), width=0.2)
            x = x + 30 * jitter() * on * saw
            start += length + rng.uniform(2.0, 5.0)
    else:  # excluded: movement-like broadband burst
        x = 60 * rng.standard_normal(n)
    return x + noise_uv * rng.standard_normal(n)


def synth_signal(stages: Sequence[Stage | str], fs: float = 100.0, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if not stages:
        return np.zeros(0)
    return np.concatenate([synth_epoch(s, fs, rng) for s in stages])


def hypnogram_annotations(stages: Sequence[Stage | str]) -> list[HypnogramAnnotation]:
    out = []
    onset = 0.0
    for stage, run in itertools.groupby(stages):
        n = len(list(run))
        out.append(HypnogramAnnotation(onset, n * EPOCH_SECONDS, HYPNOGRAM_TEXT[stage]))
        onset += n * EPOCH_SECONDS
    return out


def balanced_stages(per_class: int, seed: int = 0, block: int = 5) -> list[Stage]:
    """``per_class`` epochs of every class, shuffled in runs of ``block`` epochs."""
    rng = np.random.default_rng(seed)
    blocks = []
    for stage in CLASS_ORDER:
        full, rest = divmod(per_class, block)
        blocks += [[stage] * block for _ in range(full)] + ([[stage] * rest] if rest else [])
    order = rng.permutation(len(blocks))
    return [s for i in order for s in blocks[i]]


def fixture_recording(
    stages: Sequence[Stage | str],
    fs: float = 100.0,
    seed: int = 0,
    channel: str = "EEG Fpz-Cz",
    with_second_channel: bool = True,
) -> Recording:
    """An EDF+ recording with the synthetic channel and an embedded hypnogram."""
    x = synth_signal(stages, fs, seed)
    signals = [(channel, x, fs)]
    if with_second_channel:
        signals.append(("EEG Pz-Oz", 0.5 * x[::-1].copy(), fs))
    return build_recording(
        signals,
        annotations=hypnogram_annotations(stages),
        start=dt.datetime(2001, 1, 1, 22, 0, 0),
        physical_range=(-500.0, 500.0),
    )


def write_fixture(path: str | Path, stages: Sequence[Stage | str], fs: float = 100.0, seed: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(write_edf(fixture_recording(stages, fs, seed)))
    return path
