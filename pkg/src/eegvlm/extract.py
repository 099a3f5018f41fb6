"""Pull a sleep-stage decision out of free text."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import NoStageFound
from .stages import Stage

# Single-letter forms are case-sensitive; "W/" excludes things like "W/O".
_PATTERNS: list[tuple[Stage, re.Pattern]] = [
    (Stage.WAKE, re.compile(r"\bwake\b", re.IGNORECASE)),
    (Stage.WAKE, re.compile(r"\bW\b(?!/)")),
    (Stage.N1, re.compile(r"\bN1\b", re.IGNORECASE)),
    (Stage.N1, re.compile(r"\bstage\s*1\b", re.IGNORECASE)),
    (Stage.N2, re.compile(r"\bN2\b", re.IGNORECASE)),
    (Stage.N2, re.compile(r"\bstage\s*2\b", re.IGNORECASE)),
    (Stage.N3, re.compile(r"\bN3\b", re.IGNORECASE)),
    (Stage.N3, re.compile(r"\bSWS\b")),
    (Stage.N3, re.compile(r"\bslow[- ]wave sleep\b", re.IGNORECASE)),
    (Stage.N3, re.compile(r"\bstage\s*[34]\b", re.IGNORECASE)),
    (Stage.REM, re.compile(r"\bREM\b", re.IGNORECASE)),
    (Stage.REM, re.compile(r"\bR\b(?!/)")),
]


@dataclass(frozen=True)
class StagePrediction:
    label: Stage
    raw_text: str
    extraction_site: int


def stage_mentions(text: str) -> list[tuple[int, Stage]]:
    found = []
    for stage, pattern in _PATTERNS:
        found.extend((m.start(), stage) for m in pattern.finditer(text))
    return sorted(found, key=lambda t: t[0])


def extract_stage(text: str) -> StagePrediction:
    """The last stage mentioned in ``text`` wins."""
    mentions = stage_mentions(text)
    if not mentions:
        raise NoStageFound(f"no sleep stage mentioned in {text[:80]!r}")
    offset, stage = mentions[-1]
    return StagePrediction(stage, text, offset)
