"""Sleep-stage vocabulary shared by every module."""

from __future__ import annotations

import enum


class Stage(str, enum.Enum):
    WAKE = "Wake"
    N1 = "N1"
    N2 = "N2"
    N3 = "N3"
    REM = "REM"

    @property
    def index(self) -> int:
        return CLASS_ORDER.index(self)

    @classmethod
    def parse(cls, value: "str | Stage") -> "Stage":
        if isinstance(value, Stage):
            return value
        key = str(value).strip().casefold()
        for stage in cls:
            if stage.value.casefold() == key or stage.name.casefold() == key:
                return stage
        raise ValueError(f"not a sleep stage: {value!r}")

    def __str__(self) -> str:
        return self.value


# Fixed class order for logits, confusion matrices and reports.
CLASS_ORDER: tuple[Stage, ...] = (Stage.WAKE, Stage.N1, Stage.N2, Stage.N3, Stage.REM)
NUM_CLASSES = len(CLASS_ORDER)

# Marker for epochs dropped from every dataset (movement, unscored).
EXCLUDED = "Excluded"
