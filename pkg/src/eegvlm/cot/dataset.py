"""Answer assembly, validity filtering and CoT dataset export."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import InsufficientData, MissingAnalysis, NoDecidableLabel, NoStageFound
from ..extract import extract_stage
from ..stages import CLASS_ORDER, Stage
from .client import ResponseCache, StageAnalysis, VLMClient, query_vlm
from .prompts import OVERALL_QUESTION, build_stage_prompts

log = logging.getLogger(__name__)

SUMMARY_BANK: tuple[str, ...] = (
    "In summary, the evidence points to {stage}.",
    "Taken together, this epoch is best classified as {stage}.",
    "Overall, the most consistent stage is {stage}.",
    "Combining the stage-wise findings, the final answer is {stage}.",
    "Weighing all observations, the epoch corresponds to {stage}.",
    "Based on the stage-by-stage review, the sleep stage is {stage}.",
    "The dominant features indicate {stage}.",
    "Final decision: {stage}.",
    "After comparing every stage, I conclude {stage}.",
    "Considering waveform morphology and frequency content, this is {stage}.",
)

# Conflict resolution when several stages report evidence: the slow-wave and
# spindle/K-complex markers outrank the LAMF stages; among those, sawtooth
# waves beat vertex sharp waves, which beat posterior alpha.
PRIORITY: tuple[Stage, ...] = (Stage.N3, Stage.N2, Stage.REM, Stage.N1, Stage.WAKE)


def resolve_conflict(stages: Iterable[Stage]) -> Stage:
    present = set(stages)
    for stage in PRIORITY:
        if stage in present:
            return stage
    raise NoDecidableLabel("no stage reported any evidence")


def pick_summary(bank: Sequence[str], selection_seed: int | str, key: str = "") -> str:
    h = hashlib.sha256(f"{selection_seed}|{key}".encode()).hexdigest()
    return bank[int(h, 16) % len(bank)]


@dataclass(frozen=True)
class AssembledAnswer:
    reasoning: str
    final_label: Stage
    conflict: bool


def assemble_answer(
    analyses: Sequence[StageAnalysis],
    summary_bank: Sequence[str] = SUMMARY_BANK,
    selection_seed: int | str = 0,
    key: str = "",
) -> AssembledAnswer:
    """Join the five stage analyses (class order) and close with one summary sentence.

    ``key`` (normally the image digest) varies the chosen summary across
    images while keeping it reproducible.
    """
    by_stage = {a.stage: a for a in analyses}
    missing = [s.value for s in CLASS_ORDER if s not in by_stage]
    if missing:
        raise MissingAnalysis(f"missing analyses for {', '.join(missing)}")
    evidence = [s for s in CLASS_ORDER if by_stage[s].evidence_flag]
    label = resolve_conflict(evidence)
    summary = pick_summary(summary_bank, selection_seed, key).format(stage=label.value)
    sections = [f"{s.value} analysis: {by_stage[s].analysis_text}" for s in CLASS_ORDER]
    reasoning = "\n".join(sections + [summary])
    # the label is read back from the summary, as a downstream consumer would
    try:
        parsed = extract_stage(summary).label
    except NoStageFound as exc:
        raise NoDecidableLabel(f"summary names no stage: {summary!r}") from exc
    return AssembledAnswer(reasoning, parsed, len(evidence) > 1)


# ---------------------------------------------------------------- dataset


@dataclass(frozen=True)
class CotInput:
    image_path: str
    image_png: bytes
    ground_truth: Stage


@dataclass(frozen=True)
class CotRecord:
    image_path: str
    question: str
    reasoning: str
    final_label: Stage | None
    ground_truth: Stage
    valid: bool
    conflict: bool = False

    def to_json(self) -> str:
        d = asdict(self)
        d["final_label"] = self.final_label.value if self.final_label else None
        d["ground_truth"] = self.ground_truth.value
        return json.dumps(d, sort_keys=True, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "CotRecord":
        d = json.loads(line)
        d["final_label"] = Stage.parse(d["final_label"]) if d["final_label"] else None
        d["ground_truth"] = Stage.parse(d["ground_truth"])
        return cls(**d)


@dataclass
class CotDataset:
    records: list[CotRecord]
    attempted: dict[str, int] = field(default_factory=dict)
    valid: dict[str, int] = field(default_factory=dict)

    @property
    def valid_records(self) -> list[CotRecord]:
        return [r for r in self.records if r.valid]


def sample_per_class(items: Sequence[CotInput], quota: int, seed: int, allow_short: bool = False) -> list[CotInput]:
    by_class: dict[Stage, list[CotInput]] = {s: [] for s in CLASS_ORDER}
    for item in items:
        by_class[item.ground_truth].append(item)
    rng = np.random.default_rng(seed)
    chosen = []
    for stage in CLASS_ORDER:
        pool = sorted(by_class[stage], key=lambda i: i.image_path)
        if len(pool) < quota and not allow_short:
            raise InsufficientData(f"{stage}: {len(pool)} epochs available, quota {quota}")
        order = rng.permutation(len(pool))[: min(quota, len(pool))]
        chosen.extend(pool[i] for i in order)
    return chosen


def build_cot_dataset(
    items: Sequence[CotInput],
    client: VLMClient,
    *,
    per_class_quota: int = 1300,
    seed: int = 0,
    allow_short: bool = False,
    cache: ResponseCache | None = None,
    max_workers: int = 4,
    retries: int = 3,
    backoff_s: float = 1.0,
    question: str = OVERALL_QUESTION,
) -> CotDataset:
    """Sample up to the quota per class and run prompt -> query -> assemble.

    Records whose final answer is missing or disagrees with the ground
    truth are kept with ``valid=False``.
    """
    chosen = sample_per_class(items, per_class_quota, seed, allow_short)
    prompts = build_stage_prompts()
    cache = cache if cache is not None else ResponseCache()

    def one(item: CotInput) -> CotRecord:
        analyses = [
            query_vlm(client, item.image_png, p, cache=cache, retries=retries, backoff_s=backoff_s)
            for p in prompts
        ]
        key = hashlib.sha256(item.image_png).hexdigest()
        try:
            ans = assemble_answer(analyses, SUMMARY_BANK, seed, key)
        except NoDecidableLabel:
            reasoning = "\n".join(f"{a.stage.value} analysis: {a.analysis_text}" for a in analyses)
            return CotRecord(item.image_path, question, reasoning, None, item.ground_truth, False)
        valid = ans.final_label == item.ground_truth
        return CotRecord(item.image_path, question, ans.reasoning, ans.final_label, item.ground_truth, valid, ans.conflict)

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        records = list(pool.map(one, chosen))

    attempted = Counter(r.ground_truth.value for r in records)
    valid = Counter(r.ground_truth.value for r in records if r.valid)
    log.info("CoT generation: %d attempted, %d valid", len(records), sum(valid.values()))
    return CotDataset(
        records,
        {s.value: attempted.get(s.value, 0) for s in CLASS_ORDER},
        {s.value: valid.get(s.value, 0) for s in CLASS_ORDER},
    )


def export_jsonl(records: Iterable[CotRecord], path: str | Path) -> Path:
    path = Path(path)
    path.write_text("".join(r.to_json() + "\n" for r in records), encoding="utf-8")
    return path


def read_jsonl(path: str | Path) -> list[CotRecord]:
    return [CotRecord.from_json(l) for l in Path(path).read_text(encoding="utf-8").splitlines() if l.strip()]


def to_llava_conversations(records: Iterable[CotRecord], valid_only: bool = True) -> list[dict]:
    """Convert records to the LLaVA instruction-tuning JSON layout."""
    out = []
    for r in records:
        if valid_only and not r.valid:
            continue
        out.append(
            {
                "id": Path(r.image_path).stem,
                "image": r.image_path,
                "conversations": [
                    {"from": "human", "value": "<image>\n" + r.question},
                    {"from": "gpt", "value": r.reasoning},
                ],
            }
        )
    return out
