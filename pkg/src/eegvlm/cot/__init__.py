"""Stage-wise chain-of-thought data generation."""

from .client import (
    FlakyClient,
    HttpVLMClient,
    MockVLMClient,
    ResponseCache,
    StageAnalysis,
    image_digest,
    parse_analysis,
    query_vlm,
)
from .dataset import (
    SUMMARY_BANK,
    AssembledAnswer,
    CotDataset,
    CotInput,
    CotRecord,
    assemble_answer,
    build_cot_dataset,
    export_jsonl,
    read_jsonl,
    resolve_conflict,
    to_llava_conversations,
)
from .prompts import DIRECT_QUESTION, OVERALL_QUESTION, PROFILES, StageProfile, SubPrompt, build_stage_prompts
