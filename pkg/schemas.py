from __future__ import annotations

import os
import re
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

DEFAULT_ACCENTS = ["US", "UK", "CHN", "IND", "JAP", "KOR", "POR", "RUS"]
ASR_ONLY_ACCENTS = ["ESP", "CAN"]
THREADS_ENV_VAR = "JOINTACCENT_THREADS"

_ACCENT_CODE = re.compile(r"[A-Z][A-Z0-9]*")


def _default_threads() -> int:
    try:
        return max(int(os.environ.get(THREADS_ENV_VAR, "1")), 1)
    except ValueError:
        return 1


def _check_path(value: Optional[str]) -> Optional[str]:
    if value is not None and not Path(value).exists():
        raise ValueError(f"path does not exist: {value}")
    return value


def _check_codes(codes: list[str]) -> list[str]:
    for code in codes:
        if not _ACCENT_CODE.fullmatch(code) or code == "WB":
            raise ValueError(f"invalid accent code: {code!r}")
    if len(set(codes)) != len(codes):
        raise ValueError("accent codes must be unique")
    return codes


def _is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


# Run configuration


class CorpusSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    path: Optional[str] = Field(None, description="Existing corpus directory; synthesized when empty")
    accents: list[str] = Field(default_factory=lambda: list(DEFAULT_ACCENTS), min_length=1)
    extra_test_accents: list[str] = Field(default_factory=lambda: list(ASR_ONLY_ACCENTS))
    vocab_path: Optional[str] = None
    template_path: Optional[str] = None
    utterances_per_accent: int = Field(300, ge=1)
    eval_utterances_per_accent: int = Field(100, ge=1)
    words_per_utt_mean: float = Field(9.7, ge=1.0)
    max_words_per_utt: int = Field(24, ge=1)
    accent_shift: float = Field(6.0, ge=0.0)
    noise_sigma: float = Field(1.0, gt=0.0)
    mean_state_frames: float = Field(2.0, ge=1.0)
    silence_state_frames: float = Field(3.0, ge=1.0)
    feature_dim: int = Field(13, ge=1)
    frame_shift_seconds: float = Field(0.01, gt=0.0)
    shift_sweep: list[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0, 6.0], min_length=1)

    @field_validator("path", "vocab_path", "template_path")
    @classmethod
    def check_paths(cls, value: Optional[str]) -> Optional[str]:
        return _check_path(value)

    @field_validator("accents", "extra_test_accents")
    @classmethod
    def check_codes(cls, value: list[str]) -> list[str]:
        return _check_codes(value)


class LexiconSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    alphabet: str = Field("abcdefghijklmnopqrstuvwxyz", min_length=1)

    @field_validator("alphabet")
    @classmethod
    def check_alphabet(cls, value: str) -> str:
        if "_" in value:
            raise ValueError("alphabet must not contain '_'")
        return value.lower()


class LmSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    modes: list[Literal["mono", "multi"]] = Field(default_factory=lambda: ["mono", "multi"], min_length=1)
    unk_pseudo_count: float = Field(1.0, gt=0.0)


class AmSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    num_states: int = Field(3, ge=1)
    iterations_per_level: int = Field(4, ge=1)
    components: int = Field(2, ge=1, description="Gaussian components per state for the main run")
    density_sweep: list[int] = Field(default_factory=lambda: [1, 2, 4], min_length=1)
    variance_floor: float = Field(1e-3, gt=0.0)
    transition_floor: float = Field(1e-3, gt=0.0, lt=0.5)
    monotonic_slack: float = Field(1e-6, ge=0.0)

    @field_validator("components")
    @classmethod
    def check_components(cls, value: int) -> int:
        if not _is_power_of_two(value):
            raise ValueError("components must be a power of two")
        return value

    @field_validator("density_sweep")
    @classmethod
    def check_density_sweep(cls, value: list[int]) -> list[int]:
        bad = [v for v in value if not _is_power_of_two(v)]
        if bad:
            raise ValueError(f"density_sweep values must be powers of two: {bad}")
        return sorted(set(value))


class DecoderSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    beam: float = Field(14.0, gt=0.0)
    max_active: int = Field(7000, ge=1)
    lm_scale: float = Field(10.0, ge=0.0)
    word_insertion_penalty: float = 0.0
    optional_silence: bool = True
    silence_penalty: float = 0.0
    split: Literal["dev", "test"] = "test"


class DecisionSettings(BaseModel):
    model_config = ConfigDict(extra="forbid")

    granularity: Literal["word", "phone"] = "word"
    excluded_accents: list[str] = Field(default_factory=lambda: list(ASR_ONLY_ACCENTS))
    min_count: int = Field(20, ge=1)
    top_k: int = Field(10, ge=1)


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    corpus: CorpusSettings = Field(default_factory=CorpusSettings)
    lexicon: LexiconSettings = Field(default_factory=LexiconSettings)
    lm: LmSettings = Field(default_factory=LmSettings)
    am: AmSettings = Field(default_factory=AmSettings)
    decoder: DecoderSettings = Field(default_factory=DecoderSettings)
    decision: DecisionSettings = Field(default_factory=DecisionSettings)
    output_dir: str = "exp"
    seed: int = 0
    threads: int = Field(default_factory=_default_threads, ge=1)


# Decode output


class PhoneRecord(BaseModel):
    unit: str
    start: int = Field(..., ge=0)
    end: int = Field(..., ge=0)
    word_index: Optional[int] = None
    state_starts: Optional[list[int]] = None


class DecodeRecord(BaseModel):
    id: str
    method: Literal["mono", "multi"]
    words: list[str]
    tagged_words: Optional[list[str]] = None
    word_accents: Optional[list[Optional[str]]] = None
    pronunciation_indices: list[int] = Field(default_factory=list)
    phones: list[PhoneRecord]
    num_frames: int = Field(..., ge=1)
    total_log_score: float


# Reports


class WerCounts(BaseModel):
    substitutions: int = 0
    deletions: int = 0
    insertions: int = 0
    reference_words: int = 0
    wer: Optional[float] = Field(None, description="(S+D+I)/N * 100, undefined when N = 0")


class WerReport(BaseModel):
    per_accent: dict[str, WerCounts]
    pooled: WerCounts
    mean_of_means: Optional[float] = None
    averaging: str = "pooled over all reference words"


class AccuracyRow(BaseModel):
    correct: int = 0
    total: int = 0
    accuracy: Optional[float] = None


class AccuracyReport(BaseModel):
    per_accent: dict[str, AccuracyRow]
    pooled: AccuracyRow
    mean_of_means: Optional[float] = None
    excluded_accents: list[str] = Field(default_factory=list)
    undecidable: int = 0
    tied: int = 0
    averaging: str = "pooled over scored utterances"


class ConfusionMatrix(BaseModel):
    labels: list[str]
    matrix: list[list[Optional[float]]] = Field(..., description="row = true accent, column = predicted, percent")
    undecided: list[Optional[float]] = Field(..., description="percent of silence-only decodes per true accent")
    row_totals: list[int]


class WordAccentStats(BaseModel):
    word: str
    occurrences: int = Field(..., ge=0)
    correct: int = Field(..., ge=0)
    accuracy: float = Field(..., ge=0.0, le=1.0)
    length: int = Field(..., ge=1)


class WordRanking(BaseModel):
    min_count: int
    eligible_words: int
    top: list[WordAccentStats]
    bottom: list[WordAccentStats]
    top_average_length: Optional[float] = None
    bottom_average_length: Optional[float] = None


class SplitStats(BaseModel):
    utterances: int
    hours: float
    average_words: float
    average_seconds: float
    histogram: list[int] = Field(..., description="utterance counts in 1-second bins starting at 0 s")


class CorpusStatsReport(BaseModel):
    splits: dict[str, SplitStats]


class EvaluationReport(BaseModel):
    method: Literal["mono", "multi"]
    wer: WerReport
    acc: AccuracyReport
    confusion: ConfusionMatrix
    word_ranking: WordRanking
    corpus_stats: Optional[CorpusStatsReport] = None
    purity_rate: Optional[float] = None


class DensitySweepRow(BaseModel):
    components_per_state: int
    total_densities: int
    method: Literal["mono", "multi"]
    wer: Optional[float]
    acc: Optional[float]


class ShiftSweepRow(BaseModel):
    accent_shift: float
    oracle_frame_accuracy: float
    method: Literal["mono", "multi"]
    wer: Optional[float]
    acc: Optional[float]


class ComparisonReport(BaseModel):
    accents: list[str]
    methods: dict[str, EvaluationReport]
    corpus_stats: Optional[CorpusStatsReport] = None
    density_sweep: list[DensitySweepRow] = Field(default_factory=list)


# Corpus metadata


class CorpusMetadata(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frame_shift_seconds: float = Field(..., gt=0.0)
    feature_dim: Optional[int] = Field(None, ge=1)
