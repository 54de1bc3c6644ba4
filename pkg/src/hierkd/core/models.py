"""Data models for taxonomy paths, VQA instances, model transport, run logs and reports."""

from __future__ import annotations

import math
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

LETTERS: tuple[str, ...] = ("A", "B", "C", "D")
FAIL = "FAIL"
UNKNOWN_FACT = "UNKNOWN"


class Protocol(str, Enum):
    """The three inference protocols."""
    JOINT = "joint"
    INDEPENDENT = "independent"
    CONDITIONED = "conditioned"


class ParseStatus(str, Enum):
    OK = "ok"
    PARTIAL = "partial"
    FAILED = "failed"


class SamplerPolicy(str, Enum):
    """Distractor sampling policies."""
    UNIFORM = "uniform"
    SIBLING = "sibling"
    COUSIN = "cousin"
    WEIGHTED = "weighted"
    REPLAY = "replay"


# Taxonomy
class TaxNode(BaseModel):
    """A single taxonomy node."""
    model_config = ConfigDict(frozen=True)

    id: str = Field(..., min_length=1, description="Opaque node identifier")
    label: str = Field(..., min_length=1, description="Display label")
    depth: int = Field(..., ge=1, description="1 for the root")
    parent: Optional[str] = Field(None, description="Parent node id, null for the root")


class TaxPath(BaseModel):
    """Root-to-leaf path through a taxonomy."""
    model_config = ConfigDict(frozen=True)

    node_ids: List[str] = Field(..., min_length=1, description="Node ids from root to leaf")
    labels: List[str] = Field(..., min_length=1, description="Labels parallel to node_ids")

    @model_validator(mode="after")
    def _parallel(self) -> "TaxPath":
        if len(self.node_ids) != len(self.labels):
            raise ValueError("node_ids and labels must have the same length")
        return self

    def __len__(self) -> int:
        return len(self.node_ids)

    @property
    def leaf(self) -> str:
        return self.node_ids[-1]


# Instances
class LevelQuestion(BaseModel):
    """One multiple-choice question of an instance's ladder."""
    model_config = ConfigDict(frozen=True)

    level_index: int = Field(..., ge=1, description="1-based position in the ladder")
    level_name: str = Field(..., description="Taxonomy level name, e.g. 'order'")
    question_text: str = Field(..., description="Rendered question sentence")
    options: List[str] = Field(..., min_length=1, max_length=4, description="Labels in A-D order")
    gold_letter: str = Field(..., description="Letter of the gold label")

    @model_validator(mode="after")
    def _check_options(self) -> "LevelQuestion":
        if len(set(self.options)) != len(self.options):
            raise ValueError(f"level {self.level_index}: options must be distinct")
        if self.gold_letter not in self.letters:
            raise ValueError(f"level {self.level_index}: gold letter {self.gold_letter!r} not among rendered letters")
        return self

    @property
    def letters(self) -> List[str]:
        return list(LETTERS[: len(self.options)])

    @property
    def gold_label(self) -> str:
        return self.options[LETTERS.index(self.gold_letter)]

    def label_for(self, letter: str) -> Optional[str]:
        """Map a letter to its label, None for FAIL or letters beyond the options."""
        if letter in self.letters:
            return self.options[LETTERS.index(letter)]
        return None


class VqaInstance(BaseModel):
    """An image together with its full ladder of per-level questions."""
    model_config = ConfigDict(frozen=True)

    instance_id: str = Field(..., min_length=1)
    image_ref: str = Field(..., description="Path, URL or synthetic id of the image")
    gold_path: TaxPath
    per_level: List[LevelQuestion] = Field(..., min_length=1)
    levels_asked: List[int] = Field(default_factory=list, description="Tree depths asked, parallel to per_level")

    @model_validator(mode="after")
    def _check_ladder(self) -> "VqaInstance":
        depths = self.levels_asked or list(range(1, len(self.gold_path) + 1))
        if len(depths) != len(self.per_level):
            raise ValueError("per_level must have one question per asked level")
        for position, (question, depth) in enumerate(zip(self.per_level, depths), start=1):
            if question.level_index != position:
                raise ValueError(f"question {position} has level_index {question.level_index}")
            if not 1 <= depth <= len(self.gold_path):
                raise ValueError(f"asked depth {depth} outside the gold path")
            if question.gold_label != self.gold_path.labels[depth - 1]:
                raise ValueError(f"level {position}: gold letter does not point at the gold label")
        return self

    @property
    def path_length(self) -> int:
        """L_i, the number of questions asked for this image."""
        return len(self.per_level)

    @property
    def gold_letters(self) -> List[str]:
        return [q.gold_letter for q in self.per_level]

    @property
    def gold_labels(self) -> List[str]:
        return [q.gold_label for q in self.per_level]


# Prompting
class PromptBundle(BaseModel):
    text: str
    expected_letters: int = Field(..., ge=1)
    letter_vocabulary: List[List[str]] = Field(..., description="Allowed letters per answer position")

    @model_validator(mode="after")
    def _check_vocabulary(self) -> "PromptBundle":
        if len(self.letter_vocabulary) != self.expected_letters:
            raise ValueError("one vocabulary per expected letter")
        return self


class ParsedAnswer(BaseModel):
    letters: List[str]
    raw: str
    parse_status: ParseStatus

    @model_validator(mode="after")
    def _check_status(self) -> "ParsedAnswer":
        if self.parse_status == ParseStatus.OK and FAIL in self.letters:
            raise ValueError("FAIL entries require a partial or failed status")
        return self


# Backends
class DecodeConfig(BaseModel):
    """Decoding settings passed through to the model backend."""
    model_config = ConfigDict(frozen=True)

    max_new_tokens: int = Field(32, ge=1)
    greedy: bool = Field(True, description="Return the mode of the model's distribution")
    temperature: float = Field(1.0, gt=0)
    top_p: float = Field(1.0, gt=0, le=1)


class ModelRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    prompt: str = Field(..., min_length=1)
    image_ref: str = ""
    decode: DecodeConfig = Field(default_factory=DecodeConfig)


class ModelResponse(BaseModel):
    text: str
    option_probabilities: Optional[Dict[str, float]] = Field(None, description="Letter -> probability")
    latency_ms: float = Field(0.0, ge=0)
    attempts: int = Field(1, ge=1, description="Transport attempts including retries")

    @field_validator("option_probabilities")
    @classmethod
    def _sums_to_one(cls, value: Optional[Dict[str, float]]) -> Optional[Dict[str, float]]:
        if value is not None and abs(math.fsum(value.values()) - 1.0) > 1e-6:
            raise ValueError("option probabilities must sum to 1")
        return value


# Harness
class Transcript(BaseModel):
    prompt: str
    response: str


class PredictionRecord(BaseModel):
    """Per-instance outcome of one protocol run."""
    instance_id: str
    protocol: Protocol
    predicted_letters: List[str]
    predicted_labels: List[str]
    correct_mask: List[bool]
    transcripts: List[Transcript] = Field(default_factory=list)
    status: ParseStatus = ParseStatus.OK
    error: Optional[str] = Field(None, description="Backend error message, if any call failed")
    attempts: int = Field(0, ge=0, description="Transport attempts summed over calls")
    levels_asked: List[int] = Field(default_factory=list, description="Tree depths asked, parallel to correct_mask")

    @model_validator(mode="after")
    def _check_lengths(self) -> "PredictionRecord":
        n = len(self.correct_mask)
        if len(self.predicted_letters) != n or len(self.predicted_labels) != n:
            raise ValueError("letters, labels and correct_mask must have the same length")
        if self.levels_asked and len(self.levels_asked) != n:
            raise ValueError("levels_asked must have one depth per level")
        for letter, correct in zip(self.predicted_letters, self.correct_mask):
            if letter == FAIL and correct:
                raise ValueError("a FAIL level can never be correct")
        return self


class RunTotals(BaseModel):
    calls: int = 0
    attempts: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    wall_clock_s: float = 0.0


class RunLog(BaseModel):
    run_id: str
    protocol: Protocol
    backend: Dict[str, Any] = Field(default_factory=dict, description="Backend descriptor")
    decode: DecodeConfig = Field(default_factory=DecodeConfig)
    seed: int = 0
    config: Dict[str, Any] = Field(default_factory=dict, description="Resolved config that produced the run")
    records: List[PredictionRecord] = Field(default_factory=list)
    totals: RunTotals = Field(default_factory=RunTotals)
    started_at: Optional[str] = None
    finished_at: Optional[str] = None


# Metrics
class ConditionalAccuracy(BaseModel):
    level: int = Field(..., ge=1, description="Parent level l; accuracies are measured at l+1")
    acc_given_correct: Optional[float] = None
    acc_given_error: Optional[float] = None
    delta: Optional[float] = None
    n_correct: int = 0
    n_error: int = 0


class DepthRow(BaseModel):
    level: int
    acc: Optional[float]
    acc_given_correct: Optional[float] = None
    acc_given_error: Optional[float] = None
    delta: Optional[float] = None
    singleton: bool = False


class MetricReport(BaseModel):
    hca: float = Field(..., ge=0, le=1)
    leaf_acc: float = Field(..., ge=0, le=1)
    por: float = Field(..., ge=0, le=1)
    s_por: float = Field(..., ge=0, le=1)
    tor: Optional[float] = Field(None, ge=0, le=1, description="Absent when no sample has two levels")
    per_level_acc: List[Optional[float]] = Field(default_factory=list)
    conditional: List[ConditionalAccuracy] = Field(default_factory=list)
    depthwise: List[DepthRow] = Field(default_factory=list, description="Depth table with singleton levels removed when requested")
    n_samples: int = Field(..., ge=1)
    excluded_counts: Dict[str, int] = Field(default_factory=dict)
    spor_variant: str = "block"


class ForgettingReport(BaseModel):
    acc_base: float = Field(..., gt=0, le=1)
    acc_after: float = Field(..., ge=0, le=1)
    delta_pp: float
    rel_forget_pct: float
    ratio: float = Field(..., description="acc_after / acc_base")


# Distillation
class LossWeights(BaseModel):
    """Weights of the hard, soft and feature terms plus the KD temperature."""
    model_config = ConfigDict(frozen=True)

    lambda_hard: float = Field(2.0, ge=0)
    lambda_soft: float = Field(1.0, ge=0)
    lambda_feat: float = Field(0.5, ge=0)
    kd_temperature: float = Field(1.0, gt=0)

    @model_validator(mode="after")
    def _not_all_zero(self) -> "LossWeights":
        if self.lambda_hard == 0 and self.lambda_soft == 0 and self.lambda_feat == 0:
            raise ValueError("at least one loss weight must be positive")
        return self
