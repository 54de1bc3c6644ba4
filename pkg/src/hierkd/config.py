"""Configuration management for hierkd."""

from __future__ import annotations

import json
import logging
import os
import re
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar

from pydantic import BaseModel, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict
from rich.logging import RichHandler

from hierkd.core.errors import ConfigError
from hierkd.core.models import DecodeConfig, LossWeights, SamplerPolicy

DEFAULT_SEEDS: List[int] = [42, 21, 87, 13, 100]


class BackendKind(str, Enum):
    """Supported model backends."""
    GOLD = "gold"  # scripted to answer the gold letters
    MOCK_CONDITIONAL = "mock_conditional"
    REPLAY = "replay"
    HTTP = "http"


class ProjectorInit(str, Enum):
    IDENTITY = "identity"
    ORTHOGONAL = "orthogonal"


class Settings(BaseSettings):
    """Process-wide defaults, overridable through HIERKD_* variables or a .env file."""

    log_level: str = "INFO"

    # HTTP chat backend
    api_base_url: str = "http://localhost:8000/v1"
    api_model: str = "llava-onevision-qwen2-7b-ov"
    api_key_env: str = "HIERKD_API_KEY"
    request_timeout_s: float = 60.0
    max_retries: int = 3
    backoff_min_s: float = 0.5
    backoff_max_s: float = 8.0
    max_in_flight: int = 4

    # Harness
    harness_workers: int = 4

    # Experiments
    seeds: List[int] = Field(default_factory=lambda: list(DEFAULT_SEEDS))
    split_ratio: Tuple[int, int, int] = (6, 2, 2)

    model_config = SettingsConfigDict(
        env_prefix="HIERKD_",
        env_file=".env",
        case_sensitive=False,
        extra="ignore",
    )


# Global settings instance
settings = Settings()


class BackendConfig(BaseModel):
    """Backend descriptor as stored in config documents and run headers."""
    kind: BackendKind = Field(..., description="Which backend implementation to build")
    seed: int = Field(0, description="Seed for stochastic mock backends")

    # mock_conditional
    accuracy_with_parent: float = Field(0.9, ge=0, le=1)
    accuracy_without: float = Field(0.6, ge=0, le=1)
    joint_collapse: float = Field(0.0, ge=0, le=1, description="Chance a joint answer repeats the previous letter")

    # http
    base_url: Optional[str] = None
    model: Optional[str] = None
    api_key_env: Optional[str] = Field(None, description="Name of the variable holding the bearer token")
    timeout_s: Optional[float] = Field(None, gt=0)
    max_retries: Optional[int] = Field(None, ge=0)
    max_in_flight: Optional[int] = Field(None, ge=1)

    # replay / recording
    replay_log: Optional[str] = None
    record_log: Optional[str] = Field(None, description="Write a replay log of every call to this path")


class RunConfig(BaseModel):
    """Fully resolved parameters of one CLI invocation, embedded in output headers."""
    command: str
    parameters: Dict[str, Any] = Field(default_factory=dict)
    backend: Optional[BackendConfig] = None
    decode: Optional[DecodeConfig] = None
    seeds: List[int] = Field(default_factory=list)
    paths: Dict[str, str] = Field(default_factory=dict)
    version: str = "0.1.0"


class WorldConfig(BaseModel):
    """Synthetic world used by the distillation engine."""
    branching: List[int] = Field(default_factory=lambda: [4, 2, 2, 2, 2, 2])
    feature_dim: int = Field(16, ge=4)
    noise_scale: float = Field(0.1, gt=0)
    coarse_scale: float = Field(3.0, gt=0, description="Norm of the first asked level's code")
    fine_scale: float = Field(1.0, gt=0)
    n_train: int = Field(2000, ge=1)
    n_val: int = Field(500, ge=1)
    sampler: SamplerPolicy = SamplerPolicy.COUSIN


class ScorerConfig(BaseModel):
    hidden_dim: int = Field(32, ge=1)
    embed_dim: int = Field(16, ge=1)
    init_scale: float = Field(1.0, gt=0)


class OptimizerConfig(BaseModel):
    """AdamW with cosine schedule; lr is 100x the large-model value for the toy scale."""
    lr: float = Field(2e-3, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = Field(0.01, ge=0)
    warmup_ratio: float = Field(0.03, ge=0, lt=1)
    grad_clip: Optional[float] = Field(1.0, gt=0)
    batch_size: int = Field(8, ge=1)
    grad_accum_steps: int = Field(1, ge=1)
    epochs: int = Field(5, ge=1)


class PretrainConfig(BaseModel):
    optimizer: OptimizerConfig = Field(
        default_factory=lambda: OptimizerConfig(lr=1e-2, batch_size=32, epochs=30, weight_decay=0.0)
    )


class DistillConfig(BaseModel):
    """Everything needed to pretrain a base scorer and distill it."""
    seed: int = 42
    world: WorldConfig = Field(default_factory=WorldConfig)
    scorer: ScorerConfig = Field(default_factory=ScorerConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    projector_init: ProjectorInit = ProjectorInit.ORTHOGONAL
    per_level_projector: bool = False
    select_best_epoch: bool = Field(True, description="Return the epoch with the best validation HCA")


_ENV_PATTERN = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)(?::-([^}]*))?\}")


def interpolate_env(text: str, environ: Optional[Dict[str, str]] = None) -> str:
    """Replace ${VAR} and ${VAR:-default} with values from the environment."""
    env = os.environ if environ is None else environ

    def _sub(match: re.Match[str]) -> str:
        name, default = match.group(1), match.group(2)
        if name in env:
            return env[name]
        if default is not None:
            return default
        raise ConfigError(f"environment variable {name} is not set")

    return _ENV_PATTERN.sub(_sub, text)


def load_config_document(path: str | Path) -> Dict[str, Any]:
    """Read a JSON config document with environment interpolation."""
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {path}", detail=str(e)) from e
    try:
        document = json.loads(interpolate_env(raw))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON", detail=str(e)) from e
    if not isinstance(document, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    return document


M = TypeVar("M", bound=BaseModel)


def parse_config(model: Type[M], document: Dict[str, Any], source: str = "<config>") -> M:
    try:
        return model.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"invalid {model.__name__} in {source}", detail=str(e)) from e


def load_backend_config(path: str | Path) -> BackendConfig:
    return parse_config(BackendConfig, load_config_document(path), str(path))


def load_distill_config(path: Optional[str | Path]) -> DistillConfig:
    if path is None:
        return DistillConfig()
    return parse_config(DistillConfig, load_config_document(path), str(path))


def setup_logging(level: Optional[str] = None) -> None:
    """Route library logging through rich."""
    logging.basicConfig(
        level=(level or settings.log_level).upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, show_path=False)],
        force=True,
    )
