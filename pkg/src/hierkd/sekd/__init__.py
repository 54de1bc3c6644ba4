"""Toy self-elicited distillation engine: a per-level scorer run as a conditioned teacher and a joint student."""

from hierkd.sekd.io import load_params, save_params
from hierkd.sekd.losses import (
    LossParts,
    gradient_check,
    kl_divergence,
    loss_feat,
    loss_hard,
    loss_soft,
    loss_total,
)
from hierkd.sekd.scorer import (
    ContextMode,
    DistillSignals,
    ScorerParams,
    init_scorer,
    student_forward,
    teacher_forward,
)
from hierkd.sekd.trainer import (
    ABLATION_VARIANTS,
    CURVE_COLUMNS,
    DistillResult,
    distill,
    evaluate,
    pretrain_base,
    run_distillation,
    run_loss_ablation,
    summarize_ablation,
)
from hierkd.sekd.world import SyntheticWorld, WorldSplit, build_world

__all__ = [
    "ABLATION_VARIANTS",
    "CURVE_COLUMNS",
    "ContextMode",
    "DistillResult",
    "DistillSignals",
    "LossParts",
    "ScorerParams",
    "SyntheticWorld",
    "WorldSplit",
    "build_world",
    "distill",
    "evaluate",
    "gradient_check",
    "init_scorer",
    "kl_divergence",
    "load_params",
    "loss_feat",
    "loss_hard",
    "loss_soft",
    "loss_total",
    "pretrain_base",
    "run_distillation",
    "run_loss_ablation",
    "save_params",
    "student_forward",
    "summarize_ablation",
    "teacher_forward",
]
