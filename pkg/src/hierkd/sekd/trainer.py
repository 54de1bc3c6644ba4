"""Base pretraining, self-elicited distillation and the loss-weight sweep."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn

from hierkd.config import DistillConfig, OptimizerConfig, ProjectorInit
from hierkd.core.errors import TrainingError
from hierkd.core.models import LossWeights
from hierkd.processing.metrics import compute_hca, compute_leaf_acc, compute_per_level_accuracy
from hierkd.sekd.losses import LossParts, distill_objective, loss_hard, loss_hard_grad, loss_total
from hierkd.sekd.optim import AdamW, clip_grad_norm, cosine_lr
from hierkd.sekd.scorer import (
    ContextMode,
    DistillSignals,
    ScorerParams,
    backward,
    forward,
    init_scorer,
    softmax,
    teacher_forward,
)
from hierkd.sekd.world import SyntheticWorld, WorldSplit, build_world

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["epoch", "loss_hard", "loss_soft", "loss_feat", "loss_total", "val_hca", "val_leaf_acc"]

ABLATION_VARIANTS: Dict[str, Tuple[float, float, float]] = {
    "full": (2.0, 1.0, 0.5),
    "only_hard": (1.0, 0.0, 0.0),
    "only_soft": (0.0, 1.0, 0.0),
    "only_feat": (0.0, 0.0, 1.0),
    "without_hard": (0.0, 1.0, 0.5),
    "without_soft": (2.0, 0.0, 0.5),
    "without_feat": (2.0, 1.0, 0.0),
    "balanced": (1.0, 1.0, 1.0),
    "feature_heavy": (0.5, 1.0, 2.0),
}


@dataclass
class Evaluation:
    hca: float
    leaf_acc: float
    per_level_acc: List[Optional[float]]


def evaluate(params: ScorerParams, split: WorldSplit, mode: ContextMode) -> Evaluation:
    trace = forward(params, split.features, split.options, mode, gold_nodes=split.gold_nodes)
    masks = (trace.choices == split.gold).tolist()
    return Evaluation(compute_hca(masks), compute_leaf_acc(masks), compute_per_level_accuracy(masks))


def _batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _total_steps(n: int, opt: OptimizerConfig) -> int:
    return opt.epochs * math.ceil(math.ceil(n / opt.batch_size) / opt.grad_accum_steps)


def _check_finite(value: float, epoch: int, step: int, what: str) -> None:
    if not math.isfinite(value):
        logger.error("Diverged at epoch %d step %d: %s = %s", epoch, step, what, value)
        raise TrainingError("training diverged", detail=f"{what}={value}", epoch=epoch, step=step)


def pretrain_base(world: SyntheticWorld, config: DistillConfig) -> ScorerParams:
    """Supervised training with the gold parent in the known-facts slot.

    The result is used both as the base model and as the frozen teacher: strong
    when fed its own answers as known facts, weak when asked for the whole path
    in one pass.
    """
    rng = np.random.default_rng([config.seed, 1])
    opt_cfg = config.pretrain.optimizer
    params = init_scorer(world.n_levels, world.n_nodes, world.feature_dim, config.scorer, rng)
    optimizer = AdamW(params.arrays(), opt_cfg.lr, opt_cfg.betas, opt_cfg.eps, opt_cfg.weight_decay)
    train = world.train
    total = _total_steps(len(train), opt_cfg)
    step = 0

    for epoch in range(1, opt_cfg.epochs + 1):
        epoch_loss = 0.0
        for rows in _batches(len(train), opt_cfg.batch_size, rng):
            trace = forward(params, train.features[rows], train.options[rows], ContextMode.GOLD_FORCED, gold_nodes=train.gold_nodes[rows])
            logits = trace.logits
            loss = loss_hard(softmax(logits), train.gold[rows])
            _check_finite(loss, epoch, step, "pretrain loss")
            grads = backward(params, trace, loss_hard_grad(logits, train.gold[rows])).arrays()
            clip_grad_norm(grads, opt_cfg.grad_clip)
            optimizer.step(grads, cosine_lr(step, total, opt_cfg.lr, opt_cfg.warmup_ratio))
            step += 1
            epoch_loss += loss * len(rows)
        val = evaluate(params, world.val, ContextMode.GOLD_FORCED)
        logger.debug("Pretrain epoch %d: loss %.4f, gold-forced val HCA %.4f", epoch, epoch_loss / len(train), val.hca)

    forced = evaluate(params, world.val, ContextMode.GOLD_FORCED)
    logger.info(
        "Pretrained base: gold-forced per-level val accuracy %s",
        ", ".join(f"{a:.3f}" for a in forced.per_level_acc if a is not None),
    )
    return params


def init_projector(hidden_dim: int, n_levels: int, kind: ProjectorInit, per_level: bool, rng: np.random.Generator) -> np.ndarray:
    def one() -> np.ndarray:
        if kind is ProjectorInit.IDENTITY:
            return np.eye(hidden_dim)
        q, r = np.linalg.qr(rng.standard_normal((hidden_dim, hidden_dim)))
        return q * np.sign(np.diag(r))

    if per_level:
        return np.stack([one() for _ in range(n_levels)])
    return one()


@dataclass
class DistillResult:
    student: ScorerParams
    projector: np.ndarray
    curve: pd.DataFrame
    best_epoch: int
    teacher_val_hca: float
    base_joint_val_hca: float
    student_val_hca: float
    student_val_leaf_acc: float
    signals: Optional[DistillSignals] = field(default=None, repr=False)


def _objective(
    student: ScorerParams,
    projector: np.ndarray,
    split: WorldSplit,
    signals: DistillSignals,
    weights: LossWeights,
) -> Tuple[LossParts, Dict[str, np.ndarray]]:
    trace = forward(student, split.features, split.options, ContextMode.JOINT)
    parts, g = distill_objective(
        trace.logits, trace.anchors, signals.logits, signals.anchors, signals.hard_labels, projector, weights
    )
    grads = backward(student, trace, g.logits, g.anchors).arrays()
    grads["W"] = g.projector
    return parts, grads


def distill(
    world: SyntheticWorld,
    teacher: ScorerParams,
    student_init: ScorerParams,
    weights: LossWeights,
    optimizer_config: OptimizerConfig,
    epochs: Optional[int] = None,
    seed: int = 42,
    projector_init: ProjectorInit = ProjectorInit.ORTHOGONAL,
    per_level_projector: bool = False,
    select_best_epoch: bool = True,
    console: Optional[Console] = None,
) -> DistillResult:
    """Train a joint-mode student against the frozen conditioned teacher.

    Teacher signals are computed once over the training split. The curve has
    one row per epoch, epoch 0 being the untrained student. With
    ``select_best_epoch`` the returned student is the epoch with the best
    validation HCA (earliest on ties); otherwise the last one.

    Raises:
        TrainingError: non-finite loss, or the teacher changed during training.
    """
    epochs = epochs or optimizer_config.epochs
    rng = np.random.default_rng([seed, 2])
    teacher_before = {name: arr.copy() for name, arr in teacher.arrays().items()}
    signals = teacher_forward(teacher, world.train.features, world.train.options)
    teacher_val = evaluate(teacher, world.val, ContextMode.CONDITIONED).hca

    student = student_init.copy()
    projector = init_projector(student.hidden_dim, student.n_levels, projector_init, per_level_projector, rng)
    params = {**student.arrays(), "W": projector}
    optimizer = AdamW(
        params, optimizer_config.lr, optimizer_config.betas, optimizer_config.eps, optimizer_config.weight_decay
    )
    train = world.train
    total = _total_steps(len(train), optimizer_config.model_copy(update={"epochs": epochs}))
    accum = optimizer_config.grad_accum_steps

    def curve_row(epoch: int, parts: LossParts) -> Dict[str, float]:
        val = evaluate(student, world.val, ContextMode.JOINT)
        return {"epoch": epoch, **parts.as_dict(), "loss_total": loss_total(parts, weights), "val_hca": val.hca, "val_leaf_acc": val.leaf_acc}

    initial_parts, _ = _objective(student, projector, train, signals, weights)
    rows = [curve_row(0, initial_parts)]
    base_joint = rows[0]["val_hca"]
    best_epoch, best_hca = 0, base_joint
    best_state = (student.copy(), projector.copy())
    logger.info("Distilling: teacher conditioned val HCA %.4f, base joint val HCA %.4f", teacher_val, base_joint)

    progress = (
        Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), BarColumn(), TaskProgressColumn(), console=console)
        if console is not None
        else None
    )
    if progress is not None:
        progress.start()
        bar = progress.add_task("distill", total=epochs)
    step = 0
    try:
        for epoch in range(1, epochs + 1):
            sums = np.zeros(3)
            pending: Optional[Dict[str, np.ndarray]] = None
            batches = _batches(len(train), optimizer_config.batch_size, rng)
            for i, rows_idx in enumerate(batches, start=1):
                parts, grads = _objective(student, projector, train.subset(rows_idx), signals.take(rows_idx), weights)
                _check_finite(loss_total(parts, weights), epoch, step, "loss_total")
                sums += np.array([parts.hard, parts.soft, parts.feat]) * len(rows_idx)
                if pending is None:
                    pending = grads
                else:
                    for name in pending:
                        pending[name] += grads[name]
                if i % accum == 0 or i == len(batches):
                    if accum > 1:
                        for g in pending.values():
                            g /= accum
                    clip_grad_norm(pending, optimizer_config.grad_clip)
                    optimizer.step(pending, cosine_lr(step, total, optimizer_config.lr, optimizer_config.warmup_ratio))
                    pending = None
                    step += 1
                    if not np.all(np.isfinite(projector)):
                        raise TrainingError("training diverged", detail="non-finite projector", epoch=epoch, step=step)

            mean = sums / len(train)
            row = curve_row(epoch, LossParts(*mean))
            rows.append(row)
            logger.info(
                "Epoch %d: loss %.4f (hard %.4f, soft %.4f, feat %.4f), val HCA %.4f",
                epoch, row["loss_total"], row["loss_hard"], row["loss_soft"], row["loss_feat"], row["val_hca"],
            )
            if row["val_hca"] > best_hca:
                best_epoch, best_hca = epoch, row["val_hca"]
                best_state = (student.copy(), projector.copy())
            if progress is not None:
                progress.update(bar, advance=1)
    finally:
        if progress is not None:
            progress.stop()

    for name, before in teacher_before.items():
        if not np.array_equal(before, getattr(teacher, name)):
            raise TrainingError("teacher parameters changed during distillation", detail=name)

    if select_best_epoch:
        final_student, final_projector = best_state
    else:
        final_student, final_projector, best_epoch = student, projector, epochs
    final = evaluate(final_student, world.val, ContextMode.JOINT)
    return DistillResult(
        student=final_student,
        projector=final_projector,
        curve=pd.DataFrame(rows, columns=CURVE_COLUMNS),
        best_epoch=best_epoch,
        teacher_val_hca=teacher_val,
        base_joint_val_hca=base_joint,
        student_val_hca=final.hca,
        student_val_leaf_acc=final.leaf_acc,
        signals=signals,
    )


def run_distillation(config: DistillConfig, seed: Optional[int] = None, console: Optional[Console] = None) -> Tuple[SyntheticWorld, ScorerParams, DistillResult]:
    """World, base pretraining and distillation for one seed. Returns (world, teacher, result)."""
    world = build_world(config.world, config.seed)
    teacher = pretrain_base(world, config)
    result = distill(
        world,
        teacher,
        teacher.copy(),
        config.weights,
        config.optimizer,
        seed=config.seed if seed is None else seed,
        projector_init=config.projector_init,
        per_level_projector=config.per_level_projector,
        select_best_epoch=config.select_best_epoch,
        console=console,
    )
    return world, teacher, result


def run_loss_ablation(
    config: DistillConfig,
    variants: Optional[Sequence[str]] = None,
    seeds: Sequence[int] = (42, 21, 87, 13, 100),
    console: Optional[Console] = None,
) -> pd.DataFrame:
    """Distill one pretrained base under several loss weightings and seeds.

    The world and base are shared across all runs; the seed drives the
    projector initialisation and batch order. Rows: variant, seed, lambdas,
    base_joint_hca, teacher_hca, student_hca, best_epoch.
    """
    names = list(variants or ABLATION_VARIANTS)
    unknown = [n for n in names if n not in ABLATION_VARIANTS]
    if unknown:
        raise TrainingError(f"unknown ablation variant(s): {', '.join(unknown)}")
    world = build_world(config.world, config.seed)
    teacher = pretrain_base(world, config)
    rows = []
    for name in names:
        hard, soft, feat = ABLATION_VARIANTS[name]
        weights = LossWeights(
            lambda_hard=hard, lambda_soft=soft, lambda_feat=feat, kd_temperature=config.weights.kd_temperature
        )
        for seed in seeds:
            result = distill(
                world,
                teacher,
                teacher.copy(),
                weights,
                config.optimizer,
                seed=seed,
                projector_init=config.projector_init,
                per_level_projector=config.per_level_projector,
                select_best_epoch=config.select_best_epoch,
            )
            rows.append(
                {
                    "variant": name,
                    "seed": seed,
                    "lambda_hard": hard,
                    "lambda_soft": soft,
                    "lambda_feat": feat,
                    "base_joint_hca": result.base_joint_val_hca,
                    "teacher_hca": result.teacher_val_hca,
                    "student_hca": result.student_val_hca,
                    "best_epoch": result.best_epoch,
                }
            )
            if console is not None:
                console.print(f"  {name} seed {seed}: student HCA {result.student_val_hca:.4f}")
    return pd.DataFrame(rows)


def summarize_ablation(frame: pd.DataFrame) -> pd.DataFrame:
    """Mean and population std of student HCA per variant, in sweep order."""
    grouped = frame.groupby("variant", sort=False)
    return pd.DataFrame(
        {
            "student_hca_mean": grouped["student_hca"].mean(),
            "student_hca_std": grouped["student_hca"].std(ddof=0),
            "base_joint_hca": grouped["base_joint_hca"].mean(),
            "teacher_hca": grouped["teacher_hca"].mean(),
            "runs": grouped.size(),
        }
    ).reset_index()
