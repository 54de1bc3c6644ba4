"""Path-consistency metrics over per-level correctness masks.

Every function accepts PredictionRecords or plain boolean masks (one list per
sample, level 1 first). FAIL levels are already False in a record's mask.
"""

from __future__ import annotations

import logging
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from hierkd.core.errors import MetricError
from hierkd.core.models import (
    ConditionalAccuracy,
    DepthRow,
    ForgettingReport,
    MetricReport,
    PredictionRecord,
)

logger = logging.getLogger(__name__)

MaskSource = Union[PredictionRecord, Sequence[bool]]

METRIC_NAMES = ("hca", "leaf_acc", "por", "s_por", "tor")


def _masks(records: Iterable[MaskSource]) -> List[List[bool]]:
    masks = [list(r.correct_mask) if isinstance(r, PredictionRecord) else [bool(x) for x in r] for r in records]
    if not masks:
        raise MetricError("no records to score")
    if any(len(m) == 0 for m in masks):
        raise MetricError("every record needs at least one level")
    return masks


def compute_hca(records: Iterable[MaskSource]) -> float:
    """Share of samples whose whole path is correct."""
    masks = _masks(records)
    return sum(all(m) for m in masks) / len(masks)


def compute_leaf_acc(records: Iterable[MaskSource]) -> float:
    masks = _masks(records)
    return sum(m[-1] for m in masks) / len(masks)


def compute_por(records: Iterable[MaskSource]) -> float:
    """Mean over samples of the per-path share of correct levels."""
    masks = _masks(records)
    return sum(sum(m) / len(m) for m in masks) / len(masks)


def longest_correct_run(mask: Sequence[bool]) -> int:
    best = current = 0
    for correct in mask:
        current = current + 1 if correct else 0
        best = max(best, current)
    return best


def correct_prefix(mask: Sequence[bool]) -> int:
    n = 0
    for correct in mask:
        if not correct:
            break
        n += 1
    return n


def compute_spor(records: Iterable[MaskSource], prefix: bool = False) -> float:
    """Longest contiguous correct block over the path length, averaged.

    With ``prefix=True`` only the block starting at the root counts.
    """
    masks = _masks(records)
    run = correct_prefix if prefix else longest_correct_run
    return sum(run(m) / len(m) for m in masks) / len(masks)


def tor_excluded(records: Iterable[MaskSource]) -> int:
    return sum(1 for m in _masks(records) if len(m) < 2)


def compute_tor(records: Iterable[MaskSource]) -> float:
    """Share of correct parent-child pairs per path, over samples with two or more levels.

    Raises:
        MetricError: no sample has at least two levels.
    """
    masks = [m for m in _masks(records) if len(m) >= 2]
    if not masks:
        raise MetricError("TOR needs at least one sample with two or more levels")
    total = 0.0
    for m in masks:
        total += sum(m[i] and m[i + 1] for i in range(len(m) - 1)) / (len(m) - 1)
    return total / len(masks)


def compute_per_level_accuracy(records: Iterable[MaskSource]) -> List[Optional[float]]:
    """Accuracy at each level over the samples deep enough to have it."""
    masks = _masks(records)
    depth = max(len(m) for m in masks)
    out: List[Optional[float]] = []
    for level in range(depth):
        values = [m[level] for m in masks if len(m) > level]
        out.append(sum(values) / len(values) if values else None)
    return out


def compute_conditional(records: Iterable[MaskSource], level: int) -> ConditionalAccuracy:
    """Accuracy at level+1 given a correct vs. wrong answer at level.

    Only samples with at least level+1 levels enter either set; a branch with
    no samples is reported as None, as is the gap.
    """
    if level < 1:
        raise MetricError("level must be at least 1")
    masks = [m for m in _masks(records) if len(m) >= level + 1]
    after_correct = [m[level] for m in masks if m[level - 1]]
    after_error = [m[level] for m in masks if not m[level - 1]]
    acc_c = sum(after_correct) / len(after_correct) if after_correct else None
    acc_e = sum(after_error) / len(after_error) if after_error else None
    return ConditionalAccuracy(
        level=level,
        acc_given_correct=acc_c,
        acc_given_error=acc_e,
        delta=acc_c - acc_e if acc_c is not None and acc_e is not None else None,
        n_correct=len(after_correct),
        n_error=len(after_error),
    )


def compute_forgetting(acc_base: float, acc_after: float) -> ForgettingReport:
    """Accuracy change on a general benchmark after distillation.

    ``delta_pp`` is the absolute change in points, ``rel_forget_pct`` the drop
    relative to the base accuracy in percent, ``ratio`` the after/base quotient.
    """
    if not 0 < acc_base <= 1 or not 0 <= acc_after <= 1:
        raise MetricError(f"accuracies out of range: base={acc_base}, after={acc_after}")
    return ForgettingReport(
        acc_base=acc_base,
        acc_after=acc_after,
        delta_pp=100.0 * (acc_after - acc_base),
        rel_forget_pct=100.0 * (acc_base - acc_after) / acc_base,
        ratio=acc_after / acc_base,
    )


def singleton_positions(records: Iterable[PredictionRecord], singleton_depths: Iterable[int]) -> List[int]:
    """Ladder positions that ask a single-label tree depth in some record.

    Records without ``levels_asked`` are read as asking depths 1..L_i in order. A run
    generated with singleton levels skipped asks none of them and flags nothing.
    """
    depths = set(singleton_depths)
    positions = set()
    for record in records:
        asked = record.levels_asked or range(1, len(record.correct_mask) + 1)
        positions.update(pos for pos, depth in enumerate(asked, start=1) if depth in depths)
    return sorted(positions)


def build_report(
    records: Iterable[MaskSource],
    singleton_levels: Sequence[int] = (),
    exclude_singletons: bool = True,
    prefix_spor: bool = False,
) -> MetricReport:
    """All path metrics plus the per-level and conditional breakdown.

    ``singleton_levels`` are ladder positions whose level holds a single label;
    they are flagged in the depth table and dropped from it when
    ``exclude_singletons`` is set. ``per_level_acc`` always keeps every level.
    """
    masks = _masks(records)
    per_level = compute_per_level_accuracy(masks)
    n_tor_excluded = sum(1 for m in masks if len(m) < 2)
    tor = compute_tor(masks) if n_tor_excluded < len(masks) else None

    conditional = [compute_conditional(masks, level) for level in range(1, len(per_level))]
    by_level = {c.level + 1: c for c in conditional}
    singletons = set(singleton_levels)
    depthwise = []
    for level, acc in enumerate(per_level, start=1):
        if exclude_singletons and level in singletons:
            continue
        cond = by_level.get(level)
        depthwise.append(
            DepthRow(
                level=level,
                acc=acc,
                acc_given_correct=cond.acc_given_correct if cond else None,
                acc_given_error=cond.acc_given_error if cond else None,
                delta=cond.delta if cond else None,
                singleton=level in singletons,
            )
        )

    report = MetricReport(
        hca=compute_hca(masks),
        leaf_acc=compute_leaf_acc(masks),
        por=compute_por(masks),
        s_por=compute_spor(masks, prefix=prefix_spor),
        tor=tor,
        per_level_acc=per_level,
        conditional=conditional,
        depthwise=depthwise,
        n_samples=len(masks),
        excluded_counts={"tor": n_tor_excluded, "depthwise_singleton_levels": len(per_level) - len(depthwise)},
        spor_variant="prefix" if prefix_spor else "block",
    )
    _check_bounds(report, masks)
    return report


def _check_bounds(report: MetricReport, masks: List[List[bool]]) -> None:
    if report.hca > report.leaf_acc + 1e-12:
        raise MetricError("HCA exceeds leaf accuracy")
    if len({len(m) for m in masks}) == 1:
        floor = min(a for a in report.per_level_acc if a is not None)
        if report.hca > floor + 1e-12:
            raise MetricError("HCA exceeds the accuracy of some level")


def report_to_frame(report: MetricReport) -> pd.DataFrame:
    """Rows (metric, value, n, excluded)."""
    rows = []
    for name in METRIC_NAMES:
        excluded = report.excluded_counts.get(name, 0)
        rows.append({"metric": name, "value": getattr(report, name), "n": report.n_samples - excluded, "excluded": excluded})
    return pd.DataFrame(rows, columns=["metric", "value", "n", "excluded"])


def depthwise_frame(report: MetricReport) -> pd.DataFrame:
    return pd.DataFrame(
        [
            {
                "level": row.level,
                "acc": row.acc,
                "acc|correct": row.acc_given_correct,
                "acc|error": row.acc_given_error,
                "delta": row.delta,
            }
            for row in report.depthwise
        ],
        columns=["level", "acc", "acc|correct", "acc|error", "delta"],
    )


def aggregate_reports(reports: Sequence[MetricReport]) -> pd.DataFrame:
    """Mean and population standard deviation of each metric across runs."""
    if not reports:
        raise MetricError("no reports to aggregate")
    rows = []
    for name in METRIC_NAMES:
        values = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not values:
            continue
        arr = np.asarray(values, dtype=float)
        rows.append({"metric": name, "mean": float(arr.mean()), "std": float(arr.std(ddof=0)), "runs": len(values)})
    return pd.DataFrame(rows, columns=["metric", "mean", "std", "runs"])


def summary_row(report: MetricReport) -> Dict[str, float]:
    return {name: getattr(report, name) for name in METRIC_NAMES}
