"""Exact expected accuracy of each protocol under the conditional mock.

Used as the oracle for harness runs: per-instance dynamic programs over level
outcomes, averaged over the instance set.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

from hierkd.core.models import Protocol, VqaInstance


@dataclass(frozen=True)
class Expectation:
    per_level: List[float]
    hca: float


def _hit(accuracy: float, n_options: int) -> float:
    return accuracy + (1.0 - accuracy) / n_options


def expected_independent(instance: VqaInstance, accuracy_without: float) -> Expectation:
    per_level = [_hit(accuracy_without, len(q.options)) for q in instance.per_level]
    hca = 1.0
    for p in per_level:
        hca *= p
    return Expectation(per_level, hca)


def expected_conditioned(
    instance: VqaInstance,
    accuracy_with_parent: float,
    accuracy_without: float,
    teacher_forcing: bool = False,
) -> Expectation:
    questions = instance.per_level
    p_correct = _hit(accuracy_without, len(questions[0].options))
    per_level = [p_correct]
    hca = p_correct
    for q in questions[1:]:
        with_parent = _hit(accuracy_with_parent, len(q.options))
        without = _hit(accuracy_without, len(q.options))
        if teacher_forcing:
            p_correct = with_parent
        else:
            p_correct = p_correct * with_parent + (1.0 - p_correct) * without
        per_level.append(p_correct)
        hca *= with_parent
    return Expectation(per_level, hca)


def expected_joint(instance: VqaInstance, accuracy_without: float, joint_collapse: float) -> Expectation:
    # state: (letter emitted at the previous level, every level so far correct)
    states: Dict[Tuple[str, bool], float] = {("", True): 1.0}
    per_level: List[float] = []
    for k, q in enumerate(instance.per_level):
        n = len(q.options)
        fresh = {x: (1.0 - accuracy_without) / n + (accuracy_without if x == q.gold_letter else 0.0) for x in q.letters}
        nxt: Dict[Tuple[str, bool], float] = defaultdict(float)
        for (prev, alive), mass in states.items():
            if k > 0 and joint_collapse > 0:
                nxt[(prev, alive and prev == q.gold_letter)] += mass * joint_collapse
                scale = 1.0 - joint_collapse
            else:
                scale = 1.0
            for letter, p in fresh.items():
                nxt[(letter, alive and letter == q.gold_letter)] += mass * scale * p
        states = dict(nxt)
        per_level.append(sum(m for (letter, _), m in states.items() if letter == q.gold_letter))
    hca = sum(m for (_, alive), m in states.items() if alive)
    return Expectation(per_level, hca)


def expected_run(
    protocol: Protocol,
    instances: Sequence[VqaInstance],
    accuracy_with_parent: float,
    accuracy_without: float,
    joint_collapse: float = 0.0,
    teacher_forcing: bool = False,
) -> Expectation:
    """Mean per-level accuracy and HCA over an instance set.

    Per-level means are taken over instances deep enough to have the level.
    """
    results: List[Expectation] = []
    for instance in instances:
        if protocol == Protocol.INDEPENDENT:
            results.append(expected_independent(instance, accuracy_without))
        elif protocol == Protocol.CONDITIONED:
            results.append(expected_conditioned(instance, accuracy_with_parent, accuracy_without, teacher_forcing))
        else:
            results.append(expected_joint(instance, accuracy_without, joint_collapse))

    depth = max(len(r.per_level) for r in results)
    per_level = []
    for level in range(depth):
        values = [r.per_level[level] for r in results if len(r.per_level) > level]
        per_level.append(sum(values) / len(values))
    return Expectation(per_level, sum(r.hca for r in results) / len(results))
