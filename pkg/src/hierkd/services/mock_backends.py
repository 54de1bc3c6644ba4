"""Simulated model whose accuracy depends on whether it was told the correct parent."""

from __future__ import annotations

import hashlib
from typing import Any, Dict, Iterable, List

import numpy as np

from hierkd.config import BackendKind
from hierkd.core.models import LevelQuestion, ModelRequest, ModelResponse, VqaInstance
from hierkd.services.backends import GoldIndex, ModelBackend


class ConditionalMockBackend(ModelBackend):
    """Answers from the gold index with a parent-dependent hit rate.

    At a step prompt for level l > 1 the mock "knows" the answer with
    probability ``accuracy_with_parent`` when the known facts give the correct
    level l-1 label, and ``accuracy_without`` otherwise (level 1 always uses
    ``accuracy_without``). When it does not know, it guesses uniformly among
    the rendered letters, so the hit rate is ``acc + (1 - acc) / n_options``.

    A joint prompt answers every level like an isolated question, except that
    from level 2 on it repeats its previous letter with probability
    ``joint_collapse``.

    Draws are seeded from (seed, image_ref, prompt), so a repeated request
    returns the same text. The reported distribution is one-hot on the
    emitted letter, which keeps greedy decoding consistent with the output.
    """

    name = BackendKind.MOCK_CONDITIONAL.value

    def __init__(
        self,
        accuracy_with_parent: float,
        accuracy_without: float,
        seed: int,
        joint_collapse: float = 0.0,
        instances: Iterable[VqaInstance] = (),
    ):
        for value in (accuracy_with_parent, accuracy_without, joint_collapse):
            if not 0.0 <= value <= 1.0:
                raise ValueError("accuracies and collapse rate must lie in [0, 1]")
        self.accuracy_with_parent = accuracy_with_parent
        self.accuracy_without = accuracy_without
        self.joint_collapse = joint_collapse
        self.seed = seed
        self.index = GoldIndex(instances)

    def prepare(self, instances: Iterable[VqaInstance]) -> None:
        self.index.add(instances)

    def _rng(self, request: ModelRequest) -> np.random.Generator:
        digest = hashlib.sha256(f"{self.seed}|{request.image_ref}|{request.prompt}".encode("utf-8")).digest()
        return np.random.default_rng(int.from_bytes(digest[:8], "little"))

    @staticmethod
    def _draw(rng: np.random.Generator, question: LevelQuestion, accuracy: float) -> str:
        if rng.random() < accuracy:
            return question.gold_letter
        letters = question.letters
        return letters[int(rng.integers(len(letters)))]

    def _step_accuracy(self, instance: VqaInstance, question: LevelQuestion, known: List[str]) -> float:
        level = question.level_index
        if level == 1 or len(known) < level - 1:
            return self.accuracy_without
        parent_gold = instance.per_level[level - 2].gold_label
        return self.accuracy_with_parent if known[level - 2] == parent_gold else self.accuracy_without

    def complete(self, request: ModelRequest) -> ModelResponse:
        located = self.index.locate(request)
        rng = self._rng(request)
        if located.joint:
            letters: List[str] = []
            for question in located.instance.per_level:
                if letters and rng.random() < self.joint_collapse:
                    letters.append(letters[-1])
                else:
                    letters.append(self._draw(rng, question, self.accuracy_without))
            return ModelResponse(text=" ".join(letters), latency_ms=0.0)

        question = located.question
        assert question is not None
        letter = self._draw(rng, question, self._step_accuracy(located.instance, question, located.known_facts))
        probabilities = {x: 1.0 if x == letter else 0.0 for x in question.letters}
        return ModelResponse(text=letter, option_probabilities=probabilities, latency_ms=0.0)

    def describe(self) -> Dict[str, Any]:
        return {
            "kind": self.name,
            "accuracy_with_parent": self.accuracy_with_parent,
            "accuracy_without": self.accuracy_without,
            "joint_collapse": self.joint_collapse,
            "seed": self.seed,
        }


def mock_conditional(
    accuracy_with_parent: float,
    accuracy_without: float,
    seed: int,
    joint_collapse: float = 0.0,
    instances: Iterable[VqaInstance] = (),
) -> ConditionalMockBackend:
    return ConditionalMockBackend(accuracy_with_parent, accuracy_without, seed, joint_collapse, instances)
