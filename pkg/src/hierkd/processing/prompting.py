"""Prompt rendering for the joint and conditioned-step protocols, and answer parsing.

Template slots: {L}, {level}, {question}, {options}, {known_facts}.
"""

from __future__ import annotations

import logging
import re
from typing import List, Optional, Sequence

from hierkd.core.errors import PromptError
from hierkd.core.models import FAIL, LETTERS, ParsedAnswer, ParseStatus, PromptBundle, VqaInstance

logger = logging.getLogger(__name__)

QUESTION_TEMPLATE = "Based on taxonomy and the known facts above, where does the organism in the image fall in terms of {level}?"

STEP_TEMPLATE = (
    "You are a taxonomist.\n"
    "Known facts: {known_facts}\n"
    "{question}\n"
    "Question (current level): {question}\n"
    "{options}\n"
    "Answer with the option's letter from the given choices directly."
)

JOINT_PREAMBLE = (
    "Known facts: None.\n"
    "You are a taxonomist. Answer the following multiple-choice questions about the organism in the image.\n"
    'Return EXACTLY {L} capital letters separated by single spaces, one per question, in order (e.g., "B D A C ...").\n'
    "For each question, choose ONLY from the letters shown with its options.\n"
    "Do not output any words or explanations.\n"
)

JOINT_BLOCK = "Q{k} (level {k}): {question}\n{options}"

NO_FACTS = "None."

_STRICT_RUN = re.compile(r"(?<![A-Za-z])[ABCD]+(?![A-Za-z])")
_LENIENT_RUN = re.compile(r"(?<![A-Za-z])[ABCDabcd]+(?![A-Za-z])")


def render_question(level_name: str) -> str:
    return QUESTION_TEMPLATE.format(level=level_name)


def render_options(options: Sequence[str]) -> str:
    """'A. x  B. y  C. z  D. w' for the given labels."""
    return "  ".join(f"{letter}. {label}" for letter, label in zip(LETTERS, options))


def render_known_facts(labels: Sequence[str]) -> str:
    if not labels:
        return NO_FACTS
    return "; ".join(f"Level {i} = {label}" for i, label in enumerate(labels, start=1)) + "."


def build_joint_prompt(instance: VqaInstance) -> PromptBundle:
    """Single prompt carrying every level's question."""
    blocks = [
        JOINT_BLOCK.format(k=q.level_index, question=q.question_text, options=render_options(q.options))
        for q in instance.per_level
    ]
    text = JOINT_PREAMBLE.format(L=instance.path_length) + "\n" + "\n\n".join(blocks) + "\n"
    return PromptBundle(
        text=text,
        expected_letters=instance.path_length,
        letter_vocabulary=[q.letters for q in instance.per_level],
    )


def build_step_prompt(
    instance: VqaInstance,
    level: int,
    prior_answers: Optional[Sequence[str]] = None,
) -> PromptBundle:
    """Prompt for one level, listing the earlier answers as known facts.

    Args:
        instance: The instance being asked.
        level: 1-based level index.
        prior_answers: Labels chosen at levels 1..level-1 (the model's own, or
            "UNKNOWN" where it failed). ``None`` asks the level in isolation
            with "Known facts: None.", as the independent protocol does.
    """
    if not 1 <= level <= instance.path_length:
        raise PromptError(f"level {level} outside 1..{instance.path_length}")
    if prior_answers is None:
        prior_answers = []
    elif len(prior_answers) != level - 1:
        raise PromptError(f"level {level} needs {level - 1} prior answers, got {len(prior_answers)}")
    question = instance.per_level[level - 1]
    text = STEP_TEMPLATE.format(
        known_facts=render_known_facts(prior_answers),
        question=question.question_text,
        options=render_options(question.options),
    )
    return PromptBundle(text=text, expected_letters=1, letter_vocabulary=[question.letters])


def extract_letters(raw: str, lenient: bool = False) -> List[str]:
    """All option letters in reading order.

    A letter counts when it stands alone or inside a run made only of option
    letters ("B D", "BD", "(B)"); capitals inside ordinary words are ignored.
    """
    pattern = _LENIENT_RUN if lenient else _STRICT_RUN
    letters: List[str] = []
    for match in pattern.finditer(raw):
        letters.extend(ch.upper() for ch in match.group(0))
    return letters


def parse_joint_answer(
    raw: str,
    expected: int,
    vocabulary: Optional[Sequence[Sequence[str]]] = None,
    lenient: bool = False,
) -> ParsedAnswer:
    """Collect the first ``expected`` letters left to right.

    Missing positions and letters outside the position's rendered options
    become FAIL.
    """
    if expected < 1:
        raise PromptError("expected must be at least 1")
    found = extract_letters(raw or "", lenient=lenient)[:expected]
    letters: List[str] = []
    for position in range(expected):
        if position >= len(found):
            letters.append(FAIL)
            continue
        letter = found[position]
        if vocabulary is not None and letter not in vocabulary[position]:
            logger.debug("letter %s outside the options at position %d", letter, position + 1)
            letter = FAIL
        letters.append(letter)

    n_fail = letters.count(FAIL)
    if n_fail == 0:
        status = ParseStatus.OK
    elif n_fail == expected:
        status = ParseStatus.FAILED
    else:
        status = ParseStatus.PARTIAL
    return ParsedAnswer(letters=letters, raw=raw or "", parse_status=status)


def parse_step_answer(
    raw: str,
    vocabulary: Optional[Sequence[str]] = None,
    lenient: bool = False,
) -> ParsedAnswer:
    return parse_joint_answer(raw, 1, vocabulary=[vocabulary] if vocabulary is not None else None, lenient=lenient)
