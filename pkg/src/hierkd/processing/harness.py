"""Protocol runner: joint, independent and conditioned-step inference over an instance set."""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

from pydantic import ValidationError
from rich.console import Console
from rich.progress import BarColumn, Progress, SpinnerColumn, TaskProgressColumn, TextColumn

from hierkd.config import settings
from hierkd.core.errors import BackendError, InstanceError
from hierkd.core.models import (
    FAIL,
    UNKNOWN_FACT,
    DecodeConfig,
    ModelRequest,
    ParseStatus,
    PredictionRecord,
    Protocol,
    RunLog,
    RunTotals,
    Transcript,
    VqaInstance,
)
from hierkd.processing.prompting import (
    build_joint_prompt,
    build_step_prompt,
    parse_joint_answer,
    parse_step_answer,
)
from hierkd.services.backends import ModelBackend, invoke

logger = logging.getLogger(__name__)


@dataclass
class _Outcome:
    record: PredictionRecord
    calls: int = 0
    attempts: int = 0
    prompt_tokens: int = 0
    completion_tokens: int = 0
    errors: List[str] = field(default_factory=list)


def _tokens(text: str) -> int:
    return len(text.split())


def _record(
    instance: VqaInstance,
    protocol: Protocol,
    letters: List[str],
    transcripts: List[Transcript],
    errors: List[str],
    attempts: int,
) -> PredictionRecord:
    labels: List[str] = []
    mask: List[bool] = []
    for question, letter in zip(instance.per_level, letters):
        label = question.label_for(letter) if letter != FAIL else None
        labels.append(label if label is not None else FAIL)
        mask.append(label is not None and label == question.gold_label)

    n_fail = letters.count(FAIL)
    if n_fail == 0:
        status = ParseStatus.OK
    elif n_fail == len(letters):
        status = ParseStatus.FAILED
    else:
        status = ParseStatus.PARTIAL
    return PredictionRecord(
        instance_id=instance.instance_id,
        protocol=protocol,
        predicted_letters=letters,
        predicted_labels=labels,
        correct_mask=mask,
        transcripts=transcripts,
        status=status,
        error=errors[0] if errors else None,
        attempts=attempts,
        levels_asked=instance.levels_asked or list(range(1, instance.path_length + 1)),
    )


class _Call:
    """One backend call with bookkeeping shared by the protocol runners."""

    def __init__(self, backend: ModelBackend, decode: DecodeConfig):
        self.backend = backend
        self.decode = decode
        self.calls = 0
        self.attempts = 0
        self.prompt_tokens = 0
        self.completion_tokens = 0
        self.errors: List[str] = []

    def __call__(self, instance: VqaInstance, prompt: str) -> Optional[str]:
        self.calls += 1
        self.prompt_tokens += _tokens(prompt)
        try:
            response = invoke(self.backend, ModelRequest(prompt=prompt, image_ref=instance.image_ref, decode=self.decode))
        except BackendError as e:
            self.attempts += e.attempts
            self.errors.append(str(e))
            logger.warning("Backend error on %s: %s", instance.instance_id, e)
            return None
        self.attempts += response.attempts
        self.completion_tokens += _tokens(response.text)
        return response.text

    def outcome(self, record: PredictionRecord) -> _Outcome:
        return _Outcome(record, self.calls, self.attempts, self.prompt_tokens, self.completion_tokens, self.errors)


def _log_failures(instance: VqaInstance, letters: List[str]) -> None:
    for level, letter in enumerate(letters, start=1):
        if letter == FAIL:
            logger.info("Parse failure: instance %s level %d scored incorrect", instance.instance_id, level)


def _joint(instance: VqaInstance, backend: ModelBackend, decode: DecodeConfig, lenient: bool) -> _Outcome:
    call = _Call(backend, decode)
    bundle = build_joint_prompt(instance)
    text = call(instance, bundle.text)
    if text is None:
        letters = [FAIL] * instance.path_length
    else:
        letters = parse_joint_answer(text, bundle.expected_letters, bundle.letter_vocabulary, lenient=lenient).letters
    _log_failures(instance, letters)
    transcripts = [Transcript(prompt=bundle.text, response=text or "")]
    return call.outcome(_record(instance, Protocol.JOINT, letters, transcripts, call.errors, call.attempts))


def _stepwise(
    instance: VqaInstance,
    backend: ModelBackend,
    decode: DecodeConfig,
    lenient: bool,
    conditioned: bool,
    teacher_forcing: bool,
) -> _Outcome:
    call = _Call(backend, decode)
    letters: List[str] = []
    facts: List[str] = []
    transcripts: List[Transcript] = []
    for question in instance.per_level:
        level = question.level_index
        bundle = build_step_prompt(instance, level, facts if conditioned else None)
        text = call(instance, bundle.text)
        letter = FAIL if text is None else parse_step_answer(text, bundle.letter_vocabulary[0], lenient=lenient).letters[0]
        letters.append(letter)
        transcripts.append(Transcript(prompt=bundle.text, response=text or ""))
        if teacher_forcing:
            facts.append(question.gold_label)
        else:
            facts.append(question.label_for(letter) or UNKNOWN_FACT)
    _log_failures(instance, letters)
    protocol = Protocol.CONDITIONED if conditioned else Protocol.INDEPENDENT
    return call.outcome(_record(instance, protocol, letters, transcripts, call.errors, call.attempts))


def make_run_id(protocol: Protocol, backend: Dict[str, Any], decode: DecodeConfig, seed: int, instance_ids: Sequence[str]) -> str:
    payload = json.dumps(
        {"protocol": protocol.value, "backend": backend, "decode": decode.model_dump(), "seed": seed, "ids": list(instance_ids)},
        sort_keys=True,
    )
    return f"{protocol.value}-{hashlib.sha256(payload.encode('utf-8')).hexdigest()[:16]}"


def run_protocol(
    protocol: Union[Protocol, str],
    instances: Sequence[VqaInstance],
    backend: ModelBackend,
    decode: Optional[DecodeConfig] = None,
    *,
    seed: int = 0,
    workers: Optional[int] = None,
    teacher_forcing: bool = False,
    lenient: bool = False,
    config: Optional[Dict[str, Any]] = None,
    console: Optional[Console] = None,
) -> RunLog:
    """Run one protocol over every instance.

    Instances are processed concurrently (``workers`` threads); within an
    instance the step protocols call the backend strictly in level order.
    Backend errors are recorded on the affected record and never abort the run.

    Args:
        teacher_forcing: conditioned protocol only; feed gold labels as known
            facts instead of the model's own answers. Ablation use only.
        console: when given, a progress bar is drawn on it.
    """
    protocol = Protocol(protocol)
    if not instances:
        raise InstanceError("no instances to run")
    ids = [i.instance_id for i in instances]
    if len(set(ids)) != len(ids):
        raise InstanceError("instance ids must be unique within a run")
    if teacher_forcing and protocol != Protocol.CONDITIONED:
        raise InstanceError("teacher forcing only applies to the conditioned protocol")
    decode = decode or DecodeConfig()

    task: Callable[[VqaInstance], _Outcome]
    if protocol == Protocol.JOINT:
        task = lambda inst: _joint(inst, backend, decode, lenient)  # noqa: E731
    else:
        conditioned = protocol == Protocol.CONDITIONED
        task = lambda inst: _stepwise(inst, backend, decode, lenient, conditioned, teacher_forcing)  # noqa: E731

    backend.prepare(instances)
    started_at = datetime.now(timezone.utc).isoformat()
    started = time.perf_counter()
    outcomes: Dict[str, _Outcome] = {}

    with concurrent.futures.ThreadPoolExecutor(max_workers=workers or settings.harness_workers) as executor:
        futures = {executor.submit(task, inst): inst for inst in instances}
        progress = (
            Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), BarColumn(), TaskProgressColumn(), console=console)
            if console is not None
            else None
        )
        if progress is not None:
            progress.start()
            bar = progress.add_task(f"{protocol.value}", total=len(futures))
        try:
            for future in concurrent.futures.as_completed(futures):
                instance = futures[future]
                outcomes[instance.instance_id] = future.result()
                if progress is not None:
                    progress.update(bar, advance=1)
        finally:
            if progress is not None:
                progress.stop()

    records = [outcomes[i].record for i in ids]
    totals = RunTotals(
        calls=sum(o.calls for o in outcomes.values()),
        attempts=sum(o.attempts for o in outcomes.values()),
        prompt_tokens=sum(o.prompt_tokens for o in outcomes.values()),
        completion_tokens=sum(o.completion_tokens for o in outcomes.values()),
        wall_clock_s=time.perf_counter() - started,
    )
    descriptor = backend.describe()
    failed = sum(1 for r in records if r.status != ParseStatus.OK)
    logger.info("%s run: %d instances, %d calls, %d with failed levels", protocol.value, len(records), totals.calls, failed)
    return RunLog(
        run_id=make_run_id(protocol, descriptor, decode, seed, ids),
        protocol=protocol,
        backend=descriptor,
        decode=decode,
        seed=seed,
        config=dict(config or {}),
        records=records,
        totals=totals,
        started_at=started_at,
        finished_at=datetime.now(timezone.utc).isoformat(),
    )


def run_joint(instances: Sequence[VqaInstance], backend: ModelBackend, decode: Optional[DecodeConfig] = None, **kwargs: Any) -> RunLog:
    """One call per instance; all levels parsed from a single answer."""
    return run_protocol(Protocol.JOINT, instances, backend, decode, **kwargs)


def run_independent(instances: Sequence[VqaInstance], backend: ModelBackend, decode: Optional[DecodeConfig] = None, **kwargs: Any) -> RunLog:
    """One call per level, each with "Known facts: None."."""
    return run_protocol(Protocol.INDEPENDENT, instances, backend, decode, **kwargs)


def run_conditioned(
    instances: Sequence[VqaInstance],
    backend: ModelBackend,
    decode: Optional[DecodeConfig] = None,
    teacher_forcing: bool = False,
    **kwargs: Any,
) -> RunLog:
    """One call per level, each listing the model's own earlier answers as known facts."""
    return run_protocol(Protocol.CONDITIONED, instances, backend, decode, teacher_forcing=teacher_forcing, **kwargs)


# Persistence
def save_run_log(path: Union[str, Path], log: RunLog) -> None:
    """Header record (everything but the records) followed by one record per line."""
    header = log.model_dump(mode="json", exclude={"records"})
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": header}, sort_keys=True, ensure_ascii=False) + "\n")
        for record in log.records:
            fh.write(record.model_dump_json() + "\n")


def load_run_log(path: Union[str, Path]) -> RunLog:
    try:
        lines = [line for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    except OSError as e:
        raise InstanceError(f"cannot read run log {path}", detail=str(e)) from e
    if not lines:
        raise InstanceError(f"run log {path} is empty")
    try:
        header = json.loads(lines[0])["header"]
        records = [PredictionRecord.model_validate_json(line) for line in lines[1:]]
        return RunLog.model_validate({**header, "records": records})
    except (KeyError, json.JSONDecodeError, ValidationError) as e:
        raise InstanceError(f"invalid run log {path}", detail=str(e)) from e
