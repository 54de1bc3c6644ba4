"""Protocol runner behaviour and agreement with the analytic expectation of the mock."""

import pytest
import requests
from rich.console import Console

from hierkd.config import BackendConfig, BackendKind
from hierkd.core.errors import InstanceError, TransientBackendError
from hierkd.core.models import FAIL, ParseStatus, Protocol, SamplerPolicy
from hierkd.processing.harness import (
    load_run_log,
    run_conditioned,
    run_independent,
    run_joint,
    run_protocol,
    save_run_log,
)
from hierkd.processing.instances import generate_instances
from hierkd.processing.metrics import build_report
from hierkd.services.backends import GoldBackend, HttpChatBackend, ScriptedBackend
from hierkd.services.expectation import expected_run
from hierkd.services.mock_backends import mock_conditional

TOLERANCE = 0.02


@pytest.mark.unit
class TestProtocols:
    @pytest.mark.parametrize("protocol", list(Protocol))
    def test_gold_backend_is_perfect(self, protocol, six_level_instances):
        log = run_protocol(protocol, six_level_instances, GoldBackend(), workers=4)
        report = build_report(log.records)
        assert report.hca == 1.0
        assert report.por == report.s_por == report.tor == 1.0
        assert all(r.status == ParseStatus.OK for r in log.records)
        assert [r.instance_id for r in log.records] == [i.instance_id for i in six_level_instances]

    def test_call_counts(self, six_level_instances):
        n_levels = sum(i.path_length for i in six_level_instances)
        assert run_joint(six_level_instances, GoldBackend()).totals.calls == len(six_level_instances)
        assert run_independent(six_level_instances, GoldBackend()).totals.calls == n_levels

    def test_independent_prompts_carry_no_facts(self, golden_instance):
        log = run_independent([golden_instance], GoldBackend())
        assert all("Known facts: None.\n" in t.prompt for t in log.records[0].transcripts)

    def test_conditioned_feeds_own_answers(self, golden_instance):
        log = run_conditioned([golden_instance], ScriptedBackend(lambda request: "A"))
        record = log.records[0]
        assert record.predicted_letters == ["A", "A", "A"]
        assert record.correct_mask == [False, True, False]
        assert "Known facts: Level 1 = Mammalia.\n" in record.transcripts[1].prompt
        assert "Known facts: Level 1 = Mammalia; Level 2 = Passeriformes.\n" in record.transcripts[2].prompt

    def test_unparsable_answer_becomes_unknown_fact(self, golden_instance):
        log = run_conditioned([golden_instance], ScriptedBackend(lambda request: "no idea"))
        record = log.records[0]
        assert record.predicted_letters == [FAIL, FAIL, FAIL]
        assert record.predicted_labels == [FAIL, FAIL, FAIL]
        assert record.status == ParseStatus.FAILED
        assert "Level 1 = UNKNOWN" in record.transcripts[1].prompt

    def test_teacher_forcing_feeds_gold(self, golden_instance):
        log = run_conditioned([golden_instance], ScriptedBackend(lambda request: "D"), teacher_forcing=True)
        assert "Known facts: Level 1 = Aves; Level 2 = Passeriformes.\n" in log.records[0].transcripts[2].prompt

    def test_teacher_forcing_only_for_conditioned(self, golden_instance):
        with pytest.raises(InstanceError, match="teacher forcing"):
            run_protocol(Protocol.JOINT, [golden_instance], GoldBackend(), teacher_forcing=True)

    def test_duplicate_ids_rejected(self, golden_instance):
        with pytest.raises(InstanceError, match="unique"):
            run_joint([golden_instance, golden_instance], GoldBackend())

    def test_empty_instance_set(self):
        with pytest.raises(InstanceError):
            run_joint([], GoldBackend())

    def test_backend_error_is_recorded_and_run_continues(self, six_level_instances):
        broken = six_level_instances[3].image_ref
        gold = GoldBackend(six_level_instances)

        def script(request):
            if request.image_ref == broken:
                raise TransientBackendError("server returned 503")
            return gold.complete(request)

        log = run_conditioned(six_level_instances[:10], ScriptedBackend(script))
        failed = log.records[3]
        assert failed.error is not None and "503" in failed.error
        assert failed.predicted_letters == [FAIL] * len(failed.correct_mask)
        assert failed.status == ParseStatus.FAILED
        assert all(r.status == ParseStatus.OK for i, r in enumerate(log.records) if i != 3)

    def test_broken_http_transfer_does_not_abort_the_run(self, six_level_instances, mocker):
        instances = six_level_instances[:6]
        broken = instances[2].image_ref

        def post(url, json, headers, timeout):
            if json["messages"][0]["content"][1]["image_url"]["url"] == broken:
                raise requests.exceptions.ChunkedEncodingError("connection broken mid-body")
            response = mocker.Mock(status_code=200, text="ok")
            response.json.return_value = {"choices": [{"message": {"content": "A"}}]}
            return response

        session = mocker.Mock(spec=requests.Session)
        session.post.side_effect = post
        config = BackendConfig(kind=BackendKind.HTTP, base_url="http://model.test/v1", max_retries=1)
        backend = HttpChatBackend(config, session=session, backoff_min_s=0.0, backoff_max_s=0.0)

        log = run_joint(instances, backend, workers=3)
        assert len(log.records) == 6
        assert "ChunkedEncodingError" in log.records[2].error
        assert log.records[2].predicted_letters == [FAIL] * len(log.records[2].correct_mask)
        assert all(r.error is None for i, r in enumerate(log.records) if i != 2)

    def test_progress_bar_on_console(self, six_level_instances):
        console = Console(record=True, width=100)
        log = run_joint(six_level_instances[:20], GoldBackend(), console=console)
        assert len(log.records) == 20


@pytest.mark.unit
class TestRunLog:
    def test_round_trip(self, six_level_instances, tmp_path):
        backend = mock_conditional(0.9, 0.6, seed=1)
        log = run_conditioned(six_level_instances[:25], backend, seed=1, config={"command": "run"})
        path = tmp_path / "run.jsonl"
        save_run_log(path, log)
        again = load_run_log(path)
        assert again.run_id == log.run_id
        assert again.records == log.records
        assert again.backend == log.backend
        assert again.config == {"command": "run"}

    def test_run_id_is_stable(self, six_level_instances):
        first = run_joint(six_level_instances[:5], mock_conditional(0.9, 0.6, seed=1), seed=3)
        second = run_joint(six_level_instances[:5], mock_conditional(0.9, 0.6, seed=1), seed=3)
        assert first.run_id == second.run_id
        assert first.records == second.records

    def test_invalid_log(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"nothing": 1}\n', encoding="utf-8")
        with pytest.raises(InstanceError, match="invalid run log"):
            load_run_log(path)


@pytest.fixture(scope="module")
def oracle_instances(six_level_tree):
    return generate_instances(six_level_tree, 5000, SamplerPolicy.UNIFORM, seed=2024, skip_singleton_levels=True)


@pytest.fixture(scope="module")
def ordering_instances(six_level_tree):
    return generate_instances(six_level_tree, 2000, SamplerPolicy.UNIFORM, seed=42, skip_singleton_levels=True)


@pytest.mark.slow
class TestMockAgainstExpectation:
    ACC_WITH, ACC_WITHOUT, COLLAPSE = 0.9, 0.6, 0.25

    def _run(self, protocol, instances, teacher_forcing=False):
        backend = mock_conditional(self.ACC_WITH, self.ACC_WITHOUT, seed=11, joint_collapse=self.COLLAPSE)
        log = run_protocol(protocol, instances, backend, workers=8, teacher_forcing=teacher_forcing)
        return build_report(log.records)

    @pytest.mark.parametrize("protocol", list(Protocol))
    def test_within_tolerance(self, protocol, oracle_instances):
        report = self._run(protocol, oracle_instances)
        expected = expected_run(protocol, oracle_instances, self.ACC_WITH, self.ACC_WITHOUT, self.COLLAPSE)
        assert report.hca == pytest.approx(expected.hca, abs=TOLERANCE)
        for observed, wanted in zip(report.per_level_acc, expected.per_level):
            assert observed == pytest.approx(wanted, abs=TOLERANCE)

    def test_teacher_forcing_within_tolerance(self, oracle_instances):
        report = self._run(Protocol.CONDITIONED, oracle_instances, teacher_forcing=True)
        expected = expected_run(
            Protocol.CONDITIONED, oracle_instances, self.ACC_WITH, self.ACC_WITHOUT, teacher_forcing=True
        )
        assert report.hca == pytest.approx(expected.hca, abs=TOLERANCE)
        assert report.per_level_acc[-1] == pytest.approx(expected.per_level[-1], abs=TOLERANCE)

    def test_protocol_ordering(self, ordering_instances):
        hca = {protocol: self._run(protocol, ordering_instances).hca for protocol in Protocol}
        assert hca[Protocol.CONDITIONED] > hca[Protocol.INDEPENDENT] > hca[Protocol.JOINT]
        for protocol, observed in hca.items():
            expected = expected_run(protocol, ordering_instances, self.ACC_WITH, self.ACC_WITHOUT, self.COLLAPSE)
            assert observed == pytest.approx(expected.hca, abs=TOLERANCE)
