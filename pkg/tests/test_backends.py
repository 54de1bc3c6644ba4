"""Backend contract: gold and mock backends, replay logs and the HTTP client."""

import json

import pytest
import requests

from hierkd.config import BackendConfig, BackendKind
from hierkd.core.errors import (
    BackendError,
    BackendRefusalError,
    BackendTimeoutError,
    ConfigError,
    InstanceError,
    ReplayMissError,
    TransientBackendError,
)
from hierkd.core.models import DecodeConfig, ModelRequest
from hierkd.processing.prompting import build_joint_prompt, build_step_prompt
from hierkd.services.backends import (
    GoldBackend,
    GoldIndex,
    HttpChatBackend,
    RecordingBackend,
    ReplayBackend,
    build_backend,
    invoke,
    request_hash,
)
from hierkd.services.mock_backends import ConditionalMockBackend, mock_conditional


def _step_request(instance, level, facts=None):
    return ModelRequest(prompt=build_step_prompt(instance, level, facts).text, image_ref=instance.image_ref)


def _joint_request(instance):
    return ModelRequest(prompt=build_joint_prompt(instance).text, image_ref=instance.image_ref)


def _chat_response(mocker, status=200, content="B"):
    response = mocker.Mock(status_code=status, text=f"status {status}")
    response.json.return_value = {"choices": [{"message": {"content": content}}]}
    return response


@pytest.mark.unit
class TestGoldIndex:
    def test_locates_joint_and_step_prompts(self, golden_instance):
        index = GoldIndex([golden_instance])
        assert index.locate(_joint_request(golden_instance)).joint
        located = index.locate(_step_request(golden_instance, 2, ["Aves"]))
        assert not located.joint
        assert located.question.level_name == "order"
        assert located.known_facts == ["Aves"]

    def test_unregistered_image(self, golden_instance):
        with pytest.raises(BackendError, match="no instance registered"):
            GoldIndex().locate(_joint_request(golden_instance))

    def test_same_instance_registered_twice(self, golden_instance):
        index = GoldIndex([golden_instance])
        index.add([golden_instance])
        assert len(index) == 1

    def test_image_shared_by_two_instances(self, golden_instance):
        other = golden_instance.model_copy(update={"instance_id": "other-instance"})
        with pytest.raises(InstanceError, match="image shared by two instances") as exc:
            GoldIndex([golden_instance, other])
        assert "other-instance" in str(exc.value)

    def test_parse_known_facts(self):
        assert GoldIndex.parse_known_facts("Known facts: None.") == []
        assert GoldIndex.parse_known_facts("Known facts: Level 1 = Aves; Level 2 = UNKNOWN.") == ["Aves", "UNKNOWN"]


@pytest.mark.unit
class TestGoldBackend:
    def test_answers_gold_letters(self, golden_instance):
        backend = GoldBackend([golden_instance])
        assert invoke(backend, _joint_request(golden_instance)).text == "B A C"
        assert invoke(backend, _step_request(golden_instance, 3, ["Mammalia", "Carnivora"])).text == "C"

    def test_prepare_registers_instances(self, golden_instance):
        backend = GoldBackend()
        backend.prepare([golden_instance])
        assert invoke(backend, _step_request(golden_instance, 1)).text == "B"


@pytest.mark.unit
class TestConditionalMock:
    def test_repeated_request_is_deterministic(self, six_level_instances):
        backend = mock_conditional(0.9, 0.6, seed=3, joint_collapse=0.25, instances=six_level_instances)
        request = _joint_request(six_level_instances[0])
        assert backend.complete(request).text == backend.complete(request).text

    def test_correct_parent_with_perfect_accuracy(self, golden_instance):
        backend = mock_conditional(1.0, 0.0, seed=0, instances=[golden_instance])
        response = backend.complete(_step_request(golden_instance, 2, ["Aves"]))
        assert response.text == "A"
        assert response.option_probabilities == {"A": 1.0, "B": 0.0, "C": 0.0, "D": 0.0}

    def test_full_collapse_repeats_first_letter(self, golden_instance):
        backend = mock_conditional(1.0, 1.0, seed=0, joint_collapse=1.0, instances=[golden_instance])
        assert backend.complete(_joint_request(golden_instance)).text == "B B B"

    def test_rejects_out_of_range_accuracy(self):
        with pytest.raises(ValueError):
            ConditionalMockBackend(1.2, 0.5, seed=0)

    def test_describe(self):
        assert mock_conditional(0.9, 0.6, seed=1).describe()["accuracy_with_parent"] == 0.9


@pytest.mark.unit
class TestReplay:
    def test_request_hash_covers_decode(self):
        greedy = ModelRequest(prompt="p", image_ref="i")
        sampled = ModelRequest(prompt="p", image_ref="i", decode=DecodeConfig(greedy=False, temperature=0.7))
        assert request_hash(greedy) != request_hash(sampled)
        assert request_hash(greedy) == request_hash(ModelRequest(prompt="p", image_ref="i"))

    def test_record_then_replay(self, golden_instance, tmp_path):
        log = tmp_path / "replay.jsonl"
        recorder = RecordingBackend(GoldBackend([golden_instance]), log)
        requests_made = [_joint_request(golden_instance), _step_request(golden_instance, 1)]
        answers = [recorder.complete(r).text for r in requests_made]
        recorder.close()

        lines = log.read_text(encoding="utf-8").splitlines()
        assert len(lines) == 2
        assert {json.loads(line)["request_hash"] for line in lines} == {request_hash(r) for r in requests_made}

        replay = ReplayBackend(log)
        assert [replay.complete(r).text for r in requests_made] == answers

    def test_replay_miss(self, golden_instance, tmp_path):
        log = tmp_path / "empty.jsonl"
        log.write_text("", encoding="utf-8")
        with pytest.raises(ReplayMissError) as exc:
            ReplayBackend(log).complete(_joint_request(golden_instance))
        assert exc.value.request_hash == request_hash(_joint_request(golden_instance))

    def test_missing_log_is_config_error(self, tmp_path):
        with pytest.raises(ConfigError):
            ReplayBackend(tmp_path / "absent.jsonl")


@pytest.mark.unit
class TestHttpChatBackend:
    @pytest.fixture
    def session(self, mocker):
        return mocker.Mock(spec=requests.Session)

    @pytest.fixture
    def backend(self, session):
        config = BackendConfig(kind=BackendKind.HTTP, base_url="http://model.test/v1/", model="toy-vlm", max_retries=2)
        return HttpChatBackend(config, session=session, backoff_min_s=0.0, backoff_max_s=0.0)

    def test_request_body(self, backend, session, mocker):
        session.post.return_value = _chat_response(mocker, content="C")
        response = backend.complete(ModelRequest(prompt="Which?", image_ref="http://img.test/1.jpg"))
        assert response.text == "C"
        assert response.attempts == 1
        url = session.post.call_args.args[0]
        body = session.post.call_args.kwargs["json"]
        assert url == "http://model.test/v1/chat/completions"
        assert body["model"] == "toy-vlm"
        assert body["temperature"] == 0.0
        assert body["messages"][0]["content"][1] == {"type": "image_url", "image_url": {"url": "http://img.test/1.jpg"}}

    def test_bearer_token_from_environment(self, session, mocker, monkeypatch):
        monkeypatch.setenv("TOY_VLM_KEY", "secret")
        config = BackendConfig(kind=BackendKind.HTTP, base_url="http://model.test/v1", api_key_env="TOY_VLM_KEY")
        backend = HttpChatBackend(config, session=session)
        session.post.return_value = _chat_response(mocker)
        backend.complete(ModelRequest(prompt="Which?"))
        assert session.post.call_args.kwargs["headers"]["Authorization"] == "Bearer secret"

    def test_retries_server_errors(self, backend, session, mocker):
        session.post.side_effect = [_chat_response(mocker, status=503), _chat_response(mocker, status=429), _chat_response(mocker)]
        response = backend.complete(ModelRequest(prompt="Which?"))
        assert response.text == "B"
        assert response.attempts == 3
        assert session.post.call_count == 3

    def test_gives_up_after_max_retries(self, backend, session, mocker):
        session.post.return_value = _chat_response(mocker, status=502)
        with pytest.raises(TransientBackendError) as exc:
            backend.complete(ModelRequest(prompt="Which?"))
        assert exc.value.attempts == 3
        assert session.post.call_count == 3

    def test_refusal_is_not_retried(self, backend, session, mocker):
        session.post.return_value = _chat_response(mocker, status=400)
        with pytest.raises(BackendRefusalError) as exc:
            backend.complete(ModelRequest(prompt="Which?"))
        assert exc.value.status_code == 400
        assert session.post.call_count == 1

    def test_timeout(self, backend, session):
        session.post.side_effect = requests.Timeout("read timed out")
        with pytest.raises(BackendTimeoutError):
            backend.complete(ModelRequest(prompt="Which?"))
        assert session.post.call_count == 3

    @pytest.mark.parametrize(
        "error", [requests.exceptions.ChunkedEncodingError, requests.exceptions.ContentDecodingError, requests.TooManyRedirects]
    )
    def test_broken_transfer_is_transient(self, backend, session, mocker, error):
        session.post.side_effect = [error("connection broken mid-body"), _chat_response(mocker)]
        response = backend.complete(ModelRequest(prompt="Which?"))
        assert response.text == "B"
        assert response.attempts == 2

    def test_persistent_transfer_error_is_a_backend_error(self, backend, session):
        session.post.side_effect = requests.exceptions.ChunkedEncodingError("connection broken")
        with pytest.raises(TransientBackendError, match="ChunkedEncodingError") as exc:
            backend.complete(ModelRequest(prompt="Which?"))
        assert exc.value.attempts == 3

    def test_malformed_body(self, backend, session, mocker):
        response = _chat_response(mocker)
        response.json.return_value = {"choices": []}
        session.post.return_value = response
        with pytest.raises(BackendError, match="malformed"):
            backend.complete(ModelRequest(prompt="Which?"))

    def test_content_parts_are_joined(self, backend, session, mocker):
        session.post.return_value = _chat_response(mocker, content=[{"type": "text", "text": "B "}, {"type": "text", "text": "D"}])
        assert backend.complete(ModelRequest(prompt="Which?")).text == "B D"


@pytest.mark.unit
class TestBuildBackend:
    def test_gold(self):
        assert isinstance(build_backend(BackendConfig(kind="gold")), GoldBackend)

    def test_mock(self):
        backend = build_backend(BackendConfig(kind="mock_conditional", accuracy_with_parent=0.8, seed=5))
        assert isinstance(backend, ConditionalMockBackend)
        assert backend.accuracy_with_parent == 0.8
        assert backend.seed == 5

    def test_replay_needs_log(self):
        with pytest.raises(ConfigError, match="replay_log"):
            build_backend(BackendConfig(kind="replay"))

    def test_recording_wrapper(self, tmp_path):
        backend = build_backend(BackendConfig(kind="gold", record_log=str(tmp_path / "rec.jsonl")))
        assert isinstance(backend, RecordingBackend)
        assert backend.describe()["record_log"].endswith("rec.jsonl")
