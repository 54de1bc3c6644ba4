"""Model backends and the expectation oracle for simulated runs."""

from hierkd.services.backends import (
    GoldBackend,
    HttpChatBackend,
    ModelBackend,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
    build_backend,
    gold_scripted_backend,
    invoke,
    request_hash,
)
from hierkd.services.mock_backends import ConditionalMockBackend, mock_conditional

__all__ = [
    "ConditionalMockBackend",
    "GoldBackend",
    "HttpChatBackend",
    "ModelBackend",
    "RecordingBackend",
    "ReplayBackend",
    "ScriptedBackend",
    "build_backend",
    "gold_scripted_backend",
    "invoke",
    "mock_conditional",
    "request_hash",
]
