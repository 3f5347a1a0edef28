"""Backend tests: digests, scripted/replay/record behavior, retries, concurrency."""

import json
import threading
import time
from concurrent.futures import ThreadPoolExecutor

import pytest

from restgpt.llm_backend import (
    BackendError,
    CacheMissError,
    ChatMessage,
    CompletionRequest,
    CompletionResult,
    LiveBackend,
    RecordingBackend,
    ReplayBackend,
    ReplayCache,
    ReplayCacheError,
    RequestTag,
    ScriptedBackend,
    Usage,
    cache_key,
)


def make_request(content="hello", temperature=0.0, shots=(), tag=None):
    messages = [ChatMessage("system", "sys")]
    for shot_in, shot_out in shots:
        messages.append(ChatMessage("user", shot_in))
        messages.append(ChatMessage("assistant", shot_out))
    messages.append(ChatMessage("user", content))
    return CompletionRequest(messages=tuple(messages), temperature=temperature,
                             request_tag=tag)


# ---------------------------------------------------------------------------
# Requests and digests
# ---------------------------------------------------------------------------

def test_request_validation():
    with pytest.raises(ValueError):
        CompletionRequest(messages=())
    with pytest.raises(ValueError):
        make_request(temperature=2.5)


def test_cache_key_is_stable():
    assert cache_key(make_request()) == cache_key(make_request())


def test_cache_key_is_pinned_across_platforms():
    # Frozen digest: if this changes, recorded caches stop replaying.
    request = CompletionRequest(
        messages=(ChatMessage("system", "s"), ChatMessage("user", "u")),
        model_name="m", temperature=0.0, max_output_tokens=16)
    assert cache_key(request) == \
        "af10c842024dff8f01ad8cd40d4df3c4b7fb9bd8ec5849fe0743c556a57f2027"


def test_cache_key_differs_on_temperature():
    assert cache_key(make_request(temperature=0.0)) != \
        cache_key(make_request(temperature=0.7))


def test_cache_key_differs_on_few_shot_order():
    shots_ab = (("in-a", "out-a"), ("in-b", "out-b"))
    shots_ba = (("in-b", "out-b"), ("in-a", "out-a"))
    assert cache_key(make_request(shots=shots_ab)) != \
        cache_key(make_request(shots=shots_ba))


def test_cache_key_ignores_request_tag():
    tag = RequestTag("svc", "/a", "get", "q", "examples")
    assert cache_key(make_request(tag=tag)) == cache_key(make_request(tag=None))


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------

def test_scripted_backend_returns_programmed_responses():
    backend = ScriptedBackend(["None"])
    result = backend.complete(make_request())
    assert result.text == "None"
    assert result.backend_kind == "scripted"
    assert backend.call_count == 1


def test_scripted_backend_default_and_exhaustion():
    backend = ScriptedBackend(["a"], default="None")
    assert backend.complete(make_request()).text == "a"
    assert backend.complete(make_request()).text == "None"
    strict = ScriptedBackend(["only"])
    strict.complete(make_request())
    with pytest.raises(BackendError):
        strict.complete(make_request())


# ---------------------------------------------------------------------------
# Replay and record
# ---------------------------------------------------------------------------

def test_replay_returns_recorded_result(tmp_path):
    cache = ReplayCache(tmp_path / "cache.jsonl")
    request = make_request("what is up")
    recorded = CompletionResult("stored answer", "stop", Usage(10, 3), "live", 12.5)
    cache.put(request, recorded)

    replay = ReplayBackend(ReplayCache.load(tmp_path / "cache.jsonl"))
    result = replay.complete(make_request("what is up"))
    assert result.text == "stored answer"
    assert result.usage == Usage(10, 3)
    assert result.backend_kind == "replay"


def test_replay_miss_is_an_error(tmp_path):
    replay = ReplayBackend(ReplayCache())
    with pytest.raises(CacheMissError):
        replay.complete(make_request(tag=RequestTag("s", "/p", "get", "q", "examples")))


def test_record_mode_memoizes(tmp_path):
    upstream = ScriptedBackend(default="answer")
    cache = ReplayCache(tmp_path / "cache.jsonl")
    backend = RecordingBackend(upstream, cache)
    first = backend.complete(make_request())
    second = backend.complete(make_request())
    assert first.text == second.text == "answer"
    assert backend.upstream_calls == 1
    assert upstream.call_count == 1
    assert len(cache) == 1
    # Recording twice does not grow the cache file.
    lines = (tmp_path / "cache.jsonl").read_text().strip().splitlines()
    assert len(lines) == 1


def test_corrupt_cache_line_names_line_number(tmp_path):
    path = tmp_path / "cache.jsonl"
    good = {"digest": "d", "request": {}, "result": {"text": "x"}}
    path.write_text(json.dumps(good) + "\nnot json at all\n")
    with pytest.raises(ReplayCacheError) as err:
        ReplayCache.load(path)
    assert "line 2" in str(err.value)


# ---------------------------------------------------------------------------
# Live backend (fake HTTP session)
# ---------------------------------------------------------------------------

class FakeResponse:
    def __init__(self, status_code, body=None, text=""):
        self.status_code = status_code
        self._body = body
        self.text = text

    def json(self):
        if self._body is None:
            raise ValueError("no body")
        return self._body


def chat_body(text="fine", finish="stop"):
    return {
        "choices": [{"message": {"content": text}, "finish_reason": finish}],
        "usage": {"prompt_tokens": 7, "completion_tokens": 2},
    }


class FakeSession:
    def __init__(self, outcomes):
        self._outcomes = list(outcomes)
        self.calls = []

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers})
        outcome = self._outcomes.pop(0)
        if isinstance(outcome, Exception):
            raise outcome
        return outcome


def live_backend(session, **kwargs):
    defaults = dict(api_key="test-key", session=session, sleeper=lambda _s: None)
    defaults.update(kwargs)
    return LiveBackend(**defaults)


def test_live_backend_success_and_payload():
    session = FakeSession([FakeResponse(200, chat_body("the answer"))])
    backend = live_backend(session)
    result = backend.complete(make_request("question"))
    assert result.text == "the answer"
    assert result.backend_kind == "live"
    assert result.usage == Usage(7, 2)
    call = session.calls[0]
    assert call["url"].endswith("/v1/chat/completions")
    assert call["headers"]["Authorization"] == "Bearer test-key"
    assert call["json"]["model"] == "gpt-3.5-turbo"
    assert call["json"]["temperature"] == 0.0
    assert call["json"]["max_tokens"] == 512
    assert call["json"]["messages"][0]["role"] == "system"


def test_live_backend_retries_transient_failures():
    import requests
    delays = []
    session = FakeSession([
        FakeResponse(429),
        FakeResponse(503),
        requests.ConnectionError("boom"),
        FakeResponse(200, chat_body("ok")),
    ])
    backend = LiveBackend(api_key="k", session=session, sleeper=delays.append,
                          backoff_jitter=0.0)
    result = backend.complete(make_request())
    assert result.text == "ok"
    assert len(session.calls) == 4
    assert delays == [0.5, 1.0, 2.0]  # base 0.5s doubling, jitter disabled


def test_live_backend_jitter_stays_within_bounds():
    delays = []
    session = FakeSession([FakeResponse(500)] * 4 + [FakeResponse(200, chat_body())])
    backend = live_backend(session, sleeper=delays.append)
    backend.complete(make_request())
    for delay, base in zip(delays, (0.5, 1.0, 2.0, 4.0)):
        assert base * 0.8 <= delay <= base * 1.2


def test_live_backend_gives_up_after_attempt_cap():
    session = FakeSession([FakeResponse(500)] * 5)
    backend = live_backend(session)
    with pytest.raises(BackendError) as err:
        backend.complete(make_request())
    assert "5 attempts" in str(err.value)
    assert len(session.calls) == 5


def test_live_backend_client_errors_fail_fast():
    session = FakeSession([FakeResponse(401, text="bad key")])
    backend = live_backend(session)
    with pytest.raises(BackendError) as err:
        backend.complete(make_request())
    assert "401" in str(err.value)
    assert len(session.calls) == 1


def test_live_backend_malformed_response():
    session = FakeSession([FakeResponse(200, {"surprise": True})])
    with pytest.raises(BackendError) as err:
        live_backend(session).complete(make_request())
    assert "malformed" in str(err.value)


def test_live_backend_requires_api_key(monkeypatch):
    monkeypatch.delenv("RESTGPT_API_KEY", raising=False)
    backend = LiveBackend(session=FakeSession([]))
    with pytest.raises(BackendError) as err:
        backend.complete(make_request())
    assert "RESTGPT_API_KEY" in str(err.value)


def test_live_backend_bounds_in_flight_requests():
    active = {"now": 0, "peak": 0}
    lock = threading.Lock()

    class SlowSession:
        def post(self, url, json=None, headers=None, timeout=None):
            with lock:
                active["now"] += 1
                active["peak"] = max(active["peak"], active["now"])
            time.sleep(0.02)
            with lock:
                active["now"] -= 1
            return FakeResponse(200, chat_body())

    backend = live_backend(SlowSession(), max_in_flight=3)
    with ThreadPoolExecutor(max_workers=10) as pool:
        list(pool.map(lambda _i: backend.complete(make_request()), range(12)))
    assert active["peak"] <= 3
