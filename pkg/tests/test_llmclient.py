import json
import socket

import pytest

from neuromas.errors import ProtocolError, TransportError
from neuromas.llmclient import EndpointConfig, remote_forward, remote_forward_many, remote_generate
from neuromas.messaging import MULTIPLE_CHOICE, NO_ANSWER, Footer
from neuromas.topology import parse_topology


def cfg(url, **kw):
    kw.setdefault("backoff", 0.0)
    return EndpointConfig(base_url=url, model="toy", **kw)


def test_echo_completion(mock_endpoint):
    assert remote_generate(cfg(mock_endpoint.url), "hello") == "TO #1: x"
    req = mock_endpoint.requests[0]
    assert req["messages"] == [{"role": "user", "content": "hello"}]
    assert req["model"] == "toy" and req["temperature"] == 0 and req["max_tokens"] == 200


def test_sample_mode_omits_temperature(mock_endpoint):
    remote_generate(cfg(mock_endpoint.url, mode="sample"), "hi")
    assert "temperature" not in mock_endpoint.requests[0]


def test_server_error_retried_three_times(mock_endpoint):
    mock_endpoint.reply = lambda prompt: (500, "boom")
    with pytest.raises(TransportError, match="HTTP 500"):
        remote_generate(cfg(mock_endpoint.url), "q")
    assert len(mock_endpoint.requests) == 3


def test_transient_then_success(mock_endpoint):
    seen = []

    def flaky(prompt):
        seen.append(prompt)
        return (429, "slow down") if len(seen) < 3 else "TO #1: ok"

    mock_endpoint.reply = flaky
    audit = []
    assert remote_generate(cfg(mock_endpoint.url), "q", audit=audit) == "TO #1: ok"
    assert [a["status"] for a in audit] == [429, 429, 200]


@pytest.mark.parametrize("status", [400, 401, 404])
def test_client_errors_are_not_retried(mock_endpoint, status):
    mock_endpoint.reply = lambda prompt: (status, "{}")
    with pytest.raises(TransportError):
        remote_generate(cfg(mock_endpoint.url), "q")
    assert len(mock_endpoint.requests) == 1


@pytest.mark.parametrize("payload", ["not json", json.dumps({"choices": []}), json.dumps({"choices": [{"message": {"content": 3}}]})])
def test_malformed_body_is_protocol_error(mock_endpoint, payload):
    mock_endpoint.reply = lambda prompt: (200, payload)
    with pytest.raises(ProtocolError):
        remote_generate(cfg(mock_endpoint.url), "q")


def test_bearer_token_from_environment(mock_endpoint, monkeypatch):
    monkeypatch.setenv("NEUROMAS_TEST_TOKEN", "s3cret")
    remote_generate(cfg(mock_endpoint.url, token_env="NEUROMAS_TEST_TOKEN"), "q")
    assert mock_endpoint.headers[0]["Authorization"] == "Bearer s3cret"


def test_missing_token_fails_before_sending(mock_endpoint, monkeypatch):
    monkeypatch.delenv("NEUROMAS_TEST_TOKEN", raising=False)
    with pytest.raises(TransportError, match="NEUROMAS_TEST_TOKEN"):
        remote_generate(cfg(mock_endpoint.url, token_env="NEUROMAS_TEST_TOKEN"), "q")
    assert mock_endpoint.requests == []


@pytest.mark.parametrize("kw", [{"timeout": 0}, {"max_new_tokens": 0}, {"mode": "beam"}])
def test_endpoint_config_validation(kw):
    with pytest.raises(ValueError):
        cfg("http://x", **kw)


def test_endpoint_config_from_dict():
    ep = EndpointConfig.from_dict({"base_url": "http://h/v1/", "model": "m"})
    assert ep.url == "http://h/v1/chat/completions"
    with pytest.raises(ValueError):
        EndpointConfig.from_dict({"base_url": "http://h", "model": "m", "temp": 1})
    with pytest.raises(ValueError):
        EndpointConfig.from_dict({"model": "m"})


@pytest.mark.parametrize("text,requests", [("1-1", 3), ("2-2", 5), ("2-2-2", 7)])
def test_forward_request_count(mock_endpoint, text, requests):
    tr = remote_forward(cfg(mock_endpoint.url), parse_topology(text), "What is 2+2?")
    assert len(mock_endpoint.requests) == requests == tr.meta["requests"]
    assert tr.meta["logprobs"] == "unavailable" and tr.error is None


def test_forward_routes_scripted_messages(mock_endpoint):
    def script(prompt):
        if "TO #1" not in prompt:
            return "Answer: B"
        if "[from L1P1]" in prompt:
            return "TO #1: second hop"
        return "TO #1: first hop"

    mock_endpoint.reply = script
    tr = remote_forward(cfg(mock_endpoint.url), parse_topology("1-1"), "Q?", footer=Footer(MULTIPLE_CHOICE),
                        task_kind=MULTIPLE_CHOICE)
    assert tr.answer == "B"
    prompts = [r["messages"][0]["content"] for r in mock_endpoint.requests]
    assert len(prompts) == 3
    assert "[from L1P1]: first hop" in prompts[1]
    assert "[from L2P1]: second hop" in prompts[2]


def test_network_partition_gives_partial_trace(mock_endpoint):
    def partition(prompt):
        return (503, "partitioned") if "[from L1P1]" in prompt else "TO #1: hi"

    mock_endpoint.reply = partition
    tr = remote_forward(cfg(mock_endpoint.url), parse_topology("1-1"), "Q")
    assert len(tr.records) == 1
    assert "HTTP 503" in tr.error and tr.answer is NO_ANSWER
    assert len(mock_endpoint.requests) == 1 + 3


def test_unreachable_host_is_transport_error():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    tr = remote_forward(cfg(f"http://127.0.0.1:{port}", timeout=1.0), parse_topology("1"), "Q")
    assert tr.records == [] and tr.error


def test_forward_many_keeps_order(mock_endpoint):
    qs = [f"question {i}" for i in range(5)]
    traces = remote_forward_many(cfg(mock_endpoint.url), parse_topology("1"), qs, max_in_flight=3)
    assert len(traces) == 5 and len(mock_endpoint.requests) == 10
    assert [t.question for t in traces] == qs
