"""Inference-only forward passes against a chat-completions HTTP endpoint.

Each node call sends its rendered prompt as a single user message. Training is
not possible through this path (remote APIs expose no parameter gradients), so
traces produced here carry text only.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import httpx

from neuromas.errors import ProtocolError, RemoteTimeoutError, TransportError
from neuromas.messaging import NONE, VERBATIM, Footer, RenderedContext
from neuromas.policy import GREEDY, SAMPLE
from neuromas.runtime import Generation, Trace, run_forward
from neuromas.topology import NodeAddress, Topology

log = logging.getLogger(__name__)

ATTEMPTS = 3


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model: str
    token_env: str | None = None
    timeout: float = 60.0
    max_new_tokens: int = 200
    mode: str = GREEDY
    backoff: float = 0.5

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError(f"timeout must be > 0, got {self.timeout}")
        if self.max_new_tokens < 1:
            raise ValueError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")
        if self.mode not in (GREEDY, SAMPLE):
            raise ValueError(f"unknown decoding mode {self.mode!r}")

    @classmethod
    def from_dict(cls, data: dict) -> "EndpointConfig":
        allowed = {"base_url", "model", "token_env", "timeout", "max_new_tokens", "mode", "backoff"}
        unknown = set(data) - allowed
        if unknown:
            raise ValueError(f"endpoint: unknown keys {sorted(unknown)}")
        if "base_url" not in data or "model" not in data:
            raise ValueError("endpoint: 'base_url' and 'model' are required")
        return cls(**data)

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/chat/completions"

    def headers(self) -> dict[str, str]:
        h = {"Content-Type": "application/json"}
        if self.token_env:
            token = os.environ.get(self.token_env)
            if not token:
                raise TransportError(f"environment variable {self.token_env} is not set")
            h["Authorization"] = f"Bearer {token}"
        return h

    def payload(self, text: str) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": "user", "content": text}],
            "max_tokens": self.max_new_tokens,
        }
        if self.mode == GREEDY:
            body["temperature"] = 0
        return body


def _is_transient(status: int) -> bool:
    return status == 429 or status >= 500


def _completion_text(data) -> str:
    try:
        text = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ProtocolError(f"response has no choices[0].message.content: {str(data)[:200]}") from None
    if not isinstance(text, str):
        raise ProtocolError(f"completion content is {type(text).__name__}, expected a string")
    return text


def remote_generate(
    cfg: EndpointConfig,
    context: RenderedContext | str,
    *,
    client: httpx.Client | None = None,
    audit: list | None = None,
) -> str:
    """One chat-completion call with up to three attempts on transient failures."""
    text = context.text if isinstance(context, RenderedContext) else context
    body = cfg.payload(text)
    headers = cfg.headers()
    own = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    last: Exception | None = None
    try:
        for attempt in range(1, ATTEMPTS + 1):
            try:
                resp = client.post(cfg.url, json=body, headers=headers, timeout=cfg.timeout)
            except httpx.TimeoutException as exc:
                last = RemoteTimeoutError(f"request timed out after {cfg.timeout}s (attempt {attempt})")
                last.__cause__ = exc
            except httpx.HTTPError as exc:
                last = TransportError(f"{type(exc).__name__}: {exc} (attempt {attempt})")
            else:
                if audit is not None:
                    audit.append({"request": body, "status": resp.status_code, "response": resp.text})
                if resp.status_code == 200:
                    try:
                        data = resp.json()
                    except ValueError:
                        raise ProtocolError(f"response is not JSON: {resp.text[:200]!r}") from None
                    return _completion_text(data)
                last = TransportError(f"HTTP {resp.status_code}: {resp.text[:200]}")
                if not _is_transient(resp.status_code):
                    raise last
            if attempt < ATTEMPTS:
                time.sleep(cfg.backoff * 2 ** (attempt - 1))
        assert last is not None
        raise last
    finally:
        if own:
            client.close()


class RemoteGenerator:
    """Node backend for :func:`run_forward` that calls the endpoint."""

    def __init__(self, cfg: EndpointConfig, client: httpx.Client | None = None, audit: list | None = None):
        self.cfg = cfg
        self.client = client
        self.audit = audit
        self.requests = 0
        self._lock = threading.Lock()

    def generate(self, node: NodeAddress, context: RenderedContext, n_recipients: int, rng) -> Generation:
        with self._lock:
            self.requests += 1
        text = remote_generate(self.cfg, context, client=self.client, audit=self.audit)
        return Generation(text)


def remote_forward(
    cfg: EndpointConfig,
    topology: Topology,
    question: str,
    *,
    footer: Footer = Footer(NONE),
    task_kind: str = VERBATIM,
    client: httpx.Client | None = None,
    max_workers: int = 1,
    audit: list | None = None,
    episode: int = 0,
) -> Trace:
    """Same orchestration as the toy forward pass, with the endpoint as sampler.

    A transport failure ends the episode; the returned trace holds the records
    produced so far and an ``error`` string.
    """
    own = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    gen = RemoteGenerator(cfg, client, audit)
    try:
        trace = run_forward(
            gen, topology, question, footer=footer, task_kind=task_kind, seed=0, episode=episode,
            mode=cfg.mode, max_workers=max_workers, catch=(TransportError,),
        )
    finally:
        if own:
            client.close()
    trace.meta["requests"] = gen.requests
    trace.meta["logprobs"] = "unavailable"
    return trace


def remote_forward_many(
    cfg: EndpointConfig,
    topology: Topology,
    questions: Sequence[str],
    *,
    footer: Footer = Footer(NONE),
    task_kind: str = VERBATIM,
    max_in_flight: int = 4,
    client: httpx.Client | None = None,
) -> list[Trace]:
    """Run episodes concurrently; at most ``max_in_flight`` requests are outstanding."""
    own = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    try:
        with ThreadPoolExecutor(max(1, max_in_flight)) as pool:
            futures = [
                pool.submit(remote_forward, cfg, topology, q, footer=footer, task_kind=task_kind,
                            client=client, episode=i)
                for i, q in enumerate(questions)
            ]
            return [f.result() for f in futures]
    finally:
        if own:
            client.close()
