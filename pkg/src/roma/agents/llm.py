"""Chat-completions HTTP backend."""

from __future__ import annotations

import os
import threading
import time
from dataclasses import dataclass, field

import httpx

from .base import Agent, AgentError, Completion, Decoding, ProtocolError, TokenCost


@dataclass(frozen=True)
class Price:
    input_per_mtok: float = 0.0
    output_per_mtok: float = 0.0

    def dollars(self, input_tokens: int, output_tokens: int) -> float:
        return (input_tokens * self.input_per_mtok + output_tokens * self.output_per_mtok) / 1e6


@dataclass
class Endpoint:
    name: str
    url: str
    auth_env: str | None = None
    prices: dict[str, Price] = field(default_factory=dict)
    max_in_flight: int = 8
    timeout_s: float = 120.0

    def __post_init__(self) -> None:
        # shared by every agent bound to this endpoint
        self._gate = threading.BoundedSemaphore(self.max_in_flight)

    def headers(self) -> dict[str, str]:
        h = {"Content-Type": "application/json"}
        if self.auth_env:
            token = os.environ.get(self.auth_env)
            if token:
                h["Authorization"] = f"Bearer {token}"
        return h


class ChatCompletionsAgent(Agent):
    """One POST per call; retries are the caller's job (every attempt gets traced)."""

    def __init__(self, endpoint: Endpoint, model: str, client: httpx.Client | None = None):
        self.endpoint = endpoint
        self.model = model
        self.name = f"{endpoint.name}:{model}"
        self._client = client or httpx.Client(timeout=endpoint.timeout_s)

    def complete(self, prompt, *, system=None, decoding=Decoding()):
        messages = []
        if system:
            messages.append({"role": "system", "content": system})
        messages.append({"role": "user", "content": prompt})
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_output_tokens,
            "seed": decoding.seed,
        }
        t0 = time.perf_counter()
        with self.endpoint._gate:
            try:
                resp = self._client.post(self.endpoint.url, json=payload, headers=self.endpoint.headers())
            except httpx.HTTPError as e:
                raise AgentError(f"{self.name}: transport error: {e}") from e
        latency = time.perf_counter() - t0
        if resp.status_code != 200:
            raise AgentError(f"{self.name}: HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage") or {}
            n_in = int(usage.get("prompt_tokens", 0))
            n_out = int(usage.get("completion_tokens", 0))
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise ProtocolError(f"{self.name}: malformed response body: {e}") from e
        if not isinstance(text, str):
            raise ProtocolError(f"{self.name}: response content is not text")
        price = self.endpoint.prices.get(self.model, Price())
        return Completion(text, TokenCost(n_in, n_out, price.dollars(n_in, n_out), latency))
