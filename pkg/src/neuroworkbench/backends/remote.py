"""Chat-completions client backend with retries, a shared rate limiter and transcript recording."""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import httpx

from .base import BackendError, ConfigError, DecisionContext, Final, Handoff, Subagent, ToolCalls, ToolInvocation, Usage

log = logging.getLogger(__name__)

API_KEY_ENV = "WORKBENCH_API_KEY"
RETRY_STATUSES = frozenset({408, 409, 425, 429, 500, 502, 503, 504})
HANDOFF_PREFIX = "transfer_to_"
DELEGATE_PREFIX = "ask_"

_JSON_TYPES = {
    "image": {"type": "string"},
    "handle": {"type": "string"},
    "text": {"type": "string"},
    "number": {"type": "number"},
    "integer": {"type": "integer"},
    "number_list": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
}


@dataclass
class RemoteConfig:
    endpoint: str
    model: str
    api_key: str
    max_retries: int = 5
    backoff_seconds: float = 1.0
    backoff_cap_seconds: float = 60.0
    timeout_seconds: float = 120.0
    requests_per_minute: float | None = None

    @classmethod
    def from_env(cls, endpoint: str, model: str, **kw) -> "RemoteConfig":
        key = os.environ.get(API_KEY_ENV)
        if not key:
            raise ConfigError(f"remote backend needs the {API_KEY_ENV} environment variable")
        if not endpoint:
            raise ConfigError("remote backend needs an endpoint URL")
        return cls(endpoint, model, key, **kw)


class RateLimiter:
    """Minimum spacing between request starts, shared by every thread that holds it."""

    def __init__(self, per_minute: float | None, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        self.interval = 60.0 / per_minute if per_minute else 0.0
        self._clock = clock
        self._sleep = sleep
        self._lock = threading.Lock()
        self._next = 0.0

    def acquire(self) -> None:
        if self.interval <= 0:
            return
        with self._lock:
            now = self._clock()
            wait = self._next - now
            self._next = max(now, self._next) + self.interval
        if wait > 0:
            self._sleep(wait)


def tool_schema(descriptor) -> dict:
    props, required = {}, []
    for p in descriptor.params:
        schema = dict(_JSON_TYPES.get(p.type, {"type": "string"}))
        if p.choices:
            schema = {"type": "string", "enum": list(p.choices)}
        if p.description:
            schema["description"] = p.description
        props[p.name] = schema
        if p.required:
            required.append(p.name)
    return {"type": "function", "function": {
        "name": descriptor.name, "description": descriptor.description,
        "parameters": {"type": "object", "properties": props, "required": required},
    }}


def peer_schemas(ctx: DecisionContext) -> list[dict]:
    out = []
    for peer in ctx.peers:
        if ctx.topology == "handoffs":
            out.append({"type": "function", "function": {
                "name": HANDOFF_PREFIX + peer, "description": f"Hand the conversation to the {peer} agent.",
                "parameters": {"type": "object", "properties": {}},
            }})
        else:
            out.append({"type": "function", "function": {
                "name": DELEGATE_PREFIX + peer,
                "description": f"Send a structured request to the {peer} agent and wait for its response.",
                "parameters": {"type": "object", "required": ["task"], "properties": {
                    "task": {"type": "string"},
                    "inputs": {"type": "object"},
                    "expected_outputs": {"type": "array", "items": {"type": "string"}},
                }},
            }})
    return out


def chat_messages(ctx: DecisionContext) -> list[dict]:
    """Kernel transcript to chat-completions messages (synthetic call ids)."""
    out = [{"role": "system", "content": ctx.agent.instructions}]
    pending: str | None = None
    for n, msg in enumerate(ctx.messages):
        role = msg.get("role")
        if role == "user":
            out.append({"role": "user", "content": msg["content"]})
        elif role == "assistant" and "tool_calls" in msg:
            pending = f"call_{n}"
            calls = [{"id": pending, "type": "function",
                      "function": {"name": c["name"], "arguments": json.dumps(c.get("args", {}))}}
                     for c in msg["tool_calls"]]
            out.append({"role": "assistant", "content": None, "tool_calls": calls})
        elif role == "assistant" and "delegate" in msg:
            pending = f"call_{n}"
            out.append({"role": "assistant", "content": None, "tool_calls": [{
                "id": pending, "type": "function",
                "function": {"name": DELEGATE_PREFIX + msg["delegate"], "arguments": json.dumps(msg["request"])}}]})
        elif role == "assistant":
            out.append({"role": "assistant", "content": msg.get("content", "")})
        elif role == "tool" and pending is not None:
            out.append({"role": "tool", "tool_call_id": pending, "content": msg["content"]})
            pending = None
        elif role == "tool":
            out.append({"role": "user", "content": f"[kernel] {msg['content']}"})
    return out


def parse_decision(body: dict):
    """Map a chat-completions response onto a decision; malformed calls fall back to Final."""
    try:
        message = body["choices"][0]["message"]
    except (KeyError, IndexError, TypeError):
        raise BackendError("response has no choices[0].message") from None
    text = message.get("content") or ""
    calls = message.get("tool_calls") or []
    if not calls:
        return Final(text)
    invocations = []
    try:
        for call in calls:
            fn = call["function"]
            name = fn["name"]
            raw = fn.get("arguments") or "{}"
            args = json.loads(raw) if isinstance(raw, str) else raw
            if not isinstance(args, dict):
                raise ValueError("arguments must be an object")
            if name.startswith(HANDOFF_PREFIX):
                return Handoff(name[len(HANDOFF_PREFIX):])
            if name.startswith(DELEGATE_PREFIX):
                return Subagent(name[len(DELEGATE_PREFIX):], args)
            invocations.append(ToolInvocation(name, args))
    except (KeyError, TypeError, ValueError) as exc:
        log.warning("malformed tool-call payload (%s); treating the reply as a final answer", exc)
        return Final(text)
    return ToolCalls(tuple(invocations))


class RemoteBackend:
    """Temperature-0 chat-completions client; safe to share across episode threads."""

    def __init__(self, config: RemoteConfig, *, client: httpx.Client | None = None,
                 limiter: RateLimiter | None = None, sleep: Callable[[float], None] = time.sleep,
                 record_path: str | Path | None = None):
        self.config = config
        self.name = f"remote:{config.model}"
        self.client = client or httpx.Client(timeout=config.timeout_seconds)
        self.limiter = limiter or RateLimiter(config.requests_per_minute)
        self._sleep = sleep
        self._local = threading.local()
        self._record_lock = threading.Lock()
        self.record_path = Path(record_path) if record_path else None
        self.retries = 0

    @property
    def last_usage(self) -> Usage | None:
        return getattr(self._local, "usage", None)

    def request_body(self, ctx: DecisionContext) -> dict:
        tools = [tool_schema(d) for d in ctx.tools] + peer_schemas(ctx)
        body: dict[str, Any] = {"model": self.config.model, "temperature": 0, "messages": chat_messages(ctx)}
        if tools:
            body["tools"] = tools
        return body

    def _post(self, body: dict) -> dict:
        headers = {"Authorization": f"Bearer {self.config.api_key}", "Content-Type": "application/json"}
        attempt = 0
        while True:
            self.limiter.acquire()
            try:
                resp = self.client.post(self.config.endpoint, json=body, headers=headers)
                status, reason = resp.status_code, resp.reason_phrase
            except httpx.TransportError as exc:
                resp, status, reason = None, None, str(exc)
            if resp is not None and 200 <= status < 300:
                return resp.json()
            retryable = status is None or status in RETRY_STATUSES or status >= 500
            if not retryable or attempt >= self.config.max_retries:
                raise BackendError(f"request failed after {attempt} retries: {status} {reason}")
            delay = min(self.config.backoff_seconds * 2 ** attempt, self.config.backoff_cap_seconds)
            attempt += 1
            self.retries += 1
            log.warning("retry %d after %s %s; sleeping %.1fs", attempt, status, reason, delay)
            self._sleep(delay)

    def decide(self, ctx: DecisionContext):
        if not ctx.messages:
            raise BackendError("empty context")
        body = self.request_body(ctx)
        reply = self._post(body)
        usage = reply.get("usage") or {}
        self._local.usage = Usage(int(usage.get("prompt_tokens", 0)), int(usage.get("completion_tokens", 0)))
        if self.record_path is not None:
            line = json.dumps({"agent": ctx.agent.name, "request": body, "response": reply}, sort_keys=True)
            with self._record_lock, self.record_path.open("a", encoding="utf-8") as fh:
                fh.write(line + "\n")
        return parse_decision(reply)
