"""Decision types exchanged between the kernel and a backend, plus token and cost accounting."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Mapping, Protocol, Union

BYTES_PER_TOKEN = 4


class BackendError(RuntimeError):
    """Backend could not produce a decision (transport failure after retries)."""


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ToolInvocation:
    name: str
    args: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ToolCalls:
    calls: tuple[ToolInvocation, ...]


@dataclass(frozen=True)
class Handoff:
    target: str


@dataclass(frozen=True)
class Subagent:
    target: str
    request: dict


@dataclass(frozen=True)
class Final:
    text: str


Decision = Union[ToolCalls, Handoff, Subagent, Final]


@dataclass
class Usage:
    """Vendor-reported token counts, when a remote backend returns them."""

    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass
class DecisionContext:
    agent: Any  # AgentSpec
    topology: str
    messages: list[dict]
    schema: str
    peers: tuple[str, ...] = ()
    tools: tuple[Any, ...] = ()  # ToolDescriptors of the active agent

    def render(self) -> str:
        """Text the model would receive; the input-token estimate is taken over this."""
        return "\n".join([
            self.schema,
            json.dumps({"peers": list(self.peers)}, separators=(",", ":")) if self.peers else "",
            json.dumps(self.messages, sort_keys=True, separators=(",", ":")),
        ])


class Backend(Protocol):
    name: str

    def decide(self, ctx: DecisionContext) -> Decision: ...


def serialize_decision(decision: Decision) -> str:
    if isinstance(decision, ToolCalls):
        body = {"tool_calls": [{"name": c.name, "args": c.args} for c in decision.calls]}
    elif isinstance(decision, Handoff):
        body = {"handoff": decision.target}
    elif isinstance(decision, Subagent):
        body = {"delegate": decision.target, "request": decision.request}
    else:
        body = {"final": decision.text}
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def estimate_tokens(text: str) -> int:
    """ceil(utf-8 bytes / 4)."""
    return math.ceil(len(text.encode("utf-8")) / BYTES_PER_TOKEN)


PriceTable = Mapping[str, tuple[float, float]]

# Offline backends cost nothing; remote model prices come from a config file.
DEFAULT_PRICES: dict[str, tuple[float, float]] = {"scripted": (0.0, 0.0), "planner": (0.0, 0.0)}


def cost_cents(tokens_in: int, tokens_out: int, model: str, table: PriceTable) -> float:
    """Cost in cents given per-1M-token prices (also in cents)."""
    if model not in table:
        raise ConfigError(f"no price entry for model {model!r}")
    p_in, p_out = table[model]
    return tokens_in * p_in / 1e6 + tokens_out * p_out / 1e6


def load_price_table(text: str) -> dict[str, tuple[float, float]]:
    """Parse ``model = input_price, output_price`` lines (cents per 1M tokens)."""
    table = dict(DEFAULT_PRICES)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'model = in, out'")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            p_in, p_out = (float(v) for v in value.split(","))
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad prices {value!r}") from exc
        if p_in < 0 or p_out < 0:
            raise ConfigError(f"line {lineno}: prices must be >= 0")
        table[key] = (p_in, p_out)
    return table
