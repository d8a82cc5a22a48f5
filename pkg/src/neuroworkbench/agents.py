"""Agent specifications, topologies, the tool registry and the inter-agent protocol."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from typing import Any, Callable, Literal

from pydantic import BaseModel, ConfigDict, Field

from .backends.base import estimate_tokens
from .toolbox import TOOL_DESCRIPTORS, ToolDescriptor, ToolResult


class DuplicateError(ValueError):
    pass


class UnknownTool(KeyError):
    pass


class Topology(str, enum.Enum):
    SINGLE = "single"
    AGENTS_AS_TOOLS = "as-tools"
    HANDOFFS = "handoffs"
    ORCHESTRATOR = "orchestrator"

    @classmethod
    def parse(cls, value: "str | Topology") -> "Topology":
        if isinstance(value, Topology):
            return value
        aliases = {"agents-as-tools": cls.AGENTS_AS_TOOLS, "agentsastools": cls.AGENTS_AS_TOOLS}
        key = value.strip().lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


TOPOLOGIES = tuple(Topology)


class ToolRegistry:
    def __init__(self):
        self._tools: dict[str, tuple[ToolDescriptor, Callable[..., ToolResult]]] = {}

    def register_tool(self, descriptor: ToolDescriptor, binding: Callable[..., ToolResult]) -> None:
        if descriptor.name in self._tools:
            raise DuplicateError(f"tool {descriptor.name!r} already registered")
        self._tools[descriptor.name] = (descriptor, binding)

    def __contains__(self, name) -> bool:
        return name in self._tools

    def __len__(self) -> int:
        return len(self._tools)

    def names(self) -> list[str]:
        return list(self._tools)

    def descriptor(self, name: str) -> ToolDescriptor:
        if name not in self._tools:
            raise UnknownTool(name)
        return self._tools[name][0]

    def binding(self, name: str) -> Callable[..., ToolResult]:
        if name not in self._tools:
            raise UnknownTool(name)
        return self._tools[name][1]


def _toolbox_binding(name: str):
    def call(toolbox, **args):
        return toolbox.call(name, args)

    return call


def default_registry() -> ToolRegistry:
    registry = ToolRegistry()
    for d in TOOL_DESCRIPTORS:
        registry.register_tool(d, _toolbox_binding(d.name))
    return registry


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------

PREPROCESSING_TOOLS = ("skull_strip", "register", "resample")
SEGMENTATION_TOOLS = ("segment_pathology", "segment_anatomy", "verify_registration")
ANALYSIS_TOOLS = (
    "enumerate_lesions", "match_lesions", "lesion_geometry", "lesion_features", "localize",
    "list_labels", "load_image", "visualize",
)
ALL_TOOLS = tuple(d.name for d in TOOL_DESCRIPTORS)


@dataclass(frozen=True)
class AgentSpec:
    name: str
    instructions: str
    tools: tuple[str, ...]
    peers: tuple[str, ...] = ()


_RESPONSE_NOTE = (
    " When invoked with a Request, finish with a Response document: "
    '{"status": "done"|"failed", "outputs": {...}, "summary": "..."}, '
    "covering every field listed in expected_outputs."
)

INSTRUCTIONS = {
    "generalist": (
        "You are a neuro-radiology assistant operating on 3D brain MRI through tools. "
        "Plan the workflow, call tools, and answer with one 'field: value' line per requested field. "
        "Segmentation models need skull-stripped inputs in their atlas space "
        "(SRI24; MNI152 for postop-glioma); scans with 'native' in their file name must first be "
        "skull-stripped and registered. Lesion ids come from enumerate_lesions."
    ),
    "preprocessing": (
        "You are the preprocessing expert. Skull-strip and register native scans to the requested atlas, "
        "and return the resulting image handles per modality."
    ),
    "segmentation": (
        "You are the segmentation expert. Verify that inputs satisfy the model prerequisites "
        "(skull-stripped, atlas space: SRI24, MNI152 for postop-glioma) with verify_registration, "
        "then run the requested tumour or anatomy segmentation and return the mask handles."
    ),
    "analysis": (
        "You are the analysis expert and receive the user's question. Delegate preprocessing and "
        "segmentation to the experts, then measure lesions (enumeration, matching, geometry, features, "
        "localisation) and answer with one 'field: value' line per requested field."
    ),
    "orchestrator": (
        "You are the orchestrator. You have no tools: plan the workflow and assign tasks to the "
        "preprocessing, segmentation and analysis experts with structured Requests, then answer with one "
        "'field: value' line per requested field."
    ),
}

_SPECIALISTS = ("preprocessing", "segmentation", "analysis")
_TOOLS_BY_AGENT = {
    "preprocessing": PREPROCESSING_TOOLS,
    "segmentation": SEGMENTATION_TOOLS,
    "analysis": ANALYSIS_TOOLS,
    "orchestrator": (),
    "generalist": ALL_TOOLS,
}


def agents_for(topology: Topology | str) -> dict[str, AgentSpec]:
    """Agent specs wired for ``topology``."""
    topology = Topology.parse(topology)
    if topology is Topology.SINGLE:
        return {"generalist": AgentSpec("generalist", INSTRUCTIONS["generalist"], ALL_TOOLS)}
    specs = {}
    for name in _SPECIALISTS:
        if topology is Topology.HANDOFFS:
            peers = tuple(p for p in _SPECIALISTS if p != name)
            note = ""
        elif topology is Topology.AGENTS_AS_TOOLS:
            peers = ("preprocessing", "segmentation") if name == "analysis" else ()
            note = "" if name == "analysis" else _RESPONSE_NOTE
        else:
            peers, note = (), _RESPONSE_NOTE
        specs[name] = AgentSpec(name, INSTRUCTIONS[name] + note, _TOOLS_BY_AGENT[name], peers)
    if topology is Topology.ORCHESTRATOR:
        specs["orchestrator"] = AgentSpec("orchestrator", INSTRUCTIONS["orchestrator"], (), _SPECIALISTS)
    return specs


def entry_agent(topology: Topology | str) -> str:
    topology = Topology.parse(topology)
    return {
        Topology.SINGLE: "generalist",
        Topology.AGENTS_AS_TOOLS: "analysis",
        Topology.HANDOFFS: "analysis",
        Topology.ORCHESTRATOR: "orchestrator",
    }[topology]


def render_tool_schemas(agent: AgentSpec, registry: ToolRegistry) -> tuple[str, int]:
    """Instructions plus the agent's tool descriptors, and the token estimate of that text."""
    descriptors = [registry.descriptor(name).to_dict() for name in agent.tools]
    doc = agent.instructions
    if descriptors:
        doc += "\n\nTools:\n" + json.dumps(descriptors, sort_keys=True, separators=(",", ":"))
    return doc, estimate_tokens(doc)


# ---------------------------------------------------------------------------
# Inter-agent protocol
# ---------------------------------------------------------------------------


class InterAgentRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    task: str = Field(min_length=1)
    inputs: dict[str, Any] = Field(default_factory=dict)
    expected_outputs: list[str] = Field(default_factory=list)


class InterAgentResponse(BaseModel):
    model_config = ConfigDict(extra="forbid")

    status: Literal["done", "failed"]
    outputs: dict[str, Any] = Field(default_factory=dict)
    summary: str = ""
