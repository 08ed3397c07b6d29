"""Idea generation: a tool-looped agent that proposes, searches the
literature, reflects, and finalizes structured research proposals.

Each idea slot runs its own bounded agent loop. A finalize action is
accepted only after at least one literature search in the same slot, and
every accepted idea carries all seven fields of the idea payload.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .errors import (
    GatewayError,
    IdeationExhausted,
    MalformedArguments,
    UnknownAction,
)
from .gateway import ModelGateway, ModelRole
from .prompts import (
    ACTION_FINALIZE,
    ACTION_SEARCH,
    IDEA_JSON_KEYS,
    render,
)

logger = logging.getLogger(__name__)

TOOL_DESCRIPTIONS = (
    f'- "{ACTION_SEARCH}": query the scholarly literature database for '
    "related work; arguments: {\"query\": \"...\"}\n"
    f'- "{ACTION_FINALIZE}": submit the finished proposal; arguments: '
    "{\"idea\": {...}}"
)
TOOL_NAMES = f'"{ACTION_SEARCH}" or "{ACTION_FINALIZE}"'

_VALID_ACTIONS = (ACTION_SEARCH, ACTION_FINALIZE)

# Field order: (attribute, payload key)
_FIELD_MAP = tuple(
    (key.lower().replace(" ", "_"), key) for key in IDEA_JSON_KEYS
)


@dataclass
class Idea:
    name: str
    title: str
    short_hypothesis: str
    related_work: str
    abstract: str
    experiments: str
    risk_factors_and_limitations: str

    @classmethod
    def from_payload(cls, payload: dict) -> "Idea":
        """Build from the model-facing payload; every field must be filled."""
        if not isinstance(payload, dict):
            raise MalformedArguments("idea payload must be an object")
        values = {}
        for attr, key in _FIELD_MAP:
            value = payload.get(key)
            if not isinstance(value, str) or not value.strip():
                raise MalformedArguments(f"idea field {key!r} is missing or empty")
            values[attr] = value.strip()
        return cls(**values)

    def to_dict(self) -> dict:
        return {attr: getattr(self, attr) for attr, _ in _FIELD_MAP}

    @classmethod
    def from_dict(cls, data: dict) -> "Idea":
        return cls(**{attr: data[attr] for attr, _ in _FIELD_MAP})

    def to_markdown(self) -> str:
        lines = [f"# {self.title}", ""]
        for attr, key in _FIELD_MAP:
            if attr == "title":
                continue
            lines.append(f"## {key}")
            lines.append(getattr(self, attr))
            lines.append("")
        return "\n".join(lines)


@dataclass
class AgentAction:
    action: str
    arguments: dict


@dataclass
class IdeationEvent:
    round: int
    kind: str  # search | finalize | rejected | parse_error
    detail: str = ""


@dataclass
class IdeaTranscript:
    events: list[IdeationEvent] = field(default_factory=list)

    def count(self, kind: str) -> int:
        return sum(1 for e in self.events if e.kind == kind)

    @property
    def search_rounds(self) -> list[int]:
        return [e.round for e in self.events if e.kind == "search"]

    @property
    def finalize_round(self) -> Optional[int]:
        for event in self.events:
            if event.kind == "finalize":
                return event.round
        return None


def parse_action(completion: str) -> AgentAction:
    """Extract the ACTION name and the strict-JSON ARGUMENTS payload."""
    if not completion.strip():
        raise MalformedArguments("empty completion")
    action_match = re.search(r"ACTION:\s*\n?\s*([A-Za-z_][A-Za-z0-9_]*)", completion)
    if not action_match:
        raise MalformedArguments("no ACTION line found")
    name = action_match.group(1).strip()
    if name not in _VALID_ACTIONS:
        raise UnknownAction(f"unknown action {name!r}")

    args_index = completion.find("ARGUMENTS:")
    if args_index < 0:
        raise MalformedArguments("no ARGUMENTS section found")
    payload_text = completion[args_index + len("ARGUMENTS:") :].strip()
    # tolerate a fenced payload
    fence = re.search(r"```(?:json)?\s*\n(.*?)```", payload_text, re.DOTALL)
    if fence:
        payload_text = fence.group(1).strip()
    else:
        brace = payload_text.find("{")
        if brace < 0:
            raise MalformedArguments("ARGUMENTS payload is not a JSON object")
        payload_text = payload_text[brace:]
    try:
        arguments = json.loads(payload_text)
    except json.JSONDecodeError as exc:
        raise MalformedArguments(f"arguments did not parse: {exc}") from exc
    if not isinstance(arguments, dict):
        raise MalformedArguments("ARGUMENTS payload must be a JSON object")
    return AgentAction(action=name, arguments=arguments)


def _format_results(results: Sequence) -> str:
    lines = []
    for result in results:
        lines.append(
            f"- [lit] {result.title} ({result.year}, {result.venue}): {result.snippet}"
        )
    return "\n".join(lines) if lines else "(the search returned no results)"


def run_idea_slot(
    topic_description: str,
    prev_ideas: Sequence[Idea],
    reflection_rounds: int,
    gateway: ModelGateway,
    seed: Optional[int] = None,
    search_limit: int = 5,
) -> tuple[Idea, IdeaTranscript]:
    """One agent loop; returns the finalized idea and its transcript.

    Raises IdeationExhausted when the round budget runs out without an
    accepted finalize action.
    """
    system = render(
        "idea_system", tool_descriptions=TOOL_DESCRIPTIONS, tool_names=TOOL_NAMES
    )
    prev_block = (
        "\n".join(f"- {idea.name}: {idea.title}" for idea in prev_ideas)
        or "(none yet)"
    )
    transcript = IdeaTranscript()
    searched = False
    last_results = "(none)"

    for current_round in range(1, reflection_rounds + 1):
        if current_round == 1:
            user = render(
                "idea_initial",
                topic_description=topic_description,
                prev_ideas=prev_block,
            )
        else:
            user = render(
                "idea_reflection",
                current_round=current_round,
                num_reflections=reflection_rounds,
                last_tool_results=last_results,
            )
        completion = gateway.ask(
            ModelRole.SUMMARY_REPORT, system + "\n\n" + user, seed=seed
        )
        try:
            action = parse_action(completion)
        except (UnknownAction, MalformedArguments) as exc:
            transcript.events.append(
                IdeationEvent(current_round, "parse_error", str(exc))
            )
            last_results = (
                f"Your previous reply could not be used ({exc}). Follow the "
                "ACTION / ARGUMENTS response format exactly."
            )
            continue

        if action.action == ACTION_SEARCH:
            query = action.arguments.get("query", "")
            if not isinstance(query, str) or not query.strip():
                transcript.events.append(
                    IdeationEvent(current_round, "parse_error", "empty search query")
                )
                last_results = "The search action needs a nonempty query string."
                continue
            try:
                results = gateway.search_literature(query, search_limit)
            except GatewayError as exc:
                transcript.events.append(
                    IdeationEvent(current_round, "parse_error", f"search failed: {exc}")
                )
                last_results = "The literature search failed; try a different query."
                continue
            searched = True
            transcript.events.append(IdeationEvent(current_round, "search", query))
            last_results = _format_results(results)
            continue

        # FinalizeIdea
        if not searched:
            transcript.events.append(
                IdeationEvent(
                    current_round,
                    "rejected",
                    "finalize before any literature search",
                )
            )
            last_results = (
                "Finalize rejected: perform at least one literature search "
                "before finalizing the idea."
            )
            continue
        try:
            idea = Idea.from_payload(action.arguments.get("idea"))
        except MalformedArguments as exc:
            transcript.events.append(
                IdeationEvent(current_round, "rejected", str(exc))
            )
            last_results = (
                f"Finalize rejected ({exc}). Provide the complete IDEA JSON "
                "with every field filled."
            )
            continue
        transcript.events.append(IdeationEvent(current_round, "finalize", idea.name))
        return idea, transcript

    raise IdeationExhausted(
        f"no valid idea finalized within {reflection_rounds} rounds"
    )


def generate_ideas(
    topic_description: str,
    count: int,
    reflection_rounds: int,
    gateway: ModelGateway,
    seed: int = 0,
) -> list[Idea]:
    """Produce up to `count` validated ideas; exhausted slots are skipped."""
    if count < 1:
        raise ValueError("count must be at least 1")
    ideas: list[Idea] = []
    for slot in range(count):
        try:
            idea, _transcript = run_idea_slot(
                topic_description,
                ideas,
                reflection_rounds,
                gateway,
                seed=seed + slot,
            )
        except IdeationExhausted as exc:
            logger.warning("idea slot %d skipped: %s", slot, exc)
            continue
        taken = {existing.name for existing in ideas}
        if idea.name in taken:
            suffix = 2
            while f"{idea.name}-{suffix}" in taken:
                suffix += 1
            idea.name = f"{idea.name}-{suffix}"
        ideas.append(idea)
    return ideas
