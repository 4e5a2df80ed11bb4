"""Shared value types for memory-augmented search.

Everything here is an immutable value object except :class:`Node` and
:class:`Telemetry`, which are mutable by design: nodes are updated in place
by backpropagation and telemetry counters accumulate during a run.  All
other types are frozen dataclasses and safe to share across threads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping

MAX_DEPTH = 15

FINAL_ANSWER = "FINAL_ANSWER"


class TerminalKind(str, Enum):
    ANSWERED = "answered"
    APOLOGY = "apology"
    MAX_DEPTH = "max_depth"


class Scope(str, Enum):
    CROSS_SIBLING = "cross_sibling"
    CROSS_TRAJECTORY = "cross_trajectory"


class Abstraction(str, Enum):
    RAW = "raw"
    REFLECTION = "reflection"
    FACT = "fact"


def stable_hash(*parts: object) -> int:
    """Deterministic 64-bit hash of the given parts, stable across processes."""
    h = hashlib.sha256()
    for p in parts:
        h.update(repr(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest()[:8], "big")


def fingerprint(text: str) -> str:
    """Short stable fingerprint of a rendered context, used for script keys."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def clamp01(x: float) -> float:
    return 0.0 if x < 0.0 else 1.0 if x > 1.0 else x


@dataclass(frozen=True)
class StateHandle:
    """Opaque handle to an environment state.

    snapshot_token is None exactly when the owning environment is not
    serializable (it cannot be forked).
    """

    env_id: str
    snapshot_token: str | None
    depth: int = 0

    def __post_init__(self) -> None:
        if self.depth < 0 or self.depth > MAX_DEPTH:
            raise ValueError(f"state depth {self.depth} outside [0, {MAX_DEPTH}]")


@dataclass(frozen=True)
class Action:
    tool_name: str
    arguments: str
    raw_text: str

    @property
    def is_final(self) -> bool:
        return self.tool_name == FINAL_ANSWER


@dataclass(frozen=True)
class Observation:
    content: str
    is_error: bool
    tool_name: str

    def __post_init__(self) -> None:
        # Empty content is reserved for the FINAL_ANSWER echo observation.
        if not self.content and self.tool_name != FINAL_ANSWER:
            raise ValueError("empty observation content for non-final tool")


@dataclass(frozen=True)
class Step:
    action: Action
    observation: Observation
    reward: float | None = None

    def __post_init__(self) -> None:
        if self.reward is not None and not 0.0 <= self.reward <= 1.0:
            raise ValueError(f"step reward {self.reward} outside [0, 1]")


def aggregate_score(steps: Iterable[Step]) -> float:
    """Trajectory score: mean of the step rewards that are present.

    With a process reward model every step is scored and this is the plain
    mean; without one only the final step may carry a score.  A trajectory
    with no scored steps at all aggregates to 0.0 so that an unscored
    trajectory counts as failed.
    """
    rewards = [s.reward for s in steps if s.reward is not None]
    if not rewards:
        return 0.0
    return sum(rewards) / len(rewards)


@dataclass(frozen=True)
class Trajectory:
    steps: tuple[Step, ...]
    terminal_kind: TerminalKind
    trajectory_score: float
    iteration_index: int
    bundle_fingerprints: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not 1 <= len(self.steps) <= MAX_DEPTH:
            raise ValueError(f"trajectory has {len(self.steps)} steps, expected 1..{MAX_DEPTH}")
        if not 0.0 <= self.trajectory_score <= 1.0:
            raise ValueError(f"trajectory score {self.trajectory_score} outside [0, 1]")

    @property
    def final_action(self) -> Action:
        return self.steps[-1].action

    def answer(self) -> str | None:
        """The submitted answer text, or None if the trajectory never answered."""
        if self.final_action.is_final:
            return self.final_action.arguments
        return None


@dataclass(frozen=True)
class ContextUnit:
    """One unit of memory, positioned on the scope x abstraction grid."""

    scope: Scope
    abstraction: Abstraction
    body: str
    source_iteration: int
    persistent: bool
    embedding: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if self.scope is Scope.CROSS_SIBLING and self.persistent:
            raise ValueError("cross-sibling units are ephemeral by definition")
        if self.abstraction is Abstraction.FACT and self.embedding is None:
            raise ValueError("fact units need an embedding for dedup")


_SECTION_LABELS = {
    Abstraction.FACT: "FACTS:",
    Abstraction.REFLECTION: "REFLECTIONS:",
    Abstraction.RAW: "SIBLINGS:",
}
_SECTION_ORDER = (Abstraction.FACT, Abstraction.REFLECTION, Abstraction.RAW)


@dataclass(frozen=True)
class ContextBundle:
    units: tuple[ContextUnit, ...]
    rendered: str

    @property
    def is_empty(self) -> bool:
        return not self.units


def render_bundle(units: Iterable[ContextUnit]) -> ContextBundle:
    """Render units into the canonical prompt block.

    Ordering is deterministic: persistent units first, stably sorted by
    source_iteration (insertion order breaks ties), then ephemeral units in
    insertion order.  The rendered text groups units into labeled sections
    in the fixed order FACTS:, REFLECTIONS:, SIBLINGS:; empty sections are
    omitted and an empty unit list renders as the empty string.
    """
    units = list(units)
    persistent = [u for u in units if u.persistent]
    persistent.sort(key=lambda u: u.source_iteration)  # stable: ties keep insertion order
    ephemeral = [u for u in units if not u.persistent]
    ordered = tuple(persistent + ephemeral)

    blocks: list[str] = []
    for section in _SECTION_ORDER:
        members = [u for u in ordered if u.abstraction is section]
        if not members:
            continue
        lines = [_SECTION_LABELS[section]]
        lines.extend(f"- {u.body}" for u in members)
        blocks.append("\n".join(lines))
    return ContextBundle(units=ordered, rendered="\n".join(blocks))


EMPTY_BUNDLE = render_bundle(())


@dataclass
class Node:
    """Search tree node.  Mutated only by the search module's backprop."""

    node_id: int
    state: StateHandle
    incoming_action: Action | None
    children: list[int] = field(default_factory=list)
    visit_count: int = 0
    q_value: float = 0.5
    is_terminal: bool = False

    def validate(self) -> None:
        if not 0.0 <= self.q_value <= 1.0:
            raise ValueError(f"node q_value {self.q_value} outside [0, 1]")
        if self.is_terminal and self.children:
            raise ValueError("terminal node must have no children")


@dataclass(frozen=True)
class PricingTable:
    """Dollar cost per 1M tokens, split by model role."""

    policy_in: float = 0.80
    policy_out: float = 4.00
    supervisor_in: float = 3.00
    supervisor_out: float = 15.00


@dataclass
class Telemetry:
    """Monotone call/token counters. Counters only ever increase."""

    policy_calls: int = 0
    policy_tokens_in: int = 0
    policy_tokens_out: int = 0
    supervisor_calls: int = 0
    supervisor_tokens_in: int = 0
    supervisor_tokens_out: int = 0

    def record(self, role: str, tokens_in: int, tokens_out: int) -> None:
        if tokens_in < 0 or tokens_out < 0:
            raise ValueError("token counts are non-negative")
        if role == "policy":
            self.policy_calls += 1
            self.policy_tokens_in += tokens_in
            self.policy_tokens_out += tokens_out
        elif role == "supervisor":
            self.supervisor_calls += 1
            self.supervisor_tokens_in += tokens_in
            self.supervisor_tokens_out += tokens_out
        else:
            raise ValueError(f"unknown telemetry role: {role!r}")

    def cost_estimate(self, pricing: PricingTable | None = None) -> dict[str, float]:
        p = pricing or PricingTable()
        policy = (self.policy_tokens_in * p.policy_in + self.policy_tokens_out * p.policy_out) / 1e6
        supervisor = (
            self.supervisor_tokens_in * p.supervisor_in + self.supervisor_tokens_out * p.supervisor_out
        ) / 1e6
        return {"policy": policy, "supervisor": supervisor, "total": policy + supervisor}

    def as_dict(self) -> dict[str, int]:
        return {
            "policy_calls": self.policy_calls,
            "policy_tokens_in": self.policy_tokens_in,
            "policy_tokens_out": self.policy_tokens_out,
            "supervisor_calls": self.supervisor_calls,
            "supervisor_tokens_in": self.supervisor_tokens_in,
            "supervisor_tokens_out": self.supervisor_tokens_out,
        }


@dataclass(frozen=True)
class GiveUpStats:
    """Apology accounting for a single beam run."""

    apology_terminals: int
    selected_apology: bool
    all_apology_states: int


@dataclass(frozen=True)
class SearchRecord:
    trajectories: tuple[Trajectory, ...]
    telemetry: Telemetry
    final_answer: str | None
    giveup: GiveUpStats | None = None


@dataclass(frozen=True)
class Task:
    """Runtime view of a task.  Deliberately excludes the gold answer."""

    task_id: str
    prompt: str
    tools: tuple[str, ...]
    benchmark: str
    env: str
    meta: Mapping[str, str]


def trajectory_text(traj_steps: Iterable[Step], terminal_kind: TerminalKind | None = None) -> str:
    """Plain-text rendering of a trajectory, the input format for analysis models."""
    lines: list[str] = []
    for i, step in enumerate(traj_steps):
        lines.append(f"STEP {i}")
        lines.append(f"ACTION: {step.action.tool_name}|{step.action.arguments}")
        tag = "ERROR" if step.observation.is_error else step.observation.tool_name
        lines.append(f"OBSERVATION[{tag}]: {step.observation.content}")
    if terminal_kind is not None:
        lines.append(f"TERMINAL: {terminal_kind.value}")
    return "\n".join(lines)


def step_text(step: Step) -> str:
    return trajectory_text([step])
