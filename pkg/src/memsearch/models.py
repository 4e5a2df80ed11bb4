"""Model adapters: scripted stand-ins, the hash embedder, and a remote chat client.

Scripted models make whole search runs reproducible from a seed: the policy
is a branch table keyed on (step index, rendered-context match), the reward
model is an ordered rule list, and the augmentor model is a template/regex
engine.  All of them report deterministic whitespace token counts into
Telemetry so cost accounting can be exercised without a network.
"""

from __future__ import annotations

import json
import random
import re
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from .core import (
    FINAL_ANSWER,
    Action,
    ContextBundle,
    Step,
    Task,
    Telemetry,
    clamp01,
    fingerprint,
    stable_hash,
    trajectory_text,
)


class ConfigurationError(Exception):
    """A script or client config is malformed; raised eagerly at load time."""


class CredentialError(Exception):
    """The remote endpoint rejected our credentials; never retried."""


class TransportError(Exception):
    """The remote endpoint was unreachable after the configured retries."""


def _count_tokens(text: str) -> int:
    return len(text.split())


class PolicyModel(Protocol):
    def sample(
        self, task: Task, prefix: Sequence[Step], bundle: ContextBundle, temperature: float, seed: int
    ) -> Action: ...


class RewardModel(Protocol):
    def score(self, task_prompt: str, prefix: Sequence[Step], candidate: Step) -> float: ...


class AugmentorModel(Protocol):
    def generate(self, instruction: str, text: str) -> str: ...


class Embedder(Protocol):
    def embed(self, text: str) -> np.ndarray: ...


# ---------------------------------------------------------------------------
# scripted policy


@dataclass(frozen=True)
class PolicyRule:
    step: int
    match: str  # "*", "contains:<text>" or "fp:<hex>"
    candidates: tuple[tuple[str, float], ...]  # (action template, weight)


def _match_kind(match: str) -> int:
    # precedence: exact fingerprint > substring > default
    if match.startswith("fp:"):
        return 0
    if match.startswith("contains:"):
        return 1
    if match == "*":
        return 2
    raise ConfigurationError(f"bad policy match spec: {match!r}")


@dataclass(frozen=True)
class ScriptedPolicyConfig:
    rules: tuple[PolicyRule, ...]
    apology_text: str = "I cannot find the answer."
    apology_collapse_prob: float = 0.0

    @classmethod
    def from_dict(cls, raw: dict) -> "ScriptedPolicyConfig":
        rules = []
        for r in raw.get("rules", ()):
            cands = tuple(sorted(r["candidates"].items()))
            if not cands:
                raise ConfigurationError(f"policy rule at step {r.get('step')} has no candidates")
            rule = PolicyRule(step=int(r["step"]), match=r.get("match", "*"), candidates=cands)
            _match_kind(rule.match)  # validate eagerly
            rules.append(rule)
        prob = float(raw.get("apology_collapse_prob", 0.0))
        if not 0.0 <= prob <= 1.0:
            raise ConfigurationError(f"apology_collapse_prob {prob} outside [0, 1]")
        return cls(
            rules=tuple(rules),
            apology_text=raw.get("apology_text", cls.apology_text),
            apology_collapse_prob=prob,
        )


class ScriptedPolicy:
    """Deterministic branch-table policy.

    Rule selection for a call at step index i picks, among the rules with
    step == i, the first whose match applies, with fingerprint matches
    taking precedence over substring matches over the default.  A missing
    rule falls back to the configured apology.  The collapse branch models
    sampling-induced give-up: after an error observation, at temperature
    above zero, a default-matched rule apologizes with probability
    apology_collapse_prob instead of sampling its candidates.
    """

    def __init__(self, config: ScriptedPolicyConfig, telemetry: Telemetry | None = None):
        self.config = config
        self.telemetry = telemetry

    def _pick_rule(self, step_index: int, rendered: str) -> PolicyRule | None:
        fp = fingerprint(rendered)
        best: tuple[int, int] | None = None
        best_rule: PolicyRule | None = None
        for pos, rule in enumerate(self.config.rules):
            if rule.step != step_index:
                continue
            kind = _match_kind(rule.match)
            if kind == 0 and rule.match[3:] != fp:
                continue
            if kind == 1 and rule.match[len("contains:"):] not in rendered:
                continue
            key = (kind, pos)
            if best is None or key < best:
                best, best_rule = key, rule
        return best_rule

    def _fill(self, template: str, task: Task, prefix: Sequence[Step]) -> str:
        values = dict(task.meta)
        values.setdefault("prompt", task.prompt)
        values.setdefault("task_id", task.task_id)
        values["last_observation"] = prefix[-1].observation.content if prefix else ""
        try:
            return template.format_map(values)
        except KeyError as exc:
            raise ConfigurationError(f"unknown placeholder {exc} in template {template!r}") from exc

    def _apology(self) -> Action:
        text = self.config.apology_text
        return Action(FINAL_ANSWER, text, f"{FINAL_ANSWER}|{text}")

    def sample(
        self, task: Task, prefix: Sequence[Step], bundle: ContextBundle, temperature: float, seed: int
    ) -> Action:
        prompt_tokens = (
            _count_tokens(task.prompt)
            + _count_tokens(bundle.rendered)
            + sum(_count_tokens(s.action.raw_text) + _count_tokens(s.observation.content) for s in prefix)
        )
        step_index = len(prefix)
        rule = self._pick_rule(step_index, bundle.rendered)
        if rule is None:
            action = self._apology()
        else:
            action = self._sample_rule(rule, task, prefix, bundle, temperature, seed, step_index)
        if self.telemetry is not None:
            self.telemetry.record("policy", prompt_tokens, _count_tokens(action.raw_text))
        return action

    def _sample_rule(
        self,
        rule: PolicyRule,
        task: Task,
        prefix: Sequence[Step],
        bundle: ContextBundle,
        temperature: float,
        seed: int,
        step_index: int,
    ) -> Action:
        last_errored = bool(prefix) and prefix[-1].observation.is_error
        if (
            temperature > 0.0
            and rule.match == "*"
            and last_errored
            and self.config.apology_collapse_prob > 0.0
        ):
            coin = random.Random(stable_hash("collapse", seed, step_index))
            if coin.random() < self.config.apology_collapse_prob:
                return self._apology()

        templates = [t for t, _ in rule.candidates]
        weights = [w for _, w in rule.candidates]
        if temperature <= 0.0:
            # argmax weight; candidates are pre-sorted so ties break lexicographically
            template = templates[int(np.argmax(weights))]
        else:
            rng = random.Random(stable_hash("sample", seed, step_index, fingerprint(bundle.rendered)))
            template = rng.choices(templates, weights=weights, k=1)[0]
        filled = self._fill(template, task, prefix)
        tool, _, args = filled.partition("|")
        return Action(tool, args, filled)


# ---------------------------------------------------------------------------
# scripted reward model


@dataclass(frozen=True)
class RewardRule:
    score: float
    tool: str | None = None
    is_error: bool | None = None
    obs_contains: str | None = None
    args_contains: str | None = None

    def matches(self, step: Step) -> bool:
        if self.tool is not None and step.action.tool_name != self.tool:
            return False
        if self.is_error is not None and step.observation.is_error != self.is_error:
            return False
        if self.obs_contains is not None and self.obs_contains not in step.observation.content:
            return False
        if self.args_contains is not None and self.args_contains not in step.action.arguments:
            return False
        return True


class ScriptedRewardModel:
    """Ordered first-match rule list over (tool, error flag, substrings)."""

    def __init__(self, rules: Sequence[RewardRule], default: float, telemetry: Telemetry | None = None):
        for r in list(rules) + [RewardRule(score=default)]:
            if not 0.0 <= r.score <= 1.0:
                raise ConfigurationError(f"reward rule score {r.score} outside [0, 1]")
        self.rules = tuple(rules)
        self.default = default
        self.telemetry = telemetry

    @classmethod
    def from_dict(cls, raw: dict, telemetry: Telemetry | None = None) -> "ScriptedRewardModel":
        rules = [
            RewardRule(
                score=float(r["score"]),
                tool=r.get("tool"),
                is_error=r.get("is_error"),
                obs_contains=r.get("obs_contains"),
                args_contains=r.get("args_contains"),
            )
            for r in raw.get("rules", ())
        ]
        return cls(rules, float(raw.get("default", 0.5)), telemetry)

    def score(self, task_prompt: str, prefix: Sequence[Step], candidate: Step) -> float:
        value = self.default
        for rule in self.rules:
            if rule.matches(candidate):
                value = rule.score
                break
        if self.telemetry is not None:
            tokens_in = (
                _count_tokens(task_prompt)
                + sum(_count_tokens(s.action.raw_text) for s in prefix)
                + _count_tokens(candidate.action.raw_text)
                + _count_tokens(candidate.observation.content)
            )
            self.telemetry.record("supervisor", tokens_in, 1)
        return value


# ---------------------------------------------------------------------------
# scripted augmentor model

REFLECT = "REFLECT"
EXTRACT_FACTS = "EXTRACT_FACTS"


@dataclass(frozen=True)
class FactPattern:
    pattern: str
    template: str
    split: str | None = None


class ScriptedAugmentorModel:
    """Template engine for reflection and fact extraction over trajectory text.

    REFLECT returns the first rule text whose `contains` probe occurs in the
    input, else the default reflection.  EXTRACT_FACTS runs each regex over
    the input; every match emits one fact per template (or one per
    `split`-separated piece of the first group), newline-separated.
    """

    def __init__(
        self,
        reflection_rules: Sequence[tuple[str, str]],
        reflection_default: str,
        fact_patterns: Sequence[FactPattern],
        telemetry: Telemetry | None = None,
    ):
        self.reflection_rules = tuple(reflection_rules)
        self.reflection_default = reflection_default
        self.fact_patterns = tuple(fact_patterns)
        self._compiled = [(re.compile(p.pattern, re.MULTILINE), p) for p in fact_patterns]
        self.telemetry = telemetry

    @classmethod
    def from_dict(cls, raw: dict, telemetry: Telemetry | None = None) -> "ScriptedAugmentorModel":
        refl = raw.get("reflection", {})
        facts = raw.get("facts", {})
        patterns = [
            FactPattern(pattern=p["pattern"], template=p["template"], split=p.get("split"))
            for p in facts.get("rules", ())
        ]
        return cls(
            reflection_rules=[(r["contains"], r["text"]) for r in refl.get("rules", ())],
            reflection_default=refl.get("default", "The last attempt failed; reconsider the approach."),
            fact_patterns=patterns,
            telemetry=telemetry,
        )

    def generate(self, instruction: str, text: str) -> str:
        if instruction == REFLECT:
            out = self.reflection_default
            for probe, reflection in self.reflection_rules:
                if probe in text:
                    out = reflection
                    break
            out = " ".join(out.split())  # exactly one line
        elif instruction == EXTRACT_FACTS:
            facts: list[str] = []
            for compiled, spec in self._compiled:
                for m in compiled.finditer(text):
                    groups = m.groups()
                    if spec.split is not None:
                        for piece in groups[0].split(spec.split):
                            piece = piece.strip()
                            if piece:
                                facts.append(spec.template.format(piece, *groups[1:]))
                    else:
                        facts.append(spec.template.format(*groups))
            out = "\n".join(facts)
        else:
            raise ConfigurationError(f"unknown augmentor instruction: {instruction!r}")
        if self.telemetry is not None:
            self.telemetry.record("supervisor", _count_tokens(text), _count_tokens(out))
        return out


# ---------------------------------------------------------------------------
# embeddings


def hash_embed(text: str, dim: int = 64) -> np.ndarray:
    """Deterministic signed feature-hash embedding, L2-normalized.

    Features are lowercased word unigrams and bigrams, so the embedding is
    invariant to leading/trailing/duplicate whitespace.  Empty text maps to
    the first basis vector.
    """
    if dim < 8:
        raise ValueError(f"embedding dim {dim} too small, need >= 8")
    tokens = text.lower().split()
    vec = np.zeros(dim, dtype=np.float64)
    if not tokens:
        vec[0] = 1.0
        return vec
    grams = tokens + [f"{a} {b}" for a, b in zip(tokens, tokens[1:])]
    for gram in grams:
        h = stable_hash("embed", gram)
        idx = h % dim
        sign = 1.0 if (h >> 32) & 1 else -1.0
        vec[idx] += sign
    norm = float(np.linalg.norm(vec))
    if norm == 0.0:
        vec[0] = 1.0
        return vec
    return vec / norm


class HashEmbedder:
    def __init__(self, dim: int = 64):
        self.dim = dim

    def embed(self, text: str) -> np.ndarray:
        return hash_embed(text, self.dim)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a)) * float(np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a, b) / denom)


# ---------------------------------------------------------------------------
# remote chat client


@dataclass(frozen=True)
class RemoteChatConfig:
    url: str
    model: str
    api_key: str | None = None
    role: str = "policy"  # telemetry bucket
    max_retries: int = 3
    timeout: float = 30.0
    retry_delay: float = 0.0


class RemoteChatClient:
    """Minimal OpenAI-style chat completion client over stdlib urllib.

    Retries transport failures up to max_retries; a 401 is a credential
    error and is never retried.  Usage numbers from the response are
    accumulated into the attached Telemetry.
    """

    def __init__(self, config: RemoteChatConfig, telemetry: Telemetry | None = None):
        if config.max_retries < 1:
            raise ConfigurationError("max_retries must be at least 1")
        self.config = config
        self.telemetry = telemetry

    def complete(self, messages: list[dict[str, str]], temperature: float = 0.0) -> str:
        payload = json.dumps(
            {"model": self.config.model, "messages": messages, "temperature": temperature}
        ).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        last_exc: Exception | None = None
        for attempt in range(self.config.max_retries):
            try:
                req = urllib.request.Request(self.config.url, data=payload, headers=headers)
                with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                    body = json.loads(resp.read().decode("utf-8"))
                return self._ingest(body)
            except urllib.error.HTTPError as exc:
                if exc.code == 401:
                    raise CredentialError("remote endpoint rejected credentials (401)") from exc
                detail = exc.read().decode("utf-8", errors="replace")
                raise ConfigurationError(f"remote endpoint returned {exc.code}: {detail}") from exc
            except (urllib.error.URLError, TimeoutError, ConnectionError, json.JSONDecodeError) as exc:
                last_exc = exc
                if attempt + 1 < self.config.max_retries and self.config.retry_delay > 0:
                    time.sleep(self.config.retry_delay)
        raise TransportError(
            f"remote endpoint unreachable after {self.config.max_retries} attempts"
        ) from last_exc

    def _ingest(self, body: dict) -> str:
        try:
            text = body["choices"][0]["message"]["content"]
            usage = body.get("usage", {})
            tokens_in = int(usage.get("prompt_tokens", 0))
            tokens_out = int(usage.get("completion_tokens", 0))
        except (KeyError, IndexError, TypeError) as exc:
            raise ConfigurationError(f"malformed chat completion response: {body!r}") from exc
        if self.telemetry is not None:
            self.telemetry.record(self.config.role, tokens_in, tokens_out)
        return text


_TOOL_CALL = re.compile(r"^[A-Z][A-Z_]*\|")


class RemotePolicy:
    """Adapter exposing a RemoteChatClient as a PolicyModel.

    The response text is kept verbatim as the action's raw_text.  A first
    line of the form TOOL|arguments is parsed as a tool call; anything else
    is treated as a submitted final answer.
    """

    def __init__(self, client: RemoteChatClient):
        self.client = client

    def sample(
        self, task: Task, prefix: Sequence[Step], bundle: ContextBundle, temperature: float, seed: int
    ) -> Action:
        parts = [task.prompt]
        if bundle.rendered:
            parts.append(bundle.rendered)
        if prefix:
            parts.append(trajectory_text(prefix))
        messages = [
            {"role": "system", "content": "Respond with a single TOOL|arguments line."},
            {"role": "user", "content": "\n\n".join(parts)},
        ]
        text = self.client.complete(messages, temperature=temperature)
        first_line = text.strip().splitlines()[0] if text.strip() else ""
        if _TOOL_CALL.match(first_line):
            tool, _, args = first_line.partition("|")
            return Action(tool, args, text)
        return Action(FINAL_ANSWER, text.strip(), text)


class ClampingRewardAdapter:
    """Wraps any reward source and clamps its output into [0, 1] at ingestion."""

    def __init__(self, inner: RewardModel):
        self.inner = inner

    def score(self, task_prompt: str, prefix: Sequence[Step], candidate: Step) -> float:
        return clamp01(self.inner.score(task_prompt, prefix, candidate))
