"""Inference strategies: best-of-N, single-round beam, and MCTS.

All three draw actions from the same augmented policy: at every policy call
the active memory bundle is rendered into the prompt (policy prompts only;
reward model inputs never see bundle text).  Expansion of a node samples
n_actions candidates either in batch (identical prompts, i.i.d. draws) or
interleaved (candidate i's prompt carries the records of the i already
executed siblings).  Every run is a pure function of its seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

from .augmentors import CompositeAugmentor, sibling_context
from .core import (
    MAX_DEPTH,
    Action,
    GiveUpStats,
    Node,
    SearchRecord,
    StateHandle,
    Step,
    Task,
    Telemetry,
    TerminalKind,
    Trajectory,
    aggregate_score,
    clamp01,
    fingerprint,
    stable_hash,
)
from .envs import Environment, ForkUnsupported
from .models import PolicyModel, RewardModel


class SearchMethod(str, Enum):
    BEST_OF_N = "best_of_n"
    BEAM = "beam"
    MCTS = "mcts"


class BackpropMode(str, Enum):
    CUMULATIVE = "cumulative"
    DECAY = "decay"


class ExpansionMode(str, Enum):
    BATCH = "batch"
    INTERLEAVED = "interleaved"


class SimulateStrategy(str, Enum):
    MAX = "max"


class AdmissibilityError(Exception):
    """The method/memory/environment combination cannot run."""


DEFAULT_APOLOGY_MARKERS = (
    "i cannot",
    "i can't",
    "cannot find",
    "unable to",
    "i apologize",
    "sorry",
)


@dataclass(frozen=True)
class SearchConfig:
    method: SearchMethod
    n_budget: int = 5
    beam_width: int = 3
    n_actions: int = 3
    n_iters: int = 5
    w_exp: float = 1.0
    max_depth: int = MAX_DEPTH
    rollout_depth: int = MAX_DEPTH
    simulate_strategy: SimulateStrategy = SimulateStrategy.MAX
    backprop: BackpropMode = BackpropMode.CUMULATIVE
    decay_gamma: float = 0.5
    temperature: float = 0.0
    expansion: ExpansionMode = ExpansionMode.BATCH
    apology_markers: tuple[str, ...] = DEFAULT_APOLOGY_MARKERS

    def __post_init__(self) -> None:
        if min(self.n_budget, self.beam_width, self.n_actions, self.n_iters) < 1:
            raise ValueError("search widths and budgets must be at least 1")
        if not 1 <= self.max_depth <= MAX_DEPTH or not 1 <= self.rollout_depth <= MAX_DEPTH:
            raise ValueError(f"depth limits must lie in [1, {MAX_DEPTH}]")
        if self.w_exp < 0 or self.temperature < 0:
            raise ValueError("w_exp and temperature must be non-negative")
        if not 0.0 <= self.decay_gamma <= 1.0:
            raise ValueError("decay_gamma outside [0, 1]")
        if self.expansion is ExpansionMode.INTERLEAVED and self.method is SearchMethod.BEST_OF_N:
            raise ValueError("interleaved expansion needs an expansion-based method (beam or mcts)")


def is_apology(action: Action, markers: Sequence[str] = DEFAULT_APOLOGY_MARKERS) -> bool:
    if not action.is_final:
        return False
    text = action.arguments.lower()
    return any(m in text for m in markers)


def _terminal_kind(action: Action, markers: Sequence[str]) -> TerminalKind:
    return TerminalKind.APOLOGY if is_apology(action, markers) else TerminalKind.ANSWERED


def _scored_step(
    action: Action,
    observation,
    prm: RewardModel | None,
    task: Task,
    prefix: Sequence[Step],
) -> Step:
    if prm is None:
        return Step(action, observation)
    raw = prm.score(task.prompt, prefix, Step(action, observation))
    return Step(action, observation, clamp01(raw))


@dataclass(frozen=True)
class Candidate:
    step: Step
    state: StateHandle
    bundle_fp: str


def expand(
    env: Environment,
    task: Task,
    parent_state: StateHandle,
    prefix: Sequence[Step],
    policy: PolicyModel,
    prm: RewardModel | None,
    composite: CompositeAugmentor,
    config: SearchConfig,
    iteration: int,
    seed_salt: tuple,
) -> list[Candidate]:
    """Sample and execute n_actions sibling candidates of one node.

    BATCH: all candidates are sampled from byte-identical prompts before any
    of them executes.  INTERLEAVED: candidates are sampled one at a time and
    executed immediately, and candidate i's bundle carries exactly the i
    records of its already executed siblings.  Each candidate executes in
    its own fork of the parent state; a fork failure surfaces as an
    admissibility error.
    """

    def _fork() -> StateHandle:
        try:
            return env.fork(parent_state)
        except ForkUnsupported as exc:
            raise AdmissibilityError(str(exc)) from exc

    out: list[Candidate] = []
    if config.expansion is ExpansionMode.BATCH:
        bundle = composite.retrieve()
        fp = fingerprint(bundle.rendered)
        actions = [
            policy.sample(
                task, prefix, bundle, config.temperature, stable_hash(*seed_salt, "cand", i)
            )
            for i in range(config.n_actions)
        ]
        for action in actions:
            state, obs = env.step(_fork(), action)
            out.append(Candidate(_scored_step(action, obs, prm, task, prefix), state, fp))
        for cand in out:
            composite.on_step(cand.step, iteration)
    else:
        executed: list[Step] = []
        for i in range(config.n_actions):
            bundle = composite.retrieve(sibling_context(executed))
            action = policy.sample(
                task, prefix, bundle, config.temperature, stable_hash(*seed_salt, "cand", i)
            )
            state, obs = env.step(_fork(), action)
            step = _scored_step(action, obs, prm, task, prefix)
            executed.append(step)
            composite.on_step(step, iteration)
            out.append(Candidate(step, state, fingerprint(bundle.rendered)))
    return out


# ---------------------------------------------------------------------------
# best-of-N


def _linear_rollout(
    env: Environment,
    task: Task,
    policy: PolicyModel,
    prm: RewardModel | None,
    composite: CompositeAugmentor,
    config: SearchConfig,
    iteration: int,
    seed: int,
    salt: str,
) -> Trajectory:
    state = env.reset(task)
    steps: list[Step] = []
    fps: list[str] = []
    terminal = TerminalKind.MAX_DEPTH
    for depth in range(config.max_depth):
        bundle = composite.retrieve()
        action = policy.sample(
            task, steps, bundle, config.temperature, stable_hash(seed, salt, iteration, depth)
        )
        state, obs = env.step(state, action)
        step = _scored_step(action, obs, prm, task, steps)
        steps.append(step)
        fps.append(fingerprint(bundle.rendered))
        composite.on_step(step, iteration)
        if action.is_final:
            terminal = _terminal_kind(action, config.apology_markers)
            break
    return Trajectory(
        steps=tuple(steps),
        terminal_kind=terminal,
        trajectory_score=aggregate_score(steps),
        iteration_index=iteration,
        bundle_fingerprints=tuple(fps),
    )


def run_best_of_n(
    task: Task,
    env: Environment,
    policy: PolicyModel,
    composite: CompositeAugmentor,
    config: SearchConfig,
    seed: int = 0,
    prm: RewardModel | None = None,
    telemetry: Telemetry | None = None,
) -> SearchRecord:
    """Sequential independent attempts under a fixed budget.

    Always runs exactly n_budget attempts; there is no stop-on-correct
    (grading is offline).  Persistent memory written by attempt i is visible
    to attempts i+1.. through the composite's store.
    """
    if config.method is not SearchMethod.BEST_OF_N:
        raise ValueError(f"config method {config.method} is not best_of_n")
    trajectories: list[Trajectory] = []
    for i in range(config.n_budget):
        traj = _linear_rollout(env, task, policy, prm, composite, config, i, seed, "bon")
        trajectories.append(traj)
        composite.on_trajectory(traj)
    best = max(trajectories, key=lambda t: t.trajectory_score)  # ties: earliest attempt
    return SearchRecord(
        trajectories=tuple(trajectories),
        telemetry=telemetry or Telemetry(),
        final_answer=best.answer(),
    )


# ---------------------------------------------------------------------------
# single-round beam


@dataclass(frozen=True)
class _Beam:
    steps: tuple[Step, ...]
    state: StateHandle
    fps: tuple[str, ...]


def run_beam(
    task: Task,
    env: Environment,
    policy: PolicyModel,
    prm: RewardModel,
    composite: CompositeAugmentor,
    config: SearchConfig,
    seed: int = 0,
    telemetry: Telemetry | None = None,
) -> SearchRecord:
    """Single-round beam search with PRM top-B retention.

    At each level every active beam expands n_actions candidates; the pooled
    candidates are ranked by the PRM score of their new step and the top
    beam_width survive (ties keep creation order).  Terminals leave the
    active set.  The record carries every completed trajectory of the single
    round plus give-up statistics.
    """
    if config.method is not SearchMethod.BEAM:
        raise ValueError(f"config method {config.method} is not beam")
    if prm is None:
        raise ValueError("beam search needs a process reward model")
    if not env.serializable:
        raise AdmissibilityError(f"{env.env_id} is not serializable; beam search cannot fork")

    actives = [_Beam(steps=(), state=env.reset(task), fps=())]
    completed: list[Trajectory] = []
    apology_terminals = 0
    all_apology_states = 0

    for depth in range(config.max_depth):
        if not actives:
            break
        pool: list[tuple[_Beam, Candidate]] = []
        for b_idx, beam in enumerate(actives):
            cands = expand(
                env,
                task,
                beam.state,
                beam.steps,
                policy,
                prm,
                composite,
                config,
                iteration=0,
                seed_salt=(seed, "beam", depth, b_idx),
            )
            if all(is_apology(c.step.action, config.apology_markers) for c in cands):
                all_apology_states += 1
            pool.extend((beam, c) for c in cands)
        survivors = sorted(pool, key=lambda bc: -(bc[1].step.reward or 0.0))[: config.beam_width]
        next_actives: list[_Beam] = []
        for beam, cand in survivors:
            steps = beam.steps + (cand.step,)
            fps = beam.fps + (cand.bundle_fp,)
            if cand.step.action.is_final:
                kind = _terminal_kind(cand.step.action, config.apology_markers)
                if kind is TerminalKind.APOLOGY:
                    apology_terminals += 1
                completed.append(
                    Trajectory(steps, kind, aggregate_score(steps), 0, fps)
                )
            elif len(steps) >= config.max_depth:
                completed.append(
                    Trajectory(steps, TerminalKind.MAX_DEPTH, aggregate_score(steps), 0, fps)
                )
            else:
                next_actives.append(_Beam(steps, cand.state, fps))
        actives = next_actives

    best = max(completed, key=lambda t: t.trajectory_score)  # ties: completion order
    giveup = GiveUpStats(
        apology_terminals=apology_terminals,
        selected_apology=best.terminal_kind is TerminalKind.APOLOGY,
        all_apology_states=all_apology_states,
    )
    return SearchRecord(
        trajectories=tuple(completed),
        telemetry=telemetry or Telemetry(),
        final_answer=best.answer(),
        giveup=giveup,
    )


# ---------------------------------------------------------------------------
# MCTS


def uct_score(q: float, child_visits: int, parent_visits: int, w_exp: float) -> float:
    return q + w_exp * math.sqrt(math.log(max(parent_visits, 1)) / child_visits)


@dataclass(frozen=True)
class UctStats:
    """Visit/value snapshot of one node's children, for selection and audit."""

    parent_visits: int
    child_ids: tuple[int, ...]
    child_visits: tuple[int, ...]
    child_q: tuple[float, ...]

    def visit_balance(self) -> int:
        """parent visits minus the sum of child visits; nonzero counts the
        times this node itself ended a backprop path."""
        return self.parent_visits - sum(self.child_visits)


class _Tree:
    def __init__(self, root_state: StateHandle):
        self.nodes: list[Node] = [Node(node_id=0, state=root_state, incoming_action=None)]
        self.steps: dict[int, Step] = {}
        self.fps: dict[int, str] = {}
        self.parent: dict[int, int] = {}

    def add_child(self, parent_id: int, cand: Candidate, terminal: bool) -> int:
        nid = len(self.nodes)
        node = Node(
            node_id=nid,
            state=cand.state,
            incoming_action=cand.step.action,
            is_terminal=terminal,
        )
        self.nodes.append(node)
        self.nodes[parent_id].children.append(nid)
        self.steps[nid] = cand.step
        self.fps[nid] = cand.bundle_fp
        self.parent[nid] = parent_id
        return nid

    def path_to_root(self, nid: int) -> list[int]:
        path = [nid]
        while path[-1] != 0:
            path.append(self.parent[path[-1]])
        return path

    def prefix(self, nid: int) -> tuple[list[Step], list[str]]:
        ids = [n for n in reversed(self.path_to_root(nid)) if n != 0]
        return [self.steps[n] for n in ids], [self.fps[n] for n in ids]

    def stats(self, nid: int) -> UctStats:
        node = self.nodes[nid]
        kids = tuple(node.children)
        return UctStats(
            parent_visits=node.visit_count,
            child_ids=kids,
            child_visits=tuple(self.nodes[k].visit_count for k in kids),
            child_q=tuple(self.nodes[k].q_value for k in kids),
        )


def backprop(
    nodes: Sequence[Node],
    path_ids: Sequence[int],
    value: float,
    mode: BackpropMode,
    gamma: float = 0.5,
) -> None:
    """Propagate a simulation value along path_ids ordered leaf -> root.

    CUMULATIVE keeps each node's q as the running mean of the values backed
    up through it.  DECAY sets the leaf q to the value and then folds each
    child's updated q into its parent: q_p <- (1-gamma)*q_p + gamma*q_c.
    """
    if not path_ids:
        return
    if mode is BackpropMode.CUMULATIVE:
        for nid in path_ids:
            node = nodes[nid]
            node.visit_count += 1
            node.q_value += (value - node.q_value) / node.visit_count
    else:
        leaf = nodes[path_ids[0]]
        leaf.visit_count += 1
        leaf.q_value = value
        child_q = leaf.q_value
        for nid in path_ids[1:]:
            node = nodes[nid]
            node.visit_count += 1
            node.q_value = (1.0 - gamma) * node.q_value + gamma * child_q
            child_q = node.q_value


def _select_child(tree: _Tree, nid: int, w_exp: float) -> int:
    kids = tree.nodes[nid].children
    unvisited = [k for k in kids if tree.nodes[k].visit_count == 0]
    if unvisited:
        return unvisited[0]  # creation order
    parent_visits = tree.nodes[nid].visit_count
    return max(
        kids,
        key=lambda k: uct_score(
            tree.nodes[k].q_value, tree.nodes[k].visit_count, parent_visits, w_exp
        ),
    )


def run_mcts(
    task: Task,
    env: Environment,
    policy: PolicyModel,
    prm: RewardModel,
    composite: CompositeAugmentor,
    config: SearchConfig,
    seed: int = 0,
    telemetry: Telemetry | None = None,
) -> SearchRecord:
    """UCT tree search with a fixed iteration budget.

    Each iteration: select a leaf (unvisited children first, then UCT),
    expand it, simulate from the best-scored new child with per-step argmax
    over n_actions sampled continuations (the MAX strategy), and backprop
    the simulated trajectory's score.  Exactly n_iters trajectories are
    recorded; per-trajectory augmentors fire after every iteration, so
    memory written by iteration i is in the bundle from iteration i+1 on.
    """
    if config.method is not SearchMethod.MCTS:
        raise ValueError(f"config method {config.method} is not mcts")
    if prm is None:
        raise ValueError("mcts needs a process reward model")
    if not env.serializable:
        raise AdmissibilityError(f"{env.env_id} is not serializable; mcts cannot fork")

    tree = _Tree(env.reset(task))
    trajectories: list[Trajectory] = []

    for it in range(config.n_iters):
        nid = 0
        while tree.nodes[nid].children and not tree.nodes[nid].is_terminal:
            nid = _select_child(tree, nid, config.w_exp)
        prefix, prefix_fps = tree.prefix(nid)

        if tree.nodes[nid].is_terminal or len(prefix) >= config.max_depth:
            last = prefix[-1].action
            kind = (
                _terminal_kind(last, config.apology_markers)
                if last.is_final
                else TerminalKind.MAX_DEPTH
            )
            traj = Trajectory(
                tuple(prefix), kind, aggregate_score(prefix), it, tuple(prefix_fps)
            )
            path = tree.path_to_root(nid)
        else:
            cands = expand(
                env,
                task,
                tree.nodes[nid].state,
                prefix,
                policy,
                prm,
                composite,
                config,
                iteration=it,
                seed_salt=(seed, "mcts_expand", nid),
            )
            child_ids = [
                tree.add_child(nid, c, terminal=c.step.action.is_final) for c in cands
            ]
            pick = max(range(len(cands)), key=lambda i: cands[i].step.reward or 0.0)
            start_id, start = child_ids[pick], cands[pick]

            steps = prefix + [start.step]
            fps = prefix_fps + [start.bundle_fp]
            state = start.state
            terminal = (
                _terminal_kind(start.step.action, config.apology_markers)
                if start.step.action.is_final
                else TerminalKind.MAX_DEPTH
            )
            depth_cap = min(config.rollout_depth, config.max_depth)
            while not steps[-1].action.is_final and len(steps) < depth_cap:
                rollout_cands = expand(
                    env,
                    task,
                    state,
                    steps,
                    policy,
                    prm,
                    composite,
                    config,
                    iteration=it,
                    seed_salt=(seed, "mcts_roll", it, len(steps)),
                )
                keep = max(
                    range(len(rollout_cands)),
                    key=lambda i: rollout_cands[i].step.reward or 0.0,
                )
                chosen = rollout_cands[keep]
                steps.append(chosen.step)
                fps.append(chosen.bundle_fp)
                state = chosen.state
                if chosen.step.action.is_final:
                    terminal = _terminal_kind(chosen.step.action, config.apology_markers)
            traj = Trajectory(
                tuple(steps), terminal, aggregate_score(steps), it, tuple(fps)
            )
            path = tree.path_to_root(start_id)

        backprop(tree.nodes, path, traj.trajectory_score, config.backprop, config.decay_gamma)
        trajectories.append(traj)
        composite.on_trajectory(traj)

    finished = [t for t in trajectories if t.terminal_kind is not TerminalKind.MAX_DEPTH]
    best = max(finished, key=lambda t: t.trajectory_score) if finished else None
    return SearchRecord(
        trajectories=tuple(trajectories),
        telemetry=telemetry or Telemetry(),
        final_answer=best.answer() if best else None,
    )


# ---------------------------------------------------------------------------
# dispatch and serialization


def run_search(
    task: Task,
    env: Environment,
    policy: PolicyModel,
    composite: CompositeAugmentor,
    config: SearchConfig,
    seed: int = 0,
    prm: RewardModel | None = None,
    telemetry: Telemetry | None = None,
) -> SearchRecord:
    if config.method is SearchMethod.BEST_OF_N:
        return run_best_of_n(task, env, policy, composite, config, seed, prm, telemetry)
    if config.method is SearchMethod.BEAM:
        return run_beam(task, env, policy, prm, composite, config, seed, telemetry)
    if config.method is SearchMethod.MCTS:
        return run_mcts(task, env, policy, prm, composite, config, seed, telemetry)
    raise ValueError(f"unknown search method {config.method!r}")


def serialize_record(record: SearchRecord) -> str:
    """Line-delimited rendering of a SearchRecord, byte-stable across runs."""
    lines = []
    for t in record.trajectories:
        lines.append(
            json.dumps(
                {
                    "iteration": t.iteration_index,
                    "terminal_kind": t.terminal_kind.value,
                    "trajectory_score": t.trajectory_score,
                    "bundle_fingerprints": list(t.bundle_fingerprints),
                    "steps": [
                        {
                            "tool": s.action.tool_name,
                            "arguments": s.action.arguments,
                            "observation": s.observation.content,
                            "is_error": s.observation.is_error,
                            "reward": s.reward,
                        }
                        for s in t.steps
                    ],
                },
                sort_keys=True,
            )
        )
    summary = {
        "final_answer": record.final_answer,
        "telemetry": record.telemetry.as_dict(),
        "giveup": (
            {
                "apology_terminals": record.giveup.apology_terminals,
                "selected_apology": record.giveup.selected_apology,
                "all_apology_states": record.giveup.all_apology_states,
            }
            if record.giveup
            else None
        ),
    }
    lines.append(json.dumps(summary, sort_keys=True))
    return "\n".join(lines) + "\n"
