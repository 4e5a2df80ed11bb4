"""Memory augmentors on the scope x abstraction grid.

Each augmentor follows the same four-stage pipeline: an invocation trigger,
an analysis transform (possibly a model call), a persistence predicate, and
retrieval/injection into the policy prompt.  Sibling context is ephemeral
and costs zero model calls; reflections and facts persist across
trajectories in a per-task MemoryStore.  Injection targets the policy
prompt only; reward model inputs never include bundle text.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    Abstraction,
    ContextBundle,
    ContextUnit,
    Scope,
    Step,
    Trajectory,
    render_bundle,
    step_text,
    trajectory_text,
)
from .models import EXTRACT_FACTS, REFLECT, AugmentorModel, Embedder, cosine

log = logging.getLogger(__name__)

REFLECTION_THRESHOLD = 0.3
DEDUP_THRESHOLD = 0.9


class AugmentorKind(str, Enum):
    NONE = "none"
    RAW_SIBLING = "raw_sibling"
    REFLECTION = "reflection"
    FACT = "fact"


class FactMode(str, Enum):
    INCREMENTAL = "incremental"  # per step, used under beam and MCTS
    BATCH = "batch"  # per trajectory, used under best-of-N


class AugmentorError(Exception):
    """An augmentor model call failed; the experiment cell must abort."""


@dataclass(frozen=True)
class AugmentorConfig:
    kind: AugmentorKind
    reflection_threshold: float = REFLECTION_THRESHOLD
    fact_mode: FactMode = FactMode.BATCH
    dedup_threshold: float = DEDUP_THRESHOLD

    def __post_init__(self) -> None:
        if not 0.0 <= self.reflection_threshold <= 1.0:
            raise ValueError("reflection threshold outside [0, 1]")
        if not 0.0 < self.dedup_threshold <= 1.0:
            raise ValueError("dedup threshold outside (0, 1]")


class MemoryStore:
    """Per-task store of persistent context units.

    The store only grows; nothing is evicted within a task.  Fact units are
    deduplicated at write time: a fact whose embedding has cosine similarity
    at or above dedup_threshold with any stored fact is dropped, so stored
    facts are pairwise dissimilar below the threshold.
    """

    def __init__(self, dedup_threshold: float = DEDUP_THRESHOLD):
        self.dedup_threshold = dedup_threshold
        self._units: list[ContextUnit] = []

    def __len__(self) -> int:
        return len(self._units)

    @property
    def units(self) -> tuple[ContextUnit, ...]:
        return tuple(self._units)

    def add(self, unit: ContextUnit) -> bool:
        """Store a persistent unit.  Returns False if dropped as a duplicate."""
        if not unit.persistent:
            raise ValueError("memory store holds persistent units only")
        if unit.abstraction is Abstraction.FACT:
            vec = np.asarray(unit.embedding)
            for other in self._units:
                if other.abstraction is not Abstraction.FACT:
                    continue
                if cosine(vec, np.asarray(other.embedding)) >= self.dedup_threshold:
                    return False
        self._units.append(unit)
        return True

    def dump(self, path: str | Path) -> None:
        """Write one structured record per unit, line-delimited."""
        with open(path, "w", encoding="utf-8") as fh:
            for u in self._units:
                fh.write(
                    json.dumps(
                        {
                            "scope": u.scope.value,
                            "abstraction": u.abstraction.value,
                            "body": u.body,
                            "source_iteration": u.source_iteration,
                        },
                        sort_keys=True,
                    )
                )
                fh.write("\n")


def sibling_context(prior_siblings: Sequence[Step]) -> list[ContextUnit]:
    """Raw cross-sibling units for the executed siblings of the current node.

    Pure formatting; performs no model calls.  Sibling i receives exactly
    the i records of siblings 0..i-1.
    """
    units = []
    for step in prior_siblings:
        tag = "error" if step.observation.is_error else "ok"
        body = (
            f"tried {step.action.tool_name}|{step.action.arguments} "
            f"-> [{tag}] {step.observation.content}"
        )
        units.append(
            ContextUnit(
                scope=Scope.CROSS_SIBLING,
                abstraction=Abstraction.RAW,
                body=body,
                source_iteration=0,
                persistent=False,
            )
        )
    return units


def maybe_reflect(
    trajectory: Trajectory, model: AugmentorModel, threshold: float = REFLECTION_THRESHOLD
) -> ContextUnit | None:
    """Produce one reflection unit iff the trajectory scored strictly below threshold."""
    if trajectory.trajectory_score >= threshold:
        return None
    text = trajectory_text(trajectory.steps, trajectory.terminal_kind)
    try:
        body = model.generate(REFLECT, text)
    except Exception as exc:
        raise AugmentorError(f"reflection model call failed: {exc}") from exc
    return ContextUnit(
        scope=Scope.CROSS_TRAJECTORY,
        abstraction=Abstraction.REFLECTION,
        body=body,
        source_iteration=trajectory.iteration_index,
        persistent=True,
    )


def extract_facts(
    text: str,
    iteration: int,
    model: AugmentorModel,
    embedder: Embedder,
    store: MemoryStore,
) -> int:
    """Extract facts from trajectory or step text and store the novel ones.

    Returns the number of facts actually stored.  Dedup happens at write
    time, including against facts emitted earlier in the same call.
    """
    try:
        raw = model.generate(EXTRACT_FACTS, text)
    except Exception as exc:
        raise AugmentorError(f"fact extraction model call failed: {exc}") from exc
    stored = 0
    for line in raw.splitlines():
        line = line.strip()
        if not line:
            continue
        unit = ContextUnit(
            scope=Scope.CROSS_TRAJECTORY,
            abstraction=Abstraction.FACT,
            body=line,
            source_iteration=iteration,
            persistent=True,
            embedding=tuple(embedder.embed(line)),
        )
        if store.add(unit):
            stored += 1
    return stored


def retrieve(store: MemoryStore, ephemeral: Sequence[ContextUnit] = ()) -> ContextBundle:
    """Inject-all retrieval: every persistent unit plus the ephemeral ones."""
    return render_bundle(list(store.units) + list(ephemeral))


class CompositeAugmentor:
    """The active augmentor set for one task run.

    Search code drives it through three hooks: retrieve() before each policy
    call, on_step() after each executed step (incremental fact extraction),
    and on_trajectory() after each completed trajectory (reflection and
    batch fact extraction).  Sibling units are not handled here; search
    passes them as ephemeral units since they exist only inside a single
    expansion.
    """

    def __init__(
        self,
        configs: Sequence[AugmentorConfig],
        store: MemoryStore,
        model: AugmentorModel | None = None,
        embedder: Embedder | None = None,
    ):
        kinds = [c.kind for c in configs if c.kind is not AugmentorKind.NONE]
        if len(set(kinds)) != len(kinds):
            raise ValueError(f"duplicate augmentor kinds in composition: {[k.value for k in kinds]}")
        self.configs = {c.kind: c for c in configs if c.kind is not AugmentorKind.NONE}
        self.store = store
        self.model = model
        self.embedder = embedder
        for kind in (AugmentorKind.REFLECTION, AugmentorKind.FACT):
            if kind in self.configs and self.model is None:
                raise ValueError(f"{kind.value} augmentor needs an augmentor model")
        if AugmentorKind.FACT in self.configs and self.embedder is None:
            raise ValueError("fact augmentor needs an embedder")

    @property
    def wants_siblings(self) -> bool:
        return AugmentorKind.RAW_SIBLING in self.configs

    def retrieve(self, ephemeral: Sequence[ContextUnit] = ()) -> ContextBundle:
        return retrieve(self.store, ephemeral)

    def on_step(self, step: Step, iteration: int) -> None:
        cfg = self.configs.get(AugmentorKind.FACT)
        if cfg is None or cfg.fact_mode is not FactMode.INCREMENTAL:
            return
        extract_facts(step_text(step), iteration, self.model, self.embedder, self.store)

    def on_trajectory(self, trajectory: Trajectory) -> None:
        fact_cfg = self.configs.get(AugmentorKind.FACT)
        if fact_cfg is not None and fact_cfg.fact_mode is FactMode.BATCH:
            text = trajectory_text(trajectory.steps, trajectory.terminal_kind)
            extract_facts(text, trajectory.iteration_index, self.model, self.embedder, self.store)
        refl_cfg = self.configs.get(AugmentorKind.REFLECTION)
        if refl_cfg is not None:
            unit = maybe_reflect(trajectory, self.model, refl_cfg.reflection_threshold)
            if unit is not None:
                self.store.add(unit)


def compose(
    configs: Sequence[AugmentorConfig],
    store: MemoryStore | None = None,
    model: AugmentorModel | None = None,
    embedder: Embedder | None = None,
) -> CompositeAugmentor:
    """Build the composite for a task run; duplicate kinds are a config error."""
    dedup = DEDUP_THRESHOLD
    for c in configs:
        if c.kind is AugmentorKind.FACT:
            dedup = c.dedup_threshold
    return CompositeAugmentor(configs, store or MemoryStore(dedup), model, embedder)


def normalize_for_method(configs: Sequence[AugmentorConfig], method: str) -> tuple[AugmentorConfig, ...]:
    """Pin the fact trigger to the search method: incremental extraction under
    expansion-based methods, one batch call per trajectory under best-of-N."""
    mode = FactMode.BATCH if method == "best_of_n" else FactMode.INCREMENTAL
    return tuple(
        replace(c, fact_mode=mode) if c.kind is AugmentorKind.FACT else c for c in configs
    )
