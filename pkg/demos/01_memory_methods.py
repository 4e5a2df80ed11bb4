"""
Four ways to carry context between rollouts
===========================================

Walks the memory layer by hand, outside of any search loop: raw sibling
records, reflections, facts with write-time deduplication, and the
composite that stacks them.
"""

from memsearch.augmentors import (
    AugmentorConfig,
    AugmentorKind,
    MemoryStore,
    compose,
    extract_facts,
    maybe_reflect,
    sibling_context,
)
from memsearch.core import (
    Abstraction,
    Action,
    ContextUnit,
    Observation,
    Scope,
    Step,
    TerminalKind,
    Trajectory,
    render_bundle,
    trajectory_text,
)
from memsearch.models import HashEmbedder, ScriptedAugmentorModel

# A tiny executed prefix, as a search loop would have produced it.
steps = [
    Step(
        Action("QUERY", "(project Platform ghost)", "QUERY|(project Platform ghost)"),
        Observation("no such table 'ghost'", True, "QUERY"),
        0.1,
    ),
    Step(
        Action("LIST_TABLES", "", "LIST_TABLES|"),
        Observation("games", False, "LIST_TABLES"),
        0.6,
    ),
]

# 1. Raw sibling records: verbatim, ephemeral, no model in the loop.
units = sibling_context(steps)
print("sibling records:")
for u in units:
    print(" ", u.body)
print()

# They render into the prompt bundle under a SIBLINGS: header.
bundle = render_bundle(units)
print(bundle.rendered)
print()

# Ephemeral units are for prompts only; the persistent store refuses them.
store = MemoryStore(0.9)
try:
    store.add(units[0])
except ValueError as e:
    print("store refused sibling record:", e)
print()

# 2. Reflections: a supervisor writes one lesson, but only when the
# finished trajectory scored badly.  0.3 is already "good enough".
model = ScriptedAugmentorModel.from_dict(
    {"reflection": {"default": "Check the table listing before querying."}}
)
bad = Trajectory(tuple(steps), TerminalKind.ANSWERED, 0.1, 0)
okay = Trajectory(tuple(steps), TerminalKind.ANSWERED, 0.3, 0)
print("reflection for score 0.1:", maybe_reflect(bad, model).body)
print("reflection for score 0.3:", maybe_reflect(okay, model))
print()

# 3. Facts: short declaratives mined from the trajectory text by the
# supervisor model, deduplicated at write time by embedding cosine so the
# store never accumulates near-copies.  The LIST_TABLES observation below
# yields "table games exists" twice (two rules differing only in case),
# and only one copy survives.
fact_model = ScriptedAugmentorModel.from_dict(
    {
        "facts": {
            "rules": [
                {"pattern": r"OBSERVATION\[LIST_TABLES\]: (.+)", "template": "table {0} exists"},
                {"pattern": r"OBSERVATION\[LIST_TABLES\]: (.+)", "template": "Table {0} EXISTS"},
                {"pattern": r"no such table '(\w+)'", "template": "table {0} does not exist"},
            ]
        }
    }
)
stored = extract_facts(trajectory_text(bad.steps), 0, fact_model, HashEmbedder(), store)
print("facts offered: 3, stored:", stored)
for u in store.units:
    print("  kept:", u.body)
print()

# 4. The composite stacks augmentors and routes events.  Fact extraction en
# masse at trajectory end is the best-of-n wiring; per-step is the tree wiring.
composite = compose(
    (
        AugmentorConfig(AugmentorKind.FACT),
        AugmentorConfig(AugmentorKind.REFLECTION),
    ),
    model=ScriptedAugmentorModel.from_dict(
        {
            "facts": {
                "rules": [
                    {"pattern": r"no such table '(\w+)'", "template": "table {0} does not exist"}
                ]
            },
            "reflection": {"default": "List tables first."},
        }
    ),
    embedder=HashEmbedder(),
)
composite.on_trajectory(bad)
print("composite store after one bad trajectory:")
for u in composite.store.units:
    print(f"  [{u.abstraction.value}] {u.body}")

# Retrieval hands everything back, rendered into labelled sections.
retrieved = composite.retrieve()
print()
print(retrieved.rendered)
