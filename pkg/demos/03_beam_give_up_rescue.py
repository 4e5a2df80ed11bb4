"""
When every beam apologizes, siblings are the cheapest fix
=========================================================

A policy that answers errors with "I apologize, but I cannot ..." at
nonzero temperature can wipe out an entire beam level.  Sharing the
already-executed sibling attempts inside the expansion, verbatim and with
zero extra model calls, is often enough to break the loop: one sibling
fails, the next ones see the error and try something else.
"""

import json
from pathlib import Path

from memsearch.augmentors import AugmentorConfig, AugmentorKind, compose
from memsearch.envs import load_benchmark
from memsearch.models import ScriptedPolicy, ScriptedPolicyConfig, ScriptedRewardModel
from memsearch.search import ExpansionMode, SearchConfig, SearchMethod, run_beam

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "memsearch" / "fixtures"

bench = load_benchmark(FIXTURES / "tasks" / "toy_sql_giveup.json")
policy_raw = json.loads((FIXTURES / "scripts" / "toy_sql_giveup_policy.json").read_text())
reward_raw = json.loads((FIXTURES / "scripts" / "toy_sql_reward.json").read_text())
grader = bench.grader()
task = bench.tasks[0]
print("task:", task.task_id)
print("prompt:", task.prompt)
print()

# The scripted policy first queries a table that does not exist, and after
# an error it can only apologize, unless sibling context shows it the way.
# Sibling memory only exists under interleaved expansion: candidates are
# sampled one at a time, each seeing the records of the ones before it.
for label, memory, expansion in (
    ("no memory", (), ExpansionMode.BATCH),
    ("raw sibling", (AugmentorConfig(AugmentorKind.RAW_SIBLING),), ExpansionMode.INTERLEAVED),
):
    config = SearchConfig(method=SearchMethod.BEAM, temperature=0.7, expansion=expansion)
    env = bench.make_env()
    policy = ScriptedPolicy(ScriptedPolicyConfig.from_dict(policy_raw))
    prm = ScriptedRewardModel.from_dict(reward_raw)
    record = run_beam(task, env, policy, prm, compose(memory), config, seed=37)
    answer = record.final_answer
    best = next((t for t in record.trajectories if t.answer() == answer), None)
    print(f"[{label}]")
    print("  all-apology expansions:", record.giveup.all_apology_states)
    print("  apology terminals:     ", record.giveup.apology_terminals)
    print("  selected answer:       ", answer)
    print("  graded correct:        ", bool(answer and grader.grade(task.task_id, answer)))
    if best is not None:
        for i, step in enumerate(best.steps):
            tag = "error" if step.observation.is_error else "ok"
            print(f"    step {i}: {step.action.raw_text}  [{tag}]")
    print()
