"""
Learning across tree iterations
===============================

Some of the bundled tasks plant a decoy table whose name matches the
prompt better than the real one.  A memoryless tree search falls for the
decoy on every iteration.  With reflection memory the first bad rollout
writes a one-line lesson, and every later iteration reads it before
sampling, so the search recovers inside a single task run.
"""

import json
from pathlib import Path

from memsearch.augmentors import AugmentorConfig, AugmentorKind, compose
from memsearch.envs import load_benchmark
from memsearch.models import (
    ScriptedAugmentorModel,
    ScriptedPolicy,
    ScriptedPolicyConfig,
    ScriptedRewardModel,
)
from memsearch.search import SearchConfig, SearchMethod, run_mcts

FIXTURES = Path(__file__).resolve().parents[1] / "src" / "memsearch" / "fixtures"

bench = load_benchmark(FIXTURES / "tasks" / "toy_sql_demo.json")
policy_raw = json.loads((FIXTURES / "scripts" / "toy_sql_policy.json").read_text())
reward_raw = json.loads((FIXTURES / "scripts" / "toy_sql_reward.json").read_text())
aug_raw = json.loads((FIXTURES / "scripts" / "toy_sql_augmentor.json").read_text())
grader = bench.grader()

task = next(t for t in bench.tasks if t.meta["decoy_table"] != t.meta["target_table"])
print("task:", task.task_id)
print("prompt:", task.prompt)
print("decoy table:", task.meta["decoy_table"], "/ real table:", task.meta["target_table"])
print()

config = SearchConfig(method=SearchMethod.MCTS, n_iters=5, n_actions=3)

for label, memory in (
    ("no memory", ()),
    ("reflection", (AugmentorConfig(AugmentorKind.REFLECTION),)),
):
    env = bench.make_env()
    policy = ScriptedPolicy(ScriptedPolicyConfig.from_dict(policy_raw))
    prm = ScriptedRewardModel.from_dict(reward_raw)
    composite = compose(memory, model=ScriptedAugmentorModel.from_dict(aug_raw))
    record = run_mcts(task, env, policy, prm, composite, config, seed=23)
    print(f"[{label}]")
    for t in record.trajectories:
        answer = t.answer()
        verdict = "correct" if answer is not None and grader.grade(task.task_id, answer) else "wrong"
        print(f"  iteration {t.iteration_index}: score={t.trajectory_score:.2f} {verdict}  answer={answer!r}")
    if record.final_answer is not None:
        ok = grader.grade(task.task_id, record.final_answer)
        print("  selected:", repr(record.final_answer), "->", "correct" if ok else "wrong")
    if composite.store:
        print("  memory written during the run:")
        for unit in composite.store.units:
            print("   ", unit.body)
    print()
