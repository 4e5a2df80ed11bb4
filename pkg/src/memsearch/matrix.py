"""Experiment matrix: admissibility checks and the cell runner.

A cell is one (memory, search method, benchmark) combination with a seed.
Structurally impossible cells are refused before any model call, with a
machine-readable reason: sibling memory needs sibling expansion (absent in
best-of-N), cross-trajectory memory needs multiple iterations (absent in
single-round beam), and expansion-based methods need a forkable
environment.  Each admissible cell writes one verdict file; a run manifest
ties the outputs together.  Outputs carry no timestamps and are
byte-identical across runs with identical inputs.
"""

from __future__ import annotations

import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path

from .augmentors import (
    AugmentorConfig,
    AugmentorKind,
    MemoryStore,
    compose,
    normalize_for_method,
)
from .core import PricingTable, Task, Telemetry, TerminalKind, Trajectory, stable_hash
from .envs import ENV_SERIALIZABLE, Benchmark, load_benchmark
from .models import (
    ConfigurationError,
    HashEmbedder,
    RemoteChatClient,
    RemoteChatConfig,
    RemotePolicy,
    ScriptedAugmentorModel,
    ScriptedPolicy,
    ScriptedPolicyConfig,
    ScriptedRewardModel,
)
from .search import (
    BackpropMode,
    ExpansionMode,
    SearchConfig,
    SearchMethod,
    SearchRecord,
    run_search,
)

log = logging.getLogger(__name__)

GLYPH_NON_SERIALIZABLE = "---"
GLYPH_STRUCTURAL = "∅"  # empty-set sign


class MatrixConfigError(Exception):
    """The experiment config file is malformed; carries a location hint."""


class AdmissibilityReason(str, Enum):
    OK = "ok"
    DUPLICATE_AUGMENTOR = "duplicate_augmentor"
    UNKNOWN_ENV = "unknown_env"
    NON_SERIALIZABLE = "non_serializable"
    CROSS_SIBLING_NEEDS_EXPANSION = "cross_sibling_needs_expansion"
    CROSS_TRAJECTORY_NEEDS_ITERATIONS = "cross_trajectory_needs_iterations"


@dataclass(frozen=True)
class Admissibility:
    admissible: bool
    reason: AdmissibilityReason
    glyph: str = ""


@dataclass(frozen=True)
class ExperimentCell:
    cell_id: str
    benchmark: str
    env: str
    memory: tuple[AugmentorConfig, ...]
    search: SearchConfig
    seed: int


def memory_label(memory: tuple[AugmentorConfig, ...]) -> str:
    kinds = sorted(c.kind.value for c in memory if c.kind is not AugmentorKind.NONE)
    return "+".join(kinds) if kinds else "none"


def check_admissible(cell: ExperimentCell) -> Admissibility:
    """Decide whether a cell can run at all.  Never raises."""
    kinds = [c.kind for c in cell.memory if c.kind is not AugmentorKind.NONE]
    if len(set(kinds)) != len(kinds):
        return Admissibility(False, AdmissibilityReason.DUPLICATE_AUGMENTOR, GLYPH_STRUCTURAL)
    serializable = ENV_SERIALIZABLE.get(cell.env)
    if serializable is None:
        return Admissibility(False, AdmissibilityReason.UNKNOWN_ENV, GLYPH_STRUCTURAL)
    method = cell.search.method
    if method in (SearchMethod.BEAM, SearchMethod.MCTS) and not serializable:
        return Admissibility(False, AdmissibilityReason.NON_SERIALIZABLE, GLYPH_NON_SERIALIZABLE)
    if AugmentorKind.RAW_SIBLING in kinds and method is SearchMethod.BEST_OF_N:
        # sibling context only exists when a node expands multiple candidates
        return Admissibility(
            False, AdmissibilityReason.CROSS_SIBLING_NEEDS_EXPANSION, GLYPH_STRUCTURAL
        )
    if method is SearchMethod.BEAM and (
        AugmentorKind.REFLECTION in kinds or AugmentorKind.FACT in kinds
    ):
        # a single round never revisits the task, so nothing persists into a
        # later trajectory
        return Admissibility(
            False, AdmissibilityReason.CROSS_TRAJECTORY_NEEDS_ITERATIONS, GLYPH_STRUCTURAL
        )
    return Admissibility(True, AdmissibilityReason.OK)


# ---------------------------------------------------------------------------
# config loading


_MEMORY_KINDS = {k.value: k for k in AugmentorKind}
_CELL_ID = re.compile(r"^[A-Za-z0-9_+.\-]+$")


@dataclass(frozen=True)
class BenchmarkSpec:
    benchmark: Benchmark
    policy_raw: dict
    reward_raw: dict
    augmentor_raw: dict
    discovery_tool: str | None


@dataclass(frozen=True)
class MatrixConfig:
    benchmarks: dict[str, BenchmarkSpec]
    cells: tuple[ExperimentCell, ...]
    embedder_dim: int
    pricing: PricingTable


def _parse_memory(raw, where: str) -> tuple[AugmentorConfig, ...]:
    configs = []
    for entry in raw:
        if isinstance(entry, str):
            entry = {"kind": entry}
        kind = entry.get("kind")
        if kind not in _MEMORY_KINDS:
            raise MatrixConfigError(f"{where}: unknown memory kind {kind!r}")
        kwargs = {}
        if "reflection_threshold" in entry:
            kwargs["reflection_threshold"] = float(entry["reflection_threshold"])
        if "dedup_threshold" in entry:
            kwargs["dedup_threshold"] = float(entry["dedup_threshold"])
        configs.append(AugmentorConfig(kind=_MEMORY_KINDS[kind], **kwargs))
    return tuple(configs)


_SEARCH_KEYS = {
    "method",
    "n_budget",
    "beam_width",
    "n_actions",
    "n_iters",
    "w_exp",
    "max_depth",
    "rollout_depth",
    "backprop",
    "decay_gamma",
    "temperature",
    "expansion",
}


def _parse_search(raw: dict, where: str) -> SearchConfig:
    unknown = set(raw) - _SEARCH_KEYS
    if unknown:
        raise MatrixConfigError(f"{where}: unknown search keys {sorted(unknown)}")
    try:
        kwargs = dict(raw)
        kwargs["method"] = SearchMethod(raw["method"])
        if "backprop" in kwargs:
            kwargs["backprop"] = BackpropMode(kwargs["backprop"])
        if "expansion" in kwargs:
            kwargs["expansion"] = ExpansionMode(kwargs["expansion"])
        return SearchConfig(**kwargs)
    except (KeyError, ValueError) as exc:
        raise MatrixConfigError(f"{where}: bad search config: {exc}") from exc


def load_matrix_config(path: str | Path) -> MatrixConfig:
    """Parse an experiment config file; paths inside resolve relative to it."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise MatrixConfigError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise MatrixConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc

    base = path.parent
    benchmarks: dict[str, BenchmarkSpec] = {}
    for name, spec in raw.get("benchmarks", {}).items():
        where = f"{path}: benchmark '{name}'"
        try:
            bench = load_benchmark(base / spec["fixtures"])
            policy_raw = json.loads((base / spec["policy_script"]).read_text(encoding="utf-8"))
            reward_raw = json.loads((base / spec["reward_script"]).read_text(encoding="utf-8"))
            augmentor_raw = json.loads(
                (base / spec["augmentor_script"]).read_text(encoding="utf-8")
            )
        except (KeyError, OSError, json.JSONDecodeError, ValueError) as exc:
            raise MatrixConfigError(f"{where}: {exc}") from exc
        if bench.benchmark_id != name:
            raise MatrixConfigError(
                f"{where}: fixture file declares benchmark '{bench.benchmark_id}'"
            )
        benchmarks[name] = BenchmarkSpec(
            benchmark=bench,
            policy_raw=policy_raw,
            reward_raw=reward_raw,
            augmentor_raw=augmentor_raw,
            discovery_tool=spec.get("discovery_tool"),
        )

    cells: list[ExperimentCell] = []
    seen: set[str] = set()
    for i, entry in enumerate(raw.get("cells", ())):
        where = f"{path}: cells[{i}]"
        cell_id = entry.get("id")
        if not cell_id or not _CELL_ID.match(cell_id):
            raise MatrixConfigError(f"{where}: missing or unusable cell id {cell_id!r}")
        if cell_id in seen:
            raise MatrixConfigError(f"{where}: duplicate cell id '{cell_id}'")
        seen.add(cell_id)
        bench_name = entry.get("benchmark")
        if bench_name not in benchmarks:
            raise MatrixConfigError(f"{where}: unknown benchmark {bench_name!r}")
        cells.append(
            ExperimentCell(
                cell_id=cell_id,
                benchmark=bench_name,
                env=benchmarks[bench_name].benchmark.env_id,
                memory=_parse_memory(entry.get("memory", ()), where),
                search=_parse_search(entry.get("search", {}), where),
                seed=int(entry.get("seed", 0)),
            )
        )

    if not cells:
        raise MatrixConfigError(f"{path}: config defines no cells")
    return MatrixConfig(
        benchmarks=benchmarks,
        cells=tuple(cells),
        embedder_dim=int(raw.get("embedder_dim", 64)),
        pricing=PricingTable(**raw.get("pricing", {})),
    )


# ---------------------------------------------------------------------------
# execution


def task_seed(cell_seed: int, task_id: str) -> int:
    """Stable per-task sub-seed: adding or removing one task never changes
    the draws any other task sees."""
    return stable_hash("task_seed", cell_seed, task_id)


def _build_models(spec: BenchmarkSpec, dim: int, telemetry: Telemetry):
    policy_raw = spec.policy_raw
    if policy_raw.get("kind", "scripted") == "remote":
        key_env = policy_raw.get("api_key_env", "MEMSEARCH_API_KEY")
        api_key = os.environ.get(key_env)
        if not api_key:
            raise ConfigurationError(
                f"remote policy requires credentials in the '{key_env}' environment variable"
            )
        client = RemoteChatClient(
            RemoteChatConfig(
                url=policy_raw["url"],
                model=policy_raw["model"],
                api_key=api_key,
                role="policy",
                max_retries=int(policy_raw.get("max_retries", 3)),
            ),
            telemetry,
        )
        policy = RemotePolicy(client)
    else:
        policy = ScriptedPolicy(ScriptedPolicyConfig.from_dict(policy_raw), telemetry)
    prm = ScriptedRewardModel.from_dict(spec.reward_raw, telemetry)
    aug_model = ScriptedAugmentorModel.from_dict(spec.augmentor_raw, telemetry)
    return policy, prm, aug_model, HashEmbedder(dim)


def _selected_trajectory(record: SearchRecord) -> Trajectory | None:
    finished = [t for t in record.trajectories if t.answer() is not None]
    if record.final_answer is None or not finished:
        return None
    return max(finished, key=lambda t: t.trajectory_score)


def _run_cell_task(
    cfg: MatrixConfig,
    cell: ExperimentCell,
    task: Task,
    dump_dir: Path | None,
) -> dict:
    spec = cfg.benchmarks[cell.benchmark]
    telemetry = Telemetry()
    policy, prm, aug_model, embedder = _build_models(spec, cfg.embedder_dim, telemetry)
    env = spec.benchmark.make_env()
    memory = normalize_for_method(cell.memory, cell.search.method.value)
    store = MemoryStore(
        next(
            (c.dedup_threshold for c in memory if c.kind is AugmentorKind.FACT),
            MemoryStore().dedup_threshold,
        )
    )
    composite = compose(memory, store=store, model=aug_model, embedder=embedder)
    search_cfg = cell.search
    if composite.wants_siblings and search_cfg.method is not SearchMethod.BEST_OF_N:
        search_cfg = replace(search_cfg, expansion=ExpansionMode.INTERLEAVED)

    record = run_search(
        task,
        env,
        policy,
        composite,
        search_cfg,
        seed=task_seed(cell.seed, task.task_id),
        prm=prm,
        telemetry=telemetry,
    )

    grader = spec.benchmark.grader()  # grading happens offline, after the search
    if search_cfg.method is SearchMethod.BEAM:
        selected = _selected_trajectory(record)
        skip_src = [selected] if selected is not None else list(record.trajectories[:1])
        verdicts = [grader.grade(task.task_id, record.final_answer)]
        lengths = [len(t.steps) for t in skip_src]
    else:
        verdicts = [grader.grade(task.task_id, t.answer()) for t in record.trajectories]
        lengths = [len(t.steps) for t in record.trajectories]
        skip_src = list(record.trajectories)

    if spec.discovery_tool is None:
        discovery_skipped = None
    else:
        discovery_skipped = [
            spec.discovery_tool not in {s.action.tool_name for s in t.steps} for t in skip_src
        ]

    if dump_dir is not None:
        store.dump(dump_dir / f"{cell.cell_id}__{task.task_id}.jsonl")

    return {
        "task_id": task.task_id,
        "cell_id": cell.cell_id,
        "verdicts": verdicts,
        "selected_verdict": grader.grade(task.task_id, record.final_answer),
        "final_answer": record.final_answer,
        "trajectory_lengths": lengths,
        "terminal_kinds": [t.terminal_kind.value for t in record.trajectories],
        "discovery_skipped": discovery_skipped,
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


def _atomic_write(path: Path, content: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(content, encoding="utf-8")
    os.replace(tmp, path)


def run_matrix(
    cfg: MatrixConfig,
    out_dir: str | Path,
    jobs: int = 1,
    dump_memory: bool = False,
) -> dict:
    """Run every cell; one verdict file per cell plus a run manifest.

    Inadmissible cells are refused before any model call.  A failing cell is
    marked FAILED in the manifest and does not stop the others.  Output
    bytes depend only on the config and seeds.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_dir = None
    if dump_memory:
        dump_dir = out / "memory"
        dump_dir.mkdir(exist_ok=True)

    manifest_cells: dict[str, dict] = {}
    for cell in cfg.cells:
        entry: dict = {
            "benchmark": cell.benchmark,
            "env": cell.env,
            "method": cell.search.method.value,
            "memory": memory_label(cell.memory),
            "seed": cell.seed,
        }
        adm = check_admissible(cell)
        if not adm.admissible:
            entry.update(
                {"status": "inadmissible", "reason": adm.reason.value, "glyph": adm.glyph}
            )
            manifest_cells[cell.cell_id] = entry
            log.info("cell %s inadmissible: %s", cell.cell_id, adm.reason.value)
            continue

        tasks = cfg.benchmarks[cell.benchmark].benchmark.tasks
        try:
            if jobs > 1:
                with ThreadPoolExecutor(max_workers=jobs) as pool:
                    rows = list(
                        pool.map(lambda t: _run_cell_task(cfg, cell, t, dump_dir), tasks)
                    )
            else:
                rows = [_run_cell_task(cfg, cell, t, dump_dir) for t in tasks]
        except Exception as exc:  # noqa: BLE001 - cell isolation is the contract
            entry.update({"status": "failed", "error": f"{type(exc).__name__}: {exc}"})
            manifest_cells[cell.cell_id] = entry
            log.warning("cell %s failed: %s", cell.cell_id, exc)
            continue

        rows.sort(key=lambda r: r["task_id"])
        verdict_file = f"{cell.cell_id}.jsonl"
        _atomic_write(
            out / verdict_file,
            "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows),
        )
        entry.update({"status": "ok", "verdict_file": verdict_file, "n_tasks": len(rows)})
        manifest_cells[cell.cell_id] = entry
        log.info("cell %s: %d tasks done", cell.cell_id, len(rows))

    manifest = {
        "format_version": 1,
        "pricing": {
            "policy_in": cfg.pricing.policy_in,
            "policy_out": cfg.pricing.policy_out,
            "supervisor_in": cfg.pricing.supervisor_in,
            "supervisor_out": cfg.pricing.supervisor_out,
        },
        "cells": manifest_cells,
    }
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
