"""Deterministic toy environments and task fixtures.

Three worlds cover the serializability axis: a read-only tabular world and
a knowledge-graph world that both support fork(), and a scripted shell
whose state mutates in place and cannot be forked.  Gold answers live
behind the Grader, which only the experiment runner holds; tasks handed to
search code carry no gold and no grading hook.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Protocol

from .core import FINAL_ANSWER, Action, Observation, StateHandle, Task


class EnvError(Exception):
    """A task or state handle does not belong to this environment."""


class ForkUnsupported(Exception):
    """The environment cannot snapshot state; tree search is inadmissible."""


class Environment(Protocol):
    env_id: str
    serializable: bool

    def reset(self, task: Task) -> StateHandle: ...

    def step(self, state: StateHandle, action: Action) -> tuple[StateHandle, Observation]: ...

    def fork(self, state: StateHandle) -> StateHandle: ...


def _ok(tool: str, content: str) -> Observation:
    return Observation(content=content, is_error=False, tool_name=tool)


def _err(tool: str, message: str) -> Observation:
    return Observation(content=f"ERROR: {message}", is_error=True, tool_name=tool)


# ---------------------------------------------------------------------------
# s-expression mini query language for the tabular world


def _tokenize(text: str) -> list[str]:
    tokens: list[str] = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch.isspace():
            i += 1
        elif ch in "()":
            tokens.append(ch)
            i += 1
        elif ch == '"':
            j = text.find('"', i + 1)
            if j < 0:
                raise ValueError("unterminated string literal")
            tokens.append(text[i : j + 1])
            i = j + 1
        else:
            j = i
            while j < len(text) and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append(text[i:j])
            i = j
    return tokens


def _parse(tokens: list[str], pos: int = 0):
    if pos >= len(tokens):
        raise ValueError("unexpected end of expression")
    tok = tokens[pos]
    if tok == "(":
        items = []
        pos += 1
        while pos < len(tokens) and tokens[pos] != ")":
            item, pos = _parse(tokens, pos)
            items.append(item)
        if pos >= len(tokens):
            raise ValueError("missing closing paren")
        return items, pos + 1
    if tok == ")":
        raise ValueError("unexpected closing paren")
    if tok.startswith('"') and tok.endswith('"'):
        return tok[1:-1], pos + 1
    return tok, pos + 1


def parse_sexpr(text: str):
    tokens = _tokenize(text)
    if not tokens:
        raise ValueError("empty expression")
    expr, end = _parse(tokens, 0)
    if end != len(tokens):
        raise ValueError("trailing tokens after expression")
    return expr


def _compare(op: str, cell: str, value: str) -> bool:
    if op == "eq":
        return cell == value
    if op == "gt":
        try:
            return float(cell) > float(value)
        except ValueError:
            return cell > value
    raise ValueError(f"unknown operator '{op}'")


def _eval_query(tables: dict, expr) -> str:
    if not (isinstance(expr, list) and len(expr) == 3 and expr[0] == "project"):
        raise ValueError("query must be (project COLUMN SOURCE)")
    _, column, source = expr
    if isinstance(source, list):
        if len(source) != 3 or source[0] != "where":
            raise ValueError("filter must be (where (OP COLUMN VALUE) TABLE)")
        _, cond, table_name = source
        if not (isinstance(cond, list) and len(cond) == 3):
            raise ValueError("condition must be (OP COLUMN VALUE)")
        op, cond_col, value = cond
    else:
        table_name, op, cond_col, value = source, None, None, None
    if not isinstance(table_name, str):
        raise ValueError("table name must be an atom or string")
    if table_name not in tables:
        raise ValueError(f"no such table '{table_name}'")
    table = tables[table_name]
    columns = table["columns"]
    for needed in (column, cond_col):
        if needed is not None and needed not in columns:
            raise ValueError(f"column '{needed}' not in table '{table_name}'")
    rows = table["rows"]
    if op is not None:
        ci = columns.index(cond_col)
        rows = [r for r in rows if _compare(op, str(r[ci]), str(value))]
    pi = columns.index(column)
    values = [str(r[pi]) for r in rows]
    return ", ".join(values) if values else "(no rows)"


# ---------------------------------------------------------------------------
# environments


class ToySqlEnv:
    """Read-only tabular world with LIST_TABLES / SCHEMA / QUERY tools."""

    env_id = "toy_sql"
    serializable = True

    def __init__(self, worlds: dict[str, dict]):
        self._worlds = worlds

    def reset(self, task: Task) -> StateHandle:
        if task.task_id not in self._worlds:
            raise EnvError(f"unknown task '{task.task_id}' for {self.env_id}")
        return StateHandle(env_id=f"{self.env_id}/{task.task_id}", snapshot_token="ro", depth=0)

    def _tables(self, state: StateHandle) -> dict:
        task_id = state.env_id.split("/", 1)[1]
        try:
            return self._worlds[task_id]["tables"]
        except KeyError as exc:
            raise EnvError(f"stale state handle {state.env_id}") from exc

    def step(self, state: StateHandle, action: Action) -> tuple[StateHandle, Observation]:
        tables = self._tables(state)
        tool, args = action.tool_name, action.arguments.strip()
        if tool == "LIST_TABLES":
            obs = _ok(tool, ", ".join(tables))
        elif tool == "SCHEMA":
            if args in tables:
                obs = _ok(tool, ", ".join(tables[args]["columns"]))
            else:
                obs = _err(tool, f"no such table '{args}'")
        elif tool == "QUERY":
            try:
                obs = _ok(tool, _eval_query(tables, parse_sexpr(args)))
            except ValueError as exc:
                obs = _err(tool, str(exc))
        elif tool == FINAL_ANSWER:
            obs = Observation(content="", is_error=False, tool_name=FINAL_ANSWER)
        else:
            obs = _err(tool, f"unknown tool '{tool}'")
        return replace(state, depth=state.depth + 1), obs

    def fork(self, state: StateHandle) -> StateHandle:
        # the world is read-only, so the immutable handle is already a snapshot
        return replace(state)


class ToyKgEnv:
    """Knowledge-graph world with RELATIONS / TRAVERSE tools."""

    env_id = "toy_kg"
    serializable = True

    def __init__(self, worlds: dict[str, dict]):
        self._worlds = worlds

    def reset(self, task: Task) -> StateHandle:
        if task.task_id not in self._worlds:
            raise EnvError(f"unknown task '{task.task_id}' for {self.env_id}")
        return StateHandle(env_id=f"{self.env_id}/{task.task_id}", snapshot_token="ro", depth=0)

    def _entities(self, state: StateHandle) -> dict:
        task_id = state.env_id.split("/", 1)[1]
        try:
            return self._worlds[task_id]["entities"]
        except KeyError as exc:
            raise EnvError(f"stale state handle {state.env_id}") from exc

    def step(self, state: StateHandle, action: Action) -> tuple[StateHandle, Observation]:
        entities = self._entities(state)
        tool, args = action.tool_name, action.arguments.strip()
        if tool == "RELATIONS":
            if args in entities:
                obs = _ok(tool, ", ".join(entities[args]))
            else:
                obs = _err(tool, f"unknown entity '{args}'")
        elif tool == "TRAVERSE":
            entity, _, relation = args.partition(",")
            entity, relation = entity.strip(), relation.strip()
            if entity not in entities:
                obs = _err(tool, f"unknown entity '{entity}'")
            elif relation not in entities[entity]:
                obs = _err(tool, f"entity '{entity}' has no relation '{relation}'")
            else:
                obs = _ok(tool, ", ".join(entities[entity][relation]))
        elif tool == FINAL_ANSWER:
            obs = Observation(content="", is_error=False, tool_name=FINAL_ANSWER)
        else:
            obs = _err(tool, f"unknown tool '{tool}'")
        return replace(state, depth=state.depth + 1), obs

    def fork(self, state: StateHandle) -> StateHandle:
        return replace(state)


class ScriptedShellEnv:
    """Mutable key-value shell.  State lives server-side; fork is unsupported."""

    env_id = "scripted_shell"
    serializable = False

    def __init__(self, worlds: dict[str, dict]):
        self._worlds = worlds
        self._sessions: dict[str, dict[str, str]] = {}
        self._counter = 0

    def reset(self, task: Task) -> StateHandle:
        if task.task_id not in self._worlds:
            raise EnvError(f"unknown task '{task.task_id}' for {self.env_id}")
        self._counter += 1
        session = f"{self.env_id}/{task.task_id}#{self._counter}"
        self._sessions[session] = dict(self._worlds[task.task_id]["files"])
        return StateHandle(env_id=session, snapshot_token=None, depth=0)

    def step(self, state: StateHandle, action: Action) -> tuple[StateHandle, Observation]:
        if state.env_id not in self._sessions:
            raise EnvError(f"stale state handle {state.env_id}")
        files = self._sessions[state.env_id]
        tool = action.tool_name
        if tool == "RUN":
            obs = self._run(files, action.arguments.strip())
        elif tool == FINAL_ANSWER:
            obs = Observation(content="", is_error=False, tool_name=FINAL_ANSWER)
        else:
            obs = _err(tool, f"unknown tool '{tool}'")
        return replace(state, depth=state.depth + 1), obs

    def _run(self, files: dict[str, str], command: str) -> Observation:
        parts = command.split(None, 2)
        if not parts:
            return _err("RUN", "empty command")
        head = parts[0]
        if head == "ls":
            return _ok("RUN", ", ".join(sorted(files)))
        if head == "cat":
            if len(parts) < 2:
                return _err("RUN", "cat needs a file name")
            name = parts[1]
            if name not in files:
                return _err("RUN", f"no such file '{name}'")
            return _ok("RUN", files[name])
        if head == "write":
            if len(parts) < 3:
                return _err("RUN", "write needs a file name and content")
            files[parts[1]] = parts[2]
            return _ok("RUN", f"wrote {parts[1]}")
        return _err("RUN", f"unknown command '{head}'")

    def fork(self, state: StateHandle) -> StateHandle:
        raise ForkUnsupported(f"{self.env_id} state cannot be snapshotted")


ENV_SERIALIZABLE = {
    ToySqlEnv.env_id: True,
    ToyKgEnv.env_id: True,
    ScriptedShellEnv.env_id: False,
}

_ENV_CLASSES = {
    ToySqlEnv.env_id: ToySqlEnv,
    ToyKgEnv.env_id: ToyKgEnv,
    ScriptedShellEnv.env_id: ScriptedShellEnv,
}


# ---------------------------------------------------------------------------
# fixtures and grading


def normalize_answer(text: str) -> str:
    return " ".join(text.split()).lower()


class Grader:
    """Offline exact-match grading.  Construct only in the experiment runner;
    search code never receives one."""

    def __init__(self, golds: dict[str, str]):
        self._golds = dict(golds)

    def grade(self, task_id: str, answer: str | None) -> bool:
        if task_id not in self._golds:
            raise KeyError(f"unknown task id '{task_id}'")
        if answer is None:
            return False
        return normalize_answer(answer) == normalize_answer(self._golds[task_id])


@dataclass(frozen=True)
class Benchmark:
    benchmark_id: str
    env_id: str
    tasks: tuple[Task, ...]
    worlds: dict[str, dict]
    golds: dict[str, str]

    def make_env(self) -> Environment:
        try:
            cls = _ENV_CLASSES[self.env_id]
        except KeyError as exc:
            raise EnvError(f"unknown environment '{self.env_id}'") from exc
        return cls(self.worlds)

    def grader(self) -> Grader:
        return Grader(self.golds)


def load_benchmark(path: str | Path) -> Benchmark:
    """Load a benchmark fixture file: tasks, per-task worlds, gold answers."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    benchmark_id = raw["benchmark"]
    env_id = raw["env"]
    if env_id not in _ENV_CLASSES:
        raise EnvError(f"unknown environment '{env_id}' in {path}")
    tools = tuple(raw["tools"])
    tasks, worlds, golds = [], {}, {}
    for entry in raw["tasks"]:
        task_id = entry["id"]
        if task_id in worlds:
            raise ValueError(f"duplicate task id '{task_id}' in {path}")
        tasks.append(
            Task(
                task_id=task_id,
                prompt=entry["prompt"],
                tools=tools,
                benchmark=benchmark_id,
                env=env_id,
                meta={str(k): str(v) for k, v in entry.get("meta", {}).items()},
            )
        )
        worlds[task_id] = entry["world"]
        golds[task_id] = entry["gold"]
    return Benchmark(
        benchmark_id=benchmark_id,
        env_id=env_id,
        tasks=tuple(tasks),
        worlds=worlds,
        golds=golds,
    )
