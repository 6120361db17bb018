"""Task suite: subtask decompositions, stage predicates, suite lint."""

from __future__ import annotations

import statistics
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import yaml

from .world import (
    OCCLUDING,
    TABLE,
    ConfigError,
    Predicate,
    SceneDescriptor,
    WorldState,
    check_predicate,
    parse_predicate,
    scene_from_descriptor,
)

SUITE_SCHEMA_VERSION = 1
PRIMITIVES = ("Move", "Place", "Pour", "Open", "Close")
CATEGORIES = ("transferring", "occlusion", "counting", "sequence")
MEMORY_KINDS = ("occlusion", "counting", "transferring", "sequence")

SUITE_SIZE = 26
SUITE_COMPOSITION = (4, 11, 7, 4)
SUITE_SUBTASKS = 151
SUITE_MEMORY_SUBTASKS = 104
MIN_STAGES, MAX_STAGES = 3, 9
SUITE_MEAN_STEPS = 1076


class SuiteLintError(ConfigError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DecompositionError(ConfigError):
    pass


@dataclass(frozen=True)
class SubtaskSpec:
    step_id: int
    instruction: str
    planner_primitive: str
    target: str
    memory_dependent: bool = False
    memory_kind: str | None = None
    dest: str | None = None
    repeat: int = 1  # ordinal of this pour on the same (source, destination)

    def postcondition(self) -> Predicate:
        p, t, d = self.planner_primitive, self.target, self.dest
        if p == "Move":
            return parse_predicate(f"held({t})")
        if p == "Place":
            return parse_predicate(f"on_table({t})" if d == TABLE else f"in({t}, {d})")
        if p == "Pour":
            return parse_predicate(f"pour_count({t}, {d}) >= {self.repeat}")
        if p == "Open":
            return parse_predicate(f"open({t})")
        return parse_predicate(f"closed({t})")

    def entities(self) -> tuple[str, ...]:
        return (self.target,) if self.dest is None else (self.target, self.dest)

    def to_dict(self) -> dict:
        return {
            "step_id": self.step_id,
            "instruction": self.instruction,
            "planner_primitive": self.planner_primitive,
            "target": self.target,
            "dest": self.dest,
            "memory_dependent": self.memory_dependent,
            "memory_kind": self.memory_kind,
        }


@dataclass(frozen=True)
class StagePredicate:
    index: int
    at: str  # "any": reached in order during the episode; "final": holds at the end
    text: str
    predicate: Predicate


@dataclass(frozen=True)
class Role:
    var: str
    select: str  # empty | nonempty
    among: tuple[str, ...]


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    name: str
    category: str
    instruction: str
    subtasks: tuple[SubtaskSpec, ...]
    stage_predicates: tuple[StagePredicate, ...]
    target_steps: int
    scene: SceneDescriptor = field(repr=False)
    scene_name: str = ""
    roles: tuple[Role, ...] = ()

    @property
    def n(self) -> int:
        return len(self.subtasks)

    @property
    def m(self) -> int:
        return sum(s.memory_dependent for s in self.subtasks)

    @property
    def k(self) -> int:
        return len(self.stage_predicates)


def label(primitive: str, target: str, dest: str | None) -> str:
    if primitive == "Move":
        return f"pick {target}"
    if primitive == "Place":
        return f"place {target} on the table" if dest == TABLE else f"place {target} into {dest}"
    if primitive == "Pour":
        return f"pour {target} over {dest}"
    return f"{primitive.lower()} {target}"


# --------------------------------------------------------------------------
# Loading and lint


def default_suite_path() -> Path:
    return Path(str(resources.files("memarena") / "data" / "suite.yaml"))


def _parse_subtasks(raw: Iterable[Mapping[str, Any]], where: str, problems: list) -> tuple:
    out = []
    pours: dict[tuple, int] = {}
    for i, entry in enumerate(raw, start=1):
        prim = entry.get("do")
        target = entry.get("target")
        dest = entry.get("to")
        if prim not in PRIMITIVES:
            problems.append(f"{where}: subtask {i} uses unknown primitive {prim!r}")
            continue
        if prim in ("Place", "Pour") and dest is None:
            problems.append(f"{where}: subtask {i} ({prim}) needs a destination")
        kind = entry.get("mem")
        if kind is not None and kind not in MEMORY_KINDS:
            problems.append(f"{where}: subtask {i} has unknown memory kind {kind!r}")
        repeat = 1
        if prim == "Pour":
            repeat = pours.get((target, dest), 0) + 1
            pours[(target, dest)] = repeat
        out.append(
            SubtaskSpec(
                step_id=i,
                instruction=label(prim, str(target), dest),
                planner_primitive=prim,
                target=str(target),
                memory_dependent=kind is not None,
                memory_kind=kind,
                dest=dest,
                repeat=repeat,
            )
        )
    return tuple(out)


def _parse_task(raw: Mapping[str, Any], scenes: Mapping[str, Any], problems: list) -> TaskSpec | None:
    name = raw.get("name", f"task {raw.get('id')}")
    where = f"task {raw.get('id')} ({name})"
    scene_ref = raw.get("scene")
    scene_raw = scenes.get(scene_ref) if isinstance(scene_ref, str) else scene_ref
    if scene_raw is None:
        problems.append(f"{where}: unknown scene {scene_ref!r}")
        return None
    try:
        desc = SceneDescriptor.from_dict(scene_raw)
        scene = scene_from_descriptor(desc)
    except (ConfigError, KeyError, TypeError) as exc:
        problems.append(f"{where}: bad scene: {exc}")
        return None
    roles = tuple(
        Role(var, spec["select"], tuple(spec["among"])) for var, spec in (raw.get("roles") or {}).items()
    )
    stages = []
    for j, st in enumerate(raw.get("stages") or (), start=1):
        at = st.get("at", "any")
        if at not in ("any", "final"):
            problems.append(f"{where}: stage {j} has bad timing {at!r}")
        try:
            pred = parse_predicate(st["check"])
        except ConfigError as exc:
            problems.append(f"{where}: stage {j}: {exc}")
            continue
        stages.append(StagePredicate(j, at, st["check"], pred))
    task = TaskSpec(
        task_id=int(raw["id"]),
        name=name,
        category=raw.get("category"),
        instruction=raw.get("instruction", ""),
        subtasks=_parse_subtasks(raw.get("subtasks") or (), where, problems),
        stage_predicates=tuple(stages),
        target_steps=int(raw.get("target_steps", 0)),
        scene=desc,
        scene_name=scene_ref if isinstance(scene_ref, str) else "",
        roles=roles,
    )
    declared = set(scene.names) | {TABLE} | {"$" + r.var for r in roles}
    for s in task.subtasks:
        for e in s.entities():
            if e not in declared:
                problems.append(f"{where}: subtask {s.step_id} references undeclared {e!r}")
    for st in task.stage_predicates:
        for e in st.predicate.entities():
            if e not in declared:
                problems.append(f"{where}: stage {st.index} references undeclared {e!r}")
    return task


def lint_task(task: TaskSpec) -> list[str]:
    where = f"task {task.task_id} ({task.name})"
    problems = []
    if task.category not in CATEGORIES:
        problems.append(f"{where}: unknown category {task.category!r}")
    if not MIN_STAGES <= task.k <= MAX_STAGES:
        problems.append(f"{where}: K_i = {task.k} outside [{MIN_STAGES}, {MAX_STAGES}]")
    if task.n == 0:
        problems.append(f"{where}: no subtasks")
    for i, s in enumerate(task.subtasks, start=1):
        if s.step_id != i:
            problems.append(f"{where}: step_ids not consecutive at {s.step_id}")
        if s.planner_primitive not in PRIMITIVES:
            problems.append(f"{where}: subtask {s.step_id} primitive {s.planner_primitive!r}")
        if s.memory_dependent != (s.memory_kind is not None):
            problems.append(f"{where}: subtask {s.step_id} memory flag and kind disagree")
    if task.category == "occlusion":
        kinds = dict((n, k) for n, k, _ in task.scene.containers)
        roles = {r.var: r for r in task.roles}

        def occluding(name: str) -> bool:
            if name.startswith("$") and name[1:] in roles:
                return all(kinds.get(c) in OCCLUDING for c in roles[name[1:]].among)
            return kinds.get(name) in OCCLUDING

        if not any(
            p.name == "in" and occluding(p.args[1])
            for st in task.stage_predicates
            for p in _walk(st.predicate)
        ):
            problems.append(f"{where}: no stage checks containment in an occluding container")
    return problems


def _walk(p: Predicate):
    yield p
    if p.name in ("all", "any", "not"):
        for q in p.args:
            yield from _walk(q)


def lint_suite(tasks: Sequence[TaskSpec], strict: bool = True) -> list[str]:
    problems = []
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        problems.append("duplicate task ids")
    for t in tasks:
        problems.extend(lint_task(t))
    if not strict:
        return problems
    if len(tasks) != SUITE_SIZE:
        problems.append(f"suite has {len(tasks)} tasks, expected {SUITE_SIZE}")
    comp = tuple(sum(t.category == c for t in tasks) for c in CATEGORIES)
    if comp != SUITE_COMPOSITION:
        problems.append(f"category composition {comp} != {SUITE_COMPOSITION}")
    n = sum(t.n for t in tasks)
    m = sum(t.m for t in tasks)
    if n != SUITE_SUBTASKS:
        problems.append(f"total subtasks {n} != {SUITE_SUBTASKS}")
    if m != SUITE_MEMORY_SUBTASKS:
        problems.append(f"memory-dependent subtasks {m} != {SUITE_MEMORY_SUBTASKS}")
    if tasks and statistics.median(t.k for t in tasks) <= 5:
        problems.append("median K_i must exceed 5")
    return problems


def parse_suite(doc: Mapping[str, Any], strict: bool = True) -> list[TaskSpec]:
    if not isinstance(doc, Mapping):
        raise SuiteLintError(["suite document is not a mapping"])
    version = doc.get("schema_version")
    if version != SUITE_SCHEMA_VERSION:
        raise SuiteLintError([f"schema_version {version!r} != {SUITE_SCHEMA_VERSION}"])
    problems: list[str] = []
    tasks = []
    for raw in doc.get("tasks") or ():
        try:
            t = _parse_task(raw, doc.get("scenes") or {}, problems)
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"task {raw.get('id') if isinstance(raw, Mapping) else '?'}: {exc}")
            continue
        if t is not None:
            tasks.append(t)
    problems.extend(lint_suite(tasks, strict=strict))
    if problems:
        raise SuiteLintError(problems)
    return tasks


def load_suite(path: str | Path | None = None, strict: bool | None = None) -> list[TaskSpec]:
    """Load and lint a suite file. Non-default suites may opt out of the
    suite-level aggregate checks by setting ``strict: false`` in the file."""
    p = Path(path) if path is not None else default_suite_path()
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise SuiteLintError([f"{p}: does not parse: {exc}"]) from exc
    if strict is None:
        strict = bool(doc.get("strict", True)) if isinstance(doc, Mapping) else True
    return parse_suite(doc, strict=strict)


def get_task(tasks: Sequence[TaskSpec], task_id: int) -> TaskSpec:
    for t in tasks:
        if t.task_id == task_id:
            return t
    raise ConfigError(f"no task with id {task_id}")


# --------------------------------------------------------------------------
# Roles, decomposition, staged checking


def resolve_roles(task: TaskSpec, state: WorldState) -> dict[str, str]:
    """Bind role variables against the initial state (e.g. the one empty drawer)."""
    out = {}
    for r in task.roles:
        if r.select == "empty":
            hits = [c for c in r.among if not state.contents(c)]
        elif r.select == "nonempty":
            hits = [c for c in r.among if state.contents(c)]
        else:
            raise DecompositionError(f"unknown role selector {r.select!r}")
        if len(hits) != 1:
            raise DecompositionError(f"role ${r.var} matches {len(hits)} containers, need exactly 1")
        out["$" + r.var] = hits[0]
    return out


def resolve_stages(task: TaskSpec, state: WorldState) -> tuple[StagePredicate, ...]:
    b = resolve_roles(task, state)
    return tuple(replace(s, predicate=s.predicate.substitute(b)) for s in task.stage_predicates)


def decompose(task: TaskSpec, state: WorldState) -> list[SubtaskSpec]:
    """Deterministic stand-in for the language-model decomposer."""
    b = resolve_roles(task, state)
    out = []
    for s in task.subtasks:
        target = b.get(s.target, s.target)
        dest = b.get(s.dest, s.dest) if s.dest is not None else None
        for e in (target, dest):
            if e is not None and e != TABLE and not state.scene.has(e):
                raise DecompositionError(f"task {task.task_id}: {e!r} is not in the scene")
        out.append(replace(s, target=target, dest=dest, instruction=label(s.planner_primitive, target, dest)))
    return out


class StageTracker:
    """Incremental success check over a stream of states.

    Greedy in-order matching of ``any`` stages gives the same hits as
    :func:`evaluate_stages` whenever every stage is reached, so
    ``complete()`` agrees with the offline walk. Per-stage outcomes should
    come from the offline walk.
    """

    def __init__(self, stages: Sequence[StagePredicate]):
        self.stages = tuple(stages)
        self._pending = [s for s in self.stages if s.at == "any"]
        self._final = [s for s in self.stages if s.at == "final"]
        self._last: WorldState | None = None

    def update(self, state: WorldState) -> None:
        self._last = state
        while self._pending and check_predicate(state, self._pending[0].predicate):
            self._pending.pop(0)

    def complete(self) -> bool:
        if self._last is None or self._pending:
            return False
        return all(check_predicate(self._last, s.predicate) for s in self._final)


def evaluate_stages(stages: Sequence[StagePredicate], states: Sequence[WorldState]) -> list[bool]:
    """Pointer walk over the state sequence; a missed stage leaves the pointer in place."""
    if not states:
        raise ValueError("empty state sequence")
    out = []
    ptr = 0
    for s in stages:
        if s.at == "final":
            out.append(check_predicate(states[-1], s.predicate))
            continue
        hit = next((i for i in range(ptr, len(states)) if check_predicate(states[i], s.predicate)), None)
        out.append(hit is not None)
        if hit is not None:
            ptr = hit
    return out


# --------------------------------------------------------------------------
# Decomposition prompt

PLANNER_SET = "{Move, Place, Pour, Open, Close}"
IMAGE_TOKEN = "<image>"

_SYSTEM = (
    "You are a robot task planner. Given a scene image and a task instruction, "
    "decompose this task into executable subtasks. Each subtask must use exactly one "
    "planner from " + PLANNER_SET + " and name its target object or container. "
    "Return a numbered list, one subtask per line, in execution order."
)
_USER = (
    "{image}\n"
    "Scene objects: {objects}\n"
    "Scene containers: {containers}\n"
    "Task: {instruction}\n"
    "Decompose this task into executable subtasks using planners from {planners}."
)


def emit_decomposition_prompt(task: TaskSpec, scene: SceneDescriptor | None = None) -> str:
    scene = scene or task.scene
    objects = ", ".join(n for n, _, _ in scene.objects) or "none"
    containers = ", ".join(f"{n} ({k})" for n, k, _ in scene.containers) or "none"
    user = _USER.format(
        image=IMAGE_TOKEN,
        objects=objects,
        containers=containers,
        instruction=task.instruction,
        planners=PLANNER_SET,
    )
    return f"[system]\n{_SYSTEM}\n[user]\n{user}\n"
